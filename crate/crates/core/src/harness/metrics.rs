//! Part-segmentation metrics.

use crate::error::{Error, Result};

/// What an empty union (part absent from both prediction and ground truth)
/// contributes to the mean: 1.0, or nothing at all.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum EmptyUnion {
    #[default]
    One,
    Skip,
}

impl EmptyUnion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(Self::One),
            "skip" => Ok(Self::Skip),
            other => Err(Error::Config(format!(
                "empty-union policy '{other}' (expected 'one' or 'skip')"
            ))),
        }
    }
}

/// Mean intersection-over-union across all `part_count` parts of one shape.
pub fn shape_miou(
    pred: &[usize],
    gt: &[usize],
    part_count: usize,
    empty_union: EmptyUnion,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "shape_miou",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    for (row, &l) in pred.iter().chain(gt).enumerate() {
        if l >= part_count {
            return Err(Error::LabelOutOfRange {
                label: l,
                row: row % pred.len().max(1),
                parts: part_count,
            });
        }
    }
    let mut inter = vec![0usize; part_count];
    let mut union = vec![0usize; part_count];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for part in 0..part_count {
        let u = union[part] + inter[part];
        if u == 0 {
            if empty_union == EmptyUnion::One {
                total += 1.0;
                counted += 1;
            }
        } else {
            total += inter[part] as f64 / u as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Ok(1.0);
    }
    Ok(total / counted as f64)
}

/// Per-part confusion counts: `confusion[gt][pred]`.
pub fn confusion_counts(pred: &[usize], gt: &[usize], part_count: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; part_count]; part_count];
    for (&p, &g) in pred.iter().zip(gt) {
        c[g][p] += 1;
    }
    c
}

/// Labels by row-argmax of an N×P posterior matrix (ties to the smaller id).
pub fn argmax_labels(posteriors: &crate::tensor::Tensor) -> Vec<usize> {
    let (n, p) = (posteriors.rows(), posteriors.cols());
    (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..p {
                if posteriors.get2(i, j) > posteriors.get2(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let labels = vec![0, 1, 2, 1, 0];
        assert_eq!(
            shape_miou(&labels, &labels, 3, EmptyUnion::One).unwrap(),
            1.0
        );
    }

    #[test]
    fn hand_counted_example() {
        // IoU_0 = 1/2, IoU_1 = 2/3, mean = 7/12
        let gt = vec![0, 0, 1, 1];
        let pred = vec![0, 1, 1, 1];
        let got = shape_miou(&pred, &gt, 2, EmptyUnion::One).unwrap();
        assert!((got - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn absent_part_contributes_one_or_skips() {
        let gt = vec![0, 0];
        let pred = vec![0, 0];
        let one = shape_miou(&pred, &gt, 2, EmptyUnion::One).unwrap();
        assert_eq!(one, 1.0);
        let skip = shape_miou(&pred, &gt, 2, EmptyUnion::Skip).unwrap();
        assert_eq!(skip, 1.0); // only part 0 counted, at IoU 1
    }

    #[test]
    fn relabeling_symmetry() {
        let gt = vec![0, 0, 1, 2, 2, 1, 0];
        let pred = vec![0, 1, 1, 2, 0, 1, 0];
        let base = shape_miou(&pred, &gt, 3, EmptyUnion::One).unwrap();
        // apply the same permutation of part ids to both
        let perm = [2usize, 0, 1];
        let gt2: Vec<usize> = gt.iter().map(|&l| perm[l]).collect();
        let pred2: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
        let permuted = shape_miou(&pred2, &gt2, 3, EmptyUnion::One).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(shape_miou(&[0, 1], &[0], 2, EmptyUnion::One).is_err());
    }

    #[test]
    fn out_of_range_label_is_error() {
        assert!(shape_miou(&[0, 3], &[0, 1], 2, EmptyUnion::One).is_err());
    }
}
