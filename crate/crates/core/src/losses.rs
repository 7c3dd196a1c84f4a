//! Adversarial segmentation and auto-encoder GAN losses as pure functions.
//!
//! Only the loss arithmetic lives here: discriminator, encoder, and
//! generator networks supply their output scalars and grids, and these
//! functions turn them into the training objectives. Probabilities are
//! clamped to `[1e-7, 1 - 1e-7]` before any logarithm, so inputs of exactly
//! 0 or 1 stay finite.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

/// Binary cross entropy of a probability `d` toward target `t`.
pub fn bce(d: f64, t: f64) -> f64 {
    let d = clamp_prob(d);
    -(t * d.ln() + (1.0 - t) * (1.0 - d).ln())
}

fn check_unit(name: &str, v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
        return Err(Error::Domain(format!("{name} = {v} is not a probability")));
    }
    Ok(v)
}

fn check_rows_stochastic(name: &str, t: &Tensor) -> Result<()> {
    let (n, p) = (t.rows(), t.cols());
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..p {
            let v = t.get2(i, j);
            if !(-1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(Error::Domain(format!(
                    "{name} row {i} entry {j} = {v} outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "{name} row {i} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Inputs for the adversarial segmentation losses.
///
/// `seg` holds the segmentation network's per-point class posteriors,
/// `gt_onehot` the one-hot ground truth, and the two discriminator scalars
/// score the concatenated (cloud, probabilities) pairs: `d_real` for ground
/// truth, `d_fake` for the prediction.
#[derive(Clone, Debug)]
pub struct AdvLossInputs<'a> {
    pub seg: &'a Tensor,
    pub gt_onehot: &'a Tensor,
    pub d_real: f64,
    pub d_fake: f64,
    pub lambda: f64,
}

/// Segmentation and discriminator losses.
///
/// The segmentation loss is the cross entropy to the ground truth plus
/// `lambda` times the cost of the discriminator not scoring the prediction
/// as real; the discriminator loss pushes the fake pair to 0 and the real
/// pair to 1. Each discriminator term is the binary cross entropy of the
/// scalar toward its target.
pub fn adv_seg_losses(inputs: &AdvLossInputs<'_>) -> Result<(f64, f64)> {
    if inputs.seg.shape() != inputs.gt_onehot.shape() {
        return Err(Error::ShapeMismatch {
            op: "adv_seg_losses",
            left: inputs.seg.shape().to_vec(),
            right: inputs.gt_onehot.shape().to_vec(),
        });
    }
    check_rows_stochastic("seg", inputs.seg)?;
    check_rows_stochastic("gt_onehot", inputs.gt_onehot)?;
    let d_real = check_unit("d_real", inputs.d_real)?;
    let d_fake = check_unit("d_fake", inputs.d_fake)?;

    let (n, p) = (inputs.seg.rows(), inputs.seg.cols());
    let mut ce = 0.0;
    for i in 0..n {
        for j in 0..p {
            let t = inputs.gt_onehot.get2(i, j);
            if t != 0.0 {
                ce -= t * clamp_prob(inputs.seg.get2(i, j)).ln();
            }
        }
    }
    ce /= n as f64;

    let l_seg = ce + inputs.lambda * bce(d_fake, 1.0);
    let l_d = bce(d_fake, 0.0) + bce(d_real, 1.0);
    Ok((l_seg, l_d))
}

/// One training step's worth of auto-encoder GAN inputs: three occupancy
/// grids of one shape and the five discriminator scalars.
#[derive(Clone, Debug)]
pub struct AlphaGanBatch<'a> {
    pub x_real: &'a Tensor,
    pub x_recon: &'a Tensor,
    pub x_gen: &'a Tensor,
    pub d_real: f64,
    pub d_recon: f64,
    pub d_gen: f64,
    pub dl_enc: f64,
    pub dl_gen: f64,
}

/// Encoder/generator, discriminator, and latent-discriminator losses.
///
/// The encoder/generator loss is the voxelwise binary cross entropy of the
/// reconstruction toward the real grid (summed, then divided by the voxel
/// count so magnitudes are resolution independent) minus the log scores the
/// discriminators assign to the reconstruction, the generation, and the
/// encoded latent. The discriminator pushes real up and both synthetic
/// grids down; the latent discriminator does the same in latent space.
pub fn alpha_gan_losses(batch: &AlphaGanBatch<'_>) -> Result<(f64, f64, f64)> {
    if batch.x_real.shape() != batch.x_recon.shape()
        || batch.x_real.shape() != batch.x_gen.shape()
    {
        return Err(Error::ShapeMismatch {
            op: "alpha_gan_losses",
            left: batch.x_real.shape().to_vec(),
            right: if batch.x_real.shape() != batch.x_recon.shape() {
                batch.x_recon.shape().to_vec()
            } else {
                batch.x_gen.shape().to_vec()
            },
        });
    }
    for (name, grid) in [
        ("x_real", batch.x_real),
        ("x_recon", batch.x_recon),
        ("x_gen", batch.x_gen),
    ] {
        for (i, &v) in grid.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "{name} voxel {i} = {v} outside [0, 1]"
                )));
            }
        }
    }
    let d_real = check_unit("d_real", batch.d_real)?;
    let d_recon = check_unit("d_recon", batch.d_recon)?;
    let d_gen = check_unit("d_gen", batch.d_gen)?;
    let dl_enc = check_unit("dl_enc", batch.dl_enc)?;
    let dl_gen = check_unit("dl_gen", batch.dl_gen)?;

    let count = batch.x_real.len() as f64;
    let mut recon_bce = 0.0;
    for (&t, &p) in batch.x_real.data().iter().zip(batch.x_recon.data()) {
        let p = clamp_prob(p);
        recon_bce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    recon_bce /= count;

    let l_eg = recon_bce
        - clamp_prob(d_recon).ln()
        - clamp_prob(d_gen).ln()
        - clamp_prob(dl_enc).ln();
    let l_d = -clamp_prob(d_real).ln()
        - (1.0 - clamp_prob(d_recon)).ln()
        - (1.0 - clamp_prob(d_gen)).ln();
    let l_dl = -clamp_prob(dl_enc).ln() - (1.0 - clamp_prob(dl_gen)).ln();
    Ok((l_eg, l_d, l_dl))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn onehot(labels: &[usize], p: usize) -> Tensor {
        let mut data = vec![0.0; labels.len() * p];
        for (i, &l) in labels.iter().enumerate() {
            data[i * p + l] = 1.0;
        }
        Tensor::new(vec![labels.len(), p], data).unwrap()
    }

    #[test]
    fn perfect_segmentation_vanishes() {
        let gt = onehot(&[0, 1, 2, 1], 3);
        let inputs = AdvLossInputs {
            seg: &gt,
            gt_onehot: &gt,
            d_real: 0.5,
            d_fake: 1.0,
            lambda: 0.7,
        };
        let (l_seg, _) = adv_seg_losses(&inputs).unwrap();
        assert!(l_seg.abs() < 1e-6, "l_seg = {l_seg}");
    }

    #[test]
    fn half_confidence_discriminator() {
        let gt = onehot(&[0, 1], 2);
        let inputs = AdvLossInputs {
            seg: &gt,
            gt_onehot: &gt,
            d_real: 0.5,
            d_fake: 0.5,
            lambda: 1.0,
        };
        let (_, l_d) = adv_seg_losses(&inputs).unwrap();
        assert!((l_d - 2.0 * LN2).abs() < 1e-12);
        assert!((l_d - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn lambda_zero_is_plain_cross_entropy() {
        let seg = Tensor::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let gt = onehot(&[0, 1], 2);
        let inputs = AdvLossInputs {
            seg: &seg,
            gt_onehot: &gt,
            d_real: 0.9,
            d_fake: 0.2,
            lambda: 0.0,
        };
        let (l_seg, _) = adv_seg_losses(&inputs).unwrap();
        let expect = -(0.7f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((l_seg - expect).abs() < 1e-12);
    }

    #[test]
    fn non_probability_rows_rejected() {
        let seg = Tensor::from_rows(&[vec![0.9, 0.3]]).unwrap();
        let gt = onehot(&[0], 2);
        let inputs = AdvLossInputs {
            seg: &seg,
            gt_onehot: &gt,
            d_real: 0.5,
            d_fake: 0.5,
            lambda: 1.0,
        };
        assert!(matches!(
            adv_seg_losses(&inputs).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn alpha_gan_half_scores() {
        let grid = Tensor::full(vec![4, 4], 0.5);
        let batch = AlphaGanBatch {
            x_real: &grid,
            x_recon: &grid,
            x_gen: &grid,
            d_real: 0.5,
            d_recon: 0.5,
            d_gen: 0.5,
            dl_enc: 0.5,
            dl_gen: 0.5,
        };
        let (_, l_d, l_dl) = alpha_gan_losses(&batch).unwrap();
        assert!((l_d - 3.0 * LN2).abs() < 1e-12);
        assert!((l_d - 2.079442).abs() < 1e-6);
        assert!((l_dl - 2.0 * LN2).abs() < 1e-12);
        assert!((l_dl - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn alpha_gan_exact_reconstruction() {
        // x_recon == x_real with hard 0/1 values: the BCE term collapses to
        // the clamp floor, leaving the three log-scores of 0.5
        let mut data = vec![0.0; 8];
        data[3] = 1.0;
        data[5] = 1.0;
        let grid = Tensor::new(vec![2, 4], data).unwrap();
        let batch = AlphaGanBatch {
            x_real: &grid,
            x_recon: &grid,
            x_gen: &grid,
            d_real: 0.5,
            d_recon: 0.5,
            d_gen: 0.5,
            dl_enc: 0.5,
            dl_gen: 0.5,
        };
        let (l_eg, _, _) = alpha_gan_losses(&batch).unwrap();
        assert!((l_eg - 3.0 * LN2).abs() < 1e-6, "l_eg = {l_eg}");
    }

    #[test]
    fn hard_grid_values_stay_finite() {
        let zeros = Tensor::zeros(vec![3, 3]);
        let ones = Tensor::full(vec![3, 3], 1.0);
        let batch = AlphaGanBatch {
            x_real: &ones,
            x_recon: &zeros,
            x_gen: &ones,
            d_real: 1.0,
            d_recon: 0.0,
            d_gen: 1.0,
            dl_enc: 0.0,
            dl_gen: 1.0,
        };
        let (l_eg, l_d, l_dl) = alpha_gan_losses(&batch).unwrap();
        assert!(l_eg.is_finite() && l_d.is_finite() && l_dl.is_finite());
    }

    #[test]
    fn grid_shape_mismatch_rejected() {
        let a = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![4]);
        let batch = AlphaGanBatch {
            x_real: &a,
            x_recon: &b,
            x_gen: &a,
            d_real: 0.5,
            d_recon: 0.5,
            d_gen: 0.5,
            dl_enc: 0.5,
            dl_gen: 0.5,
        };
        assert!(matches!(
            alpha_gan_losses(&batch).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }
}
