//! Point-cloud ingestion, normalization, augmentation, and synthetic
//! labelled shapes for desk-scale experiments.
//!
//! File formats are the plain-text point-set convention: points files carry
//! one `x y z` triple per line, label files one integer per line, and a
//! dataset manifest lists `category points_path labels_path` per shape.

mod synthetic;

pub use synthetic::{generate_synthetic, ShapeFamily};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// N×3 coordinates with optional per-point part labels and a category id.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub labels: Option<Vec<usize>>,
    pub category: String,
}

impl PointCloud {
    pub fn new(
        points: Vec<[f64; 3]>,
        labels: Option<Vec<usize>>,
        category: impl Into<String>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data("point cloud must have at least one point".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("non-finite coordinate at point {i}")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::CountMismatch {
                    points: points.len(),
                    labels: l.len(),
                });
            }
        }
        Ok(Self {
            points,
            labels,
            category: category.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A set of labelled shapes from one category.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub shapes: Vec<PointCloud>,
    pub part_count: usize,
    pub name: String,
}

impl DatasetSplit {
    pub fn new(shapes: Vec<PointCloud>, part_count: usize, name: impl Into<String>) -> Result<Self> {
        for (si, s) in shapes.iter().enumerate() {
            if let Some(labels) = &s.labels {
                for (row, &l) in labels.iter().enumerate() {
                    if l >= part_count {
                        return Err(Error::LabelOutOfRange {
                            label: l,
                            row: row + si, // best-effort context
                            parts: part_count,
                        });
                    }
                }
            }
        }
        Ok(Self {
            shapes,
            part_count,
            name: name.into(),
        })
    }

    pub fn category(&self) -> &str {
        self.shapes
            .first()
            .map(|s| s.category.as_str())
            .unwrap_or("")
    }
}

/// Load a cloud from a points file and an optional labels file.
pub fn load_point_cloud(
    points_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
) -> Result<PointCloud> {
    let points_path = points_path.as_ref();
    let text = std::fs::read_to_string(points_path).map_err(|e| Error::io(points_path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut coords = [0.0; 3];
        for c in &mut coords {
            let tok = it.next().ok_or_else(|| Error::Parse {
                path: points_path.display().to_string(),
                line: lineno + 1,
                message: "expected three coordinates".into(),
            })?;
            *c = tok.parse().map_err(|_| Error::Parse {
                path: points_path.display().to_string(),
                line: lineno + 1,
                message: format!("bad float '{tok}'"),
            })?;
        }
        if it.next().is_some() {
            return Err(Error::Parse {
                path: points_path.display().to_string(),
                line: lineno + 1,
                message: "trailing tokens after three coordinates".into(),
            });
        }
        points.push(coords);
    }
    let labels = match labels_path {
        Some(lp) => {
            let ltext = std::fs::read_to_string(lp).map_err(|e| Error::io(lp, e))?;
            let mut labels = Vec::new();
            for (lineno, line) in ltext.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let l: usize = line.parse().map_err(|_| Error::Parse {
                    path: lp.display().to_string(),
                    line: lineno + 1,
                    message: format!("bad label '{line}'"),
                })?;
                labels.push(l);
            }
            if labels.len() != points.len() {
                return Err(Error::CountMismatch {
                    points: points.len(),
                    labels: labels.len(),
                });
            }
            Some(labels)
        }
        None => None,
    };
    PointCloud::new(points, labels, "")
}

/// Write the points file for a cloud (one `x y z` per line).
pub fn save_points(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in &pc.points {
        // shortest round-trip formatting keeps load(save(x)) exact
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write the labels file for a cloud (one integer per line).
pub fn save_labels(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let labels = pc
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("cloud has no labels to save".into()))?;
    let mut out = String::new();
    for &l in labels {
        writeln!(out, "{l}").expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Center at the centroid and divide by the maximum point norm.
///
/// The result lies in the closed unit ball with at least one point on the
/// sphere; an all-coincident cloud maps to the origin. This is the
/// preprocessing rule assumed by voxelization.
pub fn normalize_unit_ball(pc: &PointCloud) -> PointCloud {
    let n = pc.points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &pc.points {
        for d in 0..3 {
            centroid[d] += p[d];
        }
    }
    for c in &mut centroid {
        *c /= n;
    }
    let mut max_norm: f64 = 0.0;
    for p in &pc.points {
        let mut sq = 0.0;
        for d in 0..3 {
            let v = p[d] - centroid[d];
            sq += v * v;
        }
        max_norm = max_norm.max(sq.sqrt());
    }
    let scale = if max_norm > 1e-300 { 1.0 / max_norm } else { 0.0 };
    let points = pc
        .points
        .iter()
        .map(|p| {
            [
                (p[0] - centroid[0]) * scale,
                (p[1] - centroid[1]) * scale,
                (p[2] - centroid[2]) * scale,
            ]
        })
        .collect();
    PointCloud {
        points,
        labels: pc.labels.clone(),
        category: pc.category.clone(),
    }
}

/// Augmentation settings: defaults are noise 0.002, per-axis scale
/// [0.9, 1.1], translation ±0.02.
#[derive(Copy, Clone, Debug)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub scale_range: (f64, f64),
    pub translate_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.002,
            scale_range: (0.9, 1.1),
            translate_range: 0.02,
        }
    }
}

/// Anisotropic scale, then translate, then per-point Gaussian noise.
/// Labels ride along unchanged.
pub fn augment(pc: &PointCloud, rng: &mut StreamRng, cfg: &AugmentConfig) -> Result<PointCloud> {
    let (lo, hi) = cfg.scale_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!(
            "scale range ({lo}, {hi}) must be positive and ordered"
        )));
    }
    let scale = [
        rng.uniform(lo, hi),
        rng.uniform(lo, hi),
        rng.uniform(lo, hi),
    ];
    let t = cfg.translate_range;
    let shift = [rng.uniform(-t, t), rng.uniform(-t, t), rng.uniform(-t, t)];
    let points = pc
        .points
        .iter()
        .map(|p| {
            let mut q = [0.0; 3];
            for d in 0..3 {
                q[d] = p[d] * scale[d] + shift[d] + rng.normal(cfg.noise_sigma);
            }
            q
        })
        .collect();
    Ok(PointCloud {
        points,
        labels: pc.labels.clone(),
        category: pc.category.clone(),
    })
}

/// On-disk dataset handle: manifest plus per-shape point/label files.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub categories: Vec<DatasetSplit>,
}

impl Dataset {
    pub fn shape_count(&self) -> usize {
        self.categories.iter().map(|c| c.shapes.len()).sum()
    }
}

/// Write a split under `dir`: `manifest.txt` plus `.pts`/`.seg` files.
pub fn save_dataset(dir: impl AsRef<Path>, split: &DatasetSplit) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, shape) in split.shapes.iter().enumerate() {
        let stem = format!("{}_{i:04}", shape.category);
        let pts = format!("{stem}.pts");
        let seg = format!("{stem}.seg");
        save_points(dir.join(&pts), shape)?;
        save_labels(dir.join(&seg), shape)?;
        writeln!(manifest, "{} {pts} {seg}", shape.category).expect("string write");
    }
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(dir.join("manifest.txt"), e))
}

/// Load every category listed in `dir/manifest.txt`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.txt");
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut by_category: Vec<(String, Vec<PointCloud>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: manifest_path.display().to_string(),
                line: lineno + 1,
                message: "expected 'category points_path labels_path'".into(),
            });
        }
        let (category, pts, seg) = (fields[0], fields[1], fields[2]);
        let pts_path: PathBuf = dir.join(pts);
        let seg_path: PathBuf = dir.join(seg);
        let mut cloud = load_point_cloud(&pts_path, Some(seg_path.as_path()))?;
        cloud.category = category.to_string();
        match by_category.iter_mut().find(|(c, _)| c == category) {
            Some((_, shapes)) => shapes.push(cloud),
            None => by_category.push((category.to_string(), vec![cloud])),
        }
    }
    if by_category.is_empty() {
        return Err(Error::Data(format!(
            "{}: manifest lists no shapes",
            manifest_path.display()
        )));
    }
    let mut categories = Vec::new();
    for (name, shapes) in by_category {
        let part_count = shapes
            .iter()
            .flat_map(|s| s.labels.iter().flatten())
            .max()
            .map_or(1, |&m| m + 1);
        categories.push(DatasetSplit::new(shapes, part_count, name)?);
    }
    Ok(Dataset { categories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::new(points, None, "test").unwrap()
    }

    #[test]
    fn load_three_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pts");
        std::fs::write(&p, "0 0 0\n1 0 0\n0 1 0\n").unwrap();
        let pc = load_point_cloud(&p, None).unwrap();
        assert_eq!(pc.len(), 3);
        assert_eq!(pc.points[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pts");
        std::fs::write(&p, "0 0 0\n1 oops 0\n").unwrap();
        let err = load_point_cloud(&p, None).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn short_labels_file_is_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pts");
        let l = dir.path().join("a.seg");
        std::fs::write(&p, "0 0 0\n1 0 0\n").unwrap();
        std::fs::write(&l, "1\n").unwrap();
        let err = load_point_cloud(&p, Some(l.as_path())).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { points: 2, labels: 1 }));
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StreamRng::new(11, "roundtrip");
        let points: Vec<[f64; 3]> = (0..1024)
            .map(|_| {
                [
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                ]
            })
            .collect();
        let pc = cloud(points);
        let p = dir.path().join("c.pts");
        save_points(&p, &pc).unwrap();
        let back = load_point_cloud(&p, None).unwrap();
        assert_eq!(back.points, pc.points);
    }

    #[test]
    fn normalize_two_points() {
        let pc = cloud(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let n = normalize_unit_ball(&pc);
        assert!((n.points[0][0] + 1.0).abs() < 1e-15);
        assert!((n.points[1][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = StreamRng::new(3, "norm");
        let points: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.uniform(-4.0, 9.0),
                    rng.uniform(2.0, 3.0),
                    rng.uniform(-0.5, 0.5),
                ]
            })
            .collect();
        let once = normalize_unit_ball(&cloud(points));
        let max_norm = once
            .points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-12);
        let twice = normalize_unit_ball(&once);
        for (a, b) in once.points.iter().zip(&twice.points) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_degenerate_cloud_maps_to_origin() {
        let pc = cloud(vec![[5.0, 5.0, 5.0], [5.0, 5.0, 5.0]]);
        let n = normalize_unit_ball(&pc);
        assert_eq!(n.points, vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    }

    #[test]
    fn augment_identity_settings() {
        let pc = cloud(vec![[0.5, -0.25, 0.75]]);
        let cfg = AugmentConfig {
            noise_sigma: 0.0,
            scale_range: (1.0, 1.0),
            translate_range: 0.0,
        };
        let mut rng = StreamRng::new(0, "aug");
        let out = augment(&pc, &mut rng, &cfg).unwrap();
        assert_eq!(out.points, pc.points);
    }

    #[test]
    fn augment_is_deterministic() {
        let pc = cloud(vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        let cfg = AugmentConfig::default();
        let a = augment(&pc, &mut StreamRng::new(9, "aug"), &cfg).unwrap();
        let b = augment(&pc, &mut StreamRng::new(9, "aug"), &cfg).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn augment_noise_statistics() {
        // displacement std per axis should track noise_sigma
        let n = 10_000;
        let pc = cloud(vec![[0.0, 0.0, 0.0]; n]);
        let cfg = AugmentConfig {
            noise_sigma: 0.002,
            scale_range: (1.0, 1.0),
            translate_range: 0.0,
        };
        let mut rng = StreamRng::new(4, "aug-stats");
        let out = augment(&pc, &mut rng, &cfg).unwrap();
        for d in 0..3 {
            let mean: f64 = out.points.iter().map(|p| p[d]).sum::<f64>() / n as f64;
            let var: f64 =
                out.points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            assert!((0.0017..=0.0023).contains(&sd), "axis {d}: sd {sd}");
        }
    }

    #[test]
    fn augment_preserves_label_histogram() {
        let pc = PointCloud::new(
            vec![[0.0; 3]; 6],
            Some(vec![0, 1, 1, 2, 2, 2]),
            "test",
        )
        .unwrap();
        let out = augment(&pc, &mut StreamRng::new(1, "aug"), &AugmentConfig::default()).unwrap();
        assert_eq!(out.labels, pc.labels);
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StreamRng::new(5, "ds");
        let split = generate_synthetic(ShapeFamily::Table, 3, 128, &mut rng).unwrap();
        save_dataset(dir.path(), &split).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.categories.len(), 1);
        assert_eq!(back.categories[0].shapes.len(), 3);
        assert_eq!(back.categories[0].part_count, 2);
        assert_eq!(back.categories[0].shapes[0].points, split.shapes[0].points);
    }
}
