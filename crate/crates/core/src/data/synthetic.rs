//! Synthetic labelled shapes: surface-sampled primitives with exact part
//! labels, a desk-scale stand-in for real part-segmentation data.

use super::{DatasetSplit, PointCloud};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Supported shape families.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Two spheres of different radii joined by a cylinder; 3 parts.
    Barbell,
    /// Base disk, pole, and conical shade; 3 parts.
    Lamp,
    /// Top slab on four corner legs; 2 parts.
    Table,
}

impl ShapeFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "barbell" => Ok(Self::Barbell),
            "lamp" => Ok(Self::Lamp),
            "table" => Ok(Self::Table),
            other => Err(Error::Config(format!(
                "unknown shape family '{other}' (expected barbell, lamp, or table)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Barbell => "barbell",
            Self::Lamp => "lamp",
            Self::Table => "table",
        }
    }

    pub fn part_count(&self) -> usize {
        match self {
            Self::Barbell | Self::Lamp => 3,
            Self::Table => 2,
        }
    }
}

/// Generate `count` shapes of `points_per_shape` points each.
///
/// Every declared part id appears in every shape: sample counts are
/// allocated per part by surface area with a 5% floor, so mIoU is never
/// computed against an empty part.
pub fn generate_synthetic(
    family: ShapeFamily,
    count: usize,
    points_per_shape: usize,
    rng: &mut StreamRng,
) -> Result<DatasetSplit> {
    if count == 0 {
        return Err(Error::Config("shape count must be positive".into()));
    }
    if points_per_shape < 8 * family.part_count() {
        return Err(Error::Config(format!(
            "points_per_shape {points_per_shape} too small for {} parts",
            family.part_count()
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push(one_shape(family, points_per_shape, rng)?);
    }
    DatasetSplit::new(shapes, family.part_count(), family.name())
}

/// Per-part sample counts: area-proportional with a 5% floor, summing to `n`.
pub fn allocate_counts(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| (w / total * n as f64) as usize).collect();
    // largest-remainder rounding
    let mut remainders: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w / total * n as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut short = n - counts.iter().sum::<usize>();
    for (i, _) in remainders {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    // 5% floor, fed from the largest part
    let min = (n + 19) / 20;
    loop {
        let deficit = (0..counts.len()).find(|&i| counts[i] < min);
        let Some(i) = deficit else { break };
        let donor = (0..counts.len())
            .max_by_key(|&j| counts[j])
            .expect("non-empty");
        if donor == i || counts[donor] <= min {
            break;
        }
        counts[donor] -= 1;
        counts[i] += 1;
    }
    counts
}

fn one_shape(family: ShapeFamily, n: usize, rng: &mut StreamRng) -> Result<PointCloud> {
    // pose/scale jitter drawn first so sampling order stays stable
    let theta = match family {
        ShapeFamily::Barbell => rng.uniform(-0.2, 0.2),
        _ => rng.uniform(0.0, std::f64::consts::TAU),
    };
    let scale = [
        rng.uniform(0.9, 1.1),
        rng.uniform(0.9, 1.1),
        rng.uniform(0.9, 1.1),
    ];
    let shift = [
        rng.uniform(-0.05, 0.05),
        rng.uniform(-0.05, 0.05),
        rng.uniform(-0.05, 0.05),
    ];

    let (weights, samplers) = family_parts(family);
    let counts = allocate_counts(n, &weights);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (part, (&count, sampler)) in counts.iter().zip(&samplers).enumerate() {
        for _ in 0..count {
            let p = sampler(rng);
            points.push(place(p, theta, &scale, &shift));
            labels.push(part);
        }
    }
    PointCloud::new(points, Some(labels), family.name())
}

type Sampler = Box<dyn Fn(&mut StreamRng) -> [f64; 3]>;

fn family_parts(family: ShapeFamily) -> (Vec<f64>, Vec<Sampler>) {
    match family {
        ShapeFamily::Barbell => {
            let (r_a, r_b, r_bar) = (0.28, 0.38, 0.10);
            let bar_len = 0.8;
            let areas = vec![
                4.0 * std::f64::consts::PI * r_a * r_a,
                std::f64::consts::TAU * r_bar * bar_len,
                4.0 * std::f64::consts::PI * r_b * r_b,
            ];
            let samplers: Vec<Sampler> = vec![
                Box::new(move |rng| sphere(rng, [-0.55, 0.0, 0.0], r_a)),
                Box::new(move |rng| cylinder_x(rng, r_bar, -0.4, 0.4)),
                Box::new(move |rng| sphere(rng, [0.55, 0.0, 0.0], r_b)),
            ];
            (areas, samplers)
        }
        ShapeFamily::Lamp => {
            let (r_base, r_pole, pole_top) = (0.4, 0.04, 0.75);
            let (r_shade_lo, r_shade_hi): (f64, f64) = (0.35, 0.1);
            let slant = ((0.25f64).powi(2) + (r_shade_lo - r_shade_hi).powi(2)).sqrt();
            let areas = vec![
                std::f64::consts::PI * r_base * r_base,
                std::f64::consts::TAU * r_pole * pole_top,
                std::f64::consts::PI * (r_shade_lo + r_shade_hi) * slant,
            ];
            let samplers: Vec<Sampler> = vec![
                Box::new(move |rng| disk_z(rng, r_base, 0.0)),
                Box::new(move |rng| cylinder_z(rng, r_pole, 0.0, pole_top)),
                Box::new(move |rng| cone_z(rng, r_shade_lo, r_shade_hi, pole_top, 1.0)),
            ];
            (areas, samplers)
        }
        ShapeFamily::Table => {
            let (hx, hy) = (0.5, 0.35);
            let (z_lo, z_hi) = (0.5, 0.56);
            let leg_half = 0.03;
            let top_area = 2.0 * (2.0 * hx) * (2.0 * hy)
                + 2.0 * (2.0 * hx) * (z_hi - z_lo)
                + 2.0 * (2.0 * hy) * (z_hi - z_lo);
            let leg_area = 4.0 * 4.0 * (2.0 * leg_half) * z_lo;
            let samplers: Vec<Sampler> = vec![
                Box::new(move |rng| box_surface(rng, [0.0, 0.0, (z_lo + z_hi) / 2.0], [hx, hy, (z_hi - z_lo) / 2.0])),
                Box::new(move |rng| {
                    let legs = [
                        [0.42, 0.27],
                        [-0.42, 0.27],
                        [0.42, -0.27],
                        [-0.42, -0.27],
                    ];
                    let leg = legs[rng.index(4)];
                    leg_side(rng, leg, leg_half, 0.0, z_lo)
                }),
            ];
            (vec![top_area, leg_area], samplers)
        }
    }
}

fn place(p: [f64; 3], theta: f64, scale: &[f64; 3], shift: &[f64; 3]) -> [f64; 3] {
    let s = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
    let (cos, sin) = (theta.cos(), theta.sin());
    [
        s[0] * cos - s[1] * sin + shift[0],
        s[0] * sin + s[1] * cos + shift[1],
        s[2] + shift[2],
    ]
}

fn sphere(rng: &mut StreamRng, center: [f64; 3], r: f64) -> [f64; 3] {
    loop {
        let v = [rng.normal(1.0), rng.normal(1.0), rng.normal(1.0)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [
                center[0] + r * v[0] / norm,
                center[1] + r * v[1] / norm,
                center[2] + r * v[2] / norm,
            ];
        }
    }
}

fn cylinder_x(rng: &mut StreamRng, r: f64, x_lo: f64, x_hi: f64) -> [f64; 3] {
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    let x = rng.uniform(x_lo, x_hi);
    [x, r * theta.cos(), r * theta.sin()]
}

fn cylinder_z(rng: &mut StreamRng, r: f64, z_lo: f64, z_hi: f64) -> [f64; 3] {
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    let z = rng.uniform(z_lo, z_hi);
    [r * theta.cos(), r * theta.sin(), z]
}

fn disk_z(rng: &mut StreamRng, r_max: f64, z: f64) -> [f64; 3] {
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    let r = r_max * rng.uniform(0.0, 1.0).sqrt();
    [r * theta.cos(), r * theta.sin(), z]
}

/// Uniform sample on a truncated-cone lateral surface (area density ∝ radius).
fn cone_z(rng: &mut StreamRng, r_lo: f64, r_hi: f64, z_lo: f64, z_hi: f64) -> [f64; 3] {
    let u = rng.uniform(0.0, 1.0);
    let a = (r_hi - r_lo) / 2.0;
    let t = if a.abs() < 1e-12 {
        u
    } else {
        let norm = r_lo + a;
        ((r_lo * r_lo + 4.0 * a * u * norm).sqrt() - r_lo) / (2.0 * a)
    };
    let r = r_lo + (r_hi - r_lo) * t;
    let z = z_lo + (z_hi - z_lo) * t;
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    [r * theta.cos(), r * theta.sin(), z]
}

/// Uniform sample over all six faces of an axis-aligned box.
fn box_surface(rng: &mut StreamRng, center: [f64; 3], half: [f64; 3]) -> [f64; 3] {
    let areas = [
        half[1] * half[2], // x faces (quarter-areas, scale cancels)
        half[0] * half[2],
        half[0] * half[1],
    ];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut pick = rng.uniform(0.0, total);
    for axis in 0..3 {
        for &sign in &[-1.0, 1.0] {
            if pick < areas[axis] {
                let mut p = [0.0; 3];
                p[axis] = sign * half[axis];
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                p[u] = rng.uniform(-half[u], half[u]);
                p[v] = rng.uniform(-half[v], half[v]);
                return [center[0] + p[0], center[1] + p[1], center[2] + p[2]];
            }
            pick -= areas[axis];
        }
    }
    // numerical edge: land on the last face
    [center[0], center[1], center[2] + half[2]]
}

/// Sample the four vertical faces of a square-section leg.
fn leg_side(rng: &mut StreamRng, at: [f64; 2], half: f64, z_lo: f64, z_hi: f64) -> [f64; 3] {
    let face = rng.index(4);
    let z = rng.uniform(z_lo, z_hi);
    let t = rng.uniform(-half, half);
    let (dx, dy) = match face {
        0 => (half, t),
        1 => (-half, t),
        2 => (t, half),
        _ => (t, -half),
    };
    [at[0] + dx, at[1] + dy, z]
}
