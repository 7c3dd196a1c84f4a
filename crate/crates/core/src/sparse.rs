//! Sparse voxel grids and the active-set-aware convolution family.
//!
//! A grid stores features only at active sites. Regular convolution dilates
//! the active set by the kernel support; valid convolution evaluates only at
//! input-active sites so the set never grows; the strided/deconvolution pair
//! moves between resolutions, with the deconvolution writing to an explicit
//! target set recorded on the way down. The receptive-field block sums a
//! valid-convolution path with a strided–valid–deconv path, leaving active
//! sites untouched while widening influence.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Binder, Linear, Param, Tape, Tensor, TensorRef};

/// Default voxelization resolution per axis.
pub const DEFAULT_RESOLUTION: usize = 50;

/// The set of active sites of one grid, in canonical (sorted) row order.
#[derive(Clone, Debug)]
pub struct SiteSet {
    resolution: usize,
    sites: Vec<[u32; 3]>,
    index: HashMap<[u32; 3], usize>,
}

impl SiteSet {
    /// Build from arbitrary site coordinates; sorts, rejects duplicates and
    /// out-of-bounds sites.
    pub fn new(resolution: usize, mut sites: Vec<[u32; 3]>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Grid(format!("resolution {resolution} too small")));
        }
        for s in &sites {
            if s.iter().any(|&v| v as usize >= resolution) {
                return Err(Error::Grid(format!(
                    "site {s:?} outside resolution {resolution}"
                )));
            }
        }
        sites.sort_unstable();
        for w in sites.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Grid(format!("duplicate site {:?}", w[0])));
            }
        }
        let index = sites.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Ok(Self {
            resolution,
            sites,
            index,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[[u32; 3]] {
        &self.sites
    }

    pub fn row_of(&self, site: [u32; 3]) -> Option<usize> {
        self.index.get(&site).copied()
    }

    pub fn contains(&self, site: [u32; 3]) -> bool {
        self.index.contains_key(&site)
    }

    /// Key-set equality (resolution and sites).
    pub fn same_as(&self, other: &SiteSet) -> bool {
        self.resolution == other.resolution && self.sites == other.sites
    }
}

/// Sparse grid: a site set plus a dense feature row per active site.
#[derive(Clone, Debug)]
pub struct SparseGrid {
    pub sites: SiteSet,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl SparseGrid {
    pub fn from_entries(
        resolution: usize,
        channels: usize,
        entries: impl IntoIterator<Item = ([u32; 3], Vec<f64>)>,
    ) -> Result<Self> {
        let mut pairs: Vec<([u32; 3], Vec<f64>)> = entries.into_iter().collect();
        pairs.sort_by_key(|&(s, _)| s);
        let mut sites = Vec::with_capacity(pairs.len());
        let mut values = Vec::with_capacity(pairs.len() * channels);
        for (s, v) in pairs {
            if v.len() != channels {
                return Err(Error::ShapeMismatch {
                    op: "sparse_grid",
                    left: vec![channels],
                    right: vec![v.len()],
                });
            }
            sites.push(s);
            values.extend_from_slice(&v);
        }
        Ok(Self {
            sites: SiteSet::new(resolution, sites)?,
            channels,
            values,
        })
    }

    pub fn feature(&self, site: [u32; 3]) -> Option<&[f64]> {
        self.sites
            .row_of(site)
            .map(|r| &self.values[r * self.channels..(r + 1) * self.channels])
    }

    /// Features as an A×C tensor in canonical row order.
    pub fn features_tensor(&self) -> Tensor {
        Tensor::new(vec![self.sites.len(), self.channels], self.values.clone())
            .expect("grid shape")
    }

    /// Text dump `i j k v1 ... vC`, sorted lexicographically by site.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (r, s) in self.sites.sites().iter().enumerate() {
            write!(out, "{} {} {}", s[0], s[1], s[2]).expect("string write");
            for v in &self.values[r * self.channels..(r + 1) * self.channels] {
                write!(out, " {v}").expect("string write");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Read a dump written by [`SparseGrid::write_dump`].
    pub fn read_dump(path: impl AsRef<Path>, resolution: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        let mut channels = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: "expected 'i j k v1 ...'".into(),
                });
            }
            let parse_err = |tok: &str| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("bad value '{tok}'"),
            };
            let mut site = [0u32; 3];
            for (d, s) in site.iter_mut().enumerate() {
                *s = fields[d].parse().map_err(|_| parse_err(fields[d]))?;
            }
            let values: Vec<f64> = fields[3..]
                .iter()
                .map(|t| t.parse().map_err(|_| parse_err(t)))
                .collect::<Result<_>>()?;
            let c = *channels.get_or_insert(values.len());
            if values.len() != c {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: "inconsistent channel count".into(),
                });
            }
            entries.push((site, values));
        }
        let channels = channels.ok_or_else(|| Error::Grid("empty grid dump".into()))?;
        Self::from_entries(resolution, channels, entries)
    }
}

// ---- voxelization ----

/// Voxelization output: the occupancy grid, optional per-site majority
/// labels, and each point's site row for scattering predictions back.
#[derive(Clone, Debug)]
pub struct Voxelized {
    pub grid: SparseGrid,
    pub site_labels: Option<Vec<usize>>,
    pub point_rows: Vec<usize>,
}

/// Site of a normalized coordinate: `floor((c+1)/2 · R)` clamped to bounds.
pub fn site_of(p: &[f64; 3], resolution: usize) -> [u32; 3] {
    let mut site = [0u32; 3];
    for d in 0..3 {
        let idx = ((p[d] + 1.0) / 2.0 * resolution as f64).floor();
        site[d] = idx.clamp(0.0, (resolution - 1) as f64) as u32;
    }
    site
}

/// Voxelize a normalized cloud into a C=1 occupancy grid.
///
/// With `labelled`, each active site gets the majority label of its points
/// (ties to the smallest label id).
pub fn voxelize(pc: &PointCloud, resolution: usize, labelled: bool) -> Result<Voxelized> {
    if resolution < 2 {
        return Err(Error::Config(format!(
            "voxel resolution {resolution} must be at least 2"
        )));
    }
    for (row, p) in pc.points.iter().enumerate() {
        for &c in p {
            if c.abs() > 1.0 + 1e-9 {
                return Err(Error::NotNormalized { row, value: c });
            }
        }
    }
    let labels = if labelled {
        Some(pc.labels.as_ref().ok_or_else(|| {
            Error::Data("labelled voxelization needs a labelled cloud".into())
        })?)
    } else {
        None
    };

    let point_sites: Vec<[u32; 3]> = pc.points.iter().map(|p| site_of(p, resolution)).collect();
    let mut unique = point_sites.clone();
    unique.sort_unstable();
    unique.dedup();
    let sites = SiteSet::new(resolution, unique)?;
    let point_rows: Vec<usize> = point_sites
        .iter()
        .map(|&s| sites.row_of(s).expect("own site"))
        .collect();

    let site_labels = labels.map(|labels| {
        let parts = labels.iter().max().map_or(1, |&m| m + 1);
        let mut counts = vec![vec![0usize; parts]; sites.len()];
        for (i, &row) in point_rows.iter().enumerate() {
            counts[row][labels[i]] += 1;
        }
        counts
            .into_iter()
            .map(|c| {
                let best = c.iter().max().copied().unwrap_or(0);
                c.iter().position(|&v| v == best).unwrap_or(0)
            })
            .collect()
    });

    let a = sites.len();
    Ok(Voxelized {
        grid: SparseGrid {
            sites,
            channels: 1,
            values: vec![1.0; a],
        },
        site_labels,
        point_rows,
    })
}

/// Scatter per-site posteriors back to points.
///
/// Each point inherits its voxel's posterior row; a point whose voxel is
/// inactive falls back to the nearest active site by L∞ then L2 distance,
/// ties broken by lexicographic site order.
pub fn devoxelize_labels(
    posteriors: &Tensor,
    sites: &SiteSet,
    pc: &PointCloud,
) -> Result<Tensor> {
    if sites.is_empty() {
        return Err(Error::Grid("cannot devoxelize an empty grid".into()));
    }
    if posteriors.rows() != sites.len() {
        return Err(Error::ShapeMismatch {
            op: "devoxelize_labels",
            left: vec![posteriors.rows(), posteriors.cols()],
            right: vec![sites.len()],
        });
    }
    let p = posteriors.cols();
    let mut out = vec![0.0; pc.len() * p];
    for (i, point) in pc.points.iter().enumerate() {
        let site = site_of(point, sites.resolution());
        let row = match sites.row_of(site) {
            Some(r) => r,
            None => nearest_active_row(sites, site),
        };
        out[i * p..(i + 1) * p].copy_from_slice(posteriors.row(row));
    }
    Tensor::new(vec![pc.len(), p], out)
}

fn nearest_active_row(sites: &SiteSet, site: [u32; 3]) -> usize {
    let mut best = 0usize;
    let mut best_key = (u32::MAX, u64::MAX);
    for (r, s) in sites.sites().iter().enumerate() {
        let mut linf = 0u32;
        let mut l2 = 0u64;
        for d in 0..3 {
            let diff = s[d].abs_diff(site[d]);
            linf = linf.max(diff);
            l2 += (diff as u64) * (diff as u64);
        }
        // sites scan in lexicographic order, so strict improvement keeps the
        // lexicographically smallest among ties
        if (linf, l2) < best_key {
            best_key = (linf, l2);
            best = r;
        }
    }
    best
}

// ---- convolution parameters ----

/// Kernel support: size-3 (27 taps) or stride-2 (8 taps).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Size3,
    Stride2,
}

impl KernelKind {
    pub fn tap_count(&self) -> usize {
        match self {
            KernelKind::Size3 => 27,
            KernelKind::Stride2 => 8,
        }
    }
}

/// Offsets of a size-3 kernel, index `((dx+1)*3+(dy+1))*3+(dz+1)`.
pub fn offsets_size3() -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(27);
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Offsets of a stride-2 kernel, index `dx*4+dy*2+dz`.
pub fn offsets_stride2() -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(8);
    for dx in 0..=1 {
        for dy in 0..=1 {
            for dz in 0..=1 {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// One convolution's weights: a C_in×C_out matrix per kernel offset plus a
/// shared bias.
#[derive(Clone, Debug)]
pub struct SparseConvParams {
    pub kind: KernelKind,
    pub weights: Vec<Param>,
    pub bias: Param,
}

impl SparseConvParams {
    pub fn new(
        name: &str,
        rng: &mut StreamRng,
        kind: KernelKind,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let taps = kind.tap_count();
        let weights = (0..taps)
            .map(|o| Param::glorot(format!("{name}.w{o}"), rng, c_in, c_out))
            .collect();
        Self {
            kind,
            weights,
            bias: Param::zeros(format!("{name}.b"), vec![c_out]),
        }
    }

    /// Size-3 identity kernel: center weight I, everything else zero.
    pub fn identity_size3(name: &str, channels: usize) -> Self {
        let mut weights = Vec::with_capacity(27);
        for o in 0..27 {
            let mut w = Tensor::zeros(vec![channels, channels]);
            if o == 13 {
                for c in 0..channels {
                    w.data_mut()[c * channels + c] = 1.0;
                }
            }
            weights.push(Param::new(format!("{name}.w{o}"), w));
        }
        Self {
            kind: KernelKind::Size3,
            weights,
            bias: Param::zeros(format!("{name}.b"), vec![channels]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weights[0].value.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weights[0].value.shape()[1]
    }

    pub fn offsets(&self) -> Vec<[i64; 3]> {
        match self.kind {
            KernelKind::Size3 => offsets_size3(),
            KernelKind::Stride2 => offsets_stride2(),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for w in &self.weights {
            f(w);
        }
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for w in &mut self.weights {
            f(w);
        }
        f(&mut self.bias);
    }
}

fn check_channels(op: &'static str, feats_cols: usize, params: &SparseConvParams) -> Result<()> {
    if feats_cols != params.c_in() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![feats_cols],
            right: vec![params.c_in(), params.c_out()],
        });
    }
    Ok(())
}

fn offset_site(site: [u32; 3], offset: [i64; 3], resolution: usize) -> Option<[u32; 3]> {
    let mut out = [0u32; 3];
    for d in 0..3 {
        let v = site[d] as i64 + offset[d];
        if v < 0 || v >= resolution as i64 {
            return None;
        }
        out[d] = v as u32;
    }
    Some(out)
}

/// Convolution arithmetic shared by every variant: for each output row,
/// `out = bias + Σ_o W_o · in[site_map(site, o)]`, inactive inputs
/// contributing zero.
fn apply_taps(
    tape: &mut Tape,
    binder: &mut Binder,
    in_sites: &SiteSet,
    feats: TensorRef,
    out_sites: &[[u32; 3]],
    params: &SparseConvParams,
    site_map: impl Fn([u32; 3], [i64; 3]) -> Option<[u32; 3]>,
) -> Result<TensorRef> {
    let mut terms = Vec::with_capacity(params.weights.len());
    for (o, offset) in params.offsets().into_iter().enumerate() {
        let idx: Vec<Option<usize>> = out_sites
            .iter()
            .map(|&s| site_map(s, offset).and_then(|t| in_sites.row_of(t)))
            .collect();
        if idx.iter().all(|i| i.is_none()) {
            continue;
        }
        let gathered = tape.gather_rows(feats, &idx)?;
        let w = binder.bind(tape, &params.weights[o]);
        terms.push(tape.matmul(gathered, w)?);
    }
    let summed = if terms.is_empty() {
        tape.constant(Tensor::zeros(vec![out_sites.len(), params.c_out()]))
    } else {
        tape.sum_list(&terms)?
    };
    let b = binder.bind(tape, &params.bias);
    tape.add_rowvec(summed, b)
}

/// Valid sparse convolution: evaluated only at input-active sites, so the
/// output active set equals the input active set.
pub fn sparse_conv_valid(
    tape: &mut Tape,
    binder: &mut Binder,
    sites: &SiteSet,
    feats: TensorRef,
    params: &SparseConvParams,
) -> Result<TensorRef> {
    if params.kind != KernelKind::Size3 {
        return Err(Error::Config("valid convolution wants a size-3 kernel".into()));
    }
    check_channels("sparse_conv_valid", tape.value(feats).cols(), params)?;
    let r = sites.resolution();
    let out_sites = sites.sites().to_vec();
    apply_taps(tape, binder, sites, feats, &out_sites, params, |s, o| {
        offset_site(s, o, r)
    })
}

/// Regular (dilating) sparse convolution: the output active set is the
/// Minkowski dilation of the input active set by the kernel support,
/// clipped to bounds.
pub fn sparse_conv_regular(
    tape: &mut Tape,
    binder: &mut Binder,
    sites: &SiteSet,
    feats: TensorRef,
    params: &SparseConvParams,
) -> Result<(SiteSet, TensorRef)> {
    if params.kind != KernelKind::Size3 {
        return Err(Error::Config("regular convolution wants a size-3 kernel".into()));
    }
    check_channels("sparse_conv_regular", tape.value(feats).cols(), params)?;
    let r = sites.resolution();
    let mut dilated: Vec<[u32; 3]> = Vec::new();
    for &s in sites.sites() {
        for offset in offsets_size3() {
            let neg = [-offset[0], -offset[1], -offset[2]];
            if let Some(t) = offset_site(s, neg, r) {
                dilated.push(t);
            }
        }
    }
    dilated.sort_unstable();
    dilated.dedup();
    let out_sites = SiteSet::new(r, dilated)?;
    let out_list = out_sites.sites().to_vec();
    let out = apply_taps(tape, binder, sites, feats, &out_list, params, |s, o| {
        offset_site(s, o, r)
    })?;
    Ok((out_sites, out))
}

/// Strided down-convolution to resolution R/2: a coarse site is active iff
/// any of its eight children is, and reads them through the stride-2 kernel.
pub fn strided_down(
    tape: &mut Tape,
    binder: &mut Binder,
    sites: &SiteSet,
    feats: TensorRef,
    params: &SparseConvParams,
) -> Result<(SiteSet, TensorRef)> {
    if params.kind != KernelKind::Stride2 {
        return Err(Error::Config("strided convolution wants a stride-2 kernel".into()));
    }
    check_channels("strided_down", tape.value(feats).cols(), params)?;
    let r = sites.resolution();
    if r % 2 != 0 {
        return Err(Error::Grid(format!(
            "strided convolution needs an even resolution, got {r}"
        )));
    }
    let mut coarse: Vec<[u32; 3]> = sites
        .sites()
        .iter()
        .map(|s| [s[0] / 2, s[1] / 2, s[2] / 2])
        .collect();
    coarse.sort_unstable();
    coarse.dedup();
    let out_sites = SiteSet::new(r / 2, coarse)?;
    let out_list = out_sites.sites().to_vec();
    let out = apply_taps(tape, binder, sites, feats, &out_list, params, |y, o| {
        Some([
            y[0] * 2 + o[0] as u32,
            y[1] * 2 + o[1] as u32,
            y[2] * 2 + o[2] as u32,
        ])
    })?;
    Ok((out_sites, out))
}

/// Transposed stride-2 convolution onto an explicit target set at twice the
/// coarse resolution: `out[x] = bias + W_{x mod 2} · in[x div 2]`, with a
/// missing parent contributing bias only.
pub fn deconv_up(
    tape: &mut Tape,
    binder: &mut Binder,
    coarse: &SiteSet,
    feats: TensorRef,
    target: &SiteSet,
    params: &SparseConvParams,
) -> Result<TensorRef> {
    if params.kind != KernelKind::Stride2 {
        return Err(Error::Config("deconvolution wants a stride-2 kernel".into()));
    }
    check_channels("deconv_up", tape.value(feats).cols(), params)?;
    if target.resolution() != coarse.resolution() * 2 {
        return Err(Error::Grid(format!(
            "deconvolution target resolution {} is not twice the coarse {}",
            target.resolution(),
            coarse.resolution()
        )));
    }
    let a_out = target.len();
    let mut terms: Vec<TensorRef> = Vec::new();
    for (o, offset) in offsets_stride2().into_iter().enumerate() {
        // target rows whose within-parent offset matches this tap
        let rows: Vec<usize> = (0..a_out)
            .filter(|&r| {
                let s = target.sites()[r];
                s[0] % 2 == offset[0] as u32
                    && s[1] % 2 == offset[1] as u32
                    && s[2] % 2 == offset[2] as u32
            })
            .collect();
        if rows.is_empty() {
            continue;
        }
        let idx: Vec<Option<usize>> = rows
            .iter()
            .map(|&r| {
                let s = target.sites()[r];
                coarse.row_of([s[0] / 2, s[1] / 2, s[2] / 2])
            })
            .collect();
        if idx.iter().all(|i| i.is_none()) {
            continue;
        }
        let gathered = tape.gather_rows(feats, &idx)?;
        let w = binder.bind(tape, &params.weights[o]);
        let prod = tape.matmul(gathered, w)?;
        terms.push(tape.scatter_rows(prod, &rows, a_out)?);
    }
    let summed = if terms.is_empty() {
        tape.constant(Tensor::zeros(vec![a_out, params.c_out()]))
    } else {
        tape.sum_list(&terms)?
    };
    let b = binder.bind(tape, &params.bias);
    tape.add_rowvec(summed, b)
}

/// Parameters of one receptive-field block: the direct valid-convolution
/// path plus the strided → valid → deconvolution path.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub direct: SparseConvParams,
    pub down: SparseConvParams,
    pub mid: SparseConvParams,
    pub up: SparseConvParams,
}

impl BlockParams {
    pub fn new(name: &str, rng: &mut StreamRng, channels: usize) -> Self {
        Self {
            direct: SparseConvParams::new(
                &format!("{name}.direct"),
                rng,
                KernelKind::Size3,
                channels,
                channels,
            ),
            down: SparseConvParams::new(
                &format!("{name}.down"),
                rng,
                KernelKind::Stride2,
                channels,
                channels,
            ),
            mid: SparseConvParams::new(
                &format!("{name}.mid"),
                rng,
                KernelKind::Size3,
                channels,
                channels,
            ),
            up: SparseConvParams::new(
                &format!("{name}.up"),
                rng,
                KernelKind::Stride2,
                channels,
                channels,
            ),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.direct.visit(f);
        self.down.visit(f);
        self.mid.visit(f);
        self.up.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.direct.visit_mut(f);
        self.down.visit_mut(f);
        self.mid.visit_mut(f);
        self.up.visit_mut(f);
    }
}

/// Receptive-field block: `VSC(x) + deconv(VSC(strided(x)), target = active
/// set of x)`. The active set is unchanged; influence reaches through the
/// coarse path well beyond the direct kernel support.
pub fn receptive_block(
    tape: &mut Tape,
    binder: &mut Binder,
    sites: &SiteSet,
    feats: TensorRef,
    block: &BlockParams,
) -> Result<TensorRef> {
    let direct = sparse_conv_valid(tape, binder, sites, feats, &block.direct)?;
    let (coarse_sites, coarse) = strided_down(tape, binder, sites, feats, &block.down)?;
    let mid = sparse_conv_valid(tape, binder, &coarse_sites, coarse, &block.mid)?;
    let up = deconv_up(tape, binder, &coarse_sites, mid, sites, &block.up)?;
    tape.add(direct, up)
}

// ---- segmentation network ----

/// Segmentation network configuration over sparse grids.
#[derive(Clone, Debug)]
pub struct SegnetConfig {
    pub resolution: usize,
    pub channels: usize,
    pub blocks: usize,
    pub part_count: usize,
}

impl SegnetConfig {
    /// Desk-scale default: resolution 16, 16 channels, 2 blocks.
    pub fn desk(part_count: usize) -> Self {
        Self {
            resolution: 16,
            channels: 16,
            blocks: 2,
            part_count,
        }
    }
}

/// Lift convolution, a stack of receptive blocks, and a per-site linear
/// head. Active sites are preserved end to end.
#[derive(Clone, Debug)]
pub struct SparseSegnet {
    pub config: SegnetConfig,
    pub lift: SparseConvParams,
    pub blocks: Vec<BlockParams>,
    pub head: Linear,
}

impl SparseSegnet {
    pub fn new(rng: &mut StreamRng, config: SegnetConfig) -> Result<Self> {
        if config.blocks > 0 && config.resolution % 2 != 0 {
            return Err(Error::Config(format!(
                "receptive blocks stride at resolution {}, which is odd",
                config.resolution
            )));
        }
        if config.part_count == 0 {
            return Err(Error::Config("part count must be positive".into()));
        }
        let lift = SparseConvParams::new("segnet.lift", rng, KernelKind::Size3, 1, config.channels);
        let blocks = (0..config.blocks)
            .map(|i| BlockParams::new(&format!("segnet.block{i}"), rng, config.channels))
            .collect();
        let head = Linear::new("segnet.head", rng, config.channels, config.part_count);
        Ok(Self {
            config,
            lift,
            blocks,
            head,
        })
    }

    /// Per-site logits (A×P); softmax the result for posteriors.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        vox: &Voxelized,
    ) -> Result<TensorRef> {
        let sites = &vox.grid.sites;
        if sites.resolution() != self.config.resolution {
            return Err(Error::Config(format!(
                "grid resolution {} does not match network resolution {}",
                sites.resolution(),
                self.config.resolution
            )));
        }
        let feats = tape.constant(vox.grid.features_tensor());
        let lifted = sparse_conv_valid(tape, binder, sites, feats, &self.lift)?;
        let mut x = tape.relu(lifted);
        for block in &self.blocks {
            let y = receptive_block(tape, binder, sites, x, block)?;
            x = tape.relu(y);
        }
        self.head.forward(tape, binder, x)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.lift.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.lift.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
