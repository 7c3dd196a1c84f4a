//! Hierarchical three-label occupancy grids.
//!
//! A pyramid of five levels at resolutions 16³ through 256³. Every cell
//! carries an occupancy probability and a label derived from it — free,
//! boundary, or occupied — and only boundary cells may be refined into
//! eight children at the next level. Composition walks each fine voxel down
//! to the deepest prediction covering it and thresholds that cell's
//! probability at 0.5.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Level resolutions per axis, coarsest first.
pub const LEVEL_RESOLUTIONS: [usize; 5] = [16, 32, 64, 128, 256];

/// Number of pyramid levels.
pub const LEVELS: usize = 5;

/// Three-way cell classification.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CellLabel {
    Free,
    Boundary,
    Occupied,
}

/// Probability thresholds that derive labels; defaults 0.25 / 0.75.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LabelThresholds {
    pub free_below: f64,
    pub occupied_above: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            free_below: 0.25,
            occupied_above: 0.75,
        }
    }
}

impl LabelThresholds {
    pub fn label(&self, p: f64) -> CellLabel {
        if p < self.free_below {
            CellLabel::Free
        } else if p > self.occupied_above {
            CellLabel::Occupied
        } else {
            CellLabel::Boundary
        }
    }
}

/// One pyramid cell.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Cell {
    pub p: f64,
    pub label: CellLabel,
    pub refined: bool,
}

/// The five-level pyramid. Level 0 is dense; upper levels exist only under
/// refined boundary parents.
#[derive(Clone, Debug)]
pub struct HierGrid {
    level0: Vec<Cell>,
    upper: [HashMap<[u16; 3], Cell>; 4],
    pub thresholds: LabelThresholds,
}

fn level0_index(site: [u16; 3]) -> usize {
    (site[0] as usize * 16 + site[1] as usize) * 16 + site[2] as usize
}

impl HierGrid {
    /// Dense level-0 grid from 16³ probabilities in x-major order.
    pub fn from_level0(probs: &[f64], thresholds: LabelThresholds) -> Result<Self> {
        if probs.len() != 16 * 16 * 16 {
            return Err(Error::Grid(format!(
                "level 0 wants 4096 probabilities, got {}",
                probs.len()
            )));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Grid(format!("probability {p} at cell {i} outside [0, 1]")));
            }
        }
        let level0 = probs
            .iter()
            .map(|&p| Cell {
                p,
                label: thresholds.label(p),
                refined: false,
            })
            .collect();
        Ok(Self {
            level0,
            upper: Default::default(),
            thresholds,
        })
    }

    /// All level-0 cells at one probability.
    pub fn uniform(p: f64, thresholds: LabelThresholds) -> Result<Self> {
        Self::from_level0(&vec![p; 4096], thresholds)
    }

    pub fn resolution(level: usize) -> usize {
        LEVEL_RESOLUTIONS[level]
    }

    fn check_site(level: usize, site: [u16; 3]) -> Result<()> {
        if level >= LEVELS {
            return Err(Error::Grid(format!("level {level} out of range")));
        }
        let r = LEVEL_RESOLUTIONS[level] as u16;
        if site.iter().any(|&s| s >= r) {
            return Err(Error::Grid(format!(
                "site {site:?} outside {r}^3 at level {level}"
            )));
        }
        Ok(())
    }

    /// Look up a cell, if it has been materialized.
    pub fn cell(&self, level: usize, site: [u16; 3]) -> Option<&Cell> {
        if Self::check_site(level, site).is_err() {
            return None;
        }
        if level == 0 {
            Some(&self.level0[level0_index(site)])
        } else {
            self.upper[level - 1].get(&site)
        }
    }

    fn cell_mut(&mut self, level: usize, site: [u16; 3]) -> Option<&mut Cell> {
        if Self::check_site(level, site).is_err() {
            return None;
        }
        if level == 0 {
            Some(&mut self.level0[level0_index(site)])
        } else {
            self.upper[level - 1].get_mut(&site)
        }
    }

    /// Update a cell's probability (and its derived label).
    ///
    /// A refined cell must stay in the boundary band: only boundary cells
    /// spawn children.
    pub fn set_prob(&mut self, level: usize, site: [u16; 3], p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Grid(format!("probability {p} outside [0, 1]")));
        }
        let thresholds = self.thresholds;
        let cell = self
            .cell_mut(level, site)
            .ok_or_else(|| Error::Grid(format!("no cell at level {level} site {site:?}")))?;
        let label = thresholds.label(p);
        if cell.refined && label != CellLabel::Boundary {
            return Err(Error::Refinement(format!(
                "cell at level {level} site {site:?} is refined; p = {p} would leave the boundary band"
            )));
        }
        cell.p = p;
        cell.label = label;
        Ok(())
    }

    /// Refine a boundary cell: mark it refined and materialize its eight
    /// children at the next level, each starting from the parent's
    /// probability. Refining an already-refined cell is a no-op.
    pub fn refine(&mut self, level: usize, site: [u16; 3]) -> Result<()> {
        Self::check_site(level, site)?;
        if level + 1 >= LEVELS {
            return Err(Error::MaxDepth { level });
        }
        let cell = *self
            .cell(level, site)
            .ok_or_else(|| Error::Refinement(format!("no cell at level {level} site {site:?}")))?;
        if cell.label != CellLabel::Boundary {
            return Err(Error::Refinement(format!(
                "cell at level {level} site {site:?} has label {:?}, only boundary cells refine",
                cell.label
            )));
        }
        if cell.refined {
            return Ok(());
        }
        self.cell_mut(level, site).expect("checked").refined = true;
        let child_label = self.thresholds.label(cell.p);
        for dx in 0..2u16 {
            for dy in 0..2u16 {
                for dz in 0..2u16 {
                    let child = [site[0] * 2 + dx, site[1] * 2 + dy, site[2] * 2 + dz];
                    self.upper[level].insert(
                        child,
                        Cell {
                            p: cell.p,
                            label: child_label,
                            refined: false,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    /// Total materialized cells across all levels.
    pub fn cell_count(&self) -> usize {
        4096 + self.upper.iter().map(|m| m.len()).sum::<usize>()
    }

    /// Refined cells across all levels.
    pub fn refined_count(&self) -> usize {
        self.level0.iter().filter(|c| c.refined).count()
            + self
                .upper
                .iter()
                .map(|m| m.values().filter(|c| c.refined).count())
                .sum::<usize>()
    }

    /// Cells of one level as `(site, cell)` pairs, sorted by site.
    pub fn level_cells(&self, level: usize) -> Vec<([u16; 3], Cell)> {
        let mut out: Vec<([u16; 3], Cell)> = if level == 0 {
            let mut v = Vec::with_capacity(4096);
            for x in 0..16u16 {
                for y in 0..16u16 {
                    for z in 0..16u16 {
                        v.push(([x, y, z], self.level0[level0_index([x, y, z])]));
                    }
                }
            }
            v
        } else {
            self.upper[level - 1].iter().map(|(&s, &c)| (s, c)).collect()
        };
        out.sort_by_key(|&(s, _)| s);
        out
    }

    /// Compose the pyramid into a dense 256³ binary occupancy grid: every
    /// fine voxel takes the deepest available prediction covering it,
    /// thresholded at 0.5.
    pub fn compose_full(&self) -> DenseGrid {
        let mut out = DenseGrid::new([256, 256, 256]);
        for x in 0..16u16 {
            for y in 0..16u16 {
                for z in 0..16u16 {
                    let site = [x, y, z];
                    self.fill_block(0, site, &mut out);
                }
            }
        }
        out
    }

    fn fill_block(&self, level: usize, site: [u16; 3], out: &mut DenseGrid) {
        let cell = self.cell(level, site).expect("pyramid invariant: cell exists");
        if cell.refined && level + 1 < LEVELS {
            for dx in 0..2u16 {
                for dy in 0..2u16 {
                    for dz in 0..2u16 {
                        self.fill_block(
                            level + 1,
                            [site[0] * 2 + dx, site[1] * 2 + dy, site[2] * 2 + dz],
                            out,
                        );
                    }
                }
            }
            return;
        }
        if cell.p >= 0.5 {
            let scale = 256 / LEVEL_RESOLUTIONS[level];
            let base = [
                site[0] as usize * scale,
                site[1] as usize * scale,
                site[2] as usize * scale,
            ];
            for vx in base[0]..base[0] + scale {
                for vy in base[1]..base[1] + scale {
                    out.set_run(vx, vy, base[2], scale, true);
                }
            }
        }
    }

    /// Occupancy of one 256³ voxel by the naive per-voxel walk. This is the
    /// definition `compose_full` must agree with.
    pub fn occupancy_at(&self, v: [usize; 3]) -> bool {
        let mut level = 0;
        loop {
            let shift = 4 - level;
            let site = [
                (v[0] >> shift) as u16,
                (v[1] >> shift) as u16,
                (v[2] >> shift) as u16,
            ];
            let cell = self.cell(level, site).expect("pyramid invariant");
            if cell.refined && level + 1 < LEVELS {
                level += 1;
                continue;
            }
            return cell.p >= 0.5;
        }
    }
}

// ---- dense binary grids ----

/// Dense binary occupancy grid backed by a bitset; z varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    dims: [usize; 3],
    bits: Vec<u64>,
}

impl DenseGrid {
    pub fn new(dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            bits: vec![0; n.div_ceil(64)],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let i = self.index(x, y, z);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        if value {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Set `len` consecutive voxels along z starting at `(x, y, z)`.
    pub fn set_run(&mut self, x: usize, y: usize, z: usize, len: usize, value: bool) {
        for dz in 0..len {
            self.set(x, y, z + dz, value);
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Bit-for-bit equality of occupancy.
    pub fn same_as(&self, other: &DenseGrid) -> bool {
        self.dims == other.dims && self.bits == other.bits
    }
}

/// Intersection over union of two same-shaped binary grids.
/// Two empty grids score 1.0.
pub fn voxel_iou(a: &DenseGrid, b: &DenseGrid) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            op: "voxel_iou",
            left: a.dims.to_vec(),
            right: b.dims.to_vec(),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (wa, wb) in a.bits.iter().zip(&b.bits) {
        inter += (wa & wb).count_ones() as usize;
        union += (wa | wb).count_ones() as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

// ---- file formats ----

const RLE_MAGIC: &[u8; 4] = b"PSRL";
const RAW_MAGIC: &[u8; 4] = b"PSRW";

/// Write a dense grid as run-length-encoded binary.
///
/// Header: magic `PSRL`, version u32, dims u64×3, run count u64; then per
/// run a value byte and a u64 length, covering the grid in z-fastest order.
pub fn write_rle(path: impl AsRef<Path>, grid: &DenseGrid) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    let mut runs: Vec<(u8, u64)> = Vec::new();
    let n = grid.voxel_count();
    let mut i = 0usize;
    while i < n {
        let v = grid.bits[i / 64] >> (i % 64) & 1;
        let mut len = 1u64;
        while i + (len as usize) < n {
            let j = i + len as usize;
            if grid.bits[j / 64] >> (j % 64) & 1 != v {
                break;
            }
            len += 1;
        }
        runs.push((v as u8, len));
        i += len as usize;
    }

    w.write_all(RLE_MAGIC).map_err(io_err)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
    for d in grid.dims {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(runs.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (v, len) in runs {
        w.write_all(&[v]).map_err(io_err)?;
        w.write_all(&len.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Write a dense grid as one 0/1 byte per voxel (oracle cross-check format).
pub fn write_raw(path: impl AsRef<Path>, grid: &DenseGrid) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(RAW_MAGIC).map_err(io_err)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
    for d in grid.dims {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    let n = grid.voxel_count();
    let mut bytes = vec![0u8; n];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = (grid.bits[i / 64] >> (i % 64) & 1) as u8;
    }
    w.write_all(&bytes).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Read a dense grid file in either format (detected by magic).
pub fn read_dense_grid(path: impl AsRef<Path>) -> Result<DenseGrid> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::Grid(format!("{}: {m}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    if u32::from_le_bytes(u32buf) != 1 {
        return Err(bad("unsupported version"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        *d = u64::from_le_bytes(b) as usize;
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| bad("dims overflow"))?;
    let mut grid = DenseGrid::new(dims);
    match &magic {
        m if m == RLE_MAGIC => {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            let run_count = u64::from_le_bytes(b) as usize;
            let mut i = 0usize;
            for _ in 0..run_count {
                let mut vb = [0u8; 1];
                r.read_exact(&mut vb).map_err(|e| Error::io(path, e))?;
                let mut lb = [0u8; 8];
                r.read_exact(&mut lb).map_err(|e| Error::io(path, e))?;
                let len = u64::from_le_bytes(lb) as usize;
                if i + len > n {
                    return Err(bad("runs exceed grid size"));
                }
                if vb[0] == 1 {
                    for j in i..i + len {
                        grid.bits[j / 64] |= 1 << (j % 64);
                    }
                } else if vb[0] != 0 {
                    return Err(bad("run value must be 0 or 1"));
                }
                i += len;
            }
            if i != n {
                return Err(bad("runs do not cover the grid"));
            }
        }
        m if m == RAW_MAGIC => {
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
            for (i, &b) in bytes.iter().enumerate() {
                match b {
                    0 => {}
                    1 => grid.bits[i / 64] |= 1 << (i % 64),
                    _ => return Err(bad("voxel byte must be 0 or 1")),
                }
            }
        }
        _ => return Err(bad("unknown magic")),
    }
    Ok(grid)
}

/// Write a hierarchy as text: a header line, then one
/// `level i j k p refined` line per materialized cell.
pub fn write_hier(path: impl AsRef<Path>, hg: &HierGrid) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("hsp-hier v1\n");
    out.push_str(&format!(
        "thresholds {} {}\n",
        hg.thresholds.free_below, hg.thresholds.occupied_above
    ));
    for level in 0..LEVELS {
        for (site, cell) in hg.level_cells(level) {
            out.push_str(&format!(
                "{level} {} {} {} {} {}\n",
                site[0],
                site[1],
                site[2],
                cell.p,
                cell.refined as u8
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a hierarchy file, validating the pyramid invariants: level 0 dense,
/// children only under refined boundary parents.
pub fn read_hier(path: impl AsRef<Path>) -> Result<HierGrid> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty hierarchy file".into()))?;
    if header.trim() != "hsp-hier v1" {
        return Err(perr(1, format!("bad header '{header}'")));
    }

    let mut thresholds = LabelThresholds::default();
    let mut cells: Vec<(usize, [u16; 3], f64, bool)> = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "thresholds" {
            if fields.len() != 3 {
                return Err(perr(lineno + 1, "thresholds wants two values".into()));
            }
            thresholds = LabelThresholds {
                free_below: fields[1]
                    .parse()
                    .map_err(|_| perr(lineno + 1, "bad threshold".into()))?,
                occupied_above: fields[2]
                    .parse()
                    .map_err(|_| perr(lineno + 1, "bad threshold".into()))?,
            };
            continue;
        }
        if fields.len() != 6 {
            return Err(perr(
                lineno + 1,
                "expected 'level i j k p refined'".into(),
            ));
        }
        let level: usize = fields[0]
            .parse()
            .map_err(|_| perr(lineno + 1, "bad level".into()))?;
        if level >= LEVELS {
            return Err(perr(lineno + 1, format!("level {level} out of range")));
        }
        let mut site = [0u16; 3];
        for (d, s) in site.iter_mut().enumerate() {
            *s = fields[1 + d]
                .parse()
                .map_err(|_| perr(lineno + 1, "bad site".into()))?;
        }
        let p: f64 = fields[4]
            .parse()
            .map_err(|_| perr(lineno + 1, "bad probability".into()))?;
        let refined = match fields[5] {
            "0" => false,
            "1" => true,
            other => return Err(perr(lineno + 1, format!("bad refined flag '{other}'"))),
        };
        cells.push((level, site, p, refined));
    }

    // level 0 first
    let mut level0 = vec![None; 4096];
    for &(level, site, p, _) in &cells {
        if level == 0 {
            HierGrid::check_site(0, site).map_err(|e| Error::Grid(e.to_string()))?;
            level0[level0_index(site)] = Some(p);
        }
    }
    if level0.iter().any(|c| c.is_none()) {
        return Err(Error::Grid(format!(
            "{}: level 0 must list all 4096 cells",
            path.display()
        )));
    }
    let probs: Vec<f64> = level0.into_iter().map(|c| c.unwrap()).collect();
    let mut hg = HierGrid::from_level0(&probs, thresholds)?;

    // refine top-down so parents exist before children are touched
    for level in 0..LEVELS {
        for &(l, site, _, refined) in &cells {
            if l == level && refined {
                hg.refine(level, site)?;
            }
        }
        // overwrite the child probabilities the file specifies
        if level + 1 < LEVELS {
            for &(l, site, p, _) in &cells {
                if l == level + 1 {
                    if hg.cell(l, site).is_none() {
                        return Err(Error::Grid(format!(
                            "{}: cell at level {l} site {site:?} has no refined parent",
                            path.display()
                        )));
                    }
                    hg.set_prob(l, site, p)?;
                }
            }
        }
    }
    Ok(hg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn boundary_grid() -> HierGrid {
        HierGrid::uniform(0.5, LabelThresholds::default()).unwrap()
    }

    #[test]
    fn refine_materializes_children() {
        let mut hg = boundary_grid();
        hg.refine(0, [3, 4, 5]).unwrap();
        for dx in 0..2u16 {
            for dy in 0..2u16 {
                for dz in 0..2u16 {
                    let c = hg.cell(1, [6 + dx, 8 + dy, 10 + dz]).unwrap();
                    assert_eq!(c.p, 0.5);
                    assert_eq!(c.label, CellLabel::Boundary);
                }
            }
        }
        assert_eq!(hg.cell_count(), 4096 + 8);
    }

    #[test]
    fn refine_is_idempotent() {
        let mut hg = boundary_grid();
        hg.refine(0, [0, 0, 0]).unwrap();
        hg.set_prob(1, [0, 0, 0], 0.9).unwrap();
        hg.refine(0, [0, 0, 0]).unwrap();
        // the second refine must not reset the child
        assert_eq!(hg.cell(1, [0, 0, 0]).unwrap().p, 0.9);
        assert_eq!(hg.cell_count(), 4096 + 8);
    }

    #[test]
    fn refine_rejects_non_boundary() {
        let mut hg = HierGrid::uniform(0.9, LabelThresholds::default()).unwrap();
        let err = hg.refine(0, [1, 1, 1]).unwrap_err();
        assert!(matches!(err, Error::Refinement(_)));
    }

    #[test]
    fn refine_rejects_max_depth() {
        let mut hg = boundary_grid();
        hg.refine(0, [0, 0, 0]).unwrap();
        hg.refine(1, [0, 0, 0]).unwrap();
        hg.refine(2, [0, 0, 0]).unwrap();
        hg.refine(3, [0, 0, 0]).unwrap();
        let err = hg.refine(4, [0, 0, 0]).unwrap_err();
        assert!(matches!(err, Error::MaxDepth { level: 4 }));
    }

    #[test]
    fn compose_all_occupied_and_all_free() {
        let hg = HierGrid::uniform(1.0, LabelThresholds::default()).unwrap();
        let grid = hg.compose_full();
        assert_eq!(grid.count_ones(), 256 * 256 * 256);
        let hg = HierGrid::uniform(0.0, LabelThresholds::default()).unwrap();
        assert_eq!(hg.compose_full().count_ones(), 0);
    }

    #[test]
    fn compose_matches_oracle_on_random_hierarchy() {
        let mut rng = StreamRng::new(77, "hier");
        let hg = random_hierarchy(&mut rng, 40);
        let composed = hg.compose_full();
        let mut checked = 0usize;
        for _ in 0..20_000 {
            let v = [rng.index(256), rng.index(256), rng.index(256)];
            assert_eq!(composed.get(v[0], v[1], v[2]), hg.occupancy_at(v));
            checked += 1;
        }
        assert_eq!(checked, 20_000);
    }

    pub(crate) fn random_hierarchy(rng: &mut StreamRng, refinements: usize) -> HierGrid {
        let probs: Vec<f64> = (0..4096).map(|_| rng.uniform(0.0, 1.0)).collect();
        let mut hg = HierGrid::from_level0(&probs, LabelThresholds::default()).unwrap();
        for _ in 0..refinements {
            // pick a random boundary, unrefined, non-max-depth cell
            let mut candidates: Vec<(usize, [u16; 3])> = Vec::new();
            for level in 0..LEVELS - 1 {
                for (site, cell) in hg.level_cells(level) {
                    if cell.label == CellLabel::Boundary && !cell.refined {
                        candidates.push((level, site));
                    }
                }
            }
            if candidates.is_empty() {
                break;
            }
            let (level, site) = candidates[rng.index(candidates.len())];
            hg.refine(level, site).unwrap();
            // scatter the children's probabilities
            for dx in 0..2u16 {
                for dy in 0..2u16 {
                    for dz in 0..2u16 {
                        let child = [site[0] * 2 + dx, site[1] * 2 + dy, site[2] * 2 + dz];
                        let p = rng.uniform(0.0, 1.0);
                        let _ = hg.set_prob(level + 1, child, p);
                    }
                }
            }
        }
        hg
    }

    #[test]
    fn memory_bound_holds() {
        let mut rng = StreamRng::new(5, "hier");
        let hg = random_hierarchy(&mut rng, 60);
        assert!(hg.cell_count() <= 4096 + 8 * hg.refined_count());
    }

    #[test]
    fn iou_basic_cases() {
        let mut a = DenseGrid::new([4, 4, 4]);
        let mut b = DenseGrid::new([4, 4, 4]);
        assert_eq!(voxel_iou(&a, &b).unwrap(), 1.0);
        a.set(0, 0, 0, true);
        assert_eq!(voxel_iou(&a, &b).unwrap(), 0.0);
        b.set(0, 0, 0, true);
        assert_eq!(voxel_iou(&a, &b).unwrap(), 1.0);
        b.set(1, 1, 1, true);
        assert_eq!(voxel_iou(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn iou_nested_cubes() {
        let mut a = DenseGrid::new([8, 8, 8]);
        let mut b = DenseGrid::new([8, 8, 8]);
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    a.set(x, y, z, true);
                }
            }
        }
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    b.set(x, y, z, true);
                }
            }
        }
        assert_eq!(voxel_iou(&a, &b).unwrap(), 8.0 / 64.0);
    }

    #[test]
    fn iou_shape_mismatch() {
        let a = DenseGrid::new([4, 4, 4]);
        let b = DenseGrid::new([4, 4, 8]);
        assert!(voxel_iou(&a, &b).is_err());
    }

    #[test]
    fn grid_file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StreamRng::new(3, "grid");
        let mut grid = DenseGrid::new([16, 16, 16]);
        for _ in 0..500 {
            grid.set(rng.index(16), rng.index(16), rng.index(16), true);
        }
        let rle = dir.path().join("g.rle");
        let raw = dir.path().join("g.raw");
        write_rle(&rle, &grid).unwrap();
        write_raw(&raw, &grid).unwrap();
        assert!(read_dense_grid(&rle).unwrap().same_as(&grid));
        assert!(read_dense_grid(&raw).unwrap().same_as(&grid));
    }

    #[test]
    fn hier_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StreamRng::new(9, "hier");
        let hg = random_hierarchy(&mut rng, 25);
        let path = dir.path().join("h.txt");
        write_hier(&path, &hg).unwrap();
        let back = read_hier(&path).unwrap();
        assert!(back.compose_full().same_as(&hg.compose_full()));
        assert_eq!(back.cell_count(), hg.cell_count());
    }

    #[test]
    fn hier_file_rejects_orphan_children() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.txt");
        let mut text = String::from("hsp-hier v1\n");
        for x in 0..16 {
            for y in 0..16 {
                for z in 0..16 {
                    text.push_str(&format!("0 {x} {y} {z} 0.5 0\n"));
                }
            }
        }
        text.push_str("1 0 0 0 0.5 0\n"); // parent not refined
        std::fs::write(&path, text).unwrap();
        assert!(read_hier(&path).is_err());
    }
}
