//! Connected-component segmentation of the PADP.
//!
//! Threshold above the noise floor, close small gaps, label 8-connected
//! components and keep those with at least `n_min` cells. Rows are delay bins
//! and columns are rotation angles; the angle axis may wrap at 360°.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::padp::Padp;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("mask has {} bits, expected {rows} x {cols}", bits.len())));
        }
        Ok(Self { rows, cols, bits })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::new(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Bit at `(i, j)` with out-of-range rows reading as `pad` and columns
    /// wrapping when `wrap` is set.
    #[inline]
    fn read(&self, i: isize, j: isize, wrap: bool, pad: bool) -> bool {
        if i < 0 || i >= self.rows as isize {
            return pad;
        }
        let j = if wrap {
            j.rem_euclid(self.cols as isize)
        } else if j < 0 || j >= self.cols as isize {
            return pad;
        } else {
            j
        };
        self.get(i as usize, j as usize)
    }
}

/// Offsets `(di, dj)` relative to the origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    /// Solid `(2r+1) × (2r+1)` square.
    pub fn square(radius: usize) -> Self {
        let r = radius as isize;
        Self { offsets: (-r..=r).flat_map(|di| (-r..=r).map(move |dj| (di, dj))).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() {
            return Err(Error::InvalidConfig("structuring element is empty".into()));
        }
        Ok(())
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square(1)
    }
}

/// `P > noise_floor + margin`, strictly.
pub fn threshold_mask<T: Real>(padp: &Padp<T>, margin_db: T) -> BinaryMask {
    let th = padp.noise_floor_db + margin_db;
    BinaryMask {
        rows: padp.n_delay(),
        cols: padp.n_angles(),
        bits: padp.power_db.iter().map(|&p| p > th).collect(),
    }
}

/// `(X ⊕ S)(p) = ∃ s ∈ S: X(p − s)`, background outside the image.
pub fn dilate(mask: &BinaryMask, se: &StructuringElement, wrap: bool) -> BinaryMask {
    let mut out = BinaryMask::new(mask.rows, mask.cols);
    for i in 0..mask.rows {
        for j in 0..mask.cols {
            let hit = se.offsets.iter().any(|&(di, dj)| mask.read(i as isize - di, j as isize - dj, wrap, false));
            out.set(i, j, hit);
        }
    }
    out
}

/// `(X ⊖ S)(p) = ∀ s ∈ S: X(p + s)`, foreground outside the image.
pub fn erode(mask: &BinaryMask, se: &StructuringElement, wrap: bool) -> BinaryMask {
    let mut out = BinaryMask::new(mask.rows, mask.cols);
    for i in 0..mask.rows {
        for j in 0..mask.cols {
            let all = se.offsets.iter().all(|&(di, dj)| mask.read(i as isize + di, j as isize + dj, wrap, true));
            out.set(i, j, all);
        }
    }
    out
}

/// Dilation followed by erosion with the same element.
pub fn morphological_close(mask: &BinaryMask, se: &StructuringElement, wrap: bool) -> BinaryMask {
    erode(&dilate(mask, se, wrap), se, wrap)
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Label image: 0 is background, components are numbered `1..=count` in
/// raster order of their first cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u32>,
    pub count: u32,
}

impl Labeling {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.cols + j]
    }
}

/// 8-connected component labeling.
pub fn label_components(mask: &BinaryMask, wrap: bool) -> Labeling {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut uf = UnionFind::new(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            if !mask.get(i, j) {
                continue;
            }
            let here = (i * cols + j) as u32;
            // Forward half of the neighbourhood; the rest is covered by symmetry.
            for (di, dj) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let ni = i as isize + di;
                let mut nj = j as isize + dj;
                if ni >= rows as isize {
                    continue;
                }
                if wrap {
                    nj = nj.rem_euclid(cols as isize);
                } else if nj < 0 || nj >= cols as isize {
                    continue;
                }
                if mask.get(ni as usize, nj as usize) {
                    uf.union(here, (ni as usize * cols + nj as usize) as u32);
                }
            }
        }
    }
    let mut labels = vec![0u32; rows * cols];
    let mut root_label = vec![0u32; rows * cols];
    let mut count = 0;
    for idx in 0..rows * cols {
        if mask.bits[idx] {
            let root = uf.find(idx as u32) as usize;
            if root_label[root] == 0 {
                count += 1;
                root_label[root] = count;
            }
            labels[idx] = root_label[root];
        }
    }
    Labeling { rows, cols, labels, count }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCell<T> {
    pub i: usize,
    pub j: usize,
    pub tau_s: T,
    pub theta_deg: T,
    pub power_db: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub i_min: usize,
    pub i_max: usize,
    pub j_min: usize,
    pub j_max: usize,
}

/// One retained connected component.
#[derive(Debug, Clone, PartialEq)]
pub struct Region<T> {
    pub label: u32,
    /// Raster order.
    pub cells: Vec<RegionCell<T>>,
    pub bbox: BoundingBox,
    pub peak_power_db: T,
}

impl<T: Real> Region<T> {
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }
}

/// Drops components smaller than `n_min` and renumbers the rest `1..=K`.
pub fn extract_regions<T: Real>(labeling: &Labeling, padp: &Padp<T>, n_min: usize) -> Vec<Region<T>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); labeling.count as usize];
    for (idx, &l) in labeling.labels.iter().enumerate() {
        if l > 0 {
            members[l as usize - 1].push(idx);
        }
    }
    let cols = labeling.cols;
    members
        .into_iter()
        .filter(|m| m.len() >= n_min && !m.is_empty())
        .enumerate()
        .map(|(k, m)| {
            let cells: Vec<RegionCell<T>> = m
                .iter()
                .map(|&idx| {
                    let (i, j) = (idx / cols, idx % cols);
                    RegionCell {
                        i,
                        j,
                        tau_s: padp.delay_grid_s[i],
                        theta_deg: padp.angle_grid_deg[j],
                        power_db: padp.power_db[idx],
                    }
                })
                .collect();
            let bbox = BoundingBox {
                i_min: cells.iter().map(|c| c.i).min().unwrap_or(0),
                i_max: cells.iter().map(|c| c.i).max().unwrap_or(0),
                j_min: cells.iter().map(|c| c.j).min().unwrap_or(0),
                j_max: cells.iter().map(|c| c.j).max().unwrap_or(0),
            };
            let peak_power_db = cells.iter().map(|c| c.power_db).fold(T::neg_infinity(), T::max);
            Region { label: k as u32 + 1, cells, bbox, peak_power_db }
        })
        .collect()
}

/// Row-major label map of the retained regions (0 outside).
pub fn region_label_map<T: Real>(regions: &[Region<T>], rows: usize, cols: usize) -> Vec<u32> {
    let mut map = vec![0u32; rows * cols];
    for r in regions {
        for c in &r.cells {
            map[c.i * cols + c.j] = r.label;
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationSettings {
    pub margin_db: f64,
    pub n_min: usize,
    pub structuring_element: StructuringElement,
    pub wrap_angles: bool,
}

impl Default for SegmentationSettings {
    fn default() -> Self {
        Self { margin_db: 10.0, n_min: 20, structuring_element: StructuringElement::default(), wrap_angles: true }
    }
}

/// Threshold, close, label and filter in one call.
pub fn segment<T: Real>(padp: &Padp<T>, settings: &SegmentationSettings) -> Result<(Labeling, Vec<Region<T>>)> {
    settings.structuring_element.validate()?;
    let mask = threshold_mask(padp, T::lit(settings.margin_db));
    let closed = morphological_close(&mask, &settings.structuring_element, settings.wrap_angles);
    let labeling = label_components(&closed, settings.wrap_angles);
    let regions = extract_regions(&labeling, padp, settings.n_min);
    Ok((labeling, regions))
}
