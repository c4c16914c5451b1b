//! Corner-sampled SDF grids.
//!
//! Sample `(i, j, k)` sits at `lo + (i, j, k) · (hi - lo) / (R - 1)` and is
//! stored at `(k·R + j)·R + i`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::vec3::Point;
use super::GeometryError;

pub const GRID_MAGIC: &[u8; 4] = b"VHGR";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: Point,
    pub hi: Point,
}

impl Bounds {
    pub fn new(lo: Point, hi: Point) -> Result<Self, GeometryError> {
        if (0..3).any(|a| !(hi[a] > lo[a]) || !lo[a].is_finite() || !hi[a].is_finite()) {
            return Err(GeometryError::InvalidGrid(format!("empty bounds {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            lo: [-half; 3],
            hi: [half; 3],
        }
    }

    /// Grow every side by `frac` of its length about the center.
    pub fn dilate(&self, frac: f64) -> Self {
        let mut b = *self;
        for a in 0..3 {
            let pad = (self.hi[a] - self.lo[a]) * frac * 0.5;
            b.lo[a] -= pad;
            b.hi[a] += pad;
        }
        b
    }

    pub fn union(&self, other: &Bounds) -> Self {
        let mut b = *self;
        for a in 0..3 {
            b.lo[a] = b.lo[a].min(other.lo[a]);
            b.hi[a] = b.hi[a].max(other.hi[a]);
        }
        b
    }

    pub fn diagonal(&self) -> f64 {
        super::vec3::norm(super::vec3::sub(self.hi, self.lo))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub resolution: usize,
    pub bounds: Bounds,
    pub values: Vec<f32>,
}

impl SdfGrid {
    pub fn new(resolution: usize, bounds: Bounds, values: Vec<f32>) -> Result<Self, GeometryError> {
        if resolution < 2 {
            return Err(GeometryError::InvalidGrid(format!("resolution {resolution} < 2")));
        }
        if values.len() != resolution.pow(3) {
            return Err(GeometryError::InvalidGrid(format!(
                "{} values for resolution {resolution}",
                values.len()
            )));
        }
        Ok(Self {
            resolution,
            bounds,
            values,
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    pub fn spacing(&self) -> Point {
        grid_spacing(self.resolution, &self.bounds)
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Point {
        grid_point(self.resolution, &self.bounds, i, j, k)
    }

    pub fn cell_diagonal(&self) -> f64 {
        super::vec3::norm(self.spacing())
    }

    pub fn min_value(&self) -> f32 {
        self.values.iter().cloned().fold(f32::INFINITY, f32::min)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        for v in self.bounds.lo.iter().chain(&self.bounds.hi) {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < 56 || &bytes[..4] != GRID_MAGIC {
            return Err(GeometryError::Format("not a VHGR grid".into()));
        }
        let r = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let lo = [f(8), f(16), f(24)];
        let hi = [f(32), f(40), f(48)];
        let body = &bytes[56..];
        if body.len() != r.pow(3) * 4 {
            return Err(GeometryError::Format(format!("expected {} values", r.pow(3))));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        SdfGrid::new(r, Bounds::new(lo, hi)?, values)
    }
}

pub fn grid_spacing(r: usize, b: &Bounds) -> Point {
    let n = (r - 1) as f64;
    [(b.hi[0] - b.lo[0]) / n, (b.hi[1] - b.lo[1]) / n, (b.hi[2] - b.lo[2]) / n]
}

#[inline]
pub fn grid_point(r: usize, b: &Bounds, i: usize, j: usize, k: usize) -> Point {
    let h = grid_spacing(r, b);
    [
        b.lo[0] + i as f64 * h[0],
        b.lo[1] + j as f64 * h[1],
        b.lo[2] + k as f64 * h[2],
    ]
}

/// Evaluate `f` at every grid corner, one z-slab per task.
pub fn sdf_to_grid<F>(f: F, resolution: usize, bounds: Bounds) -> Result<SdfGrid, GeometryError>
where
    F: Fn(Point) -> f64 + Sync,
{
    if resolution < 2 {
        return Err(GeometryError::InvalidGrid(format!("resolution {resolution} < 2")));
    }
    let r = resolution;
    let mut values = vec![0f32; r * r * r];
    values.par_chunks_mut(r * r).enumerate().for_each(|(k, slab)| {
        for j in 0..r {
            for i in 0..r {
                slab[j * r + i] = f(grid_point(r, &bounds, i, j, k)) as f32;
            }
        }
    });
    SdfGrid::new(r, bounds, values)
}

/// Fill a grid from a batched evaluator, spending evaluations only near the
/// zero level.
///
/// The index cube is tiled into blocks of at most `block` cells per axis and
/// refined breadth-first. A cell whose eight corners share a sign and all
/// exceed its diagonal in magnitude is far from the surface: its interior
/// takes the trilinear interpolation of the corners (which keeps that sign).
/// Other cells split at their midpoints until they are one grid cell wide.
/// Exact evaluations always replace interpolated values. `eval` receives
/// batches of points and must return one value per point.
pub fn sdf_to_grid_adaptive<F>(
    mut eval: F,
    resolution: usize,
    bounds: Bounds,
    block: usize,
) -> Result<SdfGrid, GeometryError>
where
    F: FnMut(&[Point]) -> Result<Vec<f64>, GeometryError>,
{
    if resolution < 2 || block == 0 {
        return Err(GeometryError::InvalidGrid(format!(
            "resolution {resolution} with block {block}"
        )));
    }
    let r = resolution;
    let h = grid_spacing(r, &bounds);
    let idx = |i: usize, j: usize, k: usize| (k * r + j) * r + i;
    let mut values = vec![f32::NAN; r * r * r];
    let mut exact = vec![false; r * r * r];

    // (lo corner, size) per axis in grid indices.
    let mut cells: Vec<([usize; 3], [usize; 3])> = Vec::new();
    let starts: Vec<usize> = (0..r - 1).step_by(block).collect();
    for &k in &starts {
        for &j in &starts {
            for &i in &starts {
                let lo = [i, j, k];
                let size = lo.map(|c| block.min(r - 1 - c));
                cells.push((lo, size));
            }
        }
    }
    const BATCH: usize = 16_384;
    while !cells.is_empty() {
        let mut ids = Vec::new();
        for (lo, size) in &cells {
            for n in 0..8 {
                let c = [
                    lo[0] + size[0] * (n & 1),
                    lo[1] + size[1] * ((n >> 1) & 1),
                    lo[2] + size[2] * (n >> 2),
                ];
                let id = idx(c[0], c[1], c[2]);
                if !exact[id] {
                    exact[id] = true;
                    ids.push((id, c));
                }
            }
        }
        for chunk in ids.chunks(BATCH) {
            let pts: Vec<Point> = chunk.iter().map(|(_, c)| grid_point(r, &bounds, c[0], c[1], c[2])).collect();
            let vals = eval(&pts)?;
            if vals.len() != pts.len() {
                return Err(GeometryError::InvalidGrid("evaluator returned wrong count".into()));
            }
            for ((id, _), v) in chunk.iter().zip(vals) {
                values[*id] = v as f32;
            }
        }
        let mut next = Vec::new();
        for (lo, size) in cells {
            if size.iter().all(|&s| s <= 1) {
                continue;
            }
            let mut c = [0.0f64; 8];
            for (n, v) in c.iter_mut().enumerate() {
                *v = values[idx(
                    lo[0] + size[0] * (n & 1),
                    lo[1] + size[1] * ((n >> 1) & 1),
                    lo[2] + size[2] * (n >> 2),
                )] as f64;
            }
            let diag = super::vec3::norm([h[0] * size[0] as f64, h[1] * size[1] as f64, h[2] * size[2] as f64]);
            let far = c.iter().all(|v| v.abs() > diag) && c.iter().all(|v| (*v < 0.0) == (c[0] < 0.0));
            if far {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                for dk in 0..=size[2] {
                    for dj in 0..=size[1] {
                        for di in 0..=size[0] {
                            let id = idx(lo[0] + di, lo[1] + dj, lo[2] + dk);
                            if exact[id] {
                                continue;
                            }
                            let (x, y, z) = (
                                di as f64 / size[0] as f64,
                                dj as f64 / size[1] as f64,
                                dk as f64 / size[2] as f64,
                            );
                            let v = lerp(
                                lerp(lerp(c[0], c[1], x), lerp(c[2], c[3], x), y),
                                lerp(lerp(c[4], c[5], x), lerp(c[6], c[7], x), y),
                                z,
                            );
                            values[id] = v as f32;
                        }
                    }
                }
                continue;
            }
            let halves = |a: usize| {
                if size[a] <= 1 {
                    vec![(lo[a], size[a])]
                } else {
                    let m = size[a] / 2;
                    vec![(lo[a], m), (lo[a] + m, size[a] - m)]
                }
            };
            for &(z, sz) in &halves(2) {
                for &(y, sy) in &halves(1) {
                    for &(x, sx) in &halves(0) {
                        next.push(([x, y, z], [sx, sy, sz]));
                    }
                }
            }
        }
        cells = next;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("grid value".into()));
    }
    SdfGrid::new(r, bounds, values)
}

/// `|pred<0 ∧ gt<0| / |pred<0 ∨ gt<0|`, 1 when both are empty.
pub fn iou_grid(pred: &SdfGrid, gt: &SdfGrid) -> Result<f64, GeometryError> {
    if pred.resolution != gt.resolution || pred.bounds != gt.bounds {
        return Err(GeometryError::InvalidGrid("grids differ in resolution or bounds".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.values.iter().zip(&gt.values) {
        let (a, b) = (*a < 0.0, *b < 0.0);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
