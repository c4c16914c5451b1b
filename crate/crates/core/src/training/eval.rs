//! Reconstruction metrics against the analytic ground truth.
//!
//! Predicted grids are filled with the adaptive evaluator in mm; the
//! ground-truth grid is sampled densely from the analytic SDF on the same
//! lattice. Chamfer distance compares area samples of the marching-cubes
//! mesh of the prediction with analytic surface samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    chamfer_distance, iou_grid, marching_cubes, sdf_to_grid, sdf_to_grid_adaptive, Bounds, GeometryError, Mesh, Point,
    SdfGrid,
};
use crate::model::{LatentSet, VecHeart};
use crate::phantom::{PhantomSpec, NUM_PARTS};
use crate::rng;

use super::Result;

/// Fraction by which the union of part boxes is grown.
pub const BOUNDS_MARGIN: f64 = 0.05;
/// Coarsest block of the adaptive evaluator, in cells.
pub const ADAPTIVE_BLOCK: usize = 8;
pub const DEFAULT_CD_SAMPLES: usize = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartMetrics {
    pub part: usize,
    pub cd_mm: f64,
    pub iou: f64,
    pub masked: bool,
}

/// Union of the part bounding boxes grown by [`BOUNDS_MARGIN`], mm.
pub fn eval_bounds(spec: &PhantomSpec) -> Bounds {
    let mut b: Option<Bounds> = None;
    for part in &spec.parts {
        let (lo, hi) = part.bounding_box();
        let pb = Bounds { lo, hi };
        b = Some(match b {
            Some(x) => x.union(&pb),
            None => pb,
        });
    }
    b.expect("phantoms have parts").dilate(BOUNDS_MARGIN)
}

pub fn gt_grid(spec: &PhantomSpec, p: usize, resolution: usize, bounds: Bounds) -> Result<SdfGrid> {
    let part = &spec.parts[p];
    Ok(sdf_to_grid(|q| part.sdf(q), resolution, bounds)?)
}

/// Predicted SDF of part `p` on a grid in mm; `half_extent` converts
/// between mm and normalized units.
pub fn predicted_grid(
    model: &VecHeart,
    processed: &LatentSet,
    p: usize,
    half_extent: f64,
    resolution: usize,
    bounds: Bounds,
) -> Result<SdfGrid> {
    let eval = |pts: &[Point]| -> std::result::Result<Vec<f64>, GeometryError> {
        let norm: Vec<Point> = pts.iter().map(|q| [q[0] / half_extent, q[1] / half_extent, q[2] / half_extent]).collect();
        let v = model
            .decode_part(processed, p, &norm)
            .map_err(|e| GeometryError::NonFinite(e.to_string()))?;
        Ok(v.into_iter().map(|s| s * half_extent).collect())
    };
    Ok(sdf_to_grid_adaptive(eval, resolution, bounds, ADAPTIVE_BLOCK)?)
}

/// Zero-level mesh of every part's prediction inside `bounds`, mm.
pub fn reconstruct_meshes(
    model: &VecHeart,
    processed: &LatentSet,
    half_extent: f64,
    resolution: usize,
    bounds: Bounds,
) -> Result<Vec<(SdfGrid, Mesh)>> {
    (0..NUM_PARTS)
        .into_par_iter()
        .map(|p| {
            let g = predicted_grid(model, processed, p, half_extent, resolution, bounds)?;
            let m = marching_cubes(&g, 0.0);
            Ok((g, m))
        })
        .collect()
}

/// Chamfer distance (mm) between a mesh and the analytic surface of part `p`.
/// An empty mesh gives infinity.
pub fn mesh_chamfer(mesh: &Mesh, spec: &PhantomSpec, p: usize, samples: usize, seed: u64) -> Result<f64> {
    if mesh.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut r = rng::stream(seed, "cd-samples", p as u64);
    let a = mesh.sample_surface(samples, &mut r)?;
    let b = spec.parts[p].sample_surface(samples, &mut r);
    Ok(chamfer_distance(&a, &b)?)
}

/// CD and IoU of reconstructed parts against the analytic phantom. The
/// grids must lie on [`eval_bounds`] of `spec`.
pub fn score_reconstruction(
    recon: &[(SdfGrid, Mesh)],
    spec: &PhantomSpec,
    masked: &[bool; NUM_PARTS],
    cd_samples: usize,
    seed: u64,
) -> Result<Vec<PartMetrics>> {
    recon
        .par_iter()
        .enumerate()
        .map(|(p, (grid, mesh))| {
            let gt = gt_grid(spec, p, grid.resolution, grid.bounds)?;
            Ok(PartMetrics {
                part: p,
                cd_mm: mesh_chamfer(mesh, spec, p, cd_samples, seed)?,
                iou: iou_grid(grid, &gt)?,
                masked: masked[p],
            })
        })
        .collect()
}

/// Reconstruct on [`eval_bounds`] and score every part.
pub fn evaluate_reconstruction(
    model: &VecHeart,
    processed: &LatentSet,
    spec: &PhantomSpec,
    masked: &[bool; NUM_PARTS],
    resolution: usize,
    cd_samples: usize,
    seed: u64,
) -> Result<Vec<PartMetrics>> {
    let recon = reconstruct_meshes(model, processed, spec.half_extent(), resolution, eval_bounds(spec))?;
    score_reconstruction(&recon, spec, masked, cd_samples, seed)
}

pub fn mean_cd(m: &[PartMetrics]) -> f64 {
    m.iter().map(|x| x.cd_mm).sum::<f64>() / m.len().max(1) as f64
}

pub fn mean_iou(m: &[PartMetrics]) -> f64 {
    m.iter().map(|x| x.iou).sum::<f64>() / m.len().max(1) as f64
}

/// `part,CD_mm,IoU,masked_flag` rows.
pub fn metrics_csv(rows: &[PartMetrics]) -> String {
    let mut s = String::from("part,CD_mm,IoU,masked_flag\n");
    for m in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            crate::phantom::PART_NAMES[m.part],
            m.cd_mm,
            m.iou,
            m.masked as u8
        ));
    }
    s
}
