//! Per-phantom sample pools and step batches.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{contact_regions, Point};
use crate::model::DecodeBatch;
use crate::phantom::{PhantomSpec, CONTACT_TAU_MM, NUM_PARTS};
use crate::rng;

use super::{Result, TrainConfig};

/// Surface pool size as a multiple of the encoder point count.
pub const SURFACE_POOL_FACTOR: usize = 4;
pub const CONTACT_SAMPLES_PER_PART: usize = 3000;

/// A phantom with cached normalized surface pools and contact set.
#[derive(Debug, Clone)]
pub struct PhantomData {
    pub spec: PhantomSpec,
    /// Per part, normalized.
    pub surface: Vec<Vec<Point>>,
    /// Normalized contact points and the parts near each.
    pub contacts: Vec<(Point, Vec<usize>)>,
}

impl PhantomData {
    pub fn new(spec: PhantomSpec, points_per_part: usize) -> Result<Self> {
        let mut r = rng::stream(spec.seed, "surface-pool", 0);
        let he = spec.half_extent();
        let pool = points_per_part * SURFACE_POOL_FACTOR;
        let surface = spec
            .parts
            .iter()
            .map(|p| p.sample_surface(pool, &mut r).iter().map(|q| spec.to_normalized(*q)).collect())
            .collect();
        let mut cr = rng::stream(spec.seed, "contact-pool", 0);
        let samples: Vec<Point> = spec
            .parts
            .iter()
            .flat_map(|p| p.sample_surface(CONTACT_SAMPLES_PER_PART, &mut cr))
            .collect();
        let cs = contact_regions(&spec.parts, &samples, CONTACT_TAU_MM)?;
        let contacts = cs
            .points
            .iter()
            .zip(cs.parts)
            .map(|(q, parts)| ([q[0] / he, q[1] / he, q[2] / he], parts))
            .collect();
        Ok(Self {
            spec,
            surface,
            contacts,
        })
    }

    /// `n` pool points of every part, drawn without replacement.
    pub fn clouds(&self, n: usize, r: &mut impl Rng) -> Vec<Vec<Point>> {
        self.surface
            .iter()
            .map(|pool| {
                let n = n.min(pool.len());
                sample_indices(r, pool.len(), n).iter().map(|i| pool[i]).collect()
            })
            .collect()
    }

    /// Normalized analytic SDF of part `p`.
    pub fn gt_sdf(&self, p: usize, q: Point) -> f64 {
        self.spec.parts[p].sdf(self.spec.to_mm(q)) / self.spec.half_extent()
    }
}

/// Query rows of one step with their loss weights.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub decode: DecodeBatch,
    pub gt: Vec<f32>,
    pub w_sdf: Vec<f32>,
    pub w_inter: Vec<f32>,
    /// Row → (part, is_contact).
    pub rows: Vec<(usize, bool)>,
    pub num_contacts: usize,
}

pub fn step_batch(data: &PhantomData, cfg: &TrainConfig, r: &mut impl Rng) -> StepBatch {
    let near = Normal::new(0.0, cfg.near_std.max(1e-12)).expect("finite std");
    let e = cfg.uniform_extent;
    let nc = cfg.contact_batch.min(data.contacts.len());
    let chosen: Vec<usize> = sample_indices(r, data.contacts.len(), nc).into_vec();
    let mut groups: Vec<Vec<Point>> = vec![Vec::new(); NUM_PARTS];
    let mut is_contact: Vec<Vec<bool>> = vec![Vec::new(); NUM_PARTS];
    for p in 0..NUM_PARTS {
        let pool = &data.surface[p];
        for _ in 0..cfg.near_queries {
            let s = pool[r.gen_range(0..pool.len())];
            groups[p].push([s[0] + near.sample(r), s[1] + near.sample(r), s[2] + near.sample(r)]);
        }
        for _ in 0..cfg.uniform_queries {
            groups[p].push([r.gen_range(-e..e), r.gen_range(-e..e), r.gen_range(-e..e)]);
        }
        is_contact[p] = vec![false; groups[p].len()];
    }
    for &i in &chosen {
        let (q, parts) = &data.contacts[i];
        for &p in parts {
            groups[p].push(*q);
            is_contact[p].push(true);
        }
    }
    let decode = DecodeBatch::per_part(&groups);
    let n = decode.len();
    let mut gt = Vec::with_capacity(n);
    let mut w_sdf = Vec::with_capacity(n);
    let mut w_inter = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for p in 0..NUM_PARTS {
        let n_sdf = is_contact[p].iter().filter(|c| !**c).count().max(1);
        for (q, &c) in groups[p].iter().zip(&is_contact[p]) {
            rows.push((p, c));
            if c {
                gt.push(0.0);
                w_sdf.push(0.0);
                w_inter.push(1.0 / nc as f32);
            } else {
                gt.push(data.gt_sdf(p, *q) as f32);
                w_sdf.push(1.0 / (NUM_PARTS * n_sdf) as f32);
                w_inter.push(0.0);
            }
        }
    }
    StepBatch {
        decode,
        gt,
        w_sdf,
        w_inter,
        rows,
        num_contacts: nc,
    }
}
