//! Stage I / stage II loops.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::geometry::Point;
use crate::model::{normalize_points, Branch, LatentSet, MaskVector, Provenance, VecHeart};
use crate::phantom::NUM_PARTS;
use crate::rng;
use crate::slicer::corrupted_stack;
use crate::tensor::{AdamConfig, Graph, Var};

use super::data::{step_batch, PhantomData, StepBatch};
use super::{loss_latent_align, LossReport, Result, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub steps: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn first(&self) -> Option<&LossReport> {
        self.curve.first().map(|r| &r.loss)
    }

    pub fn last(&self) -> Option<&LossReport> {
        self.curve.last().map(|r| &r.loss)
    }
}

/// `epoch,l_sdf,l_inter,l_la,total` plus the unnormalized inter sum.
pub fn write_loss_csv(path: impl AsRef<Path>, curve: &[EpochRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,l_sdf,l_inter,l_la,total,l_inter_sum")?;
    for r in curve {
        let l = &r.loss;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, l.l_sdf, l.l_inter, l.l_la, l.total, l.l_inter_sum
        )?;
    }
    w.flush()?;
    Ok(())
}

fn adam(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    }
}

/// SDF and intersection terms on decoded rows. Returns `(l_sdf, l_inter)`.
fn g_supervision(g: &mut Graph, pred: Var, batch: &StepBatch, sigma: f64) -> Result<(Var, Var)> {
    let n = batch.decode.len();
    let gt = g.constant([n, 1], batch.gt.clone())?;
    let w_sdf = g.constant([n, 1], batch.w_sdf.clone())?;
    let w_inter = g.constant([n, 1], batch.w_inter.clone())?;
    let d = g.sub(pred, gt)?;
    let d = g.abs(d);
    let d = g.mul(d, w_sdf)?;
    let l_sdf = g.sum(d);
    let s = g.scale(pred, -sigma as f32);
    let s = g.relu(s);
    let s = g.tanh(s);
    let s = g.mul(s, w_inter)?;
    let l_inter = g.sum(s);
    Ok((l_sdf, l_inter))
}

fn fill_report(g: &Graph, pred: Var, batch: &StepBatch, l_sdf: Var, l_inter: Var, report: &mut LossReport) {
    report.l_sdf = g.scalar(l_sdf) as f64;
    report.l_inter = g.scalar(l_inter) as f64;
    report.l_inter_sum = report.l_inter * batch.num_contacts as f64;
    let vals = g.value(pred);
    let mut sums = [0.0f64; NUM_PARTS];
    let mut counts = [0usize; NUM_PARTS];
    for (i, &(p, contact)) in batch.rows.iter().enumerate() {
        if !contact {
            sums[p] += (vals[i] - batch.gt[i]).abs() as f64;
            counts[p] += 1;
        }
    }
    for p in 0..NUM_PARTS {
        report.per_part_sdf[p] = sums[p] / counts[p].max(1) as f64;
    }
}

fn weighted_total(g: &mut Graph, l_sdf: Var, l_inter: Var, cfg: &TrainConfig) -> Result<Var> {
    if !cfg.use_inter_loss || cfg.inter_weight == 0.0 {
        return Ok(l_sdf);
    }
    let w = g.scale(l_inter, cfg.inter_weight as f32);
    Ok(g.add(l_sdf, w)?)
}

/// One stage-I optimizer step on one phantom.
pub fn stage1_step(
    model: &mut VecHeart,
    data: &PhantomData,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let mut r = rng::stream(cfg.seed, "stage1-step", step as u64);
    let mask = if cfg.force_no_mask {
        MaskVector::none()
    } else {
        MaskVector::sample(&mut r, cfg.p_no_mask)
    };
    let clouds = data.clouds(model.config.points_per_part, &mut r);
    let batch = step_batch(data, cfg, &mut r);
    let refs: Vec<&[Point]> = clouds.iter().map(Vec::as_slice).collect();

    let mut g = Graph::new();
    let (tokens, _) = model.g_latents(&mut g, Branch::Surface, &refs, &mask)?;
    let tokens = model.g_hpt(&mut g, tokens)?;
    let pred = model.g_decode(&mut g, tokens, &batch.decode)?;
    let (l_sdf, l_inter) = g_supervision(&mut g, pred, &batch, cfg.sigma)?;
    let total = weighted_total(&mut g, l_sdf, l_inter, cfg)?;

    let mut report = LossReport::default();
    fill_report(&g, pred, &batch, l_sdf, l_inter, &mut report);
    report.total = g.scalar(total) as f64;
    if !report.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: 0,
            step,
            report: format!("{report:?}"),
        });
    }
    g.backward(total)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&g);
    model.params.adam_step(&adam(cfg));
    Ok(report)
}

/// Surface codes `C_p` of a phantom from `n` pool points per part.
fn surface_codes(model: &VecHeart, data: &PhantomData, r: &mut impl rand::Rng) -> Result<LatentSet> {
    let clouds = data.clouds(model.config.points_per_part, r);
    let refs: Vec<&[Point]> = clouds.iter().map(Vec::as_slice).collect();
    Ok(model.latents(Branch::Surface, &refs, &MaskVector::none())?)
}

/// Normalized per-part slice clouds of a corrupted acquisition.
fn slice_clouds(data: &PhantomData, cfg: &TrainConfig, seed: u64) -> Vec<Vec<Point>> {
    let stack = corrupted_stack(&data.spec, cfg.lambda_max_mm, cfg.lax_drop_p, cfg.slice_samples, seed);
    stack
        .per_part()
        .iter()
        .map(|pts| normalize_points(pts, data.spec.half_extent()))
        .collect()
}

/// One stage-II step: only slice parameters move.
pub fn stage2_step(
    model: &mut VecHeart,
    data: &PhantomData,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let mut r = rng::stream(cfg.seed, "stage2-step", step as u64);
    let target = surface_codes(model, data, &mut r)?;
    let slices = slice_clouds(data, cfg, rng::derive_seed(cfg.seed, "stage2-slices", step as u64));
    let batch = step_batch(data, cfg, &mut r);
    let refs: Vec<&[Point]> = slices.iter().map(Vec::as_slice).collect();

    let mut g = Graph::new();
    let (tokens, _) = model.g_latents(&mut g, Branch::Slice, &refs, &MaskVector::none())?;
    let m = model.config.num_queries;
    let flat = g.constant([NUM_PARTS * m, model.config.dim], target.flatten())?;
    let diff = g.sub(tokens, flat)?;
    let mut norms = Vec::with_capacity(NUM_PARTS);
    for p in 0..NUM_PARTS {
        let d = g.slice_rows(diff, p * m, m)?;
        norms.push(g.frobenius_norm(d));
    }
    let mut l_la = norms[0];
    for &v in &norms[1..] {
        l_la = g.add(l_la, v)?;
    }
    let l_la = g.scale(l_la, 1.0 / NUM_PARTS as f32);

    let processed = model.g_hpt(&mut g, tokens)?;
    let pred = model.g_decode(&mut g, processed, &batch.decode)?;
    let (l_sdf, l_inter) = g_supervision(&mut g, pred, &batch, cfg.sigma)?;
    let mut total = weighted_total(&mut g, l_sdf, l_inter, cfg)?;
    let weighted = g.scale(l_la, cfg.lambda_la as f32);
    total = g.add(total, weighted)?;

    let mut report = LossReport::default();
    fill_report(&g, pred, &batch, l_sdf, l_inter, &mut report);
    report.l_la = g.scalar(l_la) as f64;
    report.total = g.scalar(total) as f64;
    if !report.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: 0,
            step,
            report: format!("{report:?}"),
        });
    }
    g.backward(total)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&g);
    model.params.adam_step(&adam(cfg));
    Ok(report)
}

fn run_epochs(
    model: &mut VecHeart,
    data: &[PhantomData],
    cfg: &TrainConfig,
    epochs: usize,
    label: &str,
    step_fn: fn(&mut VecHeart, &PhantomData, &TrainConfig, usize) -> Result<LossReport>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(TrainError::Config("no training phantoms".into()));
    }
    let start = std::time::Instant::now();
    let mut report = TrainReport::default();
    let mut step = 0;
    let total = epochs * data.len();
    let mut step_cfg = cfg.clone();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, label, epoch as u64));
        let mut sum = LossReport::default();
        for &i in &order {
            step_cfg.lr = cfg.lr_at(step, total);
            step_cfg.inter_weight = cfg.inter_weight_at(step, total);
            let l = step_fn(model, &data[i], &step_cfg, step).map_err(|e| match e {
                TrainError::NonFinite { step, report, .. } => TrainError::NonFinite { epoch, step, report },
                e => e,
            })?;
            sum.accumulate(&l);
            step += 1;
        }
        let loss = sum.scaled(1.0 / data.len() as f64);
        log::info!(
            "{label} epoch {epoch}: sdf {:.5} inter {:.5} la {:.4} total {:.5}",
            loss.l_sdf,
            loss.l_inter,
            loss.l_la,
            loss.total
        );
        report.curve.push(EpochRecord { epoch, loss });
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model.save(dir.join(format!("{label}-epoch{:05}.vhck", epoch + 1)))?;
            }
        }
    }
    report.steps = step;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Stage I: every parameter except the slice branch is trained.
pub fn train_stage1(model: &mut VecHeart, data: &[PhantomData], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.params.set_all_trainable(true);
    let slice: Vec<String> = model
        .params
        .names()
        .filter(|n| VecHeart::is_slice_param(n))
        .map(str::to_string)
        .collect();
    for n in slice {
        model.params.set_trainable(&n, false);
    }
    let report = run_epochs(model, data, cfg, cfg.epochs_stage1, "stage1", stage1_step)?;
    if let Some(dir) = &cfg.out_dir {
        write_loss_csv(dir.join("stage1_loss.csv"), &report.curve)?;
    }
    Ok(report)
}

/// Stage II: adds the slice branch if absent, freezes everything else and
/// verifies afterwards that no stage-I parameter moved.
pub fn train_stage2(model: &mut VecHeart, data: &[PhantomData], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.init_slice_branch()?;
    model.params.set_all_trainable(false);
    model.params.set_trainable("slice_enc.", true);
    model.params.set_trainable("slice_queries.", true);
    let before = model.stage1_checksum();
    let report = run_epochs(model, data, cfg, cfg.epochs_stage2, "stage2", stage2_step)?;
    if model.stage1_checksum() != before {
        return Err(TrainError::FrozenViolated);
    }
    if let Some(dir) = &cfg.out_dir {
        write_loss_csv(dir.join("stage2_loss.csv"), &report.curve)?;
    }
    Ok(report)
}

/// Mean `L_la` over phantoms with a fixed corruption per phantom.
pub fn validation_latent_alignment(model: &VecHeart, data: &[PhantomData], cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::Config("no validation phantoms".into()));
    }
    let mut total = 0.0;
    for (i, d) in data.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, "val-la", i as u64);
        let target = surface_codes(model, d, &mut r)?;
        let slices = slice_clouds(d, cfg, rng::derive_seed(cfg.seed, "val-slices", i as u64));
        let refs: Vec<&[Point]> = slices.iter().map(Vec::as_slice).collect();
        let got = model.latents(Branch::Slice, &refs, &MaskVector::none())?;
        debug_assert!(got.provenance.iter().all(|p| *p != Provenance::Surface));
        total += loss_latent_align(&got, &target)?;
    }
    Ok(total / data.len() as f64)
}
