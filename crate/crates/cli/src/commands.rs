use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vecheart::flowgen::{
    animate_phantom, cycle_cd, encode_sequence, export_obj_sequence, fm_sample, fm_train, resample_sequence,
    FlowConfig, FlowModel,
};
use vecheart::geometry::{Bounds, Mesh, Point};
use vecheart::model::{normalize_points, Branch, MaskVector, ModelConfig, VecHeart};
use vecheart::phantom::{
    generate_dataset, load_dataset, save_dataset, DatasetManifest, DatasetRecord, PartId, Split, NUM_PARTS,
    PART_NAMES,
};
use vecheart::rng;
use vecheart::slicer::{make_protocol, perturb_slices, Protocol};
use vecheart::tensor::load_checkpoint;
use vecheart::training::eval::{eval_bounds, mean_cd, mean_iou, metrics_csv, reconstruct_meshes, score_reconstruction};
use vecheart::training::{train_stage1, train_stage2, validation_latent_alignment, PhantomData, TrainConfig};

use crate::error::CliError;
use crate::{ChecksumArgs, GenDataArgs, GenerateArgs, InputKind, ProtocolArg, ReconstructArgs, Stage, TrainArgs};

/// Default sequence contraction amplitude for flow training data.
const FLOW_AMPLITUDE: f64 = 0.08;
const CD_SAMPLES: usize = 30_000;
const CHECKPOINT_EVERY: usize = 50;

/// Print the resolved config and store it as `path`.
fn echo_config<T: Serialize>(cfg: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(cfg)?;
    println!("{text}");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} `{}` not found", path.display())))
    }
}

fn load_data(path: &Path) -> Result<DatasetManifest, CliError> {
    require(path, "dataset")?;
    Ok(load_dataset(path)?)
}

fn load_model(path: &Path) -> Result<VecHeart, CliError> {
    require(path, "checkpoint")?;
    require(&vecheart::model::config_path(path), "checkpoint config")?;
    Ok(VecHeart::load(path)?)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct GenDataConfig<'a> {
    command: &'a str,
    count: usize,
    seed: u64,
    scale: f64,
    out: &'a Path,
    splits: [usize; 3],
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    if a.count < 5 {
        return Err(CliError::Usage(format!("--count must be at least 5, got {}", a.count)));
    }
    if !(a.scale > 0.0 && a.scale.is_finite()) {
        return Err(CliError::Usage(format!("--scale must be positive, got {}", a.scale)));
    }
    let m = generate_dataset(a.count, a.seed, a.scale)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&m, &a.out)?;
    let cfg = GenDataConfig {
        command: "gen-data",
        count: a.count,
        seed: a.seed,
        scale: a.scale,
        out: &a.out,
        splits: [m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)],
    };
    echo_config(&cfg, &sidecar(&a.out, ".config.json"))
}

/// Optional JSON config file for `train`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    flow: FlowConfig,
    frames: Option<usize>,
    seed: Option<u64>,
    epochs: Option<usize>,
}

#[derive(Debug, Serialize)]
struct TrainRun {
    command: &'static str,
    stage: Stage,
    data: PathBuf,
    out: PathBuf,
    ckpt_in: Option<PathBuf>,
    seed: u64,
    epochs: usize,
    frames: usize,
    model: ModelConfig,
    train: TrainConfig,
    flow: FlowConfig,
}

fn split_data(m: &DatasetManifest, split: Split, points: usize) -> Result<Vec<PhantomData>, CliError> {
    m.split(split)
        .map(|r| PhantomData::new(r.spec.clone(), points).map_err(CliError::from))
        .collect()
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let file: TrainFile = match &a.config {
        Some(p) => {
            require(p, "config file")?;
            serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| CliError::Usage(format!("config file: {e}")))?
        }
        None => TrainFile::default(),
    };
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let default_epochs = match a.stage {
        Stage::One => 1000,
        Stage::Two | Stage::Flow => 500,
    };
    let epochs = a.epochs.or(file.epochs).unwrap_or(default_epochs);
    let mut train = file.train;
    train.seed = seed;
    if let Some(lr) = a.lr {
        train.lr = lr;
    }
    train.checkpoint_every = a.checkpoint_every.unwrap_or(CHECKPOINT_EVERY);
    train.out_dir = Some(a.out.clone());
    match a.stage {
        Stage::One => train.epochs_stage1 = epochs,
        Stage::Two => train.epochs_stage2 = epochs,
        Stage::Flow => {}
    }
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let run = TrainRun {
        command: "train",
        stage: a.stage,
        data: a.data.clone(),
        out: a.out.clone(),
        ckpt_in: a.ckpt_in.clone(),
        seed,
        epochs,
        frames: a.frames.or(file.frames).unwrap_or(vecheart::flowgen::DEFAULT_FRAMES),
        model: file.model,
        train,
        flow: file.flow,
    };
    if a.stage != Stage::One {
        match &run.ckpt_in {
            Some(p) => require(p, "stage-1 checkpoint")?,
            None => return Err(CliError::Missing("--ckpt-in stage-1 checkpoint is required".into())),
        }
    }
    let manifest = load_data(&run.data)?;
    std::fs::create_dir_all(&run.out)?;
    echo_config(&run, &run.out.join("config.json"))?;
    match run.stage {
        Stage::One => {
            run.model.validate()?;
            let data = split_data(&manifest, Split::Train, run.model.points_per_part)?;
            let mut model = VecHeart::new(run.model.clone(), seed)?;
            let report = train_stage1(&mut model, &data, &run.train)?;
            model.save(run.out.join("stage1.vhck"))?;
            log::info!("stage 1 done in {:.1}s", report.seconds);
        }
        Stage::Two => {
            let mut model = load_model(run.ckpt_in.as_deref().expect("checked"))?;
            let data = split_data(&manifest, Split::Train, model.config.points_per_part)?;
            let val = split_data(&manifest, Split::Val, model.config.points_per_part)?;
            model.init_slice_branch()?;
            let before = validation_latent_alignment(&model, &val, &run.train)?;
            train_stage2(&mut model, &data, &run.train)?;
            let after = validation_latent_alignment(&model, &val, &run.train)?;
            model.save(run.out.join("stage2.vhck"))?;
            let summary = serde_json::json!({ "val_l_la_before": before, "val_l_la_after": after });
            std::fs::write(run.out.join("stage2_val_la.json"), serde_json::to_string_pretty(&summary)?)?;
        }
        Stage::Flow => train_flow(&run, &manifest)?,
    }
    Ok(())
}

fn train_flow(run: &TrainRun, manifest: &DatasetManifest) -> Result<(), CliError> {
    let model = load_model(run.ckpt_in.as_deref().expect("checked"))?;
    let sequences = manifest
        .split(Split::Train)
        .enumerate()
        .map(|(i, r)| {
            let frames = animate_phantom(&r.spec, run.frames, FLOW_AMPLITUDE);
            encode_sequence(&model, &frames, rng::derive_seed(run.seed, "flow-data", i as u64))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = FlowConfig {
        frames: run.frames,
        num_queries: model.config.num_queries,
        dim: model.config.dim,
        ..run.flow.clone()
    };
    let mut flow = FlowModel::new(cfg, run.seed)?;
    let steps = run.epochs * sequences.len();
    let curve = fm_train(&mut flow, &sequences, steps, run.seed)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(run.out.join("flow_loss.csv"))?);
    writeln!(w, "step,loss")?;
    for (s, l) in curve.iter().enumerate() {
        writeln!(w, "{s},{l}")?;
    }
    w.flush()?;
    flow.save(run.out.join("flow.vhck"))?;
    model.save(run.out.join("decoder.vhck"))?;
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Usage(format!("unknown split `{s}`"))),
    }
}

fn parse_mask(s: Option<&str>) -> Result<MaskVector, CliError> {
    let mut m = MaskVector::none();
    for name in s.unwrap_or("").split(',').map(str::trim).filter(|n| !n.is_empty()) {
        let id = PartId::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown part `{name}`")))?;
        m.0[id.index()] = true;
    }
    Ok(m)
}

#[derive(Serialize)]
struct ReconstructRun<'a> {
    command: &'a str,
    ckpt: &'a Path,
    data: &'a Path,
    out: &'a Path,
    input: InputKind,
    mask: Vec<&'a str>,
    res: usize,
    split: &'a str,
    limit: Option<usize>,
    protocol: ProtocolArg,
    lambda: f64,
    seed: u64,
}

fn input_clouds(
    model: &VecHeart,
    rec: &DatasetRecord,
    a: &ReconstructArgs,
) -> Result<Vec<Vec<Point>>, CliError> {
    let spec = &rec.spec;
    let seed = rng::derive_seed(a.seed, &rec.id, 0);
    Ok(match a.input {
        InputKind::Surface => {
            let mut r = rng::stream(seed, "reconstruct-surface", 0);
            spec.parts
                .iter()
                .map(|p| {
                    let pts = p.sample_surface(model.config.points_per_part, &mut r);
                    normalize_points(&pts, spec.half_extent())
                })
                .collect()
        }
        InputKind::Slices => {
            let protocol = match a.protocol {
                ProtocolArg::SaxLax => Protocol::SaxLax,
                ProtocolArg::SaxOnly => Protocol::SaxOnly,
            };
            let stack = make_protocol(spec, protocol, vecheart::slicer::DEFAULT_SAMPLES_PER_CONTOUR);
            let stack = perturb_slices(spec, &stack, a.lambda, seed);
            stack
                .per_part()
                .iter()
                .map(|pts| normalize_points(pts, spec.half_extent()))
                .collect()
        }
    })
}

pub fn reconstruct(a: ReconstructArgs) -> Result<(), CliError> {
    let mask = parse_mask(a.mask.as_deref())?;
    let split = parse_split(&a.split)?;
    if a.res < 2 {
        return Err(CliError::Usage("--res must be at least 2".into()));
    }
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(CliError::Usage("--lambda must be non-negative".into()));
    }
    let model = load_model(&a.ckpt)?;
    let branch = match a.input {
        InputKind::Surface => Branch::Surface,
        InputKind::Slices if model.config.slice_branch => Branch::Slice,
        InputKind::Slices => return Err(CliError::Missing("checkpoint has no slice branch (run stage 2)".into())),
    };
    let manifest = load_data(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let run = ReconstructRun {
        command: "reconstruct",
        ckpt: &a.ckpt,
        data: &a.data,
        out: &a.out,
        input: a.input,
        mask: (0..NUM_PARTS).filter(|&p| mask.is_masked(p)).map(|p| PART_NAMES[p]).collect(),
        res: a.res,
        split: &a.split,
        limit: a.limit,
        protocol: a.protocol,
        lambda: a.lambda,
        seed: a.seed,
    };
    echo_config(&run, &a.out.join("config.json"))?;

    let mut summary = String::from("phantom,part,CD_mm,IoU,masked_flag\n");
    let records: Vec<&DatasetRecord> = manifest.split(split).take(a.limit.unwrap_or(usize::MAX)).collect();
    for rec in records {
        let clouds = input_clouds(&model, rec, &a)?;
        let refs: Vec<&[Point]> = clouds.iter().map(Vec::as_slice).collect();
        let processed = model.process(branch, &refs, &mask)?;
        let recon = reconstruct_meshes(&model, &processed, rec.spec.half_extent(), a.res, eval_bounds(&rec.spec))
            .map_err(CliError::from)?;
        let metrics = score_reconstruction(&recon, &rec.spec, &mask.0, CD_SAMPLES, a.seed)?;
        let dir = a.out.join(&rec.id);
        std::fs::create_dir_all(&dir)?;
        for (p, (_, mesh)) in recon.iter().enumerate() {
            mesh.write_obj(dir.join(format!("{}.obj", PART_NAMES[p])))
                .map_err(|e| CliError::Other(e.into()))?;
        }
        let csv = metrics_csv(&metrics);
        std::fs::write(dir.join("metrics.csv"), &csv)?;
        for line in csv.lines().skip(1) {
            summary.push_str(&format!("{},{line}\n", rec.id));
        }
        eprintln!(
            "{}: mean CD {:.3} mm, mean IoU {:.4}",
            rec.id,
            mean_cd(&metrics),
            mean_iou(&metrics)
        );
    }
    std::fs::write(a.out.join("metrics.csv"), summary)?;
    Ok(())
}

#[derive(Serialize)]
struct GenerateRun<'a> {
    command: &'a str,
    ckpt_flow: &'a Path,
    ckpt: &'a Path,
    out: &'a Path,
    frames: usize,
    steps: usize,
    seed: u64,
    res: usize,
    scale: f64,
}

pub fn generate(a: GenerateArgs) -> Result<(), CliError> {
    if a.frames < 2 || a.steps == 0 || a.res < 2 || !(a.scale > 0.0) {
        return Err(CliError::Usage("need --frames ≥ 2, --steps ≥ 1, --res ≥ 2, --scale > 0".into()));
    }
    require(&a.ckpt_flow, "flow checkpoint")?;
    let decoder_path = a.ckpt.clone().unwrap_or_else(|| {
        a.ckpt_flow
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("decoder.vhck")
    });
    let flow = FlowModel::load(&a.ckpt_flow)?;
    let model = load_model(&decoder_path)?;
    std::fs::create_dir_all(&a.out)?;
    let run = GenerateRun {
        command: "generate",
        ckpt_flow: &a.ckpt_flow,
        ckpt: &decoder_path,
        out: &a.out,
        frames: a.frames,
        steps: a.steps,
        seed: a.seed,
        res: a.res,
        scale: a.scale,
    };
    echo_config(&run, &a.out.join("config.json"))?;

    let seq = fm_sample(&flow, a.steps, a.seed)?;
    let seq = if seq.len() == a.frames { seq } else { resample_sequence(&seq, a.frames)? };
    let he = a.scale * 0.5;
    let bounds = Bounds::cube(he);
    let mut frames: Vec<Vec<Mesh>> = Vec::with_capacity(seq.len());
    for latents in &seq.frames {
        let processed = model.hpt_stack(latents)?;
        let recon = reconstruct_meshes(&model, &processed, he, a.res, bounds).map_err(CliError::from)?;
        frames.push(recon.into_iter().map(|(_, m)| m).collect());
    }
    export_obj_sequence(&a.out, &frames, &seq.phases)?;
    if let Some((p, _)) = frames.iter().flatten().enumerate().find(|(_, m)| m.is_empty()) {
        return Err(CliError::Numerical(format!(
            "frame {} part {} decoded to an empty mesh",
            p / NUM_PARTS,
            PART_NAMES[p % NUM_PARTS]
        )));
    }
    let cd = cycle_cd(&frames[0], &frames[frames.len() - 1], CD_SAMPLES, a.seed)?;
    println!("cycle_cd_mm {cd}");
    std::fs::write(
        a.out.join("cycle_cd.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "cycle_cd_mm": cd }))?,
    )?;
    Ok(())
}

pub fn checksum(a: ChecksumArgs) -> Result<(), CliError> {
    require(&a.ckpt, "checkpoint")?;
    let store = load_checkpoint(&a.ckpt).map_err(|e| CliError::Other(e.into()))?;
    println!("all {:016x}", store.checksum(""));
    println!("stage1 {:016x}", store.checksum_where(|n| !VecHeart::is_slice_param(n)));
    println!("slice {:016x}", store.checksum_where(VecHeart::is_slice_param));
    if let Some(p) = &a.prefix {
        println!("prefix:{p} {:016x}", store.checksum(p));
    }
    Ok(())
}
