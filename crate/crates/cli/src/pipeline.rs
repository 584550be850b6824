//! Stage execution for `cpfas run`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use cpfas_core::datasets::{self, build_observation_set, Dataset, ModelParams, ObservedSlot, SlotParams};
use cpfas_core::io;
use cpfas_core::nn::{
    load_checkpoint, sample_learned, save_checkpoint, train_on_pool, Architecture, DriftNet, SinusoidalEmbedding,
    TrainOptions, TrainingManifest, TrainingPool,
};
use cpfas_core::rng::derive_seed;
use cpfas_core::smoother::run_chains_parallel;
use cpfas_core::{ChainConfig, ReferenceTrajectory, TimeGrid, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::{DataParams, LoadedConfig, Stage};
use crate::eval::{self, MissingArtifact};
use crate::layout::{self, StageRecord};

/// Per-stage seed tags under the master seed. Data generation uses the
/// master seed itself, so `cpfas gen` and `cpfas run` agree.
pub mod tag {
    pub const SMOOTH: u64 = 0x100;
    pub const TRAIN: u64 = 0x101;
    pub const SAMPLE: u64 = 0x102;
    pub const EVAL: u64 = 0x103;
}

#[derive(Debug)]
pub enum RunError {
    /// Bad configuration or missing prerequisites; nothing was run.
    Invalid(String),
    Stage { stage: Stage, source: anyhow::Error },
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Invalid(msg) => f.write_str(msg),
            RunError::Stage { stage, source } => write!(f, "stage {stage} failed: {source:#}"),
        }
    }
}

impl std::error::Error for RunError {}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => 2,
            RunError::Stage { .. } => 1,
        }
    }
}

/// `CPFAS_OUTPUT_ROOT` (or the working directory) joined with `p` when `p`
/// is relative.
pub fn resolve_out_dir(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os("CPFAS_OUTPUT_ROOT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Progress goes to stderr unless disabled in the config or by a non-empty
/// `CPFAS_QUIET`.
pub fn progress_enabled(cfg: &LoadedConfig) -> bool {
    let quiet = std::env::var("CPFAS_QUIET").is_ok_and(|v| !v.is_empty() && v != "0");
    cfg.run.progress.enabled && !quiet
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub experiment: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub eval_table: Option<String>,
}

struct Ctx<'a> {
    cfg: &'a LoadedConfig,
    out: PathBuf,
    hash: String,
    verbose: bool,
}

fn has_checkpoint(out: &Path) -> bool {
    layout::latest(out, Stage::Train).is_some_and(|d| d.join("model.json").is_file())
}

/// Refuse to start unless every requested stage will find its inputs,
/// either from an earlier stage of this run or from a completed version on
/// disk.
fn check_dependencies(cfg: &LoadedConfig, out: &Path) -> Result<(), RunError> {
    let stages = &cfg.run.stages;
    let before = |s: Stage, upto: Stage| stages.iter().any(|&x| x == s && x < upto);
    let have = |s: Stage, upto: Stage| before(s, upto) || layout::latest(out, s).is_some();
    for &stage in stages {
        let missing = match stage {
            Stage::Generate => None,
            Stage::Smooth => (!have(Stage::Generate, stage)).then_some("generated data"),
            Stage::Train => (!have(Stage::Smooth, stage)).then_some("smoother output"),
            Stage::Sample => (!(before(Stage::Train, stage) || has_checkpoint(out))).then_some("a trained checkpoint"),
            Stage::Eval => {
                if !have(Stage::Generate, stage) {
                    Some("generated data")
                } else if !have(Stage::Smooth, stage) && !have(Stage::Sample, stage) {
                    Some("smoother or sample output")
                } else {
                    None
                }
            }
        };
        if let Some(what) = missing {
            let e = cfg.error(
                &["stages"],
                format!("stage {stage} needs {what}, but none exists under {} and no earlier stage in this run produces it", out.display()),
            );
            return Err(RunError::Invalid(e.to_string()));
        }
    }
    Ok(())
}

/// Run every requested stage in order.
pub fn run(cfg: &LoadedConfig) -> Result<RunOutcome, RunError> {
    let out = resolve_out_dir(&cfg.run.io.out_dir);
    check_dependencies(cfg, &out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Invalid(format!("cannot start worker pool: {e}")))?;
    let ctx = Ctx { cfg, out: out.clone(), hash: cfg.hash(), verbose: progress_enabled(cfg) };
    let mut records = Vec::new();
    let mut eval_table = None;
    for &stage in &cfg.run.stages {
        let fail = |source: anyhow::Error| match source.downcast_ref::<MissingArtifact>() {
            Some(m) => RunError::Invalid(format!("stage {stage}: {m}")),
            None => RunError::Stage { stage, source },
        };
        let dir = layout::next_version(&out, stage).map_err(fail)?;
        if ctx.verbose {
            eprintln!("[{stage}] writing {}", dir.display());
        }
        let start = Instant::now();
        let inputs = pool
            .install(|| match stage {
                Stage::Generate => generate(&ctx, &dir),
                Stage::Smooth => smooth(&ctx, &dir),
                Stage::Train => train(&ctx, &dir),
                Stage::Sample => sample(&ctx, &dir),
                Stage::Eval => {
                    let (inputs, table) = evaluate(&ctx, &dir)?;
                    eval_table = Some(table);
                    Ok(inputs)
                }
            })
            .map_err(fail)?;
        let record = StageRecord {
            stage,
            dir: layout::relative(&dir, &out),
            config_hash: ctx.hash.clone(),
            seed: cfg.run.seed,
            inputs,
            outputs: layout::hash_dir(&dir, &out).map_err(fail)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        record.write(&dir).map_err(fail)?;
        records.push(record);
    }
    let manifest = RunManifest {
        config_hash: ctx.hash.clone(),
        experiment: cfg.run.experiment.to_string(),
        seed: cfg.run.seed,
        config: serde_json::to_value(&cfg.run).expect("config serializes"),
        stages: records,
    };
    write_manifest(&out, &manifest).map_err(|e| RunError::Stage { stage: *cfg.run.stages.last().expect("validated"), source: e })?;
    Ok(RunOutcome { out_dir: out, manifest, eval_table })
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    let dir = out.join("manifests");
    fs::create_dir_all(&dir)?;
    let n = fs::read_dir(&dir)?.count() + 1;
    layout::write_json(&dir.join(format!("run_{n:03}.json")), manifest)?;
    layout::write_json(&out.join("manifest.json"), manifest)
}

fn latest(ctx: &Ctx, stage: Stage) -> Result<PathBuf> {
    layout::latest(&ctx.out, stage).ok_or_else(|| anyhow!(MissingArtifact(format!("no completed {stage} output under {}", ctx.out.display()))))
}

fn inputs_of(ctx: &Ctx, dirs: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut all = BTreeMap::new();
    for d in dirs {
        all.extend(layout::hash_dir(d, &ctx.out)?);
    }
    Ok(all)
}

/// Build the dataset described by `data` with the master seed.
pub fn generate_dataset(data: &DataParams, base_dir: &Path, seed: u64) -> Result<Dataset> {
    Ok(match data {
        DataParams::DoubleWell(p) => datasets::gen_double_well(p, seed)?,
        DataParams::TwoCircles(p) => datasets::gen_two_circles(p, seed)?,
        DataParams::Vehicle(p) => datasets::gen_vehicle_synthetic(p, seed)?,
        DataParams::Marginal(p) => {
            let mut p = p.clone();
            p.files = p.files.iter().map(|f| base_dir.join(f)).collect();
            datasets::gen_marginal_transport(&p, seed)?
        }
    })
}

fn generate(ctx: &Ctx, dir: &Path) -> Result<BTreeMap<String, String>> {
    let ds = generate_dataset(&ctx.cfg.data, &ctx.cfg.base_dir, ctx.cfg.run.seed)?;
    ds.write(dir)?;
    let mut inputs = BTreeMap::new();
    if let DataParams::Marginal(p) = &ctx.cfg.data {
        for f in &p.files {
            let path = ctx.cfg.base_dir.join(f);
            inputs.insert(path.display().to_string(), layout::content_hash(&path)?);
        }
    }
    Ok(inputs)
}

#[derive(Deserialize)]
struct GeneratedSpec {
    model: ModelParams,
    slots: Vec<SlotParams>,
    has_truth: bool,
}

/// A generate-stage directory read back from disk.
pub struct Generated {
    pub model: ModelParams,
    pub grid: Arc<TimeGrid>,
    pub slots: Vec<ObservedSlot>,
    pub truth: Option<Trajectory>,
}

pub fn load_generated(dir: &Path) -> Result<Generated> {
    let spec: GeneratedSpec = layout::read_json(&dir.join("spec.json"))?;
    let grid = spec.model.grid()?;
    let mut points: BTreeMap<usize, Vec<Vec<f64>>> =
        io::read_observation_points(&dir.join("observations.csv"), &grid)?.into_iter().collect();
    let mut slots = Vec::new();
    for params in spec.slots {
        let j = grid.index_of(params.time)?;
        let pts = points.remove(&j).ok_or_else(|| anyhow!("observations.csv has no points at t={}", params.time))?;
        slots.push(ObservedSlot { params, points: pts });
    }
    let truth = if spec.has_truth {
        let mut t = io::read_trajectories_csv(&dir.join("truth.csv"), &grid)?;
        if t.len() != 1 {
            bail!("truth.csv holds {} paths, expected 1", t.len());
        }
        t.pop()
    } else {
        None
    };
    Ok(Generated { model: spec.model, grid, slots, truth })
}

/// Apply `observations.overrides` to the generated slots.
fn resolve_slots(ctx: &Ctx, data: &Generated) -> Result<Vec<ObservedSlot>> {
    let mut slots = data.slots.clone();
    for o in &ctx.cfg.run.observations.overrides {
        let j = data.grid.index_of(o.time)?;
        let slot = slots
            .iter_mut()
            .find(|s| data.grid.index_of(s.params.time).ok() == Some(j))
            .ok_or_else(|| anyhow!("observation override at t={} matches no observation slot", o.time))?;
        if let Some(s) = o.sigma_obs {
            slot.params.sigma_obs = s;
        }
        if let Some(h) = o.neighbors {
            slot.params.neighbors = Some(h);
        }
    }
    Ok(slots)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSidecar {
    pub chain_id: usize,
    pub seed: u64,
    pub n_particles: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub n_kept: usize,
    pub change_rate: f64,
}

pub fn chain_stem(chain: usize) -> String {
    format!("chain_{chain:03}")
}

fn smooth(ctx: &Ctx, dir: &Path) -> Result<BTreeMap<String, String>> {
    let gen_dir = latest(ctx, Stage::Generate)?;
    let data = load_generated(&gen_dir)?;
    let slots = resolve_slots(ctx, &data)?;
    let obs = build_observation_set(&data.grid, data.model.dim, &slots)?;
    let model = data.model.build()?;
    let s = &ctx.cfg.run.smoother;
    let chain_cfg = ChainConfig {
        n_particles: s.n_particles,
        n_iterations: s.n_iterations,
        burn_in: s.burn_in,
        n_chains: s.n_chains,
        seed: derive_seed(ctx.cfg.run.seed, &[tag::SMOOTH]),
        resampling: s.resampling,
    };
    let interval = ctx.cfg.run.progress.interval;
    let report = |chain: usize, done: usize, total: usize| {
        if done % interval == 0 || done == total {
            eprintln!("[smooth] chain {chain}: {done}/{total} iterations");
        }
    };
    let runs = run_chains_parallel(&model, &obs, &data.grid, &chain_cfg, ctx.verbose.then_some(&report as _))?;
    for run in &runs {
        let stem = chain_stem(run.chain_id);
        let states: Vec<Trajectory> = run.references.iter().map(|r| r.states.clone()).collect();
        io::write_trajectories_csv(&dir.join(format!("{stem}.csv")), &states)?;
        io::write_diffs_csv(&dir.join(format!("{stem}_diffs.csv")), &run.references)?;
        let side = ChainSidecar {
            chain_id: run.chain_id,
            seed: run.seed,
            n_particles: s.n_particles,
            n_iterations: s.n_iterations,
            burn_in: s.burn_in,
            n_kept: run.references.len(),
            change_rate: run.change_rate,
        };
        layout::write_json(&dir.join(format!("{stem}.json")), &side)?;
    }
    let params: Vec<&SlotParams> = slots.iter().map(|s| &s.params).collect();
    layout::write_json(&dir.join("slots.json"), &params)?;
    inputs_of(ctx, &[&gen_dir])
}

/// Chain ids found in a smooth-stage directory, ascending.
pub fn chain_ids(dir: &Path) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("chain_")?.strip_suffix(".json")?.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    if ids.is_empty() {
        bail!("no chains in {}", dir.display());
    }
    Ok(ids)
}

pub fn load_references(dir: &Path, grid: &Arc<TimeGrid>) -> Result<Vec<ReferenceTrajectory>> {
    let mut refs = Vec::new();
    for id in chain_ids(dir)? {
        let stem = chain_stem(id);
        refs.extend(io::read_references_csv(&dir.join(format!("{stem}.csv")), &dir.join(format!("{stem}_diffs.csv")), grid)?);
    }
    Ok(refs)
}

pub fn load_smoother_paths(dir: &Path, grid: &Arc<TimeGrid>) -> Result<Vec<Trajectory>> {
    let mut paths = Vec::new();
    for id in chain_ids(dir)? {
        paths.extend(io::read_trajectories_csv(&dir.join(format!("{}.csv", chain_stem(id))), grid)?);
    }
    Ok(paths)
}

fn train(ctx: &Ctx, dir: &Path) -> Result<BTreeMap<String, String>> {
    let gen_dir = latest(ctx, Stage::Generate)?;
    let smooth_dir = latest(ctx, Stage::Smooth)?;
    let data = load_generated(&gen_dir)?;
    let refs = load_references(&smooth_dir, &data.grid)?;
    let pool = TrainingPool::from_references(&refs)?;
    drop(refs);
    let n = &ctx.cfg.run.network;
    let arch = Architecture { dim: data.model.dim, width: n.width, depth: n.depth };
    let emb = SinusoidalEmbedding::geometric(n.n_freqs, 4.0 * data.grid.t_end(), data.model.dt);
    let seed = derive_seed(ctx.cfg.run.seed, &[tag::TRAIN]);
    let net = DriftNet::new(arch, emb, seed)?;
    let t = &ctx.cfg.run.training;
    let opts = TrainOptions { learning_rate: t.learning_rate, batch_size: t.batch_size, epochs: t.epochs, seed, optimizer: t.optimizer };
    let epochs = t.epochs;
    let report = |epoch: usize, loss: f64| eprintln!("[train] epoch {}/{epochs}: loss {loss:.6e}", epoch + 1);
    let (net, report) = train_on_pool(net, &pool, &opts, ctx.verbose.then_some(&report as _))?;
    let loss_csv: String = std::iter::once("epoch,loss\n".to_string())
        .chain(report.loss_curve.iter().enumerate().map(|(e, l)| format!("{e},{l}\n")))
        .collect();
    fs::write(dir.join("loss.csv"), loss_csv).context("writing loss.csv")?;
    let smoother_hash = StageRecord::read(&smooth_dir).ok().map(|r| r.config_hash);
    let manifest = TrainingManifest { options: opts, report, smoother_config_hash: smoother_hash };
    save_checkpoint(&dir.join("model.json"), &net, Some(manifest))?;
    inputs_of(ctx, &[&smooth_dir])
}

fn sample(ctx: &Ctx, dir: &Path) -> Result<BTreeMap<String, String>> {
    let gen_dir = latest(ctx, Stage::Generate)?;
    let train_dir = latest(ctx, Stage::Train)?;
    let data = load_generated(&gen_dir)?;
    let model_path = train_dir.join("model.json");
    let (net, _) = load_checkpoint(&model_path)?;
    if net.dim() != data.model.dim {
        bail!("checkpoint dimension {} does not match the data dimension {}", net.dim(), data.model.dim);
    }
    let paths = sample_learned(
        &net,
        &data.model.diffusion,
        &data.model.init,
        &data.grid,
        ctx.cfg.run.sampling.n_paths,
        derive_seed(ctx.cfg.run.seed, &[tag::SAMPLE]),
    )?;
    io::write_trajectories_csv(&dir.join("samples.csv"), &paths)?;
    let mut inputs = inputs_of(ctx, &[])?;
    inputs.insert(layout::relative(&model_path, &ctx.out), layout::content_hash(&model_path)?);
    Ok(inputs)
}

fn evaluate(ctx: &Ctx, dir: &Path) -> Result<(BTreeMap<String, String>, String)> {
    let inputs = eval::EvalInputs {
        generate: latest(ctx, Stage::Generate)?,
        smooth: layout::latest(&ctx.out, Stage::Smooth),
        sample: layout::latest(&ctx.out, Stage::Sample),
    };
    let seed = derive_seed(ctx.cfg.run.seed, &[tag::EVAL]);
    let rows = eval::evaluate(&inputs, &ctx.cfg.run.eval.against, ctx.cfg.run.eval.max_points, seed)?;
    layout::write_json(&dir.join("metrics.json"), &rows)?;
    let mut hashed = Vec::new();
    hashed.push(inputs.generate.as_path());
    hashed.extend(inputs.smooth.as_deref());
    hashed.extend(inputs.sample.as_deref());
    Ok((inputs_of(ctx, &hashed)?, eval::format_table(&rows)))
}
