//! Metrics over run artifacts: EMD per observed marginal and mean-path MSE.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use cpfas_core::io;
use cpfas_core::metrics::{emd_capped, mean_trajectory, mse_at, states_at, EmdOptions, MetricRecord};
use cpfas_core::rng::derive_seed;
use cpfas_core::Trajectory;
use serde::{Deserialize, Serialize};

use crate::config::Against;
use crate::pipeline::{load_generated, load_smoother_paths, Generated};

/// An input the evaluation needs does not exist.
#[derive(Debug)]
pub struct MissingArtifact(pub String);

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing artifact: {}", self.0)
    }
}

impl std::error::Error for MissingArtifact {}

/// Stage directories an evaluation reads.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub generate: PathBuf,
    pub smooth: Option<PathBuf>,
    pub sample: Option<PathBuf>,
}

/// A metric tagged with the path set it was computed on (`smoother` or
/// `learned`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub source: String,
    #[serde(flatten)]
    pub record: MetricRecord,
}

fn mse_record(metric: &str, paths: &[Trajectory], targets: &[(usize, Vec<f64>)]) -> Result<MetricRecord> {
    let dim = paths[0].dim();
    let mean = mean_trajectory(paths)?;
    Ok(MetricRecord {
        metric: metric.into(),
        time: None,
        value: mse_at(&mean, dim, targets)?,
        n_a: paths.len(),
        n_b: targets.len(),
        subsampled: false,
        seed: 0,
    })
}

fn emd_record(metric: &str, paths: &[Trajectory], j: usize, target: &[Vec<f64>], max_points: usize, seed: u64) -> Result<MetricRecord> {
    let opts = EmdOptions { max_points, seed: derive_seed(seed, &[j as u64]) };
    let r = emd_capped(&states_at(paths, j), target, &opts)?;
    Ok(MetricRecord {
        metric: metric.into(),
        time: Some(paths[0].grid().time(j)),
        value: r.value,
        n_a: r.n_a,
        n_b: r.n_b,
        subsampled: r.subsampled,
        seed: opts.seed,
    })
}

fn metrics_for(data: &Generated, paths: &[Trajectory], against: Against, max_points: usize, seed: u64) -> Result<Vec<MetricRecord>> {
    let grid = &data.grid;
    let mut out = Vec::new();
    match against {
        Against::Observations => {
            let mut singles = Vec::new();
            for s in &data.slots {
                let j = grid.index_of(s.params.time)?;
                match s.params.neighbors {
                    None => singles.push((j, s.points[0].clone())),
                    Some(_) => out.push(emd_record("emd", paths, j, &s.points, max_points, seed)?),
                }
            }
            if !singles.is_empty() {
                out.insert(0, mse_record("mse_observations", paths, &singles)?);
            }
        }
        Against::Truth => {
            let Some(truth) = &data.truth else {
                bail!(MissingArtifact("truth.csv: this experiment has no ground-truth path".into()));
            };
            let targets: Vec<(usize, Vec<f64>)> = (0..grid.len()).map(|j| (j, truth.state(j).to_vec())).collect();
            out.push(mse_record("mse_truth", paths, &targets)?);
        }
        Against::Terminal => {
            let Some(slot) = data.slots.iter().find(|s| s.params.terminal) else {
                bail!(MissingArtifact("the generated data has no terminal slot".into()));
            };
            out.push(emd_record("emd_terminal", paths, grid.index_of(slot.params.time)?, &slot.points, max_points, seed)?);
        }
    }
    Ok(out)
}

/// Every requested metric for the smoother references and the learned
/// samples, whichever exist.
pub fn evaluate(inputs: &EvalInputs, against: &[Against], max_points: usize, seed: u64) -> Result<Vec<EvalRow>> {
    let data = load_generated(&inputs.generate)?;
    let mut sources: Vec<(&str, Vec<Trajectory>)> = Vec::new();
    if let Some(dir) = &inputs.smooth {
        sources.push(("smoother", load_smoother_paths(dir, &data.grid)?));
    }
    if let Some(dir) = &inputs.sample {
        sources.push(("learned", io::read_trajectories_csv(&dir.join("samples.csv"), &data.grid)?));
    }
    if sources.is_empty() {
        bail!(MissingArtifact("neither smoother nor sample output exists".into()));
    }
    let mut rows = Vec::new();
    for (source, paths) in &sources {
        if paths.is_empty() {
            bail!("{source} output holds no paths");
        }
        for &a in against {
            for record in metrics_for(&data, paths, a, max_points, seed)? {
                rows.push(EvalRow { source: source.to_string(), record });
            }
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[EvalRow]) -> String {
    let mut s = format!("{:<10} {:<18} {:>10} {:>14} {:>7} {:>7}\n", "source", "metric", "time", "value", "n_a", "n_b");
    for r in rows {
        let m = &r.record;
        let time = m.time.map_or("-".to_string(), |t| format!("{t:.4}"));
        let sub = if m.subsampled { " (subsampled)" } else { "" };
        s += &format!("{:<10} {:<18} {:>10} {:>14.6e} {:>7} {:>7}{sub}\n", r.source, m.metric, time, m.value, m.n_a, m.n_b);
    }
    s
}

/// Standalone evaluation of a run directory, resolving the newest stage
/// outputs in it.
pub fn evaluate_run_dir(run_dir: &Path, against: &[Against], max_points: usize, seed: u64) -> Result<Vec<EvalRow>> {
    use crate::config::Stage;
    use crate::layout::latest;
    let Some(generate) = latest(run_dir, Stage::Generate) else {
        bail!(MissingArtifact(format!("no completed generate output under {}", run_dir.display())));
    };
    let inputs = EvalInputs { generate, smooth: latest(run_dir, Stage::Smooth), sample: latest(run_dir, Stage::Sample) };
    evaluate(&inputs, against, max_points, seed)
}
