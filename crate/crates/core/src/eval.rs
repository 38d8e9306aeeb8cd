//! Frozen-test-set scoring, the fixed-grid level ablation, and the
//! multimodality diagnostics.
//!
//! Context and target log-likelihoods are reported separately as flat
//! per-point means over every batch in the frozen file: higher context
//! scores mean better reconstructions, higher target scores better
//! predictions.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CqnpError;
use crate::model::{LevelSource, Model, ModelKind, Which};
use crate::rng::{substream, Stream};
use crate::task::{read_frozen, FunctionSample, TaskBatch};

/// The fixed evenly-spaced level grid used for small-sample ablations:
/// {u0, u0 + d, ..., u1} with u0 = 0.001, u1 = 0.999,
/// d = (u1 - u0) / (n - 1).
#[derive(Debug, Clone, PartialEq)]
pub struct UGrid {
    levels: Vec<f64>,
}

impl UGrid {
    pub fn new(n_tau: usize) -> Result<Self, CqnpError> {
        if n_tau < 2 {
            return Err(CqnpError::Usage(format!(
                "a level grid needs at least 2 points, got {n_tau}"
            )));
        }
        let (u0, u1) = (0.001, 0.999);
        let d = (u1 - u0) / (n_tau - 1) as f64;
        let mut levels: Vec<f64> = (0..n_tau).map(|i| u0 + i as f64 * d).collect();
        *levels.last_mut().unwrap() = u1;
        Ok(UGrid { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

/// How evaluation chooses its levels.
#[derive(Debug, Clone)]
pub enum LevelMode {
    /// Fresh uniform draws per point, streams keyed by (seed, batch index).
    Random { seed: u64 },
    /// The same fixed grid at every point.
    Grid(UGrid),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BatchScore {
    pub context_ll: f64,
    pub target_ll: f64,
    pub context_points: usize,
    pub target_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub process: String,
    pub n_tau: usize,
    /// Per-point mean log-likelihood over all context points of all batches.
    pub context_ll: f64,
    /// Same for target points.
    pub target_ll: f64,
    pub seed: Option<u64>,
    pub per_batch: Vec<BatchScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, CqnpError> {
        serde_json::to_string_pretty(self).map_err(|e| CqnpError::Format(e.to_string()))
    }
}

fn score_task(
    model: &Model,
    task: &FunctionSample,
    mode: &LevelMode,
    batch_idx: u64,
    task_idx: u64,
    n_tau: usize,
) -> Result<(f64, f64), CqnpError> {
    let lls = match mode {
        LevelMode::Random { seed } => {
            let mut rng = substream(*seed, Stream::Eval, &[batch_idx, task_idx]);
            let mut levels = LevelSource::Draws {
                rng: &mut rng,
                n_tau,
            };
            model.predictive_log_lik(task, Which::All, &mut levels, None)?
        }
        LevelMode::Grid(grid) => {
            let mut levels = LevelSource::Grid(grid.levels());
            model.predictive_log_lik(task, Which::All, &mut levels, None)?
        }
    };
    let ctx_sum: f64 = lls[..task.n_context].iter().sum();
    let tgt_sum: f64 = lls[task.n_context..].iter().sum();
    Ok((ctx_sum, tgt_sum))
}

fn score_batch(
    model: &Model,
    batch: &TaskBatch,
    mode: &LevelMode,
    batch_idx: u64,
    n_tau: usize,
) -> Result<BatchScore, CqnpError> {
    let mut ctx_sum = 0.0;
    let mut tgt_sum = 0.0;
    let mut ctx_n = 0usize;
    let mut tgt_n = 0usize;
    for (t, task) in batch.samples().iter().enumerate() {
        let (c, g) = score_task(model, task, mode, batch_idx, t as u64, n_tau)?;
        ctx_sum += c;
        tgt_sum += g;
        ctx_n += task.n_context;
        tgt_n += task.n_total() - task.n_context;
    }
    Ok(BatchScore {
        context_ll: ctx_sum / ctx_n as f64,
        target_ll: tgt_sum / tgt_n as f64,
        context_points: ctx_n,
        target_points: tgt_n,
    })
}

/// Score a model over a frozen test-set file.
pub fn evaluate(
    model: &Model,
    frozen_path: &Path,
    n_tau: usize,
    mode: &LevelMode,
    process: &str,
) -> Result<EvalReport, CqnpError> {
    if n_tau == 0 && matches!(mode, LevelMode::Random { .. }) {
        return Err(CqnpError::Usage("n_tau must be >= 1".into()));
    }
    let n_tau = match mode {
        LevelMode::Random { .. } => n_tau,
        LevelMode::Grid(g) => g.levels().len(),
    };
    let batches: Vec<TaskBatch> = read_frozen(frozen_path)?.collect::<Result<_, _>>()?;
    if batches.is_empty() {
        return Err(CqnpError::Format(format!(
            "{}: no batches",
            frozen_path.display()
        )));
    }
    let scores: Vec<BatchScore> = batches
        .par_iter()
        .enumerate()
        .map(|(b, batch)| score_batch(model, batch, mode, b as u64, n_tau))
        .collect::<Result<_, _>>()?;

    let (mut cs, mut cn, mut ts, mut tn) = (0.0, 0usize, 0.0, 0usize);
    for s in &scores {
        cs += s.context_ll * s.context_points as f64;
        cn += s.context_points;
        ts += s.target_ll * s.target_points as f64;
        tn += s.target_points;
    }
    Ok(EvalReport {
        model: model.kind().name().to_string(),
        process: process.to_string(),
        n_tau,
        context_ll: cs / cn as f64,
        target_ll: ts / tn as f64,
        seed: match mode {
            LevelMode::Random { seed } => Some(*seed),
            LevelMode::Grid(_) => None,
        },
        per_batch: scores,
    })
}

/// Evaluate the same task list under the same-sized evaluation as
/// `evaluate`, but over in-memory batches (used for speed-flow, whose
/// final evaluation task is built from the CSV splits).
pub fn evaluate_batches(
    model: &Model,
    batches: &[TaskBatch],
    n_tau: usize,
    mode: &LevelMode,
    process: &str,
) -> Result<EvalReport, CqnpError> {
    let scores: Vec<BatchScore> = batches
        .par_iter()
        .enumerate()
        .map(|(b, batch)| score_batch(model, batch, mode, b as u64, n_tau))
        .collect::<Result<_, _>>()?;
    let (mut cs, mut cn, mut ts, mut tn) = (0.0, 0usize, 0.0, 0usize);
    for s in &scores {
        cs += s.context_ll * s.context_points as f64;
        cn += s.context_points;
        ts += s.target_ll * s.target_points as f64;
        tn += s.target_points;
    }
    Ok(EvalReport {
        model: model.kind().name().to_string(),
        process: process.to_string(),
        n_tau,
        context_ll: cs / cn as f64,
        target_ll: ts / tn as f64,
        seed: match mode {
            LevelMode::Random { seed } => Some(*seed),
            LevelMode::Grid(_) => None,
        },
        per_batch: scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub model: String,
    pub n_tau: usize,
    pub context_ll: f64,
    pub target_ll: f64,
}

/// Evaluate two trained quantile models over fixed grids of several sizes.
/// Emits one row per (model, grid size).
pub fn ablate_ntau(
    acqnp: &Model,
    cqnp: &Model,
    frozen_path: &Path,
    grid_sizes: &[usize],
    process: &str,
) -> Result<Vec<AblationRow>, CqnpError> {
    if acqnp.kind() != ModelKind::Acqnp || cqnp.kind() != ModelKind::Cqnp {
        return Err(CqnpError::Usage(
            "ablation expects an acqnp and a cqnp model".into(),
        ));
    }
    let mut rows = Vec::with_capacity(2 * grid_sizes.len());
    for (name, model) in [("acqnp", acqnp), ("cqnp", cqnp)] {
        for &n in grid_sizes {
            let grid = UGrid::new(n)?;
            let report = evaluate(model, frozen_path, n, &LevelMode::Grid(grid), process)?;
            rows.push(AblationRow {
                model: name.to_string(),
                n_tau: n,
                context_ll: report.context_ll,
                target_ll: report.target_ll,
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<(), CqnpError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "model,n_tau,context_ll,target_ll")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.model, r.n_tau, r.context_ll, r.target_ll)?;
    }
    w.flush()?;
    Ok(())
}

/// Raw adapted levels at each x: `n_draws` fresh draws pushed through the
/// adaptor. ACQNP only.
pub fn tau_histogram(
    model: &Model,
    x_grid: &[f64],
    cx: &[f64],
    cy: &[f64],
    n_draws: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<f64>>, CqnpError> {
    if model.kind() != ModelKind::Acqnp {
        return Err(CqnpError::Usage(
            "level histograms require an adaptive model".into(),
        ));
    }
    if x_grid.is_empty() || n_draws == 0 {
        return Err(CqnpError::Usage("need at least one x and one draw".into()));
    }
    let emb = model.encode(cx, cy)?;
    let mut out = Vec::with_capacity(x_grid.len());
    for &x in x_grid {
        let mut taus = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            let u = ((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
                .clamp(1e-12, 1.0 - 1e-12);
            taus.push(model.adapt_tau(x, &emb, u)?);
        }
        out.push(taus);
    }
    Ok(out)
}

/// Fraction of values lying within eps of any mode center.
pub fn bimodality_score(values: &[f64], mode_centers: &[f64], eps: f64) -> Result<f64, CqnpError> {
    if values.is_empty() || mode_centers.is_empty() {
        return Err(CqnpError::Usage(
            "bimodality score needs values and at least one center".into(),
        ));
    }
    if eps <= 0.0 {
        return Err(CqnpError::Usage(format!("eps must be > 0, got {eps}")));
    }
    let hits = values
        .iter()
        .filter(|v| mode_centers.iter().any(|c| (*v - c).abs() < eps))
        .count();
    Ok(hits as f64 / values.len() as f64)
}

/// Export decoded curves for plotting. Quantile kinds: one row per
/// (x, level) carrying the warped level, location, mixing weight, and the
/// Monte Carlo predictive mean of that x. CNP: one row per x with
/// (mu, sigma).
pub fn export_curves(
    model: &Model,
    task: &FunctionSample,
    levels: &[f64],
    mean_draws: usize,
    rng: &mut dyn RngCore,
    path: &Path,
) -> Result<(), CqnpError> {
    let (cx, cy) = task.context();
    let (tx, _) = task.target();
    let mut w = BufWriter::new(File::create(path)?);
    if model.kind() == ModelKind::Cnp {
        writeln!(w, "x,mu,sigma")?;
        let emb = model.encode(cx, cy)?;
        for &x in tx {
            let (mu, sigma) = model.decode_gaussian(x, &emb)?;
            writeln!(w, "{x},{mu},{sigma}")?;
        }
        w.flush()?;
        return Ok(());
    }
    let curves = model.predict_quantiles(tx, cx, cy, levels)?;
    let means = model.predict_mean(tx, cx, cy, mean_draws, rng)?;
    writeln!(w, "x,u,tau,mu_tau,weight,mean")?;
    for ((x, points), mean) in tx.iter().zip(&curves).zip(&means) {
        for p in points {
            writeln!(w, "{x},{},{},{},{},{mean}", p.u, p.tau, p.mu, p.weight)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::task::{freeze_test_set, ProcessSpec};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("cqnp-eval-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn small_model(kind: ModelKind, seed: u64) -> Model {
        Model::init(
            ModelConfig::uniform(kind, 8, 8, 2, 2).unwrap(),
            seed,
        )
    }

    #[test]
    fn ugrid_matches_the_closed_form() {
        let g3 = UGrid::new(3).unwrap();
        assert_eq!(g3.levels(), &[0.001, 0.5, 0.999]);
        let g5 = UGrid::new(5).unwrap();
        for (have, want) in g5.levels().iter().zip(&[0.001, 0.2505, 0.5, 0.7495, 0.999]) {
            assert!((have - want).abs() < 1e-12);
        }
        for n in 2..40 {
            let g = UGrid::new(n).unwrap();
            assert_eq!(g.levels().len(), n);
            assert_eq!(g.levels()[0], 0.001);
            assert_eq!(*g.levels().last().unwrap(), 0.999);
            assert!(g.levels().windows(2).all(|w| w[0] < w[1]));
        }
        assert!(UGrid::new(1).is_err());
    }

    #[test]
    fn evaluate_is_deterministic_and_kind_checked() {
        let path = tmp("frozen-small.ndjson");
        freeze_test_set(&ProcessSpec::circle(), 2, 3, 3, &path).unwrap();
        let model = small_model(ModelKind::Cqnp, 5);
        let a = evaluate(&model, &path, 6, &LevelMode::Random { seed: 9 }, "circle").unwrap();
        let b = evaluate(&model, &path, 6, &LevelMode::Random { seed: 9 }, "circle").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_batch.len(), 2);
        assert!(a.context_ll.is_finite() && a.target_ll.is_finite());
    }

    #[test]
    fn grid_mode_is_a_pure_function_of_inputs() {
        let path = tmp("frozen-grid.ndjson");
        freeze_test_set(&ProcessSpec::lissajous(), 2, 2, 4, &path).unwrap();
        let model = small_model(ModelKind::Acqnp, 6);
        let g = LevelMode::Grid(UGrid::new(5).unwrap());
        let a = evaluate(&model, &path, 5, &g, "lissajous").unwrap();
        let b = evaluate(&model, &path, 5, &g, "lissajous").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alpha_logit_shift_in_a_checkpoint_leaves_reports_unchanged() {
        let path = tmp("frozen-shift.ndjson");
        freeze_test_set(&ProcessSpec::circle(), 2, 2, 8, &path).unwrap();
        let mut model = small_model(ModelKind::Cqnp, 7);
        let g = LevelMode::Grid(UGrid::new(4).unwrap());
        let base = evaluate(&model, &path, 4, &g, "circle").unwrap();
        {
            let layers = model.decoder_mut().layers_mut();
            let (_, bias) = layers.last_mut().unwrap();
            let v = bias.get(0, 0);
            bias.set(0, 0, v + 55.5);
        }
        let shifted = evaluate(&model, &path, 4, &g, "circle").unwrap();
        assert!((base.context_ll - shifted.context_ll).abs() < 1e-10);
        assert!((base.target_ll - shifted.target_ll).abs() < 1e-10);
    }

    #[test]
    fn ablation_emits_rows_for_both_models_and_all_grids() {
        let path = tmp("frozen-ablate.ndjson");
        freeze_test_set(&ProcessSpec::lissajous(), 1, 2, 2, &path).unwrap();
        let acqnp = small_model(ModelKind::Acqnp, 11);
        let cqnp = small_model(ModelKind::Cqnp, 12);
        let rows = ablate_ntau(&acqnp, &cqnp, &path, &[3, 5], "lissajous").unwrap();
        assert_eq!(rows.len(), 4);
        let csv_path = tmp("ablate.csv");
        write_ablation_csv(&rows, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("model,n_tau,context_ll,target_ll"));
        assert_eq!(text.lines().count(), 5);
        // kind check
        assert!(ablate_ntau(&cqnp, &cqnp, &path, &[3], "x").is_err());
    }

    #[test]
    fn tau_histogram_contract() {
        let acqnp = small_model(ModelKind::Acqnp, 13);
        let cnp = small_model(ModelKind::Cnp, 13);
        let mut rng = substream(1, Stream::Eval, &[]);
        assert!(tau_histogram(&cnp, &[0.0], &[0.0], &[0.0], 5, &mut rng).is_err());
        let taus = tau_histogram(&acqnp, &[0.0, 1.0], &[0.0], &[0.0], 64, &mut rng).unwrap();
        assert_eq!(taus.len(), 2);
        for per_x in &taus {
            assert_eq!(per_x.len(), 64);
            assert!(per_x.iter().all(|t| (1e-3..=1.0 - 1e-3).contains(t)));
        }

        // Zero-weight adaptor: every draw maps to 0.5.
        let zero = Model::zeroed(ModelConfig::uniform(ModelKind::Acqnp, 8, 8, 2, 2).unwrap());
        let taus = tau_histogram(&zero, &[0.3], &[0.1], &[0.2], 16, &mut rng).unwrap();
        assert!(taus[0].iter().all(|&t| t == 0.5));
    }

    #[test]
    fn bimodality_score_extremes() {
        assert_eq!(bimodality_score(&[1.0, 1.01], &[1.0], 0.05).unwrap(), 1.0);
        assert_eq!(bimodality_score(&[5.0, -5.0], &[0.0], 0.1).unwrap(), 0.0);
        assert_eq!(
            bimodality_score(&[0.0, 1.0, 2.0, 3.0], &[0.0, 3.0], 0.5).unwrap(),
            0.5
        );
        assert!(bimodality_score(&[], &[0.0], 0.1).is_err());
        assert!(bimodality_score(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn export_schemas_per_kind() {
        let task = FunctionSample {
            x: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            y: vec![0.1, -0.1, 0.2, -0.2, 0.3, -0.3],
            n_context: 3,
        };
        let q = small_model(ModelKind::Cqnp, 21);
        let pq = tmp("curves-q.csv");
        let mut rng = substream(2, Stream::Eval, &[]);
        let levels: Vec<f64> = (1..=10).map(|i| i as f64 / 11.0).collect();
        export_curves(&q, &task, &levels, 20, &mut rng, &pq).unwrap();
        let text = std::fs::read_to_string(&pq).unwrap();
        assert!(text.starts_with("x,u,tau,mu_tau,weight,mean"));
        // 3 target points x 10 levels
        assert_eq!(text.lines().count(), 1 + 30);

        let c = small_model(ModelKind::Cnp, 22);
        let pc = tmp("curves-c.csv");
        export_curves(&c, &task, &levels, 20, &mut rng, &pc).unwrap();
        let text = std::fs::read_to_string(&pc).unwrap();
        assert!(text.starts_with("x,mu,sigma"));
        assert_eq!(text.lines().count(), 1 + 3);
    }

    #[test]
    fn export_is_seed_deterministic() {
        let task = FunctionSample {
            x: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            y: vec![0.1, -0.1, 0.2, -0.2, 0.3, -0.3],
            n_context: 3,
        };
        let q = small_model(ModelKind::Acqnp, 23);
        let p1 = tmp("det1.csv");
        let p2 = tmp("det2.csv");
        let levels = [0.25, 0.75];
        let mut r1 = substream(3, Stream::Eval, &[]);
        export_curves(&q, &task, &levels, 8, &mut r1, &p1).unwrap();
        let mut r2 = substream(3, Stream::Eval, &[]);
        export_curves(&q, &task, &levels, 8, &mut r2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
