//! Mini-batch maximum-likelihood training for all three model kinds.
//!
//! Each iteration draws a fresh batch of tasks, scores every point of every
//! task (context and target: the model is judged on reconstructing context
//! too), backpropagates the mean negative log-likelihood, and applies one
//! Adam step. All randomness is keyed by (seed, iteration, task index), so
//! a run is reproducible bit for bit at any thread count.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{AdamState, Matrix};
use crate::error::CqnpError;
use crate::model::{EvalCounters, LevelSource, Model, ModelConfig, Which};
use crate::rng::{substream, Stream};
use crate::task::speedflow::SpeedFlowLane;
use crate::task::{make_batch, FunctionSample, ProcessSpec, SplitMode, TaskBatch};

/// Where training batches come from.
pub enum DataSource {
    Process(ProcessSpec),
    /// Both lanes; every iteration is one batch of two tasks sharing a
    /// fresh context size.
    SpeedFlow(Box<[SpeedFlowLane; 2]>),
}

impl DataSource {
    /// The batch for one training iteration.
    pub fn train_batch(
        &self,
        n_b: usize,
        seed: u64,
        iteration: u64,
    ) -> Result<TaskBatch, CqnpError> {
        match self {
            DataSource::Process(spec) => {
                let mut rng = substream(seed, Stream::Data, &[iteration]);
                make_batch(spec, n_b, &mut rng, SplitMode::Train)
            }
            DataSource::SpeedFlow(lanes) => {
                let mut rng = substream(seed, Stream::Data, &[iteration]);
                let n_train = lanes[0].n_train;
                let lo = 500.min(n_train - 3);
                let n_context = rng.random_range(lo..=n_train - 3);
                let samples: Vec<FunctionSample> = lanes
                    .iter()
                    .map(|lane| {
                        let mut lane_rng =
                            substream(seed, Stream::Split, &[iteration, lane.lane as u64]);
                        lane.train_task_with(n_context, &mut lane_rng)
                    })
                    .collect();
                TaskBatch::new(samples)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub n_tau: usize,
    pub seed: u64,
    pub threads: usize,
    /// Points entering the loss; `Which::All` is the standard protocol.
    pub loss_points: Which,
    pub log_every: usize,
    pub log_path: Option<PathBuf>,
    pub ckpt_every: Option<usize>,
    pub ckpt_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(iterations: usize, batch_size: usize, lr: f64, l2: f64, n_tau: usize, seed: u64) -> Self {
        TrainConfig {
            iterations,
            batch_size,
            lr,
            l2,
            n_tau,
            seed,
            threads: 1,
            loss_points: Which::All,
            log_every: 100,
            log_path: None,
            ckpt_every: None,
            ckpt_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), CqnpError> {
        if self.iterations == 0 || self.n_tau == 0 || self.batch_size == 0 {
            return Err(CqnpError::Config(
                "iterations, batch size, and level count must be >= 1".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(CqnpError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.l2 < 0.0 {
            return Err(CqnpError::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Default, Clone)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub restarts: u32,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Mean negative log-likelihood of a batch with fresh level draws.
pub fn loss_batch(
    model: &Model,
    batch: &TaskBatch,
    n_tau: usize,
    level_seed: u64,
    counters: Option<&mut EvalCounters>,
) -> Result<f64, CqnpError> {
    let mut scratch = EvalCounters::default();
    let counters = counters.unwrap_or(&mut scratch);
    let mut total = 0.0;
    let mut points = 0usize;
    for (i, task) in batch.samples().iter().enumerate() {
        let mut rng = substream(level_seed, Stream::Levels, &[i as u64]);
        let mut levels = LevelSource::Draws { rng: &mut rng, n_tau };
        let lls = model.predictive_log_lik(task, Which::All, &mut levels, Some(counters))?;
        total -= lls.iter().sum::<f64>();
        points += lls.len();
    }
    Ok(total / points as f64)
}

/// Tasks are fused into stacked graphs of roughly this many decoder rows;
/// the chunk layout depends only on the batch shape, never on the thread
/// count, so results are schedule-independent.
const TARGET_CHUNK_ROWS: usize = 4096;

/// Batch loss and mean gradient. Within a chunk the stacked tasks share
/// one GEMM per layer; chunks are reduced in index order, so the result is
/// a pure function of (model, batch, seeds).
fn batch_loss_and_grads(
    model: &Model,
    batch: &TaskBatch,
    which: Which,
    n_tau: usize,
    level_seed: u64,
    level_gen: u64,
) -> Result<(f64, Vec<f64>), CqnpError> {
    let samples = batch.samples();
    let quantile = model.kind().is_quantile();
    let points_per_task = match which {
        Which::Context => batch.n_context(),
        Which::Target => batch.n_total() - batch.n_context(),
        Which::All => batch.n_total(),
    };
    let rows_per_task = points_per_task * if quantile { n_tau } else { 1 };
    let chunk_tasks = (TARGET_CHUNK_ROWS / rows_per_task.max(1)).clamp(1, 8);

    let per_chunk: Vec<Result<(f64, usize, Vec<f64>), CqnpError>> = samples
        .par_chunks(chunk_tasks)
        .enumerate()
        .map(|(c, chunk)| {
            let u_col = if quantile {
                // Level streams are keyed per task, so draws do not depend
                // on the chunking.
                let mut u = Vec::with_capacity(chunk.len() * points_per_task * n_tau);
                for t in 0..chunk.len() {
                    let task_idx = (c * chunk_tasks + t) as u64;
                    let mut rng =
                        substream(level_seed, Stream::Levels, &[level_gen, task_idx]);
                    for _ in 0..points_per_task * n_tau {
                        u.push(crate::dist::clamp_tau(rng.random::<f64>()));
                    }
                }
                Some(Matrix::column(&u))
            } else {
                None
            };
            model.nll_sum_and_grads_with(chunk, which, u_col.as_ref(), None)
        })
        .collect();

    let mut grads = vec![0.0; model.param_count()];
    let mut total = 0.0;
    let mut points = 0usize;
    for r in per_chunk {
        let (nll, n, g) = r?;
        total += nll;
        points += n;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let scale = 1.0 / points as f64;
    for g in &mut grads {
        *g *= scale;
    }
    Ok((total * scale, grads))
}

/// Run the training loop. On non-finite losses the loop rolls back to the
/// last good snapshot with a fresh level-stream offset, at most 3 times.
pub fn train(model_cfg: ModelConfig, data: &DataSource, cfg: &TrainConfig) -> Result<TrainOutcome, CqnpError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| CqnpError::Config(format!("thread pool: {e}")))?;
    pool.install(|| train_inner(model_cfg, data, cfg))
}

fn train_inner(model_cfg: ModelConfig, data: &DataSource, cfg: &TrainConfig) -> Result<TrainOutcome, CqnpError> {
    let mut model = Model::init(model_cfg, cfg.seed);
    let mut adam = AdamState::new(model.param_count(), cfg.lr, cfg.l2);
    let mut log = TrainLog::default();
    let mut log_writer = match &cfg.log_path {
        Some(p) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(w, "iteration,loss,grad_norm,seconds")?;
            Some(w)
        }
        None => None,
    };

    // Rollback state for the NaN policy.
    let snapshot_every = cfg.ckpt_every.unwrap_or(500).max(1);
    let mut snapshot = (model.params_flat(), adam.clone(), 0usize);
    let mut level_gen = 0u64;
    let start = Instant::now();

    let mut it = 0usize;
    while it < cfg.iterations {
        let batch = data.train_batch(cfg.batch_size, cfg.seed, it as u64)?;
        let step = batch_loss_and_grads(&model, &batch, cfg.loss_points, cfg.n_tau, cfg.seed, level_gen)
            .and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(CqnpError::Numerical(format!(
                        "loss {loss} at iteration {it}"
                    )));
                }
                let mut flat = model.params_flat();
                adam.step(&mut flat, &grads)?;
                model.set_params_flat(&flat)?;
                Ok((loss, grads))
            });

        match step {
            Ok((loss, grads)) => {
                if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
                    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                    let row = LogRow {
                        iteration: it,
                        loss,
                        grad_norm,
                        seconds: start.elapsed().as_secs_f64(),
                    };
                    if let Some(w) = &mut log_writer {
                        writeln!(
                            w,
                            "{},{},{},{:.3}",
                            row.iteration, row.loss, row.grad_norm, row.seconds
                        )?;
                    }
                    log.rows.push(row);
                }
                it += 1;
                if it % snapshot_every == 0 {
                    snapshot = (model.params_flat(), adam.clone(), it);
                    if let Some(path) = &cfg.ckpt_path {
                        crate::checkpoint::save(&model, path)?;
                    }
                }
            }
            Err(CqnpError::Numerical(msg)) => {
                log.restarts += 1;
                if log.restarts > 3 {
                    return Err(CqnpError::Numerical(format!(
                        "persistent numerical failure after {} restarts (last: {msg}); \
                         last good iteration {}",
                        log.restarts - 1,
                        snapshot.2
                    )));
                }
                model.set_params_flat(&snapshot.0)?;
                adam = snapshot.1.clone();
                it = snapshot.2;
                level_gen += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(w) = &mut log_writer {
        w.flush()?;
    }
    if let Some(path) = &cfg.ckpt_path {
        crate::checkpoint::save(&model, path)?;
    }
    Ok(TrainOutcome { model, log })
}
