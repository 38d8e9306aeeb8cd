//! Declarative run configuration and the named presets.
//!
//! A run is described by a TOML document with [process], [model], [train],
//! [eval], and [paths] sections; unknown keys are rejected. Presets named
//! `<kind>/<process>` (e.g. `cqnp/double_sine`) carry the reference
//! hyperparameters and architectures for every experiment, and explicit
//! fields override whatever the preset supplies.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::MlpSpec;
use crate::error::CqnpError;
use crate::model::{ModelConfig, ModelKind, Which};
use crate::task::ProcessSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<PathsSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSection {
    pub name: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<String>,
    /// Full width lists including input and output layers.
    pub encoder: Option<Vec<usize>>,
    pub decoder: Option<Vec<usize>>,
    pub adaptor: Option<Vec<usize>>,
    /// Adaptor hidden depth; ignored when an explicit adaptor list is given.
    pub adaptor_depth: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub l2: Option<f64>,
    pub n_tau: Option<usize>,
    pub log_every: Option<usize>,
    pub threads: Option<usize>,
    pub target_only_loss: Option<bool>,
    pub ckpt_every: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_tau: Option<usize>,
    pub grid: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub frozen: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub speedflow_csv: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CqnpError> {
        toml::from_str(text).map_err(|e| CqnpError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CqnpError> {
        toml::to_string(self).map_err(|e| CqnpError::Config(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CqnpError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Fill every unset field from `base` (preset < config-file < flags is
    /// realized by layering twice).
    pub fn or_from(mut self, base: &RunConfig) -> RunConfig {
        fn merge<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if dst.is_none() {
                *dst = src.clone();
            }
        }
        merge(&mut self.seed, &base.seed);
        merge(&mut self.preset, &base.preset);
        match (&mut self.process, &base.process) {
            (p @ None, Some(b)) => *p = Some(b.clone()),
            (Some(p), Some(b)) => merge(&mut p.name, &b.name),
            _ => {}
        }
        match (&mut self.model, &base.model) {
            (m @ None, Some(b)) => *m = Some(b.clone()),
            (Some(m), Some(b)) => {
                merge(&mut m.kind, &b.kind);
                merge(&mut m.encoder, &b.encoder);
                merge(&mut m.decoder, &b.decoder);
                merge(&mut m.adaptor, &b.adaptor);
                merge(&mut m.adaptor_depth, &b.adaptor_depth);
            }
            _ => {}
        }
        match (&mut self.train, &base.train) {
            (t @ None, Some(b)) => *t = Some(b.clone()),
            (Some(t), Some(b)) => {
                merge(&mut t.iterations, &b.iterations);
                merge(&mut t.batch_size, &b.batch_size);
                merge(&mut t.lr, &b.lr);
                merge(&mut t.l2, &b.l2);
                merge(&mut t.n_tau, &b.n_tau);
                merge(&mut t.log_every, &b.log_every);
                merge(&mut t.threads, &b.threads);
                merge(&mut t.target_only_loss, &b.target_only_loss);
                merge(&mut t.ckpt_every, &b.ckpt_every);
            }
            _ => {}
        }
        match (&mut self.eval, &base.eval) {
            (e @ None, Some(b)) => *e = Some(b.clone()),
            (Some(e), Some(b)) => {
                merge(&mut e.n_tau, &b.n_tau);
                merge(&mut e.grid, &b.grid);
            }
            _ => {}
        }
        match (&mut self.paths, &base.paths) {
            (p @ None, Some(b)) => *p = Some(b.clone()),
            (Some(p), Some(b)) => {
                merge(&mut p.frozen, &b.frozen);
                merge(&mut p.checkpoint, &b.checkpoint);
                merge(&mut p.log, &b.log);
                merge(&mut p.out, &b.out);
                merge(&mut p.speedflow_csv, &b.speedflow_csv);
            }
            _ => {}
        }
        self
    }
}

/// Reference hyperparameters for one (kind, process) pair.
struct PresetRow {
    kind: ModelKind,
    process: &'static str,
    lr: f64,
    l2: f64,
    n_tau_train: usize,
    n_tau_test: usize,
    adaptor_depth: usize,
}

/// lr / l2 / level counts / adaptor depths per benchmark row. Synthetic
/// rows train 1e5 iterations at batch 128; speed-flow trains 1e4 saved
/// splits at batch 2 (both lanes).
const PRESETS: &[PresetRow] = &[
    // Gaussian baseline
    row(ModelKind::Cnp, "sawtooth", 5e-4, 0.0, 0),
    row(ModelKind::Cnp, "rbf", 5e-4, 0.0, 0),
    row(ModelKind::Cnp, "matern52", 5e-4, 0.0, 0),
    row(ModelKind::Cnp, "double_sine", 5e-4, 0.0, 0),
    row(ModelKind::Cnp, "circle", 5e-4, 1e-5, 0),
    row(ModelKind::Cnp, "lissajous", 5e-4, 0.0, 0),
    row_sf(ModelKind::Cnp, 1e-4, 1e-5, 0),
    // Quantile mixture, uniform levels
    row(ModelKind::Cqnp, "sawtooth", 5e-4, 1e-5, 0),
    row(ModelKind::Cqnp, "rbf", 1e-3, 1e-5, 0),
    row(ModelKind::Cqnp, "matern52", 5e-3, 1e-5, 0),
    row(ModelKind::Cqnp, "double_sine", 1e-3, 1e-5, 0),
    row(ModelKind::Cqnp, "circle", 1e-3, 0.0, 0),
    row(ModelKind::Cqnp, "lissajous", 1e-3, 1e-5, 0),
    row_sf(ModelKind::Cqnp, 5e-3, 1e-5, 0),
    // Quantile mixture with learned level adaptation
    row(ModelKind::Acqnp, "sawtooth", 5e-4, 0.0, 3),
    row(ModelKind::Acqnp, "rbf", 1e-3, 0.0, 5),
    row(ModelKind::Acqnp, "matern52", 1e-3, 1e-5, 4),
    row(ModelKind::Acqnp, "double_sine", 1e-3, 1e-5, 5),
    row(ModelKind::Acqnp, "circle", 1e-3, 1e-5, 5),
    row(ModelKind::Acqnp, "lissajous", 1e-3, 1e-5, 5),
    row_sf(ModelKind::Acqnp, 5e-3, 1e-5, 2),
];

const fn row(kind: ModelKind, process: &'static str, lr: f64, l2: f64, adaptor_depth: usize) -> PresetRow {
    PresetRow {
        kind,
        process,
        lr,
        l2,
        n_tau_train: 50,
        n_tau_test: 100,
        adaptor_depth,
    }
}

const fn row_sf(kind: ModelKind, lr: f64, l2: f64, adaptor_depth: usize) -> PresetRow {
    PresetRow {
        kind,
        process: "speed_flow",
        lr,
        l2,
        n_tau_train: 100,
        n_tau_test: 50,
        adaptor_depth,
    }
}

/// All preset names, for `--help`.
pub fn preset_names() -> Vec<String> {
    PRESETS
        .iter()
        .map(|r| format!("{}/{}", r.kind.name(), r.process))
        .collect()
}

/// Expand a preset name into a fully-populated config.
pub fn preset(name: &str) -> Result<RunConfig, CqnpError> {
    let Some((kind_s, process_s)) = name.split_once('/') else {
        return Err(CqnpError::Config(format!(
            "preset '{name}' should look like 'cqnp/double_sine'"
        )));
    };
    let kind = ModelKind::from_name(kind_s)?;
    ProcessSpec::from_name(process_s)?;
    let prow = PRESETS
        .iter()
        .find(|r| r.kind == kind && r.process == process_s)
        .ok_or_else(|| CqnpError::Config(format!("no preset '{name}'")))?;

    let speed_flow = process_s == "speed_flow";
    let (width, depth, d_e) = if speed_flow { (64, 2, 64) } else { (128, 3, 128) };
    let encoder = uniform_widths(2, width, depth, d_e);
    let decoder = match kind {
        ModelKind::Cnp => uniform_widths(1 + d_e, width, depth, 2),
        _ => uniform_widths(2 + d_e, width, depth, 3),
    };
    let adaptor = match kind {
        ModelKind::Acqnp => Some(uniform_widths(2 + d_e, width, prow.adaptor_depth, 1)),
        _ => None,
    };

    Ok(RunConfig {
        seed: None,
        preset: Some(name.to_string()),
        process: Some(ProcessSection {
            name: Some(process_s.to_string()),
        }),
        model: Some(ModelSection {
            kind: Some(kind.name().to_string()),
            encoder: Some(encoder),
            decoder: Some(decoder),
            adaptor,
            adaptor_depth: Some(prow.adaptor_depth),
        }),
        train: Some(TrainSection {
            iterations: Some(if speed_flow { 10_000 } else { 100_000 }),
            batch_size: Some(if speed_flow { 2 } else { 128 }),
            lr: Some(prow.lr),
            l2: Some(prow.l2),
            n_tau: Some(prow.n_tau_train),
            log_every: Some(100),
            threads: Some(1),
            target_only_loss: Some(false),
            ckpt_every: None,
        }),
        eval: Some(EvalSection {
            n_tau: Some(prow.n_tau_test),
            grid: Some(false),
        }),
        paths: None,
    })
}

fn uniform_widths(d_in: usize, hidden: usize, depth: usize, d_out: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(depth + 2);
    v.push(d_in);
    v.extend(std::iter::repeat(hidden).take(depth));
    v.push(d_out);
    v
}

/// The concrete settings a resolved config yields.
pub struct Resolved {
    pub seed: u64,
    pub process: ProcessSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_n_tau: usize,
    pub eval_grid: bool,
    pub paths: PathsSection,
}

/// Resolve a layered config into concrete model/train settings.
pub fn resolve(cfg: &RunConfig) -> Result<Resolved, CqnpError> {
    let seed = cfg.seed.unwrap_or(0);
    let process_name = cfg
        .process
        .as_ref()
        .and_then(|p| p.name.clone())
        .ok_or_else(|| CqnpError::Config("no process selected".into()))?;
    let process = ProcessSpec::from_name(&process_name)?;

    let model_sec = cfg
        .model
        .as_ref()
        .ok_or_else(|| CqnpError::Config("no model section".into()))?;
    let kind = ModelKind::from_name(
        model_sec
            .kind
            .as_deref()
            .ok_or_else(|| CqnpError::Config("no model kind".into()))?,
    )?;
    let enc = MlpSpec::new(
        model_sec
            .encoder
            .clone()
            .ok_or_else(|| CqnpError::Config("no encoder widths".into()))?,
    )?;
    let dec = MlpSpec::new(
        model_sec
            .decoder
            .clone()
            .ok_or_else(|| CqnpError::Config("no decoder widths".into()))?,
    )?;
    let adaptor = match (kind, &model_sec.adaptor) {
        (ModelKind::Acqnp, Some(w)) => Some(MlpSpec::new(w.clone())?),
        (ModelKind::Acqnp, None) => {
            let depth = model_sec.adaptor_depth.unwrap_or(2);
            Some(MlpSpec::uniform(1 + enc.d_out() + 1, 128, depth, 1)?)
        }
        _ => None,
    };
    let model = ModelConfig::new(kind, 1, 1, enc, dec, adaptor)?;

    let t = cfg.train.clone().unwrap_or_default();
    let mut train = TrainConfig::new(
        t.iterations.unwrap_or(1000),
        t.batch_size.unwrap_or(32),
        t.lr.unwrap_or(1e-3),
        t.l2.unwrap_or(0.0),
        t.n_tau.unwrap_or(50),
        seed,
    );
    train.threads = t.threads.unwrap_or(1);
    train.log_every = t.log_every.unwrap_or(100);
    train.ckpt_every = t.ckpt_every;
    train.loss_points = if t.target_only_loss.unwrap_or(false) {
        Which::Target
    } else {
        Which::All
    };
    let e = cfg.eval.clone().unwrap_or_default();

    Ok(Resolved {
        seed,
        process,
        model,
        train,
        eval_n_tau: e.n_tau.unwrap_or(100),
        eval_grid: e.grid.unwrap_or(false),
        paths: cfg.paths.clone().unwrap_or_default(),
    })
}
