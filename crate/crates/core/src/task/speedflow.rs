//! Speed-flow CSV ingestion and the per-lane train/test protocol.
//!
//! Input schema: a header `lane,flow,speed` followed by one row per
//! measurement, lanes 2 and 3. Per lane, 75% of rows (randomly selected)
//! form the training split; flow and speed are each min-max scaled to
//! [0, 1] with statistics computed on the training split only. Training
//! iterations reshuffle the training split and draw a fresh context size;
//! the final evaluation task uses the whole training split as context and
//! the held-out rows as targets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::CqnpError;
use crate::rng::{substream, Stream};
use crate::task::FunctionSample;

/// One lane's scaled measurements: x = flow, y = speed, training rows first.
#[derive(Debug, Clone)]
pub struct SpeedFlowLane {
    pub lane: u8,
    /// Scaled flow, training rows then test rows.
    pub x: Vec<f64>,
    /// Scaled speed, same order.
    pub y: Vec<f64>,
    pub n_train: usize,
}

impl SpeedFlowLane {
    /// The final-evaluation task: context = training split, target = test
    /// split.
    pub fn eval_task(&self) -> FunctionSample {
        FunctionSample {
            x: self.x.clone(),
            y: self.y.clone(),
            n_context: self.n_train,
        }
    }

    /// One training task: the training split reshuffled, context size drawn
    /// from U[500, n_train - 3] (clamped for small datasets).
    pub fn train_task(&self, rng: &mut impl Rng) -> FunctionSample {
        let lo = 500.min(self.n_train - 3);
        let n_context = rng.random_range(lo..=self.n_train - 3);
        self.train_task_with(n_context, rng)
    }

    /// A training task with a caller-chosen context size (batches share one
    /// split size across lanes).
    pub fn train_task_with(&self, n_context: usize, rng: &mut impl Rng) -> FunctionSample {
        let mut idx: Vec<usize> = (0..self.n_train).collect();
        idx.shuffle(rng);
        FunctionSample {
            x: idx.iter().map(|&i| self.x[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_context,
        }
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Ingest the CSV and build both lanes. All randomness (the 75% split)
/// derives from `seed`.
pub fn load_speed_flow(path: &Path, seed: u64) -> Result<[SpeedFlowLane; 2], CqnpError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut rows: Vec<(u8, f64, f64)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if i == 0 {
            let header = line.trim();
            if header != "lane,flow,speed" {
                return Err(CqnpError::Ingest(format!(
                    "line {line_no}: expected header 'lane,flow,speed', got '{header}'"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 3 {
            return Err(CqnpError::Ingest(format!(
                "line {line_no}: expected 3 fields, got {}",
                fields.len()
            )));
        }
        let lane: u8 = fields[0]
            .parse()
            .map_err(|_| CqnpError::Ingest(format!("line {line_no}: bad lane '{}'", fields[0])))?;
        let flow: f64 = fields[1]
            .parse()
            .map_err(|_| CqnpError::Ingest(format!("line {line_no}: bad flow '{}'", fields[1])))?;
        let speed: f64 = fields[2]
            .parse()
            .map_err(|_| CqnpError::Ingest(format!("line {line_no}: bad speed '{}'", fields[2])))?;
        if lane != 2 && lane != 3 {
            return Err(CqnpError::Ingest(format!(
                "line {line_no}: lane must be 2 or 3, got {lane}"
            )));
        }
        if !flow.is_finite() || !speed.is_finite() {
            return Err(CqnpError::Ingest(format!(
                "line {line_no}: non-finite measurement"
            )));
        }
        rows.push((lane, flow, speed));
    }

    let mut lanes = Vec::with_capacity(2);
    for lane_id in [2u8, 3u8] {
        let lane_rows: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.0 == lane_id)
            .map(|r| (r.1, r.2))
            .collect();
        if lane_rows.len() < 8 {
            return Err(CqnpError::Ingest(format!(
                "lane {lane_id} has only {} rows",
                lane_rows.len()
            )));
        }
        let mut idx: Vec<usize> = (0..lane_rows.len()).collect();
        let mut rng = substream(seed, Stream::Split, &[lane_id as u64]);
        idx.shuffle(&mut rng);
        let n_train = lane_rows.len() * 3 / 4;

        let (flow_lo, flow_hi) = min_max(idx[..n_train].iter().map(|&i| lane_rows[i].0));
        let (speed_lo, speed_hi) = min_max(idx[..n_train].iter().map(|&i| lane_rows[i].1));
        if flow_hi <= flow_lo || speed_hi <= speed_lo {
            return Err(CqnpError::Ingest(format!(
                "lane {lane_id}: degenerate training range"
            )));
        }

        let x: Vec<f64> = idx
            .iter()
            .map(|&i| (lane_rows[i].0 - flow_lo) / (flow_hi - flow_lo))
            .collect();
        let y: Vec<f64> = idx
            .iter()
            .map(|&i| (lane_rows[i].1 - speed_lo) / (speed_hi - speed_lo))
            .collect();
        lanes.push(SpeedFlowLane {
            lane: lane_id,
            x,
            y,
            n_train,
        });
    }
    let l3 = lanes.pop().unwrap();
    let l2 = lanes.pop().unwrap();
    Ok([l2, l3])
}

/// Write a synthetic stand-in dataset with the documented schema: 1318
/// rows per lane, a fast free-flow branch and a congested branch so the
/// conditional speed distribution is bimodal over mid-range flows.
///
/// The measured dataset ships inside an R package; export it to this
/// schema to reproduce the real experiment.
pub fn write_synthetic_speed_flow(path: &Path, seed: u64) -> Result<(), CqnpError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "lane,flow,speed")?;
    for lane in [2u8, 3u8] {
        let mut rng = substream(seed, Stream::Noise, &[lane as u64]);
        // Lane 3 runs slightly slower and carries a bit more congestion.
        let (free_speed, congested_share) = if lane == 2 { (65.0, 0.25) } else { (61.0, 0.30) };
        for _ in 0..1318 {
            let congested = rng.random::<f64>() < congested_share;
            let (flow, speed) = if congested {
                let f = rng.random_range(400.0..2000.0);
                let s = 12.0 + 18.0 * (f / 2000.0) + 3.0 * centered(&mut rng);
                (f, s.max(3.0))
            } else {
                let f = rng.random_range(100.0..2200.0);
                let s = free_speed - 4.0 * (f / 2200.0f64).powi(2) + 1.5 * centered(&mut rng);
                (f, s)
            };
            writeln!(w, "{lane},{flow:.1},{speed:.2}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Roughly standard-normal perturbation from summed uniforms.
fn centered(rng: &mut impl Rng) -> f64 {
    let s: f64 = (0..12).map(|_| rng.random::<f64>()).sum();
    s - 6.0
}
