//! Generative processes, the context/target split protocol, batching, and
//! frozen test-set serialization.
//!
//! A task is one realization of a stochastic process: n points (x_l, y_l)
//! with the first `n_context` of them observed. During training the total
//! count is drawn per batch from U[6, 100] and the split index from
//! U[3, n_total - 3]; at test time n_total is fixed at 500 with the split
//! drawn from U[3, 100], and test batches are generated once, serialized,
//! and shared across models.

pub mod speedflow;

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CqnpError;
use crate::rng::{substream, Stream};

/// Half-open interval [lo, hi).
pub type Range = (f64, f64);

fn draw(rng: &mut impl Rng, r: Range) -> f64 {
    rng.random_range(r.0..r.1)
}

/// A named generative process with its parameter ranges. The constructors
/// carry the standard ranges for each process family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessSpec {
    /// Two sinusoidal branches; each point lands on one of them with equal
    /// probability, so the conditional law of y is bimodal at every x.
    DoubleSine {
        s: Range,
        amp1: Range,
        amp2: Range,
        freq1: Range,
        freq2: Range,
    },
    /// Points on a circle of random radius and center offset; y is bimodal
    /// inside the disk's x-extent.
    Circle { s: Range, radius: Range, offset: Range },
    /// A Lissajous figure traced in (x, y).
    Lissajous {
        s: Range,
        amp_x: Range,
        amp_y: Range,
        freq: Range,
        phase: Range,
    },
    /// Fourier partial sum of a sawtooth wave.
    Sawtooth {
        s: Range,
        amp: Range,
        freq: Range,
        shift: Range,
        terms: (u32, u32),
    },
    /// Zero-mean Gaussian process, squared-exponential covariance plus a
    /// constant offset component.
    GpRbf {
        s: Range,
        len_scale: f64,
        sigma: f64,
        offset: f64,
    },
    /// Zero-mean Gaussian process with Matern 5/2 covariance plus offset.
    GpMatern52 {
        s: Range,
        len_scale: f64,
        sigma: f64,
        offset: f64,
    },
    /// Measured speed-flow data; tasks come from CSV ingestion, not sampling.
    SpeedFlow,
}

impl ProcessSpec {
    pub fn double_sine() -> Self {
        ProcessSpec::DoubleSine {
            s: (-2.0, 2.0),
            amp1: (0.5, 1.5),
            amp2: (0.5, 1.5),
            freq1: (1.0, 3.0),
            freq2: (1.0, 3.0),
        }
    }

    pub fn circle() -> Self {
        ProcessSpec::Circle {
            s: (-PI, PI),
            radius: (0.5, 1.5),
            offset: (-0.5, 0.5),
        }
    }

    pub fn lissajous() -> Self {
        ProcessSpec::Lissajous {
            s: (-PI, PI),
            amp_x: (1.0, 2.0),
            amp_y: (1.0, 2.0),
            freq: (0.5, 2.0),
            phase: (0.0, 2.0),
        }
    }

    pub fn sawtooth() -> Self {
        ProcessSpec::Sawtooth {
            s: (-2.0, 2.0),
            amp: (1.0, 2.0),
            freq: (1.0, 3.0),
            shift: (-2.0, 2.0),
            terms: (10, 20),
        }
    }

    pub fn gp_rbf() -> Self {
        ProcessSpec::GpRbf {
            s: (-2.0, 2.0),
            len_scale: 0.25,
            sigma: 0.75,
            offset: 0.02,
        }
    }

    pub fn gp_matern52() -> Self {
        ProcessSpec::GpMatern52 {
            s: (-2.0, 2.0),
            len_scale: 0.25,
            sigma: 0.75,
            offset: 0.02,
        }
    }

    /// Parse a CLI/config process name.
    pub fn from_name(name: &str) -> Result<Self, CqnpError> {
        match name {
            "double_sine" => Ok(Self::double_sine()),
            "circle" => Ok(Self::circle()),
            "lissajous" => Ok(Self::lissajous()),
            "sawtooth" => Ok(Self::sawtooth()),
            "rbf" => Ok(Self::gp_rbf()),
            "matern52" => Ok(Self::gp_matern52()),
            "speed_flow" => Ok(Self::SpeedFlow),
            other => Err(CqnpError::Config(format!(
                "unknown process '{other}' (expected one of: double_sine, circle, \
                 lissajous, sawtooth, rbf, matern52, speed_flow)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProcessSpec::DoubleSine { .. } => "double_sine",
            ProcessSpec::Circle { .. } => "circle",
            ProcessSpec::Lissajous { .. } => "lissajous",
            ProcessSpec::Sawtooth { .. } => "sawtooth",
            ProcessSpec::GpRbf { .. } => "rbf",
            ProcessSpec::GpMatern52 { .. } => "matern52",
            ProcessSpec::SpeedFlow => "speed_flow",
        }
    }
}

/// One realization of a process: parallel x/y lists with the split index.
/// Points `0..n_context` are the context set, the rest are targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(skip)]
    pub n_context: usize,
}

impl FunctionSample {
    pub fn n_total(&self) -> usize {
        self.x.len()
    }

    pub fn context(&self) -> (&[f64], &[f64]) {
        (&self.x[..self.n_context], &self.y[..self.n_context])
    }

    pub fn target(&self) -> (&[f64], &[f64]) {
        (&self.x[self.n_context..], &self.y[self.n_context..])
    }
}

/// Whether a split follows the training or the testing protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Train,
    Test,
}

/// Sample one function: process parameters are drawn once, then `n_points`
/// values of the latent index s, mapped through the process.
pub fn sample_function(
    spec: &ProcessSpec,
    rng: &mut impl Rng,
    n_points: usize,
) -> Result<FunctionSample, CqnpError> {
    if n_points < 6 {
        return Err(CqnpError::Usage(format!(
            "a task needs at least 6 points, got {n_points}"
        )));
    }
    let sample = match spec {
        ProcessSpec::DoubleSine {
            s,
            amp1,
            amp2,
            freq1,
            freq2,
        } => {
            let (a1, a2) = (draw(rng, *amp1), draw(rng, *amp2));
            let (w1, w2) = (draw(rng, *freq1), draw(rng, *freq2));
            let mut x = Vec::with_capacity(n_points);
            let mut y = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let sv = draw(rng, *s);
                // The branch indicator is drawn per point, which is what
                // makes the conditional law bimodal at each x.
                let p: f64 = rng.random();
                x.push(sv);
                y.push(if p < 0.5 {
                    a1 * (w1 * sv).sin()
                } else {
                    a2 * (w2 * sv).cos()
                });
            }
            FunctionSample { x, y, n_context: 0 }
        }
        ProcessSpec::Circle { s, radius, offset } => {
            let a = draw(rng, *radius);
            let d = draw(rng, *offset);
            let mut x = Vec::with_capacity(n_points);
            let mut y = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let sv = draw(rng, *s);
                x.push(a * sv.cos() + d);
                y.push(a * sv.sin() + d);
            }
            FunctionSample { x, y, n_context: 0 }
        }
        ProcessSpec::Lissajous {
            s,
            amp_x,
            amp_y,
            freq,
            phase,
        } => {
            let (a1, a2) = (draw(rng, *amp_x), draw(rng, *amp_y));
            let w = draw(rng, *freq);
            let d = draw(rng, *phase);
            let mut x = Vec::with_capacity(n_points);
            let mut y = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let sv = draw(rng, *s);
                x.push(a1 * (w * sv + d).sin());
                y.push(a2 * sv.sin());
            }
            FunctionSample { x, y, n_context: 0 }
        }
        ProcessSpec::Sawtooth {
            s,
            amp,
            freq,
            shift,
            terms,
        } => {
            let a = draw(rng, *amp);
            let w = draw(rng, *freq);
            let d = draw(rng, *shift);
            let k_max = rng.random_range(terms.0..terms.1);
            let mut x = Vec::with_capacity(n_points);
            let mut y = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let sv = draw(rng, *s);
                let mut acc = 0.0;
                for k in 1..=k_max {
                    let kf = k as f64;
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    acc += sign * (2.0 * PI * kf * w * (sv + d)).sin() / kf;
                }
                x.push(sv);
                y.push(a / 2.0 - a / PI * acc);
            }
            FunctionSample { x, y, n_context: 0 }
        }
        ProcessSpec::GpRbf {
            s,
            len_scale,
            sigma,
            offset,
        } => gp_sample(rng, n_points, *s, |d| {
            sigma * sigma * (-d * d / (2.0 * len_scale)).exp() + offset
        })?,
        ProcessSpec::GpMatern52 {
            s,
            len_scale,
            sigma,
            offset,
        } => gp_sample(rng, n_points, *s, |d| {
            let r = 5f64.sqrt() * d / len_scale;
            sigma * sigma * (1.0 + r + r * r / 3.0) * (-r).exp() + offset
        })?,
        ProcessSpec::SpeedFlow => {
            return Err(CqnpError::Usage(
                "speed-flow tasks are ingested from CSV, not sampled".into(),
            ))
        }
    };
    Ok(sample)
}

/// Draw y jointly from a zero-mean GP over uniformly drawn inputs.
fn gp_sample(
    rng: &mut impl Rng,
    n_points: usize,
    s_range: Range,
    cov: impl Fn(f64) -> f64,
) -> Result<FunctionSample, CqnpError> {
    let x: Vec<f64> = (0..n_points).map(|_| draw(rng, s_range)).collect();
    let n = n_points;
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = cov((x[i] - x[j]).abs());
        }
    }
    // Escalating diagonal jitter until the factorization goes through.
    let mut jitter = 1e-8;
    let chol = loop {
        let mut cj = c.clone();
        for i in 0..n {
            cj[i * n + i] += jitter;
        }
        match cholesky_in_place(&mut cj, n) {
            Ok(()) => break cj,
            Err(_) if jitter < 1e-4 => jitter *= 10.0,
            Err(e) => return Err(e),
        }
    };
    let z: Vec<f64> = standard_normals(rng, n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += chol[i * n + j] * z[j];
        }
        y[i] = acc;
    }
    Ok(FunctionSample { x, y, n_context: 0 })
}

/// Lower-triangular Cholesky factor, written over the input in place.
fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), CqnpError> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(CqnpError::Generation(format!(
                        "covariance not positive definite at pivot {i}"
                    )));
                }
                a[i * n + j] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Box-Muller standard normals; two per pair of uniforms.
fn standard_normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * PI * u2;
        out.push(r * th.cos());
        out.push(r * th.sin());
    }
    out.truncate(n);
    out
}

/// Draw a split index for the given mode.
pub fn draw_split(rng: &mut impl Rng, n_total: usize, mode: SplitMode) -> Result<usize, CqnpError> {
    if n_total < 6 {
        return Err(CqnpError::Usage(format!(
            "cannot split a task of {n_total} points"
        )));
    }
    Ok(match mode {
        SplitMode::Train => rng.random_range(3..=n_total - 3),
        SplitMode::Test => rng.random_range(3..=100.min(n_total - 3)),
    })
}

/// Assign a context/target split to a sample: context is the leading block.
/// The s draws are i.i.d. uniform, so the index split is exchangeable.
pub fn split_context_target(
    sample: &mut FunctionSample,
    rng: &mut impl Rng,
    mode: SplitMode,
) -> Result<(), CqnpError> {
    sample.n_context = draw_split(rng, sample.n_total(), mode)?;
    Ok(())
}

/// A batch of tasks sharing n_total and n_context.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    samples: Vec<FunctionSample>,
}

impl TaskBatch {
    pub fn new(samples: Vec<FunctionSample>) -> Result<Self, CqnpError> {
        let Some(first) = samples.first() else {
            return Err(CqnpError::Usage("a batch needs at least one task".into()));
        };
        let (n, c) = (first.n_total(), first.n_context);
        if samples.iter().any(|s| s.n_total() != n || s.n_context != c) {
            return Err(CqnpError::Usage(
                "all tasks in a batch must share n_total and n_context".into(),
            ));
        }
        Ok(TaskBatch { samples })
    }

    pub fn samples(&self) -> &[FunctionSample] {
        &self.samples
    }

    pub fn n_total(&self) -> usize {
        self.samples[0].n_total()
    }

    pub fn n_context(&self) -> usize {
        self.samples[0].n_context
    }
}

/// Make a batch: one (n_total, n_context) draw shared by all `n_b`
/// independently sampled functions. Each element gets its own RNG stream
/// derived from the batch stream, so generation is schedule-independent.
pub fn make_batch(
    spec: &ProcessSpec,
    n_b: usize,
    rng: &mut impl Rng,
    mode: SplitMode,
) -> Result<TaskBatch, CqnpError> {
    if n_b == 0 {
        return Err(CqnpError::Usage("batch size must be >= 1".into()));
    }
    let n_total = match mode {
        SplitMode::Train => rng.random_range(6..=100),
        SplitMode::Test => 500,
    };
    let n_context = draw_split(rng, n_total, mode)?;
    let element_seed: u64 = rng.random();

    let gp_like = matches!(spec, ProcessSpec::GpRbf { .. } | ProcessSpec::GpMatern52 { .. });
    let build = |k: usize| -> Result<FunctionSample, CqnpError> {
        let mut ring = substream(element_seed, Stream::Data, &[k as u64]);
        let mut s = sample_function(spec, &mut ring, n_total)?;
        s.n_context = n_context;
        Ok(s)
    };
    let samples: Vec<FunctionSample> = if gp_like && n_total >= 100 {
        // Cholesky factorizations dominate here; fan the elements out.
        (0..n_b).into_par_iter().map(build).collect::<Result<_, _>>()?
    } else {
        (0..n_b).map(build).collect::<Result<_, _>>()?
    };
    TaskBatch::new(samples)
}

#[derive(Serialize, Deserialize)]
struct FrozenBatchLine {
    n_total: usize,
    n_context: usize,
    samples: Vec<FunctionSample>,
}

/// Generate `n_batches` test batches and serialize them as NDJSON, one
/// batch per line. Re-reading reproduces bitwise-identical floats.
pub fn freeze_test_set(
    spec: &ProcessSpec,
    n_batches: usize,
    n_b: usize,
    seed: u64,
    path: &Path,
) -> Result<(), CqnpError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for b in 0..n_batches {
        let mut rng = substream(seed, Stream::Data, &[b as u64]);
        let batch = make_batch(spec, n_b, &mut rng, SplitMode::Test)?;
        let line = FrozenBatchLine {
            n_total: batch.n_total(),
            n_context: batch.n_context(),
            samples: batch.samples,
        };
        serde_json::to_writer(&mut w, &line)
            .map_err(|e| CqnpError::Format(format!("serializing batch {b}: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Iterate over a frozen test-set file, one batch at a time.
pub fn read_frozen(path: &Path) -> Result<FrozenReader, CqnpError> {
    let file = File::open(path)?;
    Ok(FrozenReader {
        lines: BufReader::new(file).lines(),
        line_no: 0,
    })
}

pub struct FrozenReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl Iterator for FrozenReader {
    type Item = Result<TaskBatch, CqnpError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FrozenBatchLine = match serde_json::from_str(&line) {
                Ok(p) => p,
                Err(e) => {
                    return Some(Err(CqnpError::Format(format!(
                        "frozen set line {}: {e}",
                        self.line_no
                    ))))
                }
            };
            let mut samples = parsed.samples;
            for s in &mut samples {
                if s.x.len() != s.y.len() || s.x.len() != parsed.n_total {
                    return Some(Err(CqnpError::Format(format!(
                        "frozen set line {}: inconsistent point counts",
                        self.line_no
                    ))));
                }
                s.n_context = parsed.n_context;
            }
            return Some(TaskBatch::new(samples));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> rand_chacha::ChaCha12Rng {
        substream(seed, Stream::Data, &[])
    }

    #[test]
    fn circle_points_satisfy_defining_equation() {
        // Radius and offset are recoverable from three points; instead verify
        // the residual of the implicit equation using the known draw order.
        let spec = ProcessSpec::circle();
        for seed in 0..5 {
            let mut r = rng(seed);
            // Re-draw the parameters the same way sample_function does.
            let mut probe = rng(seed);
            let a = probe.random_range(0.5..1.5);
            let d = probe.random_range(-0.5..0.5);
            let s = sample_function(&spec, &mut r, 50).unwrap();
            for (x, y) in s.x.iter().zip(&s.y) {
                let lhs = (x - d).powi(2) + (y - d).powi(2);
                assert!((lhs - a * a).abs() < 1e-10, "seed {seed}");
            }
        }
    }

    #[test]
    fn sawtooth_is_periodic_in_the_latent_index() {
        // g_y has period 1/freq; evaluate the partial sum directly.
        let mut r = rng(42);
        let (a, w, d, k_max) = (
            r.random_range(1.0..2.0),
            r.random_range(1.0..3.0),
            r.random_range(-2.0..2.0),
            r.random_range(10u32..20),
        );
        let g = |s: f64| {
            let mut acc = 0.0;
            for k in 1..=k_max {
                let kf = k as f64;
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * (2.0 * PI * kf * w * (s + d)).sin() / kf;
            }
            a / 2.0 - a / PI * acc
        };
        for i in 0..20 {
            let s = -2.0 + 0.2 * i as f64;
            assert!((g(s + 1.0 / w) - g(s)).abs() < 1e-9);
        }
    }

    #[test]
    fn double_sine_marginal_takes_each_branch_half_the_time() {
        // Pin the function parameters and re-run the per-point indicator by
        // regenerating with a controlled rng: count points that match the
        // sine branch within rounding.
        let spec = ProcessSpec::double_sine();
        let mut r = rng(99);
        let n = 4000;
        let s = sample_function(&spec, &mut r, n).unwrap();
        // Recover the parameter draws with a twin stream.
        let mut probe = rng(99);
        let a1 = probe.random_range(0.5..1.5);
        let _a2: f64 = probe.random_range(0.5..1.5);
        let w1 = probe.random_range(1.0..3.0);
        let _w2: f64 = probe.random_range(1.0..3.0);
        let on_sine = s
            .x
            .iter()
            .zip(&s.y)
            .filter(|(x, y)| ((a1 * (w1 * **x).sin()) - **y).abs() < 1e-12)
            .count();
        let frac = on_sine as f64 / n as f64;
        // 5-sigma binomial interval around 0.5
        assert!((frac - 0.5).abs() < 5.0 * (0.25f64 / n as f64).sqrt(), "{frac}");
    }

    #[test]
    fn gp_rbf_covariance_matches_kernel() {
        // Fix two latent inputs by sampling n=6 tasks repeatedly and
        // estimating cov(y_i, y_j) across draws with x held fixed: use a
        // custom spec with a degenerate s-range to pin x.
        let spec = ProcessSpec::GpRbf {
            s: (0.3, 0.3000001),
            len_scale: 0.25,
            sigma: 0.75,
            offset: 0.02,
        };
        let mut r = rng(5);
        let m = 20_000;
        let mut sum = 0.0;
        let mut sum_i = 0.0;
        let mut sum_j = 0.0;
        for _ in 0..m {
            let s = sample_function(&spec, &mut r, 6).unwrap();
            sum += s.y[0] * s.y[1];
            sum_i += s.y[0];
            sum_j += s.y[1];
        }
        let cov = sum / m as f64 - (sum_i / m as f64) * (sum_j / m as f64);
        // x_0 == x_1 up to 1e-7, so the kernel value is essentially
        // sigma^2 + offset at distance ~0 (same-point covariance sans jitter).
        let want = 0.75 * 0.75 + 0.02;
        let se = want * (2.0 / m as f64).sqrt();
        assert!((cov - want).abs() < 5.0 * se, "cov {cov} want {want}");
    }

    #[test]
    fn gp_sample_variance_at_distance() {
        // Same check at a genuine distance: pin two x values by drawing from
        // a two-atom range is impossible with uniform draws, so instead
        // verify the full covariance construction directly.
        let k = |d: f64| 0.75f64 * 0.75 * (-d * d / (2.0 * 0.25)).exp() + 0.02;
        assert!((k(0.0) - (0.5625 + 0.02)).abs() < 1e-15);
        assert!(k(1.0) < k(0.1));
    }

    #[test]
    fn split_protocol_bounds() {
        let mut r = rng(1);
        for _ in 0..500 {
            let n = r.random_range(6..=100);
            let c = draw_split(&mut r, n, SplitMode::Train).unwrap();
            assert!((3..=n - 3).contains(&c));
        }
        for _ in 0..500 {
            let c = draw_split(&mut r, 500, SplitMode::Test).unwrap();
            assert!((3..=100).contains(&c));
        }
        // degenerate: n_total = 6 forces the midpoint
        assert_eq!(draw_split(&mut r, 6, SplitMode::Train).unwrap(), 3);
        assert!(draw_split(&mut r, 5, SplitMode::Train).is_err());
    }

    #[test]
    fn split_partitions_points() {
        let spec = ProcessSpec::lissajous();
        let mut r = rng(3);
        let mut s = sample_function(&spec, &mut r, 40).unwrap();
        split_context_target(&mut s, &mut r, SplitMode::Train).unwrap();
        let (cx, _) = s.context();
        let (tx, _) = s.target();
        assert_eq!(cx.len() + tx.len(), s.n_total());
        assert!(cx.len() >= 3 && tx.len() >= 3);
    }

    #[test]
    fn split_sizes_cover_their_range() {
        // Chi-square sanity on the train split draw for n_total = 16:
        // 11 equally likely outcomes (3..=13).
        let mut r = rng(11);
        let mut counts = [0usize; 11];
        let trials = 22_000;
        for _ in 0..trials {
            let c = draw_split(&mut r, 16, SplitMode::Train).unwrap();
            counts[c - 3] += 1;
        }
        let expect = trials as f64 / 11.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        // 10 dof, p > 0.001 means chi2 below ~29.6
        assert!(chi2 < 29.6, "chi2 {chi2}");
    }

    #[test]
    fn batches_share_counts() {
        let spec = ProcessSpec::double_sine();
        let mut r = rng(8);
        let b = make_batch(&spec, 16, &mut r, SplitMode::Train).unwrap();
        assert_eq!(b.samples().len(), 16);
        for s in b.samples() {
            assert_eq!(s.n_total(), b.n_total());
            assert_eq!(s.n_context, b.n_context());
        }
        let t = make_batch(&spec, 4, &mut r, SplitMode::Test).unwrap();
        assert_eq!(t.n_total(), 500);
    }

    #[test]
    fn frozen_set_round_trips_bitwise() {
        let dir = std::env::temp_dir().join("cqnp-frozen-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("frozen.ndjson");
        let spec = ProcessSpec::circle();
        freeze_test_set(&spec, 3, 4, 99, &path).unwrap();

        let batches: Vec<TaskBatch> = read_frozen(&path)
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(batches.len(), 3);
        for (b, batch) in batches.iter().enumerate() {
            let mut r = substream(99, Stream::Data, &[b as u64]);
            let want = make_batch(&spec, 4, &mut r, SplitMode::Test).unwrap();
            assert_eq!(batch, &want, "batch {b} differs after round trip");
        }

        // Same seed twice: byte-identical files.
        let path2 = dir.join("frozen2.ndjson");
        freeze_test_set(&spec, 3, 4, 99, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
