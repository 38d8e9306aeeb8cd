//! The three model families: a Gaussian-likelihood conditional neural
//! process (CNP) and the quantile variants (CQNP, ACQNP) whose predictive
//! distribution is a softmax-weighted mixture of asymmetric Laplace
//! components over sampled quantile levels.
//!
//! All three share the deep-sets encoder: a per-pair MLP mean-pooled over
//! the context set. The quantile decoder maps (x*, embedding, tau) to one
//! mixture component per draw; the adaptive variant first warps the raw
//! uniform level u through a learned network, so the model concentrates
//! its draws on informative quantiles.

use rand::RngCore;

use crate::autodiff::{softplus, Gradients, Matrix, Mlp, MlpSpec, NodeId, Tape};
use crate::dist::{clamp_tau, AlComponent, AlParams, MixtureAtPoint, SIGMA_FLOOR, TAU_FLOOR};
use crate::error::CqnpError;
use crate::rng::{substream, Stream};
use crate::task::FunctionSample;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnp,
    Cqnp,
    Acqnp,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Cnp => "cnp",
            ModelKind::Cqnp => "cqnp",
            ModelKind::Acqnp => "acqnp",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, CqnpError> {
        match name {
            "cnp" => Ok(ModelKind::Cnp),
            "cqnp" => Ok(ModelKind::Cqnp),
            "acqnp" => Ok(ModelKind::Acqnp),
            other => Err(CqnpError::Config(format!(
                "unknown model kind '{other}' (expected cnp, cqnp, or acqnp)"
            ))),
        }
    }

    pub fn is_quantile(&self) -> bool {
        !matches!(self, ModelKind::Cnp)
    }
}

/// Network shapes for one model. The decoder consumes the target input,
/// the context embedding, and (for quantile kinds) the level, emitting
/// (mu, sigma_raw) per output dim for the CNP and (alpha_logit, mu,
/// sigma_raw) per output dim otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_x: usize,
    pub d_y: usize,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub adaptor: Option<MlpSpec>,
}

impl ModelConfig {
    pub fn new(
        kind: ModelKind,
        d_x: usize,
        d_y: usize,
        encoder: MlpSpec,
        decoder: MlpSpec,
        adaptor: Option<MlpSpec>,
    ) -> Result<Self, CqnpError> {
        if d_x == 0 || d_y == 0 {
            return Err(CqnpError::Config("d_x and d_y must be >= 1".into()));
        }
        if encoder.d_in() != d_x + d_y {
            return Err(CqnpError::Config(format!(
                "encoder d_in {} != d_x + d_y = {}",
                encoder.d_in(),
                d_x + d_y
            )));
        }
        let d_e = encoder.d_out();
        let (want_in, want_out) = match kind {
            ModelKind::Cnp => (d_x + d_e, 2 * d_y),
            ModelKind::Cqnp | ModelKind::Acqnp => (d_x + d_e + 1, 3 * d_y),
        };
        if decoder.d_in() != want_in || decoder.d_out() != want_out {
            return Err(CqnpError::Config(format!(
                "decoder shape [{}]x..x[{}] does not match {} (want [{}]x..x[{}])",
                decoder.d_in(),
                decoder.d_out(),
                kind.name(),
                want_in,
                want_out
            )));
        }
        match (kind, &adaptor) {
            (ModelKind::Acqnp, Some(a)) => {
                if a.d_in() != d_x + d_e + 1 || a.d_out() != 1 {
                    return Err(CqnpError::Config(format!(
                        "adaptor shape [{}]x..x[{}] (want [{}]x..x[1])",
                        a.d_in(),
                        a.d_out(),
                        d_x + d_e + 1
                    )));
                }
            }
            (ModelKind::Acqnp, None) => {
                return Err(CqnpError::Config("acqnp requires an adaptor spec".into()))
            }
            (_, Some(_)) => {
                return Err(CqnpError::Config(format!(
                    "{} does not take an adaptor",
                    kind.name()
                )))
            }
            (_, None) => {}
        }
        Ok(ModelConfig {
            kind,
            d_x,
            d_y,
            encoder,
            decoder,
            adaptor,
        })
    }

    /// Uniform-width builder: encoder/decoder hidden width and depth shared,
    /// adaptor depth given separately (0 = no adaptor / not acqnp).
    pub fn uniform(
        kind: ModelKind,
        d_e: usize,
        hidden: usize,
        depth: usize,
        adaptor_depth: usize,
    ) -> Result<Self, CqnpError> {
        let (d_x, d_y) = (1, 1);
        let encoder = MlpSpec::uniform(d_x + d_y, hidden, depth, d_e)?;
        let decoder = match kind {
            ModelKind::Cnp => MlpSpec::uniform(d_x + d_e, hidden, depth, 2)?,
            _ => MlpSpec::uniform(d_x + d_e + 1, hidden, depth, 3)?,
        };
        let adaptor = match kind {
            ModelKind::Acqnp => Some(MlpSpec::uniform(d_x + d_e + 1, hidden, adaptor_depth, 1)?),
            _ => None,
        };
        ModelConfig::new(kind, d_x, d_y, encoder, decoder, adaptor)
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.d_out()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.decoder.param_count()
            + self.adaptor.as_ref().map_or(0, |a| a.param_count())
    }
}

/// Row counts pushed through each network; the decoder count is exactly
/// (levels per point) x (points evaluated).
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct EvalCounters {
    pub encoder_rows: u64,
    pub aggregations: u64,
    pub decoder_rows: u64,
    pub adaptor_rows: u64,
}

/// Which points of a task enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Context,
    Target,
    All,
}

/// Where quantile levels come from: fresh uniform draws or a fixed grid
/// shared across points.
pub enum LevelSource<'a> {
    Draws { rng: &'a mut dyn RngCore, n_tau: usize },
    Grid(&'a [f64]),
}

impl LevelSource<'_> {
    pub fn n_tau(&self) -> usize {
        match self {
            LevelSource::Draws { n_tau, .. } => *n_tau,
            LevelSource::Grid(levels) => levels.len(),
        }
    }

    /// Point-major level column of length `n_points * n_tau`, clamped into
    /// the valid level range.
    fn column(&mut self, n_points: usize) -> Result<Matrix, CqnpError> {
        let k = self.n_tau();
        if k == 0 {
            return Err(CqnpError::Usage("need at least one quantile level".into()));
        }
        let mut u = Vec::with_capacity(n_points * k);
        match self {
            LevelSource::Draws { rng, .. } => {
                for _ in 0..n_points * k {
                    let raw = uniform_f64(*rng);
                    u.push(clamp_tau(raw));
                }
            }
            LevelSource::Grid(levels) => {
                for lv in levels.iter() {
                    if !(0.0 < *lv && *lv < 1.0) {
                        return Err(CqnpError::Domain(format!(
                            "grid level {lv} outside (0,1)"
                        )));
                    }
                }
                for _ in 0..n_points {
                    u.extend(levels.iter().map(|&l| clamp_tau(l)));
                }
            }
        }
        Ok(Matrix::column(&u))
    }
}

fn uniform_f64(rng: &mut dyn RngCore) -> f64 {
    // 53-bit uniform in [0,1)
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A model: its configuration plus the parameter matrices of each network.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    encoder: Mlp,
    decoder: Mlp,
    adaptor: Option<Mlp>,
}

struct TapeIds {
    enc: Vec<(NodeId, NodeId)>,
    dec: Vec<(NodeId, NodeId)>,
    adaptor: Option<Vec<(NodeId, NodeId)>>,
    shapes: Vec<(usize, usize)>,
}

impl Model {
    /// Fresh fan-in-uniform initialization derived from `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Init, &[]);
        let encoder = Mlp::init(cfg.encoder.clone(), &mut rng);
        let decoder = Mlp::init(cfg.decoder.clone(), &mut rng);
        let adaptor = cfg.adaptor.clone().map(|s| Mlp::init(s, &mut rng));
        Model {
            cfg,
            encoder,
            decoder,
            adaptor,
        }
    }

    /// All parameters zero; useful as a fixed point in tests.
    pub fn zeroed(cfg: ModelConfig) -> Self {
        let encoder = Mlp::zeroed(cfg.encoder.clone());
        let decoder = Mlp::zeroed(cfg.decoder.clone());
        let adaptor = cfg.adaptor.clone().map(Mlp::zeroed);
        Model {
            cfg,
            encoder,
            decoder,
            adaptor,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn adaptor(&self) -> Option<&Mlp> {
        self.adaptor.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// Canonical flat parameter order: encoder, decoder, adaptor; each
    /// layer weights then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.flatten_into(&mut out);
        self.decoder.flatten_into(&mut out);
        if let Some(a) = &self.adaptor {
            a.flatten_into(&mut out);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<(), CqnpError> {
        if flat.len() != self.param_count() {
            return Err(CqnpError::Format(format!(
                "parameter count mismatch: model has {}, buffer has {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = self.encoder.unflatten_from(flat)?;
        off += self.decoder.unflatten_from(&flat[off..])?;
        if let Some(a) = &mut self.adaptor {
            a.unflatten_from(&flat[off..])?;
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape) -> TapeIds {
        let mut shapes = Vec::new();
        let push_shapes = |mlp: &Mlp, shapes: &mut Vec<(usize, usize)>| {
            for (w, b) in mlp.layers() {
                shapes.push(w.shape());
                shapes.push(b.shape());
            }
        };
        let (enc, next) = self.encoder.register(tape, 0);
        push_shapes(&self.encoder, &mut shapes);
        let (dec, next) = self.decoder.register(tape, next);
        push_shapes(&self.decoder, &mut shapes);
        let adaptor = self.adaptor.as_ref().map(|a| {
            let (ids, _) = a.register(tape, next);
            push_shapes(a, &mut shapes);
            ids
        });
        TapeIds {
            enc,
            dec,
            adaptor,
            shapes,
        }
    }

    /// Context rows sorted by (x, y) so mean pooling sums in a canonical
    /// order: any permutation of the context yields a bitwise-identical
    /// embedding.
    fn context_matrix(&self, cx: &[f64], cy: &[f64]) -> Matrix {
        let mut order: Vec<usize> = (0..cx.len()).collect();
        order.sort_by(|&a, &b| {
            (cx[a], cy[a])
                .partial_cmp(&(cx[b], cy[b]))
                .expect("finite context")
        });
        let mut data = Vec::with_capacity(cx.len() * 2);
        for &i in &order {
            data.push(cx[i]);
            data.push(cy[i]);
        }
        Matrix::from_vec(cx.len(), 2, data)
    }

    /// Build the per-point log-likelihood column for the selected points of
    /// a group of tasks sharing n_total and n_context (the batch invariant).
    /// The tasks are stacked so every network pass is one GEMM; rows come
    /// out task-major, point-major within a task. Returns (ll node, total
    /// number of evaluated points).
    fn build_ll(
        &self,
        tape: &mut Tape,
        ids: &TapeIds,
        tasks: &[FunctionSample],
        which: Which,
        u_col: Option<&Matrix>,
        counters: &mut EvalCounters,
    ) -> Result<(NodeId, usize), CqnpError> {
        let b = tasks.len();
        let first = tasks.first().ok_or_else(|| {
            CqnpError::Usage("likelihood of an empty task group".into())
        })?;
        let n_ctx = first.n_context;
        let n_total = first.n_total();
        if n_ctx == 0 {
            return Err(CqnpError::Usage("empty context set".into()));
        }
        if tasks
            .iter()
            .any(|t| t.n_context != n_ctx || t.n_total() != n_total)
        {
            return Err(CqnpError::Usage(
                "stacked tasks must share n_total and n_context".into(),
            ));
        }
        let n = match which {
            Which::Context => n_ctx,
            Which::Target => n_total - n_ctx,
            Which::All => n_total,
        };
        if n == 0 {
            return Err(CqnpError::Usage("no points selected for evaluation".into()));
        }
        let mut xs = Vec::with_capacity(b * n);
        let mut ys = Vec::with_capacity(b * n);
        for t in tasks {
            let (px, py): (&[f64], &[f64]) = match which {
                Which::Context => t.context(),
                Which::Target => t.target(),
                Which::All => (&t.x, &t.y),
            };
            xs.extend_from_slice(px);
            ys.extend_from_slice(py);
        }

        // Encoder: per-pair MLP, mean-pooled per task.
        let mut ctx_rows = Vec::with_capacity(b * n_ctx * 2);
        for t in tasks {
            let (cx, cy) = t.context();
            ctx_rows.extend(self.context_matrix(cx, cy).into_data());
        }
        let ctx = tape.constant(Matrix::from_vec(b * n_ctx, 2, ctx_rows));
        counters.encoder_rows += (b * n_ctx) as u64;
        let enc_out = self.encoder.forward_node(tape, ctx, &ids.enc);
        let emb = tape.group_mean_rows(enc_out, n_ctx);
        counters.aggregations += b as u64;

        let xs_node = tape.constant(Matrix::column(&xs));
        let emb_rep = tape.repeat_rows(emb, n);
        let shared = tape.concat_cols(xs_node, emb_rep);
        let ys: &[f64] = &ys;
        let n = b * n;

        match self.cfg.kind {
            ModelKind::Cnp => {
                counters.decoder_rows += n as u64;
                let out = self.decoder.forward_node(tape, shared, &ids.dec);
                let mu = tape.slice_cols(out, 0, 1);
                let sraw = tape.slice_cols(out, 1, 2);
                let sp = tape.softplus(sraw);
                let sigma = tape.add_const(sp, SIGMA_FLOOR);
                let y_node = tape.constant(Matrix::column(ys));
                let r = tape.sub(y_node, mu);
                let z = tape.div(r, sigma);
                let z2 = tape.mul(z, z);
                let half_z2 = tape.mul_const(z2, 0.5);
                let ln_sigma = tape.ln(sigma);
                let neg_ll = tape.add(ln_sigma, half_z2);
                let ll_wo_const = tape.neg(neg_ll);
                let ll = tape.add_const(ll_wo_const, -0.5 * LN_2PI);
                Ok((ll, n))
            }
            ModelKind::Cqnp | ModelKind::Acqnp => {
                let u_col = u_col.ok_or_else(|| {
                    CqnpError::Usage("quantile models need a level column".into())
                })?;
                if u_col.rows() % n != 0 || u_col.cols() != 1 {
                    return Err(CqnpError::Usage(format!(
                        "level column of {} rows does not cover {} points",
                        u_col.rows(),
                        n
                    )));
                }
                let k = u_col.rows() / n;
                let u_node = tape.constant(u_col.clone());

                let tau = if let Some(ad_ids) = &ids.adaptor {
                    counters.adaptor_rows += (n * k) as u64;
                    let adaptor = self.adaptor.as_ref().expect("validated");
                    let raw = adaptor.forward_node_split(tape, shared, u_node, k, ad_ids);
                    let sig = tape.sigmoid(raw);
                    tape.clamp(sig, TAU_FLOOR, 1.0 - TAU_FLOOR)
                } else {
                    u_node
                };

                counters.decoder_rows += (n * k) as u64;
                let out = self.decoder.forward_node_split(tape, shared, tau, k, &ids.dec);
                let tau_grad = ids.adaptor.is_some();

                let mut ll_total: Option<NodeId> = None;
                for dim in 0..self.cfg.d_y {
                    let alpha = tape.slice_cols(out, 3 * dim, 3 * dim + 1);
                    let mu = tape.slice_cols(out, 3 * dim + 1, 3 * dim + 2);
                    let sraw = tape.slice_cols(out, 3 * dim + 2, 3 * dim + 3);

                    // y replicated once per level, point-major.
                    let mut y_rep = Vec::with_capacity(n * k);
                    for &yv in ys {
                        y_rep.extend(std::iter::repeat(yv).take(k));
                    }
                    let y_node = tape.constant(Matrix::column(&y_rep));
                    let lpdf = tape.al_log_pdf(y_node, mu, sraw, tau, tau_grad, SIGMA_FLOOR);

                    let score = tape.add(alpha, lpdf);
                    let score_lse = tape.group_log_sum_exp(score, k);
                    let alpha_lse = tape.group_log_sum_exp(alpha, k);
                    let ll_dim = tape.sub(score_lse, alpha_lse);
                    ll_total = Some(match ll_total {
                        None => ll_dim,
                        Some(prev) => tape.add(prev, ll_dim),
                    });
                }
                Ok((ll_total.expect("d_y >= 1"), n))
            }
        }
    }

    /// Per-point log-likelihoods for the selected points. Fresh levels are
    /// drawn (or the grid is replicated) per point.
    pub fn predictive_log_lik(
        &self,
        task: &FunctionSample,
        which: Which,
        levels: &mut LevelSource,
        counters: Option<&mut EvalCounters>,
    ) -> Result<Vec<f64>, CqnpError> {
        let n = match which {
            Which::Context => task.n_context,
            Which::Target => task.n_total() - task.n_context,
            Which::All => task.n_total(),
        };
        let u_col = if self.cfg.kind.is_quantile() {
            Some(levels.column(n)?)
        } else {
            None
        };
        let mut scratch = EvalCounters::default();
        let counters = counters.unwrap_or(&mut scratch);
        let mut tape = Tape::new();
        let ids = self.register(&mut tape);
        let (ll, _) = self.build_ll(
            &mut tape,
            &ids,
            std::slice::from_ref(task),
            which,
            u_col.as_ref(),
            counters,
        )?;
        let values = tape.value(ll).data().to_vec();
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(self.non_finite_report(task, which, bad, u_col.as_ref()));
        }
        Ok(values)
    }

    /// Sum of negative log-likelihood over the selected points of a task
    /// group plus the gradient w.r.t. every parameter (flat, canonical
    /// order). The level column must be task-major, point-major.
    pub fn nll_sum_and_grads_with(
        &self,
        tasks: &[FunctionSample],
        which: Which,
        u_col: Option<&Matrix>,
        counters: Option<&mut EvalCounters>,
    ) -> Result<(f64, usize, Vec<f64>), CqnpError> {
        let mut scratch = EvalCounters::default();
        let counters = counters.unwrap_or(&mut scratch);
        let mut tape = Tape::new();
        let ids = self.register(&mut tape);
        let (ll, n) = self.build_ll(&mut tape, &ids, tasks, which, u_col, counters)?;
        let ll_sum = tape.sum(ll);
        let loss = tape.neg(ll_sum);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(self.non_finite_report(&tasks[0], which, 0, u_col));
        }
        let grads = tape.backward(loss, 1.0)?;
        Ok((loss_val, n, self.collect_flat_grads(&ids, &grads)))
    }

    /// Loss value only (sum of NLL and point count).
    pub fn nll_sum(
        &self,
        tasks: &[FunctionSample],
        which: Which,
        u_col: Option<&Matrix>,
    ) -> Result<(f64, usize), CqnpError> {
        let mut scratch = EvalCounters::default();
        let mut tape = Tape::new();
        let ids = self.register(&mut tape);
        let (ll, n) = self.build_ll(&mut tape, &ids, tasks, which, u_col, &mut scratch)?;
        let ll_sum = tape.sum(ll);
        Ok((-tape.scalar_value(ll_sum), n))
    }

    /// Smallest |ReLU pre-activation| seen while evaluating the loss;
    /// finite-difference checks use it to stay clear of kinks.
    pub fn relu_margin(
        &self,
        tasks: &[FunctionSample],
        which: Which,
        u_col: Option<&Matrix>,
    ) -> Result<f64, CqnpError> {
        let mut scratch = EvalCounters::default();
        let mut tape = Tape::new();
        let ids = self.register(&mut tape);
        self.build_ll(&mut tape, &ids, tasks, which, u_col, &mut scratch)?;
        Ok(tape.min_relu_margin())
    }

    fn collect_flat_grads(&self, ids: &TapeIds, grads: &Gradients) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        let mut i = 0;
        grads.for_each_param(|_pid, g| {
            let (r, c) = ids.shapes[i];
            match g {
                Some(m) => flat.extend_from_slice(m.data()),
                None => flat.extend(std::iter::repeat(0.0).take(r * c)),
            }
            i += 1;
        });
        flat
    }

    fn non_finite_report(
        &self,
        task: &FunctionSample,
        which: Which,
        point: usize,
        u_col: Option<&Matrix>,
    ) -> CqnpError {
        let (cx, cy) = task.context();
        let emb = self.encode(cx, cy).unwrap_or_default();
        let mut dump = format!(
            "non-finite likelihood ({} points={:?}, first bad point index {point})",
            self.cfg.kind.name(),
            which
        );
        if let (Some(u), true) = (u_col, self.cfg.kind.is_quantile()) {
            let k = u.rows() / task.n_total().max(1);
            let xs = &task.x;
            if point < xs.len() {
                for j in 0..k.min(8) {
                    let uv = u.data()[point * k + j];
                    let tau = self.adapt_tau(xs[point], &emb, uv).unwrap_or(f64::NAN);
                    if let Ok(c) = self.decode_quantile(xs[point], &emb, tau) {
                        dump.push_str(&format!(
                            "\n  component u={uv:.4} tau={tau:.4}: alpha={:.4} mu={:.4} sigma={:.4}",
                            c.alpha_logit, c.al.location, c.al.scale
                        ));
                    }
                }
            }
        }
        CqnpError::Numerical(dump)
    }

    /// Mean-pooled context embedding (plain evaluation, no tape).
    pub fn encode(&self, cx: &[f64], cy: &[f64]) -> Result<Vec<f64>, CqnpError> {
        if cx.is_empty() || cx.len() != cy.len() {
            return Err(CqnpError::Usage("encode needs a nonempty context".into()));
        }
        let ctx = self.context_matrix(cx, cy);
        let d_e = self.cfg.embed_dim();
        let mut acc = vec![0.0; d_e];
        for r in 0..ctx.rows() {
            let e = self.encoder.forward_vec(ctx.row_slice(r))?;
            for (a, v) in acc.iter_mut().zip(&e) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= cx.len() as f64;
        }
        Ok(acc)
    }

    /// The level actually used for a raw draw u: the adaptor output for
    /// ACQNP, u itself for CQNP. Clamped into [1e-3, 1 - 1e-3] either way.
    pub fn adapt_tau(&self, x_star: f64, embedding: &[f64], u: f64) -> Result<f64, CqnpError> {
        if !(0.0 < u && u < 1.0) {
            return Err(CqnpError::Domain(format!("level draw {u} outside (0,1)")));
        }
        match (&self.cfg.kind, &self.adaptor) {
            (ModelKind::Cnp, _) => Err(CqnpError::Usage(
                "the Gaussian model has no quantile levels".into(),
            )),
            (ModelKind::Cqnp, _) => Ok(clamp_tau(u)),
            (ModelKind::Acqnp, Some(adaptor)) => {
                let mut input = Vec::with_capacity(1 + embedding.len() + 1);
                input.push(x_star);
                input.extend_from_slice(embedding);
                input.push(u);
                let raw = adaptor.forward_vec(&input)?[0];
                let sig = 1.0 / (1.0 + (-raw).exp());
                Ok(clamp_tau(sig))
            }
            (ModelKind::Acqnp, None) => unreachable!("validated at construction"),
        }
    }

    /// One mixture component at (x*, embedding, tau) (plain evaluation).
    pub fn decode_quantile(
        &self,
        x_star: f64,
        embedding: &[f64],
        tau: f64,
    ) -> Result<AlComponent, CqnpError> {
        if !self.cfg.kind.is_quantile() {
            return Err(CqnpError::Usage(
                "the Gaussian model has no quantile decoder".into(),
            ));
        }
        let mut input = Vec::with_capacity(1 + embedding.len() + 1);
        input.push(x_star);
        input.extend_from_slice(embedding);
        input.push(tau);
        let out = self.decoder.forward_vec(&input)?;
        Ok(AlComponent {
            alpha_logit: out[0],
            al: AlParams::new(out[1], softplus(out[2]) + SIGMA_FLOOR, tau)?,
        })
    }

    /// Gaussian head at (x*, embedding) (plain evaluation, CNP only).
    pub fn decode_gaussian(&self, x_star: f64, embedding: &[f64]) -> Result<(f64, f64), CqnpError> {
        if self.cfg.kind != ModelKind::Cnp {
            return Err(CqnpError::Usage("not a Gaussian model".into()));
        }
        let mut input = Vec::with_capacity(1 + embedding.len());
        input.push(x_star);
        input.extend_from_slice(embedding);
        let out = self.decoder.forward_vec(&input)?;
        Ok((out[0], softplus(out[1]) + SIGMA_FLOOR))
    }

    /// Decoded quantile curves: for each x and requested level u, the level
    /// actually used, the location, and the softmax mixing weight across
    /// the levels at that x.
    pub fn predict_quantiles(
        &self,
        x_grid: &[f64],
        cx: &[f64],
        cy: &[f64],
        levels: &[f64],
    ) -> Result<Vec<Vec<QuantilePoint>>, CqnpError> {
        if !self.cfg.kind.is_quantile() {
            return Err(CqnpError::Usage(
                "quantile curves need a quantile model".into(),
            ));
        }
        let emb = self.encode(cx, cy)?;
        let mut out = Vec::with_capacity(x_grid.len());
        for &x in x_grid {
            let mut comps = Vec::with_capacity(levels.len());
            for &u in levels {
                let tau = self.adapt_tau(x, &emb, u)?;
                comps.push((u, self.decode_quantile(x, &emb, tau)?));
            }
            let m = MixtureAtPoint::new(comps.iter().map(|(_, c)| *c).collect())?;
            let w = m.weights();
            out.push(
                comps
                    .into_iter()
                    .zip(w)
                    .map(|((u, c), weight)| QuantilePoint {
                        u,
                        tau: c.al.tau,
                        mu: c.al.location,
                        weight,
                    })
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Monte Carlo predictive mean: the softmax-weighted mixture mean over
    /// `n_tau` decoded components per x (CNP: the Gaussian mean).
    pub fn predict_mean(
        &self,
        x_grid: &[f64],
        cx: &[f64],
        cy: &[f64],
        n_tau: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>, CqnpError> {
        let emb = self.encode(cx, cy)?;
        if self.cfg.kind == ModelKind::Cnp {
            return x_grid
                .iter()
                .map(|&x| self.decode_gaussian(x, &emb).map(|(mu, _)| mu))
                .collect();
        }
        if n_tau == 0 {
            return Err(CqnpError::Usage("need at least one level draw".into()));
        }
        let mut out = Vec::with_capacity(x_grid.len());
        for &x in x_grid {
            let mut comps = Vec::with_capacity(n_tau);
            for _ in 0..n_tau {
                let u = clamp_tau(uniform_f64(rng));
                let tau = self.adapt_tau(x, &emb, u)?;
                comps.push(self.decode_quantile(x, &emb, tau)?);
            }
            out.push(MixtureAtPoint::new(comps)?.mean());
        }
        Ok(out)
    }
}

/// One decoded quantile at one input location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantilePoint {
    /// The raw requested level.
    pub u: f64,
    /// The level actually decoded (warped for ACQNP).
    pub tau: f64,
    /// The decoded location.
    pub mu: f64,
    /// Softmax mixing weight across the requested levels at this x.
    pub weight: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand::Rng;

    fn toy_task(seed: u64, n_ctx: usize, n_tgt: usize) -> FunctionSample {
        let mut rng = substream(seed, Stream::Data, &[]);
        let n = n_ctx + n_tgt;
        FunctionSample {
            x: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            y: (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
            n_context: n_ctx,
        }
    }

    fn small_cfg(kind: ModelKind) -> ModelConfig {
        ModelConfig::uniform(kind, 8, 8, 2, 2).unwrap()
    }

    #[test]
    fn config_validation_rejects_mismatched_shapes() {
        let enc = MlpSpec::new(vec![2, 8, 8]).unwrap();
        let dec = MlpSpec::new(vec![9, 8, 2]).unwrap();
        assert!(ModelConfig::new(ModelKind::Cnp, 1, 1, enc.clone(), dec.clone(), None).is_ok());
        // quantile decoder must take the level column and emit 3 values
        assert!(ModelConfig::new(ModelKind::Cqnp, 1, 1, enc.clone(), dec, None).is_err());
        let qdec = MlpSpec::new(vec![10, 8, 3]).unwrap();
        assert!(ModelConfig::new(ModelKind::Cqnp, 1, 1, enc.clone(), qdec.clone(), None).is_ok());
        assert!(ModelConfig::new(ModelKind::Acqnp, 1, 1, enc, qdec, None).is_err());
    }

    #[test]
    fn encode_single_pair_is_its_embedding() {
        let m = Model::init(small_cfg(ModelKind::Cqnp), 3);
        let e1 = m.encode(&[0.5], &[-0.25]).unwrap();
        let direct = m.encoder.forward_vec(&[0.5, -0.25]).unwrap();
        assert_eq!(e1, direct);
    }

    #[test]
    fn encode_is_permutation_and_duplication_invariant() {
        let m = Model::init(small_cfg(ModelKind::Cqnp), 4);
        let cx = [0.3, -1.2, 0.8, 0.1];
        let cy = [1.0, 0.2, -0.7, 0.4];
        let base = m.encode(&cx, &cy).unwrap();

        let px = [0.8, 0.3, 0.1, -1.2];
        let py = [-0.7, 1.0, 0.4, 0.2];
        let perm = m.encode(&px, &py).unwrap();
        assert_eq!(base, perm, "bitwise equality via canonical ordering");

        let dx: Vec<f64> = cx.iter().chain(cx.iter()).cloned().collect();
        let dy: Vec<f64> = cy.iter().chain(cy.iter()).cloned().collect();
        let dup = m.encode(&dx, &dy).unwrap();
        for (a, b) in base.iter().zip(&dup) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_adaptor_returns_half() {
        let m = Model::zeroed(small_cfg(ModelKind::Acqnp));
        let emb = vec![0.0; 8];
        for u in [0.1, 0.5, 0.9] {
            assert_eq!(m.adapt_tau(0.3, &emb, u).unwrap(), 0.5);
        }
    }

    #[test]
    fn cqnp_mode_passes_levels_through() {
        let m = Model::init(small_cfg(ModelKind::Cqnp), 5);
        let emb = m.encode(&[0.0], &[0.0]).unwrap();
        for u in [0.1, 0.5, 0.9] {
            assert_eq!(m.adapt_tau(0.0, &emb, u).unwrap(), u);
        }
        assert!(m.adapt_tau(0.0, &emb, 0.0).is_err());
        assert!(m.adapt_tau(0.0, &emb, 1.0).is_err());
    }

    #[test]
    fn adapt_tau_is_deterministic_over_a_grid() {
        let m = Model::init(small_cfg(ModelKind::Acqnp), 6);
        let emb = m.encode(&[0.2, -0.4], &[0.9, 0.3]).unwrap();
        let grid: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let a: Vec<f64> = grid.iter().map(|&u| m.adapt_tau(0.5, &emb, u).unwrap()).collect();
        let b: Vec<f64> = grid.iter().map(|&u| m.adapt_tau(0.5, &emb, u).unwrap()).collect();
        assert_eq!(a, b);
        for t in &a {
            assert!((TAU_FLOOR..=1.0 - TAU_FLOOR).contains(t));
        }
    }

    #[test]
    fn zero_weight_decoder_constant_outputs() {
        let m = Model::zeroed(small_cfg(ModelKind::Cqnp));
        let emb = vec![0.0; 8];
        let c = m.decode_quantile(0.7, &emb, 0.3).unwrap();
        assert_eq!(c.alpha_logit, 0.0);
        assert_eq!(c.al.location, 0.0);
        assert!((c.al.scale - (2f64.ln() + 1e-3)).abs() < 1e-12);
        assert_eq!(c.al.tau, 0.3);
    }

    #[test]
    fn decoder_depends_on_the_level_input() {
        let m = Model::init(small_cfg(ModelKind::Cqnp), 8);
        let emb = m.encode(&[0.1], &[0.4]).unwrap();
        let a = m.decode_quantile(0.5, &emb, 0.2).unwrap();
        let b = m.decode_quantile(0.5, &emb, 0.8).unwrap();
        assert_ne!((a.alpha_logit, a.al.location), (b.alpha_logit, b.al.location));
    }

    #[test]
    fn cnp_log_lik_at_its_mean_is_the_gaussian_constant() {
        // Force mu = y by zero weights (mu = 0) and y = 0; sigma becomes
        // softplus(0) + 1e-3. Check against the closed form.
        let m = Model::zeroed(small_cfg(ModelKind::Cnp));
        let task = FunctionSample {
            x: vec![0.0, 0.5, -0.5, 1.0, -1.0, 0.2],
            y: vec![0.0; 6],
            n_context: 3,
        };
        let lls = m
            .predictive_log_lik(&task, Which::All, &mut LevelSource::Grid(&[0.5]), None)
            .unwrap();
        let sigma = 2f64.ln() + 1e-3;
        let want = -0.5 * LN_2PI - sigma.ln();
        for ll in lls {
            assert!((ll - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cqnp_single_level_zero_decoder_matches_al_density() {
        let m = Model::zeroed(small_cfg(ModelKind::Cqnp));
        let task = FunctionSample {
            x: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            y: vec![0.0; 6],
            n_context: 3,
        };
        let lls = m
            .predictive_log_lik(&task, Which::All, &mut LevelSource::Grid(&[0.5]), None)
            .unwrap();
        let sigma = 2f64.ln() + 1e-3;
        let want = (0.25 / sigma).ln();
        for ll in lls {
            assert!((ll - want).abs() < 1e-12, "{ll} vs {want}");
        }
        assert!((want - (-1.0211)).abs() < 1e-3);
    }

    #[test]
    fn likelihood_is_invariant_to_context_permutation() {
        for kind in [ModelKind::Cnp, ModelKind::Cqnp, ModelKind::Acqnp] {
            let m = Model::init(small_cfg(kind), 11);
            let task = toy_task(21, 5, 4);
            let mut permuted = task.clone();
            permuted.x[..5].reverse();
            permuted.y[..5].reverse();
            let grid: Vec<f64> = vec![0.2, 0.5, 0.8];
            let a = m
                .predictive_log_lik(&task, Which::Target, &mut LevelSource::Grid(&grid), None)
                .unwrap();
            let b = m
                .predictive_log_lik(&permuted, Which::Target, &mut LevelSource::Grid(&grid), None)
                .unwrap();
            assert_eq!(a, b, "kind {:?}", kind);
        }
    }

    #[test]
    fn acqnp_with_identity_levels_reduces_to_cqnp_bitwise() {
        // Share encoder/decoder params between an ACQNP and a CQNP; the
        // CQNP path consumes the same u draws directly. With the adaptor
        // bypassed the two likelihoods must agree bit for bit.
        let acqnp = Model::init(small_cfg(ModelKind::Acqnp), 13);
        let mut cqnp = Model::init(small_cfg(ModelKind::Cqnp), 13);
        // init draws encoder then decoder in the same order for both kinds,
        // so the shared prefix of the parameter vector coincides; copy to be
        // explicit.
        let flat_a = acqnp.params_flat();
        let shared = cqnp.param_count();
        cqnp.set_params_flat(&flat_a[..shared]).unwrap();

        let task = toy_task(31, 4, 3);
        let grid = [0.15, 0.5, 0.85];
        let from_cqnp = cqnp
            .predictive_log_lik(&task, Which::All, &mut LevelSource::Grid(&grid), None)
            .unwrap();

        // Evaluate the ACQNP networks through the CQNP path by moving its
        // encoder/decoder into a CQNP-kind shell.
        let mut shell = Model::init(small_cfg(ModelKind::Cqnp), 13);
        shell.set_params_flat(&flat_a[..shell.param_count()]).unwrap();
        let from_shell = shell
            .predictive_log_lik(&task, Which::All, &mut LevelSource::Grid(&grid), None)
            .unwrap();
        assert_eq!(from_cqnp, from_shell);
    }

    #[test]
    fn decoder_row_counter_is_levels_times_points() {
        let m = Model::init(small_cfg(ModelKind::Cqnp), 17);
        let task = toy_task(41, 5, 10);
        let mut rng = substream(1, Stream::Levels, &[]);
        let mut counters = EvalCounters::default();
        let levels = 50usize;
        m.predictive_log_lik(
            &task,
            Which::Target,
            &mut LevelSource::Draws {
                rng: &mut rng,
                n_tau: levels,
            },
            Some(&mut counters),
        )
        .unwrap();
        assert_eq!(counters.decoder_rows, (levels * 10) as u64);
        assert_eq!(counters.encoder_rows, 5);
        assert_eq!(counters.aggregations, 1);
    }

    #[test]
    fn sigma_and_tau_respect_their_floors() {
        let m = Model::init(small_cfg(ModelKind::Acqnp), 19);
        let emb = m.encode(&[0.0, 1.0], &[0.5, -0.5]).unwrap();
        let mut rng = substream(3, Stream::Levels, &[]);
        for _ in 0..200 {
            let u = clamp_tau(rng.random::<f64>());
            let tau = m.adapt_tau(1.3, &emb, u).unwrap();
            assert!((TAU_FLOOR..=1.0 - TAU_FLOOR).contains(&tau));
            let c = m.decode_quantile(1.3, &emb, tau).unwrap();
            assert!(c.al.scale >= SIGMA_FLOOR);
        }
    }

    #[test]
    fn predict_mean_reduces_for_symmetric_and_single_components() {
        let m = Model::zeroed(small_cfg(ModelKind::Cqnp));
        // zero decoder: mu = 0, sigma fixed; tau = u so a grid at 0.5 has a
        // vanishing skew correction.
        let mut rng = substream(4, Stream::Levels, &[]);
        let means = m
            .predict_mean(&[0.0, 1.0], &[0.0], &[0.0], 1, &mut rng)
            .unwrap();
        // single draw: AL mean formula with mu=0, sigma=ln2+1e-3, random tau
        for v in means {
            assert!(v.is_finite());
        }

        let q = m.predict_quantiles(&[0.0], &[0.0], &[0.0], &[0.5]).unwrap();
        assert_eq!(q[0].len(), 1);
        assert_eq!(q[0][0].mu, 0.0);
        assert_eq!(q[0][0].weight, 1.0);
    }

    /// Central finite differences against the tape gradient for every
    /// parameter of every model kind on a small task.
    #[test]
    fn gradients_match_finite_differences() {
        let task = toy_task(51, 3, 2);
        let k = 4usize;
        for kind in [ModelKind::Cnp, ModelKind::Cqnp, ModelKind::Acqnp] {
            let mut model = Model::init(small_cfg(kind), 23);
            let n = task.n_total();
            let mut rng = substream(7, Stream::Levels, &[]);
            let u: Vec<f64> = (0..n * k).map(|_| clamp_tau(rng.random())).collect();
            let u_col = if kind.is_quantile() {
                Some(Matrix::column(&u))
            } else {
                None
            };

            let margin = model
                .relu_margin(std::slice::from_ref(&task), Which::All, u_col.as_ref())
                .unwrap();
            assert!(
                margin > 1e-6,
                "kind {:?}: re-seed the toy task, a pre-activation sits on a kink",
                kind
            );

            let (_, _, grads) = model
                .nll_sum_and_grads_with(
                    std::slice::from_ref(&task),
                    Which::All,
                    u_col.as_ref(),
                    None,
                )
                .unwrap();
            let theta = model.params_flat();
            let h = 1e-5;
            let mut max_rel = 0.0f64;
            for i in 0..theta.len() {
                let mut tp = theta.clone();
                tp[i] += h;
                model.set_params_flat(&tp).unwrap();
                let (fp, _) = model
                    .nll_sum(std::slice::from_ref(&task), Which::All, u_col.as_ref())
                    .unwrap();
                tp[i] = theta[i] - h;
                model.set_params_flat(&tp).unwrap();
                let (fm, _) = model
                    .nll_sum(std::slice::from_ref(&task), Which::All, u_col.as_ref())
                    .unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let denom = grads[i].abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max((grads[i] - fd).abs() / denom);
            }
            model.set_params_flat(&theta).unwrap();
            assert!(
                max_rel < 1e-4,
                "kind {:?}: max relative gradient error {max_rel}",
                kind
            );
        }
    }
}
