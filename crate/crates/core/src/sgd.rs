//! Mini-batch noisy SGD on the two-layer network.
//!
//! One step updates every neuron by
//!
//! ```text
//! W_{k+1}^i = W_k^i + alpha / (N |B_k|) sum_{(x,y) in B_k} (y - g(x)) grad sigma_*(W_k^i, x)
//!                   + eps_k^i / N^beta
//! ```
//!
//! with `eps_k^i ~ Normal(0, noise_std^2 I_d)`. The batch and the noise come
//! from separate streams so that runs differing only in `beta` can share them.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::measure::{bracket_rows, on_stride, EmpiricalSnapshot, TestFunction, TraceMeta, TraceSeries};
use crate::model::{dot, ActivationSpec, BatchSchedule, DataModel};
use crate::streams::{RunStreams, StreamRng};

/// Law of the initial weights.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Gaussian { std: f64 },
    UniformBall { radius: f64 },
    Point(Vec<f64>),
}

impl InitSpec {
    /// `Normal(0, 0.8^2 / d I_d)`.
    pub fn default_for(d: usize) -> Self {
        InitSpec::Gaussian {
            std: 0.8 / (d as f64).sqrt(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            InitSpec::Gaussian { std } if !(*std >= 0.0) || !std.is_finite() => {
                Err(Error::config("init std must be finite and >= 0"))
            }
            InitSpec::UniformBall { radius } if !(*radius >= 0.0) || !radius.is_finite() => {
                Err(Error::config("init radius must be finite and >= 0"))
            }
            InitSpec::Point(w) => {
                Error::check_dim(d, w.len())?;
                if w.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::config("init point must be finite"))
                }
            }
            _ => Ok(()),
        }
    }

    /// Support radius when the law is compactly supported.
    pub fn support_radius(&self) -> Option<f64> {
        match self {
            InitSpec::Gaussian { std } if *std == 0.0 => Some(0.0),
            InitSpec::Gaussian { .. } => None,
            InitSpec::UniformBall { radius } => Some(*radius),
            InitSpec::Point(w) => Some(dot(w, w).sqrt()),
        }
    }

    /// Draws `n` i.i.d. rows of dimension `d`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, d: usize, rng: &mut R) -> Vec<f64> {
        let mut rows = vec![0.0; n * d];
        match self {
            InitSpec::Gaussian { std } => {
                for v in &mut rows {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = std * z;
                }
            }
            InitSpec::UniformBall { radius } => {
                for row in rows.chunks_exact_mut(d) {
                    for v in row.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                    let norm = dot(row, row).sqrt();
                    let u: f64 = rng.random();
                    let r = radius * u.powf(1.0 / d as f64);
                    let scale = if norm > 0.0 { r / norm } else { 0.0 };
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
            }
            InitSpec::Point(w) => {
                for row in rows.chunks_exact_mut(d) {
                    row.copy_from_slice(w);
                }
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    /// Noise exponent; `f64::INFINITY` switches the noise off.
    pub beta: f64,
    pub noise_std: f64,
    pub batch: BatchSchedule,
    pub init: InitSpec,
    pub seed: u64,
}

impl SgdConfig {
    pub fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            alpha: 0.1,
            beta: 1.0,
            noise_std: 0.1,
            batch: BatchSchedule::Fixed(1),
            init: InitSpec::default_for(d.max(1)),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::config("need N >= 1 and d >= 1"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha must be finite and >= 0"));
        }
        if !(self.beta > 0.5) {
            return Err(Error::config(format!(
                "beta must exceed 1/2 (got {})",
                self.beta
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("noise_std must be finite and >= 0"));
        }
        self.batch.validate()?;
        self.init.validate(self.d)
    }

    pub fn has_noise(&self) -> bool {
        self.beta.is_finite() && self.noise_std > 0.0
    }

    /// `N^{-beta}`, or 0 without noise.
    pub fn noise_scale(&self) -> f64 {
        if self.has_noise() {
            (self.n as f64).powf(-self.beta)
        } else {
            0.0
        }
    }

    /// Number of steps `floor(N t)` needed to reach time `t`.
    pub fn steps_for(&self, t: f64) -> u64 {
        let raw = self.n as f64 * t;
        // absorb representation error in products like 2000 * 0.5
        (raw + 1e-9 * (1.0 + raw.abs())).floor().max(0.0) as u64
    }
}

/// Weights `W_k` (row `i` is neuron `i`) and the step counter `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    d: usize,
    weights: Vec<f64>,
    k: u64,
}

impl NetworkState {
    pub fn from_rows(d: usize, weights: Vec<f64>) -> Result<Self> {
        if d == 0 || weights.is_empty() || !weights.len().is_multiple_of(d) {
            return Err(Error::config("state needs d >= 1 and N >= 1 full rows"));
        }
        if let Some(pos) = weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                neuron: pos / d,
            });
        }
        Ok(Self { d, weights, k: 0 })
    }

    pub fn initialize<R: Rng + ?Sized>(cfg: &SgdConfig, rng: &mut R) -> Self {
        Self {
            d: cfg.d,
            weights: cfg.init.sample(cfg.n, cfg.d, rng),
            k: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.d..(i + 1) * self.d]
    }

    /// `<f, nu_k>`.
    pub fn bracket(&self, f: &TestFunction) -> f64 {
        bracket_rows(f, &self.weights, self.d)
    }

    /// Copies the current weights into a snapshot tagged with `t = k / N`.
    pub fn snapshot(&self) -> EmpiricalSnapshot {
        let t = self.k as f64 / self.len() as f64;
        EmpiricalSnapshot::new(self.d, self.weights.clone(), t).expect("state is non-empty")
    }

    /// Applies a row permutation: new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut weights = Vec::with_capacity(self.weights.len());
        for &p in perm {
            weights.extend_from_slice(self.row(p));
        }
        Self {
            d: self.d,
            weights,
            k: self.k,
        }
    }
}

/// Data pairs `(x, y)` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    d: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Batch {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    pub fn from_pairs(d: usize, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        Error::check_dim(ys.len() * d, xs.len())?;
        Ok(Self { d, xs, ys })
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        debug_assert_eq!(x.len(), self.d);
        self.xs.extend_from_slice(x);
        self.ys.push(y);
    }

    pub fn clear(&mut self) {
        self.xs.clear();
        self.ys.clear();
    }

    /// Replaces the contents with `size` fresh draws from `model`.
    pub fn resample<R: Rng + ?Sized>(&mut self, model: &DataModel, size: usize, rng: &mut R) {
        self.xs.resize(size * self.d, 0.0);
        self.ys.resize(size, 0.0);
        for (x, y) in self.xs.chunks_exact_mut(self.d).zip(self.ys.iter_mut()) {
            *y = model.sample_into(rng, x);
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.xs.chunks_exact(self.d).zip(self.ys.iter().copied())
    }

    pub fn max_abs_label(&self) -> f64 {
        self.ys.iter().fold(0.0, |m, y| m.max(y.abs()))
    }

    pub fn max_norm(&self) -> f64 {
        self.xs
            .chunks_exact(self.d)
            .fold(0.0, |m, x| m.max(dot(x, x).sqrt()))
    }
}

/// `y_b - g(x_b)` for every batch point.
pub(crate) fn batch_residuals(
    act: &ActivationSpec,
    rows: &[f64],
    d: usize,
    batch: &Batch,
    out: &mut Vec<f64>,
) {
    let n = (rows.len() / d) as f64;
    out.clear();
    out.extend(batch.iter().map(|(x, y)| {
        let g: f64 = rows.chunks_exact(d).map(|w| act.eval(dot(w, x))).sum();
        y - g / n
    }));
}

/// Adds `scale * sum_b r_b f'(w . x_b) x_b` to `acc` for one neuron `w`.
#[inline]
fn accumulate_neuron_gradient(
    act: &ActivationSpec,
    w: &[f64],
    batch: &Batch,
    residuals: &[f64],
    scale: f64,
    acc: &mut [f64],
) {
    for ((x, _), r) in batch.iter().zip(residuals) {
        let c = scale * r * act.derivative(dot(w, x));
        if c != 0.0 {
            for (a, xi) in acc.iter_mut().zip(x) {
                *a += c * xi;
            }
        }
    }
}

/// Mean-field velocity of each row against `batch`:
/// `(alpha / |B|) sum_b (y_b - g(x_b)) grad sigma_*(w_i, x_b)`.
pub(crate) fn residual_velocity(
    act: &ActivationSpec,
    rows: &[f64],
    d: usize,
    batch: &Batch,
    alpha: f64,
    residuals: &mut Vec<f64>,
    out: &mut [f64],
) {
    batch_residuals(act, rows, d, batch, residuals);
    let scale = alpha / batch.len() as f64;
    out.fill(0.0);
    for (w, o) in rows.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        accumulate_neuron_gradient(act, w, batch, residuals, scale, o);
    }
}

/// Everything one step consumes, recorded so the step can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub batch: Batch,
    /// `eps_k^i` row-major, empty when the run has no noise.
    pub noise: Vec<f64>,
}

impl StepDraws {
    pub fn new(d: usize) -> Self {
        Self {
            batch: Batch::new(d),
            noise: Vec::new(),
        }
    }

    /// Draws `|B_k|` data pairs and the noise for step `k`.
    pub fn draw(&mut self, cfg: &SgdConfig, k: u64, model: &DataModel, streams: &mut RunStreams) {
        self.batch
            .resample(model, cfg.batch.size_at(k), &mut streams.batch);
        self.draw_noise(cfg, &mut streams.noise);
    }

    pub fn draw_noise(&mut self, cfg: &SgdConfig, rng: &mut StreamRng) {
        if cfg.has_noise() {
            let std = cfg.noise_std;
            self.noise.clear();
            self.noise
                .extend((0..cfg.n * cfg.d).map(|_| std * rng.sample::<f64, _>(StandardNormal)));
        } else {
            self.noise.clear();
        }
    }
}

/// `sum_i f(w_i x)` for scalar weights.
///
/// Four partial sums let the loop vectorize; the summation order is fixed, so
/// results stay deterministic.
fn forward_1d(act: &ActivationSpec, weights: &[f64], x: f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let w4 = weights.chunks_exact(4);
    let tail: f64 = w4.remainder().iter().map(|w| act.eval(w * x)).sum();
    if act.is_piecewise_linear() && act.slope > 0.0 {
        let (a, b, lo, hi) = (act.slope, act.intercept, act.lo, act.hi);
        for w in w4 {
            for j in 0..4 {
                acc[j] += (a * (w[j] * x) + b).max(lo).min(hi);
            }
        }
    } else {
        for w in w4 {
            for j in 0..4 {
                acc[j] += act.eval(w[j] * x);
            }
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Scalar-weight update `w_i += scale sum_b r_b f'(w_i x_b) x_b + noise_i`,
/// where `coef[b] = scale r_b x_b`.
fn update_1d(
    act: &ActivationSpec,
    weights: &mut [f64],
    xs: &[f64],
    coef: &[f64],
    noise: &[f64],
    noise_scale: f64,
    grad: &mut Vec<f64>,
) {
    let (slope, t_lo, t_hi) = (act.slope, act.t_lo, act.t_hi);
    if !act.is_piecewise_linear() {
        for (i, w) in weights.iter_mut().enumerate() {
            let g: f64 = xs.iter().zip(coef).map(|(x, c)| c * act.derivative(*w * x)).sum();
            *w += g + if noise_scale != 0.0 { noise_scale * noise[i] } else { 0.0 };
        }
        return;
    }
    if xs.len() == 1 {
        // the common |B| = 1 case, written so the loop vectorizes
        let (x, c) = (xs[0], coef[0] * slope);
        if noise_scale != 0.0 {
            for (w, e) in weights.iter_mut().zip(noise) {
                let t = *w * x;
                let active = (t > t_lo) & (t <= t_hi);
                *w += (if active { c } else { 0.0 }) + noise_scale * e;
            }
        } else {
            for w in weights.iter_mut() {
                let t = *w * x;
                let active = (t > t_lo) & (t <= t_hi);
                *w += if active { c } else { 0.0 };
            }
        }
        return;
    }
    // batch-outer, neuron-inner, so the inner loop runs over contiguous weights
    grad.clear();
    grad.resize(weights.len(), 0.0);
    for (x, c) in xs.iter().zip(coef) {
        let c = c * slope;
        for (g, w) in grad.iter_mut().zip(weights.iter()) {
            let t = *w * x;
            let active = (t > t_lo) & (t <= t_hi);
            *g += if active { c } else { 0.0 };
        }
    }
    if noise_scale != 0.0 {
        for ((w, g), e) in weights.iter_mut().zip(grad.iter()).zip(noise) {
            *w += g + noise_scale * e;
        }
    } else {
        for (w, g) in weights.iter_mut().zip(grad.iter()) {
            *w += g;
        }
    }
}

/// Reusable buffers for [`apply_step`].
#[derive(Debug, Clone, Default)]
pub struct StepScratch {
    residuals: Vec<f64>,
    coef: Vec<f64>,
    grad: Vec<f64>,
}

/// Applies one SGD step with the given batch and noise draws.
pub fn apply_step(
    cfg: &SgdConfig,
    state: &mut NetworkState,
    act: &ActivationSpec,
    batch: &Batch,
    noise: &[f64],
    scratch: &mut StepScratch,
) -> Result<()> {
    let d = state.d;
    let n = state.len();
    Error::check_dim(cfg.d, d)?;
    Error::check_dim(cfg.n, n)?;
    Error::check_dim(d, batch.dim())?;
    if batch.is_empty() {
        return Err(Error::config("empty mini-batch"));
    }
    let noise_scale = cfg.noise_scale();
    if noise_scale != 0.0 {
        Error::check_dim(n * d, noise.len())?;
    }
    let m = batch.len();
    let scale = cfg.alpha / (n as f64 * m as f64);
    let StepScratch { residuals, coef, grad } = scratch;
    if d == 1 {
        coef.clear();
        for (x, y) in batch.xs().iter().zip(batch.ys()) {
            let g = forward_1d(act, &state.weights, *x);
            coef.push(scale * (y - g / n as f64) * x);
        }
        update_1d(act, &mut state.weights, batch.xs(), coef, noise, noise_scale, grad);
        if let Some(i) = state.weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: state.k, neuron: i });
        }
        state.k += 1;
        return Ok(());
    }
    batch_residuals(act, &state.weights, d, batch, residuals);
    grad.resize(d, 0.0);
    for (i, w) in state.weights.chunks_exact_mut(d).enumerate() {
        grad.fill(0.0);
        accumulate_neuron_gradient(act, w, batch, residuals, scale, grad);
        if noise_scale != 0.0 {
            let eps = &noise[i * d..(i + 1) * d];
            for ((wj, gj), ej) in w.iter_mut().zip(grad.iter()).zip(eps) {
                *wj += gj + noise_scale * ej;
            }
        } else {
            for (wj, gj) in w.iter_mut().zip(grad.iter()) {
                *wj += gj;
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: state.k,
                neuron: i,
            });
        }
    }
    state.k += 1;
    Ok(())
}

/// One step with fresh draws from `streams`.
pub fn sgd_step(
    cfg: &SgdConfig,
    state: &mut NetworkState,
    model: &DataModel,
    act: &ActivationSpec,
    streams: &mut RunStreams,
) -> Result<StepDraws> {
    let mut draws = StepDraws::new(cfg.d);
    draws.draw(cfg, state.k, model, streams);
    apply_step(cfg, state, act, &draws.batch, &draws.noise, &mut StepScratch::default())?;
    Ok(draws)
}

/// A single SGD run with its own streams and reusable buffers.
pub struct Simulation<'a> {
    cfg: &'a SgdConfig,
    model: &'a DataModel,
    act: &'a ActivationSpec,
    state: NetworkState,
    streams: RunStreams,
    draws: StepDraws,
    scratch: StepScratch,
    fixed_batch: Option<&'a Batch>,
}

impl<'a> Simulation<'a> {
    /// Starts replication `replication` of `cfg`: initial weights come from
    /// its init stream.
    pub fn new(
        cfg: &'a SgdConfig,
        model: &'a DataModel,
        act: &'a ActivationSpec,
        replication: u64,
    ) -> Result<Self> {
        let mut streams = RunStreams::new(cfg.seed, replication);
        cfg.validate()?;
        let state = NetworkState::initialize(cfg, &mut streams.init);
        Self::from_state(cfg, model, act, state, streams)
    }

    pub fn from_state(
        cfg: &'a SgdConfig,
        model: &'a DataModel,
        act: &'a ActivationSpec,
        state: NetworkState,
        streams: RunStreams,
    ) -> Result<Self> {
        cfg.validate()?;
        act.validate()?;
        Error::check_dim(cfg.d, model.dim())?;
        Error::check_dim(cfg.d, state.dim())?;
        Error::check_dim(cfg.n, state.len())?;
        Ok(Self {
            cfg,
            model,
            act,
            state,
            streams,
            draws: StepDraws::new(cfg.d),
            scratch: StepScratch::default(),
            fixed_batch: None,
        })
    }

    /// Uses `batch` at every step instead of sampling from the data law.
    pub fn with_fixed_batch(mut self, batch: &'a Batch) -> Self {
        self.fixed_batch = Some(batch);
        self
    }

    pub fn config(&self) -> &SgdConfig {
        self.cfg
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn into_state(self) -> NetworkState {
        self.state
    }

    /// The state and the streams, positioned to continue the run.
    pub fn into_parts(self) -> (NetworkState, RunStreams) {
        (self.state, self.streams)
    }

    /// Draws of the most recent step.
    pub fn last_draws(&self) -> &StepDraws {
        &self.draws
    }

    /// Draws the next step's batch and noise without applying them.
    fn draw(&mut self) {
        match self.fixed_batch {
            Some(_) => self.draws.draw_noise(self.cfg, &mut self.streams.noise),
            None => self
                .draws
                .draw(self.cfg, self.state.k, self.model, &mut self.streams),
        }
    }

    fn current_batch(&self) -> &Batch {
        self.fixed_batch.unwrap_or(&self.draws.batch)
    }

    fn apply(&mut self) -> Result<()> {
        let batch = self.fixed_batch.unwrap_or(&self.draws.batch);
        apply_step(
            self.cfg,
            &mut self.state,
            self.act,
            batch,
            &self.draws.noise,
            &mut self.scratch,
        )
    }

    pub fn step(&mut self) -> Result<()> {
        self.draw();
        self.apply()
    }

    /// Runs to `floor(N t_end)` steps, calling `observe` on the initial state
    /// and after every step.
    pub fn run_observed<F>(&mut self, t_end: f64, mut observe: F) -> Result<()>
    where
        F: FnMut(&NetworkState),
    {
        if !(t_end >= 0.0) {
            return Err(Error::config("t_end must be >= 0"));
        }
        let steps = self.cfg.steps_for(t_end);
        observe(&self.state);
        for _ in 0..steps {
            self.step()?;
            observe(&self.state);
        }
        Ok(())
    }

    /// Records `<f, mu_t^N>` for each probe at every step time `t = k / N`.
    pub fn run(&mut self, t_end: f64, probes: &[TestFunction]) -> Result<Vec<TraceSeries>> {
        for f in probes {
            f.validate(self.cfg.d)?;
        }
        let n = self.cfg.n;
        let mut traces: Vec<TraceSeries> = probes
            .iter()
            .map(|f| TraceSeries::new(self.trace_meta(f.id())))
            .collect();
        self.run_observed(t_end, |state| {
            let t = state.step() as f64 / n as f64;
            for (trace, f) in traces.iter_mut().zip(probes) {
                trace.push(t, state.bracket(f));
            }
        })?;
        Ok(traces)
    }

    /// Like [`Simulation::run`] but records only at `t = 0` and at step
    /// times on multiples of `stride` (every step when `stride` is 0).
    pub fn run_thinned(
        &mut self,
        t_end: f64,
        probes: &[TestFunction],
        stride: f64,
    ) -> Result<Vec<TraceSeries>> {
        for f in probes {
            f.validate(self.cfg.d)?;
        }
        let n = self.cfg.n;
        // step k is recorded when k is a multiple of N * stride, if that is an integer
        let every = if stride > 0.0 {
            let k = (n as f64 * stride).round();
            if (k - n as f64 * stride).abs() < 1e-9 * (1.0 + k) && k >= 1.0 {
                Some(k as u64)
            } else {
                None
            }
        } else {
            Some(1)
        };
        let mut traces: Vec<TraceSeries> = probes
            .iter()
            .map(|f| TraceSeries::new(self.trace_meta(f.id())))
            .collect();
        self.run_observed(t_end, |state| {
            let k = state.step();
            let t = k as f64 / n as f64;
            let keep = match every {
                Some(e) => k % e == 0,
                None => on_stride(t, stride),
            };
            if keep {
                for (trace, f) in traces.iter_mut().zip(probes) {
                    trace.push(t, state.bracket(f));
                }
            }
        })?;
        Ok(traces)
    }

    /// Cumulative martingale part `<f, M_t^N>` on the step grid.
    pub fn run_martingale(
        &mut self,
        t_end: f64,
        f: &TestFunction,
        expectation: &dyn DriftExpectation,
    ) -> Result<TraceSeries> {
        f.validate(self.cfg.d)?;
        let steps = self.cfg.steps_for(t_end);
        let n = self.cfg.n as f64;
        let mut trace = TraceSeries::new(self.trace_meta(f.id()));
        let mut cumulative = 0.0;
        let mut gradients = Vec::new();
        trace.push(0.0, 0.0);
        for _ in 0..steps {
            self.draw();
            gradient_rows(f, &self.state, &mut gradients);
            let batch_term = self.cfg.alpha / n
                * residual_bracket_over(self.act, &self.state, &gradients, self.current_batch());
            let d_term = self.cfg.alpha / n * expectation.residual_bracket(f, &self.state, self.act)?;
            cumulative += batch_term - d_term;
            self.apply()?;
            trace.push(self.state.k as f64 / n, cumulative);
        }
        Ok(trace)
    }

    fn trace_meta(&self, probe: String) -> TraceMeta {
        TraceMeta {
            n: self.cfg.n,
            probe,
            seed: self.cfg.seed,
            replication: 0,
            beta: self.cfg.beta,
        }
    }
}

/// Runs replication `replication` of `cfg` and records each probe on the
/// grid `t = k / N`, `k = 0 ..= floor(N t_end)`.
pub fn run_trajectory(
    cfg: &SgdConfig,
    model: &DataModel,
    act: &ActivationSpec,
    t_end: f64,
    probes: &[TestFunction],
    replication: u64,
) -> Result<Vec<TraceSeries>> {
    let mut sim = Simulation::new(cfg, model, act, replication)?;
    let mut traces = sim.run(t_end, probes)?;
    for tr in &mut traces {
        tr.meta.replication = replication;
    }
    Ok(traces)
}

/// Cumulative `<f, M_t^N>` for replication `replication`.
pub fn martingale_trace(
    cfg: &SgdConfig,
    model: &DataModel,
    act: &ActivationSpec,
    f: &TestFunction,
    t_end: f64,
    replication: u64,
    expectation: &dyn DriftExpectation,
) -> Result<TraceSeries> {
    let mut sim = Simulation::new(cfg, model, act, replication)?;
    let mut trace = sim.run_martingale(t_end, f, expectation)?;
    trace.meta.replication = replication;
    Ok(trace)
}

/// The data-law expectation inside the drift term `<f, D_k^N>`.
pub trait DriftExpectation {
    /// `E_pi[(y - <sigma_*(., x), nu>) <grad f . grad sigma_*(., x), nu>]`
    /// for the empirical measure `nu` of `state`.
    fn residual_bracket(
        &self,
        f: &TestFunction,
        state: &NetworkState,
        act: &ActivationSpec,
    ) -> Result<f64>;
}

fn gradient_rows(f: &TestFunction, state: &NetworkState, out: &mut Vec<f64>) {
    let d = state.d;
    out.resize(state.weights.len(), 0.0);
    for (w, g) in state.weights.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        f.gradient_into(w, g);
    }
}

/// Batch average of `(y - g(x)) <grad f . grad sigma_*(., x), nu>` given the
/// probe gradients at every row.
fn residual_bracket_over(
    act: &ActivationSpec,
    state: &NetworkState,
    gradients: &[f64],
    batch: &Batch,
) -> f64 {
    let d = state.d;
    let n = state.len() as f64;
    let mut total = 0.0;
    for (x, y) in batch.iter() {
        let mut g = 0.0;
        let mut h = 0.0;
        for (w, gf) in state.weights.chunks_exact(d).zip(gradients.chunks_exact(d)) {
            let t = dot(w, x);
            g += act.eval(t);
            let fp = act.derivative(t);
            if fp != 0.0 {
                h += fp * dot(gf, x);
            }
        }
        total += (y - g / n) * (h / n);
    }
    total / batch.len() as f64
}

impl DriftExpectation for Batch {
    fn residual_bracket(
        &self,
        f: &TestFunction,
        state: &NetworkState,
        act: &ActivationSpec,
    ) -> Result<f64> {
        Error::check_dim(state.dim(), self.dim())?;
        if self.is_empty() {
            return Err(Error::config("empty quadrature sample"));
        }
        let mut gradients = Vec::new();
        gradient_rows(f, state, &mut gradients);
        Ok(residual_bracket_over(act, state, &gradients, self))
    }
}

/// Terms of the one-step identity
/// `<f, nu_{k+1}> - <f, nu_k> = D + M + R + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecomposition {
    pub d_term: f64,
    pub m_term: f64,
    pub r_term: f64,
    pub noise_term: f64,
    pub total: f64,
    /// True when `r_term` is the exact remainder (constant Hessian).
    pub remainder_exact: bool,
}

impl StepDecomposition {
    /// `total - (d + m + r + noise)`.
    pub fn residual(&self) -> f64 {
        self.total - (self.d_term + self.m_term + self.r_term + self.noise_term)
    }
}

/// Replays one step with recorded draws and splits the change of `<f, nu>`.
///
/// Probes with a constant Hessian get the exact second-order remainder; other
/// twice-differentiable probes use the Hessian at `W_k`, which leaves a
/// third-order Taylor error in the identity.
pub fn decompose_with_draws(
    cfg: &SgdConfig,
    state: &NetworkState,
    act: &ActivationSpec,
    f: &TestFunction,
    draws: &StepDraws,
    expectation: &dyn DriftExpectation,
) -> Result<(NetworkState, StepDecomposition)> {
    let d = state.d;
    let n = state.len();
    f.validate(d)?;
    let constant = f.constant_hessian(d);
    let remainder_exact = constant.is_some();
    if constant.is_none() && state.weights.chunks_exact(d).any(|w| f.hessian(w).is_none()) {
        return Err(Error::Probe(f.id(), "decomposition needs a twice differentiable probe"));
    }

    let mut gradients = Vec::new();
    gradient_rows(f, state, &mut gradients);
    let nf = n as f64;
    let batch_term = cfg.alpha / nf * residual_bracket_over(act, state, &gradients, &draws.batch);
    let d_term = cfg.alpha / nf * expectation.residual_bracket(f, state, act)?;
    let m_term = batch_term - d_term;
    let noise_term = if cfg.has_noise() {
        Error::check_dim(n * d, draws.noise.len())?;
        let s: f64 = gradients
            .chunks_exact(d)
            .zip(draws.noise.chunks_exact(d))
            .map(|(g, e)| dot(g, e))
            .sum();
        s * nf.powf(-(1.0 + cfg.beta))
    } else {
        0.0
    };

    let mut next = state.clone();
    apply_step(cfg, &mut next, act, &draws.batch, &draws.noise, &mut StepScratch::default())?;
    let total = next.bracket(f) - state.bracket(f);

    let mut r_sum = 0.0;
    let mut delta = vec![0.0; d];
    for (old, new) in state.weights.chunks_exact(d).zip(next.weights.chunks_exact(d)) {
        for ((dj, o), nw) in delta.iter_mut().zip(old).zip(new) {
            *dj = nw - o;
        }
        let hess = match &constant {
            Some(h) => std::borrow::Cow::Borrowed(h),
            None => std::borrow::Cow::Owned(f.hessian(old).expect("checked above")),
        };
        let quad: f64 = hess
            .chunks_exact(d)
            .zip(&delta)
            .map(|(row, dj)| dj * dot(row, &delta))
            .sum();
        r_sum += quad;
    }
    let r_term = r_sum / (2.0 * nf);

    Ok((
        next,
        StepDecomposition {
            d_term,
            m_term,
            r_term,
            noise_term,
            total,
            remainder_exact,
        },
    ))
}

/// Draws one step from `streams` and decomposes it.
#[allow(clippy::too_many_arguments)]
pub fn decompose_step(
    cfg: &SgdConfig,
    state: &NetworkState,
    model: &DataModel,
    act: &ActivationSpec,
    f: &TestFunction,
    expectation: &dyn DriftExpectation,
    streams: &mut RunStreams,
) -> Result<(NetworkState, StepDecomposition)> {
    let mut draws = StepDraws::new(cfg.d);
    draws.draw(cfg, state.k, model, streams);
    decompose_with_draws(cfg, state, act, f, &draws, expectation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{stream, Purpose};

    fn cfg(n: usize, d: usize) -> SgdConfig {
        SgdConfig {
            seed: 42,
            ..SgdConfig::new(n, d)
        }
    }

    #[test]
    fn no_learning_no_noise_is_identity() {
        let mut c = cfg(10, 3);
        c.alpha = 0.0;
        c.noise_std = 0.0;
        let model = DataModel::two_scale_mixture(3);
        let act = ActivationSpec::ramp();
        let mut streams = RunStreams::new(1, 0);
        let mut state = NetworkState::initialize(&c, &mut streams.init);
        let before = state.clone();
        sgd_step(&c, &mut state, &model, &act, &mut streams).unwrap();
        assert_eq!(state.weights(), before.weights());
        assert_eq!(state.step(), 1);
    }

    /// Direct transcription of the update rule, one neuron at a time.
    fn naive_step(c: &SgdConfig, w: &[f64], act: &ActivationSpec, batch: &Batch, noise: &[f64]) -> Vec<f64> {
        let d = c.d;
        let n = w.len() / d;
        let mut out = w.to_vec();
        for i in 0..n {
            for (x, y) in batch.iter() {
                let g: f64 = w.chunks_exact(d).map(|wj| act.eval(dot(wj, x))).sum::<f64>() / n as f64;
                let fp = act.derivative(dot(&w[i * d..(i + 1) * d], x));
                for k in 0..d {
                    out[i * d + k] += c.alpha / (n * batch.len()) as f64 * (y - g) * fp * x[k];
                }
            }
            for k in 0..d {
                if c.has_noise() {
                    out[i * d + k] += c.noise_scale() * noise[i * d + k];
                }
            }
        }
        out
    }

    #[test]
    fn step_matches_naive_update() {
        let model = DataModel::two_scale_mixture(1);
        for (d, m, act) in [
            (1, 1, ActivationSpec::ramp()),
            (1, 5, ActivationSpec::ramp()),
            (1, 3, ActivationSpec::smooth_ramp(0.2)),
            (3, 4, ActivationSpec::ramp()),
        ] {
            let model_d = DataModel::two_scale_mixture(d);
            let model = if d == 1 { &model } else { &model_d };
            let mut c = cfg(37, d);
            c.alpha = 2.0;
            c.batch = BatchSchedule::Fixed(m);
            c.init = InitSpec::Gaussian { std: 1.0 };
            let mut streams = RunStreams::new(9, d as u64 * 10 + m as u64);
            let mut state = NetworkState::initialize(&c, &mut streams.init);
            for _ in 0..20 {
                let mut draws = StepDraws::new(d);
                draws.draw(&c, state.k, model, &mut streams);
                let expected = naive_step(&c, state.weights(), &act, &draws.batch, &draws.noise);
                apply_step(&c, &mut state, &act, &draws.batch, &draws.noise, &mut StepScratch::default()).unwrap();
                for (a, b) in state.weights().iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-13 * (1.0 + b.abs()), "d={d} m={m}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn single_neuron_update_by_hand() {
        let mut c = cfg(1, 1);
        c.noise_std = 0.0;
        c.alpha = 0.3;
        let act = ActivationSpec::ramp();
        let mut state = NetworkState::from_rows(1, vec![0.8]).unwrap();
        let (x, y) = (1.25, 1.0);
        let mut batch = Batch::new(1);
        batch.push(&[x], y);
        apply_step(&c, &mut state, &act, &batch, &[], &mut StepScratch::default()).unwrap();
        // w x = 1.0 sits on the middle branch: f = 2.5, f' = 10
        let expected = 0.8 + 0.3 * (1.0 - (10.0 * (0.8 * 1.25) - 7.5)) * 10.0 * 1.25;
        assert_eq!(state.weights()[0], expected);
    }

    #[test]
    fn noise_only_increment_variance() {
        // zero residual everywhere: every neuron in the flat branch for x = 0
        let n = 4;
        let mut c = cfg(n, 2);
        c.noise_std = 0.3;
        c.beta = 0.8;
        let act = ActivationSpec::ramp();
        let mut batch = Batch::new(2);
        batch.push(&[0.0, 0.0], 0.0);
        let mut rng = stream(9, 0, Purpose::Noise);
        let mut draws = StepDraws::new(2);
        let reps = 10_000;
        let mut sum_sq = 0.0;
        for _ in 0..reps {
            let mut state = NetworkState::from_rows(2, vec![0.0; n * 2]).unwrap();
            draws.draw_noise(&c, &mut rng);
            apply_step(&c, &mut state, &act, &batch, &draws.noise, &mut StepScratch::default()).unwrap();
            // the update must be exactly eps / N^beta
            for (w, e) in state.weights().iter().zip(&draws.noise) {
                assert_eq!(*w, e * c.noise_scale());
            }
            sum_sq += state.weights()[0].powi(2);
        }
        let var = sum_sq / reps as f64;
        let expect = 0.09 / (n as f64).powf(1.6);
        assert!((var - expect).abs() / expect < 0.1, "{var} vs {expect}");
    }

    #[test]
    fn non_finite_is_reported() {
        let mut c = cfg(2, 1);
        c.noise_std = 0.0;
        c.alpha = 1e308;
        let act = ActivationSpec::ramp();
        let mut state = NetworkState::from_rows(1, vec![1.0, 1.0]).unwrap();
        let mut batch = Batch::new(1);
        batch.push(&[1.0], 1e300);
        let err = apply_step(&c, &mut state, &act, &batch, &[], &mut StepScratch::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, neuron: 0 }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(10, 2);
        assert!(c.validate().is_ok());
        c.beta = 0.5;
        assert!(c.validate().is_err());
        c.beta = f64::INFINITY;
        assert!(c.validate().is_ok());
        assert_eq!(c.noise_scale(), 0.0);
        c.alpha = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn steps_for_grid() {
        let c = cfg(2000, 1);
        assert_eq!(c.steps_for(0.5), 1000);
        assert_eq!(c.steps_for(1.0 / 4000.0), 0);
        assert_eq!(cfg(200, 1).steps_for(1.25), 250);
    }

    #[test]
    fn short_run_keeps_initial_value_only() {
        let c = cfg(50, 1);
        let model = DataModel::two_scale_mixture(1);
        let act = ActivationSpec::ramp();
        let traces = run_trajectory(&c, &model, &act, 0.01, &[TestFunction::Square], 0).unwrap();
        assert_eq!(traces[0].len(), 1);
        assert_eq!(traces[0].grid, vec![0.0]);
    }

    #[test]
    fn constant_probe_and_determinism() {
        let c = cfg(20, 2);
        let model = DataModel::two_scale_mixture(2);
        let act = ActivationSpec::ramp();
        let probes = [TestFunction::one(2), TestFunction::Square];
        let a = run_trajectory(&c, &model, &act, 2.0, &probes, 3).unwrap();
        let b = run_trajectory(&c, &model, &act, 2.0, &probes, 3).unwrap();
        assert!(a[0].values.iter().all(|v| *v == 1.0));
        assert_eq!(a, b);
        assert_eq!(a[1].len(), 41);
        let other = run_trajectory(&c, &model, &act, 2.0, &probes, 4).unwrap();
        assert_ne!(a[1].values, other[1].values);
    }

    #[test]
    fn full_batch_martingale_vanishes() {
        let c = cfg(30, 1);
        let model = DataModel::two_scale_mixture(1);
        let act = ActivationSpec::ramp();
        let mut quad = Batch::new(1);
        quad.resample(&model, 300, &mut stream(1, 0, Purpose::Quadrature));
        let mut sim = Simulation::new(&c, &model, &act, 0).unwrap().with_fixed_batch(&quad);
        let trace = sim.run_martingale(1.0, &TestFunction::Square, &quad).unwrap();
        assert!(trace.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn decomposition_identity_quadratic_and_affine() {
        let c = cfg(25, 2);
        let model = DataModel::two_scale_mixture(2);
        let act = ActivationSpec::ramp();
        let mut streams = RunStreams::new(5, 0);
        let state = NetworkState::initialize(&c, &mut streams.init);
        let mut quad = Batch::new(2);
        quad.resample(&model, 8, &mut stream(5, 0, Purpose::Quadrature));
        let mut draws = StepDraws::new(2);
        draws.draw_noise(&c, &mut streams.noise);
        draws.batch = quad.clone();
        let (_, dec) = decompose_with_draws(&c, &state, &act, &TestFunction::Square, &draws, &quad).unwrap();
        assert!(dec.remainder_exact);
        assert!(dec.residual().abs() < 1e-10);
        assert!(dec.m_term.abs() < 1e-15);

        let affine = TestFunction::Affine { a: vec![0.5, -2.0], b: 1.0 };
        let (_, dec) = decompose_with_draws(&c, &state, &act, &affine, &draws, &quad).unwrap();
        assert_eq!(dec.r_term, 0.0);
        assert!(dec.residual().abs() < 1e-12);

        assert!(matches!(
            decompose_with_draws(&c, &state, &act, &TestFunction::Norm2, &draws, &quad),
            Err(Error::Probe(..))
        ));
    }

    #[test]
    fn smooth_probe_uses_taylor_remainder() {
        let c = cfg(25, 1);
        let model = DataModel::two_scale_mixture(1);
        let act = ActivationSpec::ramp();
        let probe = TestFunction::Activation { act: ActivationSpec::smooth_ramp(0.2), x0: vec![1.3] };
        let mut streams = RunStreams::new(8, 0);
        let state = NetworkState::initialize(&c, &mut streams.init);
        let quad = {
            let mut q = Batch::new(1);
            q.resample(&model, 16, &mut stream(8, 0, Purpose::Quadrature));
            q
        };
        let (_, dec) = decompose_step(&c, &state, &model, &act, &probe, &quad, &mut streams).unwrap();
        assert!(!dec.remainder_exact);
        // error of a second-order expansion with steps of size ~ alpha/N
        assert!(dec.residual().abs() < 1e-6, "{dec:?}");
    }
}
