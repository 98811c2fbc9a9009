//! Activation, network output and the synthetic data law.
//!
//! Every neuron computes `sigma_*(w, x) = f(w . x)` where `f` is a bounded
//! piecewise-linear ramp. The data law is a finite mixture of isotropic
//! Gaussians, each component carrying a fixed label.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sgd::NetworkState;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Ramp,
    SmoothRamp,
}

impl ActivationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActivationKind::Ramp => "ramp",
            ActivationKind::SmoothRamp => "smooth-ramp",
        }
    }
}

/// Ramp activation `f` applied to `w . x`.
///
/// `f(t) = lo` for `t <= t_lo`, `slope * t + intercept` on `[t_lo, t_hi]`
/// and `hi` for `t >= t_hi`. The smooth variant replaces each kink by a C1
/// blend over `[kink - h, kink + h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub lo: f64,
    pub slope: f64,
    pub intercept: f64,
    pub hi: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub h: f64,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self::ramp()
    }
}

impl ActivationSpec {
    /// The regression-experiment ramp: -2.5 / 10t - 7.5 / 7.5 with kinks at 0.5 and 1.5.
    pub fn ramp() -> Self {
        Self {
            kind: ActivationKind::Ramp,
            lo: -2.5,
            slope: 10.0,
            intercept: -7.5,
            hi: 7.5,
            t_lo: 0.5,
            t_hi: 1.5,
            h: 0.0,
        }
    }

    pub fn smooth_ramp(h: f64) -> Self {
        Self {
            kind: ActivationKind::SmoothRamp,
            h,
            ..Self::ramp()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.lo,
            self.slope,
            self.intercept,
            self.hi,
            self.t_lo,
            self.t_hi,
            self.h,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("activation parameters must be finite"));
        }
        if !(self.t_lo < self.t_hi) || !(self.slope > 0.0) {
            return Err(Error::config("activation needs t_lo < t_hi and slope > 0"));
        }
        let scale = 1.0 + self.lo.abs().max(self.hi.abs());
        if (self.slope * self.t_lo + self.intercept - self.lo).abs() > 1e-12 * scale
            || (self.slope * self.t_hi + self.intercept - self.hi).abs() > 1e-12 * scale
        {
            return Err(Error::config(
                "activation ramp is discontinuous: lo/hi must equal slope*t + intercept at the kinks",
            ));
        }
        if self.h < 0.0 {
            return Err(Error::config("smoothing half-width h must be >= 0"));
        }
        if self.kind == ActivationKind::Ramp && self.h != 0.0 {
            return Err(Error::config("exact ramp takes h = 0; use smooth-ramp"));
        }
        if 2.0 * self.h >= self.t_hi - self.t_lo {
            return Err(Error::config("smoothing windows overlap: need 2h < t_hi - t_lo"));
        }
        Ok(())
    }

    /// Effective smoothing half-width (0 for the exact ramp).
    #[inline]
    pub fn smoothing(&self) -> f64 {
        match self.kind {
            ActivationKind::Ramp => 0.0,
            ActivationKind::SmoothRamp => self.h,
        }
    }

    /// True when `f` is exactly piecewise linear.
    pub fn is_piecewise_linear(&self) -> bool {
        self.smoothing() == 0.0
    }

    /// `f(t)`.
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let h = self.smoothing();
        if h == 0.0 {
            if self.slope > 0.0 {
                // rounding is monotone, so this agrees with the branchwise form
                return (self.slope * t + self.intercept).max(self.lo).min(self.hi);
            }
            if t <= self.t_lo {
                self.lo
            } else if t >= self.t_hi {
                self.hi
            } else {
                self.slope * t + self.intercept
            }
        } else if t <= self.t_lo - h {
            self.lo
        } else if t < self.t_lo + h {
            let u = t - (self.t_lo - h);
            self.lo + self.slope * u * u / (4.0 * h)
        } else if t <= self.t_hi - h {
            self.slope * t + self.intercept
        } else if t < self.t_hi + h {
            let u = self.t_hi + h - t;
            self.hi - self.slope * u * u / (4.0 * h)
        } else {
            self.hi
        }
    }

    /// `f'(t)`. At the exact kinks the left derivative is used: 0 at `t_lo`,
    /// `slope` at `t_hi`.
    #[inline]
    pub fn derivative(&self, t: f64) -> f64 {
        let h = self.smoothing();
        if h == 0.0 {
            let active = (t > self.t_lo) & (t <= self.t_hi);
            self.slope * f64::from(u8::from(active))
        } else if t <= self.t_lo - h || t >= self.t_hi + h {
            0.0
        } else if t < self.t_lo + h {
            self.slope * (t - (self.t_lo - h)) / (2.0 * h)
        } else if t <= self.t_hi - h {
            self.slope
        } else {
            self.slope * (self.t_hi + h - t) / (2.0 * h)
        }
    }

    /// `f''(t)`, zero almost everywhere for the exact ramp.
    pub fn second_derivative(&self, t: f64) -> f64 {
        let h = self.smoothing();
        if h == 0.0 {
            return 0.0;
        }
        if t > self.t_lo - h && t < self.t_lo + h {
            self.slope / (2.0 * h)
        } else if t > self.t_hi - h && t < self.t_hi + h {
            -self.slope / (2.0 * h)
        } else {
            0.0
        }
    }

    /// `sup |f|`.
    pub fn sup_abs(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    /// `sup |f'|`.
    pub fn sup_derivative(&self) -> f64 {
        self.slope
    }

    pub fn sigma_star(&self, w: &[f64], x: &[f64]) -> Result<f64> {
        Error::check_dim(w.len(), x.len())?;
        Ok(self.eval(dot(w, x)))
    }

    /// `grad_w sigma_*(w, x) = f'(w . x) x`.
    pub fn grad_sigma_star(&self, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(w.len(), x.len())?;
        let fp = self.derivative(dot(w, x));
        Ok(x.iter().map(|xi| fp * xi).collect())
    }
}

/// `f(t)` for the given activation.
pub fn ramp_eval(spec: &ActivationSpec, t: f64) -> f64 {
    spec.eval(t)
}

pub fn sigma_star(spec: &ActivationSpec, w: &[f64], x: &[f64]) -> Result<f64> {
    spec.sigma_star(w, x)
}

pub fn grad_sigma_star(spec: &ActivationSpec, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.grad_sigma_star(w, x)
}

/// `g_W(x) = (1/N) sum_i sigma_*(W^i, x)`.
pub fn network_output(spec: &ActivationSpec, state: &NetworkState, x: &[f64]) -> Result<f64> {
    Error::check_dim(state.dim(), x.len())?;
    Ok(mean_activation(spec, state.weights(), state.dim(), x))
}

/// Mean of `sigma_*(w_i, x)` over the rows of a flat `n x d` matrix.
#[inline]
pub(crate) fn mean_activation(spec: &ActivationSpec, rows: &[f64], d: usize, x: &[f64]) -> f64 {
    let n = rows.len() / d;
    let total: f64 = rows.chunks_exact(d).map(|w| spec.eval(dot(w, x))).sum();
    total / n as f64
}

/// One isotropic Gaussian component of the data law.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub label: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Data law: pick a component with probability `weight`, emit its label and
/// `x ~ Normal(mean, std^2 I_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataModel {
    d: usize,
    components: Vec<MixtureComponent>,
}

impl DataModel {
    pub fn new(d: usize, components: Vec<MixtureComponent>) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("data dimension must be >= 1"));
        }
        if components.is_empty() {
            return Err(Error::config("data model needs at least one component"));
        }
        let mut total = 0.0;
        for c in &components {
            Error::check_dim(d, c.mean.len())?;
            if !(c.weight >= 0.0) || !c.label.is_finite() || !(c.std >= 0.0) || !c.std.is_finite()
            {
                return Err(Error::config(
                    "mixture components need weight >= 0, finite label and std >= 0",
                ));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config("mixture means must be finite"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "mixture weights must sum to 1 (got {total})"
            )));
        }
        Ok(Self { d, components })
    }

    /// Labels +1 / -1 with equal probability and standard deviations
    /// `1 + 0.2` / `1 - 0.2`.
    pub fn two_scale_mixture(d: usize) -> Self {
        let comp = |label: f64, std: f64| MixtureComponent {
            weight: 0.5,
            label,
            mean: vec![0.0; d],
            std,
        };
        Self::new(d, vec![comp(1.0, 1.0 + 0.2), comp(-1.0, 1.0 - 0.2)])
            .expect("built-in mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn max_abs_label(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.label.abs())
            .fold(0.0, f64::max)
    }

    /// Draws `x` into `x_out` and returns the label.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, x_out: &mut [f64]) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        for (xi, m) in x_out.iter_mut().zip(&chosen.mean) {
            let z: f64 = rng.sample(StandardNormal);
            *xi = m + chosen.std * z;
        }
        chosen.label
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let mut x = vec![0.0; self.d];
        let y = self.sample_into(rng, &mut x);
        (x, y)
    }
}

pub fn sample_data<R: Rng + ?Sized>(model: &DataModel, rng: &mut R) -> (Vec<f64>, f64) {
    model.sample(rng)
}

/// Law of the mini-batch size `|B_k|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchSchedule {
    Fixed(usize),
    /// `sizes[k]` for `k < sizes.len()`, then `limit` forever.
    Sequence { sizes: Vec<usize>, limit: usize },
}

impl Default for BatchSchedule {
    fn default() -> Self {
        BatchSchedule::Fixed(1)
    }
}

impl BatchSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            BatchSchedule::Fixed(m) => *m >= 1,
            BatchSchedule::Sequence { sizes, limit } => *limit >= 1 && sizes.iter().all(|m| *m >= 1),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("batch sizes must be positive"))
        }
    }

    pub fn size_at(&self, k: u64) -> usize {
        match self {
            BatchSchedule::Fixed(m) => *m,
            BatchSchedule::Sequence { sizes, limit } => {
                usize::try_from(k).ok().and_then(|k| sizes.get(k)).copied().unwrap_or(*limit)
            }
        }
    }

    /// `|B_inf|`.
    pub fn limit_size(&self) -> usize {
        match self {
            BatchSchedule::Fixed(m) => *m,
            BatchSchedule::Sequence { limit, .. } => *limit,
        }
    }

    /// `E[1 / |B_inf|]`.
    pub fn inverse_limit_expectation(&self) -> f64 {
        1.0 / self.limit_size() as f64
    }
}
