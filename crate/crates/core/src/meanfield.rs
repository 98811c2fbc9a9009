//! Particle approximation of the mean-field limit.
//!
//! `P` particles follow
//! `dX^i/dt = alpha E_pi[(y - <sigma_*(., x), mu_t>) grad sigma_*(X^i, x)]`
//! where `mu_t` is their own empirical measure and the data expectation is
//! taken over a fixed quadrature sample, which turns the flow into a
//! deterministic ODE.

use crate::error::{Error, Result};
use crate::measure::{bracket_rows, EmpiricalSnapshot, TestFunction, TraceMeta, TraceSeries};
use crate::model::{ActivationSpec, DataModel};
use crate::sgd::{residual_velocity, Batch, DriftExpectation, NetworkState};
use crate::streams::{stream, Purpose};

/// Fixed i.i.d. draws from the data law standing in for `E_pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSample {
    batch: Batch,
    seed: u64,
}

impl QuadratureSample {
    pub fn draw(model: &DataModel, q: usize, seed: u64) -> Result<Self> {
        if q == 0 {
            return Err(Error::config("quadrature size must be >= 1"));
        }
        let mut batch = Batch::new(model.dim());
        batch.resample(model, q, &mut stream(seed, 0, Purpose::Quadrature));
        Ok(Self { batch, seed })
    }

    pub fn from_batch(batch: Batch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::config("quadrature sample must be non-empty"));
        }
        Ok(Self { batch, seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.batch.dim()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    /// `C_0 = alpha (max |y| + sup |f|) sup |f'| max |x|`, a bound on every
    /// particle speed.
    pub fn speed_bound(&self, act: &ActivationSpec, alpha: f64) -> f64 {
        alpha * (self.batch.max_abs_label() + act.sup_abs()) * act.sup_derivative() * self.batch.max_norm()
    }
}

impl DriftExpectation for QuadratureSample {
    fn residual_bracket(
        &self,
        f: &TestFunction,
        state: &NetworkState,
        act: &ActivationSpec,
    ) -> Result<f64> {
        self.batch.residual_bracket(f, state, act)
    }
}

/// Velocity of every particle (row-major `P x d`).
pub fn meanfield_drift(
    particles: &[f64],
    d: usize,
    quad: &QuadratureSample,
    act: &ActivationSpec,
    alpha: f64,
) -> Result<Vec<f64>> {
    Error::check_dim(d, quad.dim())?;
    if particles.is_empty() || !particles.len().is_multiple_of(d) {
        return Err(Error::config("particles must be a non-empty P x d matrix"));
    }
    let mut out = vec![0.0; particles.len()];
    residual_velocity(act, particles, d, &quad.batch, alpha, &mut Vec::new(), &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
}

impl Integrator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
        }
    }
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            other => Err(Error::config(format!("unknown integrator `{other}`"))),
        }
    }
}

/// Stored particle positions of one mean-field solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldTrajectory {
    pub d: usize,
    pub dt: f64,
    pub integrator: Integrator,
    pub alpha: f64,
    pub act: ActivationSpec,
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
}

impl MeanFieldTrajectory {
    pub fn particles(&self) -> usize {
        self.snapshots[0].len() / self.d
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("trajectory has the initial snapshot")
    }

    pub fn snapshot(&self, idx: usize) -> EmpiricalSnapshot {
        EmpiricalSnapshot::new(self.d, self.snapshots[idx].clone(), self.times[idx])
            .expect("snapshots are non-empty")
    }

    /// Particle positions at `t`, linearly interpolated between snapshots.
    pub fn snapshot_at(&self, t: f64) -> Result<EmpiricalSnapshot> {
        let (idx, lambda) = self.locate(t)?;
        if lambda == 0.0 {
            return EmpiricalSnapshot::new(self.d, self.snapshots[idx].clone(), t);
        }
        let (a, b) = (&self.snapshots[idx], &self.snapshots[idx + 1]);
        let rows = a.iter().zip(b).map(|(u, v)| u + lambda * (v - u)).collect();
        EmpiricalSnapshot::new(self.d, rows, t)
    }

    /// Index of the snapshot at or before `t` and the interpolation weight
    /// toward the next one.
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let end = self.t_end();
        let slack = 1e-9 * (1.0 + end);
        if !(t >= -slack && t <= end + slack) {
            return Err(Error::Grid(format!("time {t} outside [0, {end}]")));
        }
        let idx = self.times.partition_point(|s| *s <= t).saturating_sub(1);
        if idx + 1 >= self.times.len() {
            return Ok((self.times.len() - 1, 0.0));
        }
        let (t0, t1) = (self.times[idx], self.times[idx + 1]);
        Ok((idx, ((t - t0) / (t1 - t0)).max(0.0)))
    }

    /// `<f, mu_bar_t>` on `grid`, linear in `t` between snapshots.
    pub fn reference_trace(&self, f: &TestFunction, grid: &[f64]) -> Result<TraceSeries> {
        f.validate(self.d)?;
        let values: Vec<f64> = self
            .snapshots
            .iter()
            .map(|rows| bracket_rows(f, rows, self.d))
            .collect();
        let mut trace = TraceSeries::new(TraceMeta {
            n: self.particles(),
            probe: f.id(),
            seed: 0,
            replication: 0,
            beta: f64::INFINITY,
        });
        for &t in grid {
            let (idx, lambda) = self.locate(t)?;
            let v = if lambda == 0.0 {
                values[idx]
            } else {
                values[idx] + lambda * (values[idx + 1] - values[idx])
            };
            trace.push(t, v);
        }
        Ok(trace)
    }
}

/// Options for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub t_end: f64,
    pub dt: f64,
    pub integrator: Integrator,
    /// Store a snapshot every `stride` steps (the final time is always stored).
    pub stride: usize,
}

/// Solves the particle system from `init` (row-major `P x d`).
pub fn integrate(
    init: &[f64],
    d: usize,
    quad: &QuadratureSample,
    act: &ActivationSpec,
    alpha: f64,
    opts: IntegrateOptions,
) -> Result<MeanFieldTrajectory> {
    act.validate()?;
    Error::check_dim(d, quad.dim())?;
    if init.is_empty() || !init.len().is_multiple_of(d) {
        return Err(Error::config("initial particles must be a non-empty P x d matrix"));
    }
    if !(opts.dt > 0.0) || !(opts.t_end >= 0.0) || opts.stride == 0 {
        return Err(Error::config("need dt > 0, t_end >= 0 and stride >= 1"));
    }
    let steps = (opts.t_end / opts.dt - 1e-9).ceil().max(0.0) as usize;
    let len = init.len();
    let mut x = init.to_vec();
    let mut times = vec![0.0];
    let mut snapshots = vec![x.clone()];
    let mut residuals = Vec::new();
    let mut k1 = vec![0.0; len];
    let (mut k2, mut k3, mut k4, mut tmp) = match opts.integrator {
        Integrator::Rk4 => (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]),
        Integrator::Euler => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
    };
    let batch = &quad.batch;
    let mut t = 0.0;
    for step in 1..=steps {
        let h = if step == steps { opts.t_end - t } else { opts.dt };
        residual_velocity(act, &x, d, batch, alpha, &mut residuals, &mut k1);
        match opts.integrator {
            Integrator::Euler => {
                for (xi, v) in x.iter_mut().zip(&k1) {
                    *xi += h * v;
                }
            }
            Integrator::Rk4 => {
                for ((o, xi), v) in tmp.iter_mut().zip(&x).zip(&k1) {
                    *o = xi + 0.5 * h * v;
                }
                residual_velocity(act, &tmp, d, batch, alpha, &mut residuals, &mut k2);
                for ((o, xi), v) in tmp.iter_mut().zip(&x).zip(&k2) {
                    *o = xi + 0.5 * h * v;
                }
                residual_velocity(act, &tmp, d, batch, alpha, &mut residuals, &mut k3);
                for ((o, xi), v) in tmp.iter_mut().zip(&x).zip(&k3) {
                    *o = xi + h * v;
                }
                residual_velocity(act, &tmp, d, batch, alpha, &mut residuals, &mut k4);
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        t = if step == steps { opts.t_end } else { t + h };
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParticle {
                time: t,
                particle: pos / d,
            });
        }
        if step % opts.stride == 0 || step == steps {
            times.push(t);
            snapshots.push(x.clone());
        }
    }
    Ok(MeanFieldTrajectory {
        d,
        dt: opts.dt,
        integrator: opts.integrator,
        alpha,
        act: act.clone(),
        times,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MixtureComponent;
    use crate::sgd::{InitSpec, NetworkState};
    use crate::streams::stream;

    fn single_point_quad(x: f64, y: f64) -> QuadratureSample {
        QuadratureSample::from_batch(Batch::from_pairs(1, vec![x], vec![y]).unwrap()).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_drift() {
        let act = ActivationSpec::ramp();
        // X = 0.8, x = 1.25: sigma = 2.5 on the middle branch
        let quad = single_point_quad(1.25, 2.5);
        let v = meanfield_drift(&[0.8], 1, &quad, &act, 0.1).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn flat_branch_gives_zero_drift() {
        let act = ActivationSpec::ramp();
        let model = DataModel::two_scale_mixture(1);
        let quad = QuadratureSample::draw(&model, 50, 3).unwrap();
        let v = meanfield_drift(&[0.0, 0.0, 0.0], 1, &quad, &act, 0.1).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn two_particle_hand_case() {
        let act = ActivationSpec::ramp();
        let quad = single_point_quad(1.0, 1.0);
        // X1 = 0.9 (middle: f = 1.5), X2 = 2.0 (flat: f = 7.5); g = 4.5, residual -3.5
        let v = meanfield_drift(&[0.9, 2.0], 1, &quad, &act, 0.2).unwrap();
        let expected = 0.2 * (1.0 - 0.5 * ((10.0 * 0.9 - 7.5) + 7.5)) * 10.0 * 1.0;
        assert!((v[0] - expected).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn zero_horizon_and_fixed_point() {
        let act = ActivationSpec::ramp();
        let quad = single_point_quad(1.25, 2.5);
        let opts = IntegrateOptions { t_end: 0.0, dt: 0.1, integrator: Integrator::Rk4, stride: 1 };
        let traj = integrate(&[0.8], 1, &quad, &act, 0.1, opts).unwrap();
        assert_eq!(traj.times, vec![0.0]);
        let opts = IntegrateOptions { t_end: 5.0, ..opts };
        let traj = integrate(&[0.8, 0.8], 1, &quad, &act, 0.1, opts).unwrap();
        assert!(traj.snapshots.iter().all(|s| s == &vec![0.8, 0.8]));
    }

    #[test]
    fn euler_is_first_order() {
        let act = ActivationSpec::smooth_ramp(0.2);
        let model = DataModel::two_scale_mixture(1);
        let quad = QuadratureSample::draw(&model, 200, 5).unwrap();
        let init = InitSpec::default_for(1).sample(64, 1, &mut stream(5, 0, Purpose::Init));
        let run = |dt: f64, integrator| {
            let opts = IntegrateOptions { t_end: 1.0, dt, integrator, stride: usize::MAX };
            integrate(&init, 1, &quad, &act, 0.5, opts).unwrap().snapshots.pop().unwrap()
        };
        let dt = 0.05;
        let reference = run(dt / 10.0, Integrator::Rk4);
        let err = |x: &[f64]| x.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let coarse = err(&run(dt, Integrator::Euler));
        let fine = err(&run(dt / 2.0, Integrator::Euler));
        let ratio = coarse / fine;
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn reference_trace_examples() {
        let act = ActivationSpec::ramp();
        let model = DataModel::new(1, vec![MixtureComponent { weight: 1.0, label: 1.0, mean: vec![0.0], std: 1.0 }]).unwrap();
        let quad = QuadratureSample::draw(&model, 100, 1).unwrap();
        let opts = IntegrateOptions { t_end: 1.0, dt: 0.01, integrator: Integrator::Rk4, stride: 10 };
        let init = vec![0.7; 20];
        let traj = integrate(&init, 1, &quad, &act, 0.1, opts).unwrap();
        let grid: Vec<f64> = (0..=20).map(|j| j as f64 / 20.0).collect();
        let one = traj.reference_trace(&TestFunction::one(1), &grid).unwrap();
        assert!(one.values.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let sq = traj.reference_trace(&TestFunction::Square, &grid).unwrap();
        assert!((sq.values[0] - 0.49).abs() < 1e-15);
        assert!(traj.reference_trace(&TestFunction::Square, &[1.5]).is_err());
    }

    fn max_norm(rows: &[f64], d: usize) -> f64 {
        rows.chunks_exact(d).map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
    }

    #[test]
    fn speed_and_containment_bounds() {
        let act = ActivationSpec::ramp();
        let d = 3;
        let model = DataModel::two_scale_mixture(d);
        let quad = QuadratureSample::draw(&model, 400, 8).unwrap();
        let r = 1.5;
        let init = InitSpec::UniformBall { radius: r }.sample(150, d, &mut stream(8, 0, Purpose::Init));
        let alpha = 0.4;
        let c0 = quad.speed_bound(&act, alpha);
        let v = meanfield_drift(&init, d, &quad, &act, alpha).unwrap();
        assert!(max_norm(&v, d) <= c0);
        let opts = IntegrateOptions { t_end: 2.0, dt: 0.02, integrator: Integrator::Euler, stride: 1 };
        let traj = integrate(&init, d, &quad, &act, alpha, opts).unwrap();
        for (j, (t, snap)) in traj.times.iter().zip(&traj.snapshots).enumerate() {
            assert!(max_norm(snap, d) <= r + c0 * t + 1e-12);
            if j > 0 {
                let step: Vec<f64> = snap.iter().zip(&traj.snapshots[j - 1]).map(|(a, b)| a - b).collect();
                assert!(max_norm(&step, d) <= c0 * (t - traj.times[j - 1]) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let act = ActivationSpec::smooth_ramp(0.1);
        let model = DataModel::two_scale_mixture(2);
        let quad = QuadratureSample::draw(&model, 200, 4).unwrap();
        let init = InitSpec::default_for(2).sample(50, 2, &mut stream(4, 0, Purpose::Init));
        let perm: Vec<usize> = (0..50).map(|i| (i * 17) % 50).collect();
        let permuted = NetworkState::from_rows(2, init.clone()).unwrap().permuted(&perm);
        let opts = IntegrateOptions { t_end: 1.0, dt: 0.1, integrator: Integrator::Rk4, stride: 1 };
        let grid = [0.0, 0.35, 1.0];
        let a = integrate(&init, 2, &quad, &act, 0.2, opts).unwrap();
        let b = integrate(permuted.weights(), 2, &quad, &act, 0.2, opts).unwrap();
        let ta = a.reference_trace(&TestFunction::Square, &grid).unwrap();
        let tb = b.reference_trace(&TestFunction::Square, &grid).unwrap();
        for (x, y) in ta.values.iter().zip(&tb.values) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn quadrature_seed_stability() {
        let act = ActivationSpec::ramp();
        let model = DataModel::two_scale_mixture(1);
        let init = InitSpec::default_for(1).sample(200, 1, &mut stream(2, 0, Purpose::Init));
        let opts = IntegrateOptions { t_end: 1.0, dt: 0.05, integrator: Integrator::Rk4, stride: 20 };
        let at_one = |seed: u64| {
            let quad = QuadratureSample::draw(&model, 4000, seed).unwrap();
            let traj = integrate(&init, 1, &quad, &act, 0.5, opts).unwrap();
            traj.reference_trace(&TestFunction::Square, &[1.0]).unwrap().values[0]
        };
        let ensemble: Vec<f64> = (100..110).map(at_one).collect();
        let mean = ensemble.iter().sum::<f64>() / 10.0;
        let std = (ensemble.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        let delta = (at_one(1) - at_one(2)).abs();
        assert!(delta <= 3.0 * std, "{delta} vs std {std}");
    }
}
