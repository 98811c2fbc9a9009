//! Fluctuations around the mean-field limit and their limiting covariance.

use crate::error::{Error, Result};
use crate::meanfield::{MeanFieldTrajectory, QuadratureSample};
use crate::measure::{EmpiricalSnapshot, TestFunction, TraceSeries};
use crate::model::{dot, ActivationSpec, BatchSchedule};

/// `sqrt(N) (<f, mu_t^N> - <f, mu_bar_t>)` on the SGD grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationTrace {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub probe: String,
    pub n: usize,
    pub beta: f64,
    pub replication: u64,
    pub seed: u64,
}

impl FluctuationTrace {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// As a trace series, for CSV output.
    pub fn to_trace(&self) -> TraceSeries {
        TraceSeries {
            grid: self.grid.clone(),
            values: self.values.clone(),
            meta: crate::measure::TraceMeta {
                n: self.n,
                probe: self.probe.clone(),
                seed: self.seed,
                replication: self.replication,
                beta: self.beta,
            },
        }
    }

    /// Keeps grid points on multiples of `dt`.
    pub fn thinned(&self, dt: f64) -> FluctuationTrace {
        let mut out = FluctuationTrace {
            grid: Vec::new(),
            values: Vec::new(),
            ..self.clone()
        };
        for (t, v) in self.grid.iter().zip(&self.values) {
            if crate::measure::on_stride(*t, dt) {
                out.grid.push(*t);
                out.values.push(*v);
            }
        }
        out
    }
}

/// Pointwise `sqrt(n) (run - reference)`, with the reference interpolated
/// onto the run's grid.
pub fn fluctuation_trace(run: &TraceSeries, reference: &TraceSeries, n: usize) -> Result<FluctuationTrace> {
    let scale = (n as f64).sqrt();
    let same_grid = run.grid == reference.grid;
    let mut values = Vec::with_capacity(run.len());
    for (j, (t, v)) in run.grid.iter().zip(&run.values).enumerate() {
        let r = if same_grid {
            reference.values[j]
        } else {
            reference.interpolate(*t)?
        };
        values.push(scale * (v - r));
    }
    Ok(FluctuationTrace {
        grid: run.grid.clone(),
        values,
        probe: run.meta.probe.clone(),
        n,
        beta: run.meta.beta,
        replication: run.meta.replication,
        seed: run.meta.seed,
    })
}

/// `Q_v[f](x, y) = (y - <sigma_*(., x), nu>) <grad f . grad sigma_*(., x), nu>`
/// for `nu = snap`.
pub fn q_kernel(
    f: &TestFunction,
    snap: &EmpiricalSnapshot,
    x: &[f64],
    y: f64,
    act: &ActivationSpec,
) -> Result<f64> {
    let d = snap.dim();
    f.validate(d)?;
    Error::check_dim(d, x.len())?;
    let mut out = [0.0];
    let mut grads = Vec::new();
    q_values(std::slice::from_ref(f), snap, x, y, act, &mut grads, &mut out);
    Ok(out[0])
}

/// `Q_v[f_i](x, y)` for every probe in one pass over the particles.
fn q_values(
    probes: &[TestFunction],
    snap: &EmpiricalSnapshot,
    x: &[f64],
    y: f64,
    act: &ActivationSpec,
    grad: &mut Vec<f64>,
    out: &mut [f64],
) {
    let d = snap.dim();
    let p = snap.len() as f64;
    grad.resize(d, 0.0);
    let mut g = 0.0;
    out.fill(0.0);
    for w in snap.rows() {
        let t = dot(w, x);
        g += act.eval(t);
        let fp = act.derivative(t);
        if fp == 0.0 {
            continue;
        }
        for (f, o) in probes.iter().zip(out.iter_mut()) {
            f.gradient_into(w, grad);
            *o += fp * dot(grad, x);
        }
    }
    let residual = y - g / p;
    for o in out.iter_mut() {
        *o *= residual / p;
    }
}

/// `Cov(<f_i, G_t>, <f_j, G_s>)` for one pair of probes.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub value: f64,
    /// `E[1 / |B_inf|]`
    pub prefactor: f64,
    pub s: f64,
    pub t: f64,
    pub node_times: Vec<f64>,
    /// `Cov_pi(Q_v[f_i], Q_v[f_j])` at each node.
    pub integrand: Vec<f64>,
}

/// Covariance matrix (row-major, `k x k`) of `<f_i, G_t>, <f_j, G_s>` for
/// all probe pairs: `alpha^2 E[1/|B_inf|] int_0^s Cov_pi(Q_v[f_i], Q_v[f_j]) dv`.
///
/// The `pi`-covariance is the (biased, `1/Q`) covariance over `quad`; the time
/// integral is the trapezoid rule on the stored snapshot times up to `s`.
pub fn gprocess_covariance_matrix(
    probes: &[TestFunction],
    traj: &MeanFieldTrajectory,
    quad: &QuadratureSample,
    batch: &BatchSchedule,
    s: f64,
    t: f64,
) -> Result<Vec<f64>> {
    Ok(covariance_nodes(probes, traj, quad, batch, s, t)?.0)
}

/// Integrated covariance, the integration nodes, and the integrand at each node.
type CovarianceNodes = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

fn covariance_nodes(
    probes: &[TestFunction],
    traj: &MeanFieldTrajectory,
    quad: &QuadratureSample,
    batch: &BatchSchedule,
    s: f64,
    t: f64,
) -> Result<CovarianceNodes> {
    if !(s >= 0.0) || !(s <= t) {
        return Err(Error::config(format!("need 0 <= s <= t, got s = {s}, t = {t}")));
    }
    if probes.is_empty() {
        return Err(Error::config("at least one probe is required"));
    }
    batch.validate()?;
    Error::check_dim(traj.d, quad.dim())?;
    for f in probes {
        f.validate(traj.d)?;
    }
    let k = probes.len();
    let mut nodes: Vec<f64> = traj.times.iter().copied().filter(|v| *v < s).collect();
    nodes.push(s);
    let mut integrands = Vec::with_capacity(nodes.len());
    for &v in &nodes {
        let snap = traj.snapshot_at(v)?;
        integrands.push(pi_covariance(probes, &snap, quad, &traj.act));
    }
    let mut total = vec![0.0; k * k];
    for j in 1..nodes.len() {
        let h = 0.5 * (nodes[j] - nodes[j - 1]);
        for (acc, (a, b)) in total.iter_mut().zip(integrands[j - 1].iter().zip(&integrands[j])) {
            *acc += h * (a + b);
        }
    }
    let scale = traj.alpha * traj.alpha * batch.inverse_limit_expectation();
    for v in &mut total {
        *v *= scale;
    }
    Ok((total, nodes, integrands))
}

/// `Cov_pi(Q[f_i], Q[f_j])` over the quadrature sample, symmetric by
/// construction.
fn pi_covariance(
    probes: &[TestFunction],
    snap: &EmpiricalSnapshot,
    quad: &QuadratureSample,
    act: &ActivationSpec,
) -> Vec<f64> {
    let k = probes.len();
    let q = quad.len() as f64;
    let mut grad = Vec::new();
    let mut vals = vec![0.0; k];
    let mut rows = Vec::with_capacity(quad.len() * k);
    let mut mean = vec![0.0; k];
    for (x, y) in quad.batch().iter() {
        q_values(probes, snap, x, y, act, &mut grad, &mut vals);
        for (m, v) in mean.iter_mut().zip(&vals) {
            *m += v / q;
        }
        rows.extend_from_slice(&vals);
    }
    let mut cov = vec![0.0; k * k];
    for row in rows.chunks_exact(k) {
        for i in 0..k {
            let di = row[i] - mean[i];
            for j in i..k {
                cov[i * k + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            cov[i * k + j] /= q;
            cov[j * k + i] = cov[i * k + j];
        }
    }
    cov
}

/// `Cov(<f_i, G_t>, <f_j, G_s>)` with its integrand samples.
pub fn gprocess_covariance(
    f_i: &TestFunction,
    f_j: &TestFunction,
    traj: &MeanFieldTrajectory,
    quad: &QuadratureSample,
    batch: &BatchSchedule,
    s: f64,
    t: f64,
) -> Result<CovarianceEstimate> {
    let probes = [f_i.clone(), f_j.clone()];
    let (total, node_times, integrands) = covariance_nodes(&probes, traj, quad, batch, s, t)?;
    Ok(CovarianceEstimate {
        value: total[1],
        prefactor: batch.inverse_limit_expectation(),
        s,
        t,
        node_times,
        integrand: integrands.iter().map(|c| c[1]).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    /// Coefficient of determination of the fit to the mean difference.
    pub r_squared: f64,
    pub replications: usize,
}

/// Least-squares line through `(t, a_r(t) - b_r(t))` averaged over the
/// replications, where `a` is the `beta = 3/4` ensemble and `b` the reference
/// ensemble, paired by position.
///
/// With two or more replications the standard error is that of the mean of
/// the per-replication slopes (which equals the slope of the mean); with one
/// it is the classical OLS standard error.
pub fn drift_fit(trace_34: &[FluctuationTrace], trace_hi: &[FluctuationTrace]) -> Result<DriftFit> {
    if trace_34.is_empty() || trace_34.len() != trace_hi.len() {
        return Err(Error::config("drift fit needs equally many replications in both ensembles"));
    }
    let grid = &trace_34[0].grid;
    if grid.len() < 10 {
        return Err(Error::Grid(format!("drift fit needs at least 10 grid points, got {}", grid.len())));
    }
    for tr in trace_34.iter().chain(trace_hi) {
        if &tr.grid != grid {
            return Err(Error::Grid("drift fit traces must share one grid".into()));
        }
    }
    let m = grid.len() as f64;
    let t_mean = grid.iter().sum::<f64>() / m;
    let sxx: f64 = grid.iter().map(|t| (t - t_mean).powi(2)).sum();
    let slope_of = |ys: &[f64]| -> (f64, f64) {
        let y_mean = ys.iter().sum::<f64>() / m;
        let sxy: f64 = grid.iter().zip(ys).map(|(t, y)| (t - t_mean) * (y - y_mean)).sum();
        let slope = sxy / sxx;
        (slope, y_mean - slope * t_mean)
    };
    let r = trace_34.len();
    let mut mean_diff = vec![0.0; grid.len()];
    let mut slopes = Vec::with_capacity(r);
    let mut diff = vec![0.0; grid.len()];
    for (a, b) in trace_34.iter().zip(trace_hi) {
        for ((dv, x), y) in diff.iter_mut().zip(&a.values).zip(&b.values) {
            *dv = x - y;
        }
        for (acc, dv) in mean_diff.iter_mut().zip(&diff) {
            *acc += dv / r as f64;
        }
        slopes.push(slope_of(&diff).0);
    }
    let (slope, intercept) = slope_of(&mean_diff);
    let sse: f64 = grid
        .iter()
        .zip(&mean_diff)
        .map(|(t, y)| (y - intercept - slope * t).powi(2))
        .sum();
    let y_mean = mean_diff.iter().sum::<f64>() / m;
    let sst: f64 = mean_diff.iter().map(|y| (y - y_mean).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
    let stderr = if r >= 2 {
        let mean = slopes.iter().sum::<f64>() / r as f64;
        let var = slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
        (var / r as f64).sqrt()
    } else {
        (sse / (m - 2.0) / sxx).sqrt()
    };
    Ok(DriftFit {
        slope,
        stderr,
        intercept,
        r_squared,
        replications: r,
    })
}
