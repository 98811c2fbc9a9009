//! Turnkey experiments: replication farming, reference computation and
//! ensemble statistics.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fluctuation::{drift_fit, fluctuation_trace, DriftFit, FluctuationTrace};
use crate::meanfield::{integrate, IntegrateOptions, QuadratureSample};
use crate::measure::{on_stride, TestFunction, TraceSeries};
use crate::model::BatchSchedule;
use crate::sgd::{SgdConfig, Simulation};
use crate::streams::{ensemble_replication, stream, Purpose};

use super::config::{ExperimentConfig, ReferenceProvider};

/// Ensemble id of the single-run and variance replications.
pub const PLAIN_ENSEMBLE: u32 = 0;
/// Ensemble id of the mean-field reference.
pub const REFERENCE_ENSEMBLE: u32 = 0xFFFF;
const BOOTSTRAP_ENSEMBLE: u32 = 0xFFFE;
/// Fluctuation ensembles use ids `FLUCTUATION_BASE + group`.
pub const FLUCTUATION_BASE: u32 = 1;

/// Replication-level worker pool.
pub struct Farm {
    pool: rayon::ThreadPool,
}

impl Farm {
    /// `threads = 0` uses every available core.
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool })
    }

    /// `[f(0), ..., f(count - 1)]` in index order; the first error wins and the
    /// partial results are dropped.
    pub fn map<T, F>(&self, count: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.pool.install(|| (0..count).into_par_iter().map(f).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub batch_size: usize,
    /// `(1/L) sum_l (m_l - mean)^2`
    pub v_hat: f64,
    pub bootstrap: Vec<f64>,
    /// The `L` replicate values `m_l`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
    pub probe: String,
    pub t: f64,
    pub n: usize,
}

/// Population variance `(1/L) sum (v - mean)^2`.
pub fn empirical_variance(values: &[f64]) -> f64 {
    let Some(&shift) = values.first() else {
        return 0.0;
    };
    // shifting by a sample keeps equal values at exactly zero variance
    let l = values.len() as f64;
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / l;
    values.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / l
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in &idx[i..=j] {
                r[*k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// `<probe, mu_t^N>` at the end of every replication `0..L` for one batch size.
///
/// Replication `l` uses the same streams for every batch size, so the
/// initial weights are shared across sizes.
pub fn variance_values(cfg: &ExperimentConfig, batch_size: usize, farm: &Farm) -> Result<Vec<f64>> {
    let probe = cfg.probe_functions()?.remove(0);
    let sgd = SgdConfig {
        batch: BatchSchedule::Fixed(batch_size),
        ..cfg.sgd.clone()
    };
    farm.map(cfg.replications, |l| {
        let rep = ensemble_replication(PLAIN_ENSEMBLE, l as u64);
        let mut sim = Simulation::new(&sgd, &cfg.data, &cfg.activation, rep)?;
        sim.run_observed(cfg.t_end, |_| {})?;
        Ok(sim.state().bracket(&probe))
    })
}

pub fn run_variance_experiment(cfg: &ExperimentConfig) -> Result<VarianceReport> {
    cfg.validate()?;
    let farm = Farm::new(cfg.threads)?;
    let mut rows = Vec::with_capacity(cfg.batch_sizes.len());
    for (j, &m) in cfg.batch_sizes.iter().enumerate() {
        let values = variance_values(cfg, m, &farm)?;
        let mut rng = stream(cfg.sgd.seed, ensemble_replication(BOOTSTRAP_ENSEMBLE, j as u64), Purpose::Bootstrap);
        let l = values.len();
        let bootstrap = (0..cfg.bootstrap)
            .map(|_| {
                let resample: Vec<f64> = (0..l).map(|_| values[rng.random_range(0..l)]).collect();
                empirical_variance(&resample)
            })
            .collect();
        rows.push(VarianceRow {
            batch_size: m,
            v_hat: empirical_variance(&values),
            bootstrap,
            values,
        });
    }
    Ok(VarianceReport {
        rows,
        probe: cfg.probes[0].clone(),
        t: cfg.t_end,
        n: cfg.sgd.n,
    })
}

/// `<f, mu_bar_t>` for every probe, from the configured provider, on the
/// recording grid of an `N`-neuron run (multiples of `record_stride`, or
/// every `1/N` when the stride is 0).
pub fn compute_reference(cfg: &ExperimentConfig) -> Result<Vec<TraceSeries>> {
    let probes = cfg.probe_functions()?;
    let r = &cfg.reference;
    let rep = ensemble_replication(REFERENCE_ENSEMBLE, 0);
    match r.provider {
        ReferenceProvider::Sgd => {
            let sgd = SgdConfig {
                n: r.n,
                beta: r.beta,
                ..cfg.sgd.clone()
            };
            let mut sim = Simulation::new(&sgd, &cfg.data, &cfg.activation, rep)?;
            let mut traces = sim.run_thinned(cfg.t_end, &probes, cfg.record_stride)?;
            for tr in &mut traces {
                tr.meta.replication = rep;
            }
            Ok(traces)
        }
        ReferenceProvider::Ode => {
            let d = cfg.sgd.d;
            let init = cfg.sgd.init.sample(r.particles, d, &mut stream(cfg.sgd.seed, rep, Purpose::Init));
            let quad = QuadratureSample::draw(&cfg.data, r.quadrature, cfg.sgd.seed)?;
            let grid = recording_grid(cfg.sgd.n, cfg.t_end, cfg.record_stride);
            let stride = if cfg.record_stride > 0.0 {
                ((cfg.record_stride / r.dt).round() as usize).max(1)
            } else {
                1
            };
            let opts = IntegrateOptions {
                t_end: cfg.t_end,
                dt: r.dt,
                integrator: r.integrator,
                stride,
            };
            let traj = integrate(&init, d, &quad, &cfg.activation, cfg.sgd.alpha, opts)?;
            probes
                .iter()
                .map(|f| {
                    let mut tr = traj.reference_trace(f, &grid)?;
                    tr.meta.seed = cfg.sgd.seed;
                    tr.meta.replication = rep;
                    Ok(tr)
                })
                .collect()
        }
    }
}

/// Times `k / n` on multiples of `stride` (all of them when `stride` is 0).
pub fn recording_grid(n: usize, t_end: f64, stride: f64) -> Vec<f64> {
    let steps = SgdConfig::new(n, 1).steps_for(t_end);
    (0..=steps)
        .map(|k| k as f64 / n as f64)
        .filter(|t| on_stride(*t, stride))
        .collect()
}

/// `R` fluctuation traces at one `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub beta: f64,
    /// Stream group; ensembles in the same group share all random draws.
    pub group: u32,
    /// `traces[r][p]` for replication `r`, probe `p`.
    pub traces: Vec<Vec<FluctuationTrace>>,
}

impl Ensemble {
    /// All replications of probe `p`.
    pub fn probe(&self, p: usize) -> Vec<FluctuationTrace> {
        self.traces.iter().map(|r| r[p].clone()).collect()
    }
}

/// `R` replications at noise exponent `beta` against `reference` (one trace
/// per probe), with streams from `group`.
pub fn run_beta_ensemble(
    cfg: &ExperimentConfig,
    beta: f64,
    group: u32,
    reference: &[TraceSeries],
    farm: &Farm,
) -> Result<Ensemble> {
    let probes = cfg.probe_functions()?;
    Error::check_dim(probes.len(), reference.len())?;
    let sgd = SgdConfig {
        beta,
        ..cfg.sgd.clone()
    };
    sgd.validate()?;
    let traces = farm.map(cfg.replications, |r| {
        let rep = ensemble_replication(FLUCTUATION_BASE + group, r as u64);
        let mut sim = Simulation::new(&sgd, &cfg.data, &cfg.activation, rep)?;
        let runs = sim.run_thinned(cfg.t_end, &probes, cfg.record_stride)?;
        runs.iter()
            .zip(reference)
            .map(|(run, rf)| {
                let mut fl = fluctuation_trace(run, rf, sgd.n)?;
                fl.replication = rep;
                Ok(fl)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Ensemble { beta, group, traces })
}

/// Pointwise ensemble mean with a normal-approximation 95% band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub t: f64,
    pub beta: f64,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub replications: usize,
}

/// `mean +- 1.96 std / sqrt(R)` at every grid point.
pub fn summarize(traces: &[FluctuationTrace]) -> Result<Vec<SummaryRow>> {
    let first = traces.first().ok_or_else(|| Error::config("empty ensemble"))?;
    if traces.iter().any(|t| t.grid != first.grid) {
        return Err(Error::Grid("ensemble traces must share one grid".into()));
    }
    let r = traces.len() as f64;
    Ok(first
        .grid
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let mean = traces.iter().map(|tr| tr.values[j]).sum::<f64>() / r;
            let var = if traces.len() > 1 {
                traces.iter().map(|tr| (tr.values[j] - mean).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                0.0
            };
            let half = 1.96 * (var / r).sqrt();
            SummaryRow {
                t,
                beta: first.beta,
                mean,
                ci_lo: mean - half,
                ci_hi: mean + half,
                replications: traces.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CltReport {
    pub reference: Vec<TraceSeries>,
    pub ensembles: Vec<Ensemble>,
}

/// Stream group of the `index`-th beta.
fn group_of(cfg: &ExperimentConfig, index: usize) -> u32 {
    if cfg.coupled {
        0
    } else {
        index as u32
    }
}

pub fn run_clt_experiment(cfg: &ExperimentConfig) -> Result<CltReport> {
    cfg.validate()?;
    let farm = Farm::new(cfg.threads)?;
    let reference = compute_reference(cfg)?;
    let ensembles = cfg
        .betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| run_beta_ensemble(cfg, beta, group_of(cfg, i), &reference, &farm))
        .collect::<Result<Vec<_>>>()?;
    Ok(CltReport { reference, ensembles })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub fit: DriftFit,
    /// `E[f(eps)] = d sigma_eps^2` for the square probe.
    pub expected: f64,
    pub beta_low: f64,
    pub beta_high: f64,
    pub clt: CltReport,
}

/// Fits the linear drift between the low-beta and high-beta ensembles for
/// the first probe.
pub fn drift_from_ensembles(low: &Ensemble, high: &Ensemble, d: usize, noise_std: f64) -> Result<(DriftFit, f64)> {
    let fit = drift_fit(&low.probe(0), &high.probe(0))?;
    Ok((fit, d as f64 * noise_std * noise_std))
}

pub fn run_drift_check(cfg: &ExperimentConfig) -> Result<DriftReport> {
    cfg.validate()?;
    let probes = cfg.probe_functions()?;
    if probes[0] != TestFunction::Square {
        return Err(Error::Probe(cfg.probes[0].clone(), "the drift check uses the square probe"));
    }
    let clt = run_clt_experiment(cfg)?;
    let (fit, expected) = drift_from_ensembles(&clt.ensembles[0], &clt.ensembles[1], cfg.sgd.d, cfg.sgd.noise_std)?;
    Ok(DriftReport {
        fit,
        expected,
        beta_low: cfg.betas[0],
        beta_high: cfg.betas[1],
        clt,
    })
}

/// Probe traces of replication 0.
pub fn run_single(cfg: &ExperimentConfig) -> Result<Vec<TraceSeries>> {
    cfg.validate()?;
    let probes = cfg.probe_functions()?;
    let rep = ensemble_replication(PLAIN_ENSEMBLE, 0);
    let mut sim = Simulation::new(&cfg.sgd, &cfg.data, &cfg.activation, rep)?;
    let mut traces = sim.run_thinned(cfg.t_end, &probes, cfg.record_stride)?;
    for tr in &mut traces {
        tr.meta.replication = rep;
    }
    Ok(traces)
}

/// ODE reference traces, whatever provider the config names.
pub fn run_meanfield(cfg: &ExperimentConfig) -> Result<Vec<TraceSeries>> {
    cfg.validate()?;
    let mut ode = cfg.clone();
    ode.reference.provider = ReferenceProvider::Ode;
    compute_reference(&ode)
}
