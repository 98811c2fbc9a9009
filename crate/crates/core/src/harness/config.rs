//! Experiment configuration as flat `key = value` text.
//!
//! Keys are grouped by dotted prefixes (`sgd.alpha = 0.1`). Lines starting
//! with `#` and blank lines are ignored. Absent keys keep the value of the
//! preset the text is parsed against, so a file only needs the overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::meanfield::Integrator;
use crate::measure::TestFunction;
use crate::model::{ActivationKind, ActivationSpec, BatchSchedule, DataModel, MixtureComponent};
use crate::sgd::{InitSpec, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    VarianceReduction,
    CltTrajectory,
    DriftCheck,
    SingleRun,
    MeanfieldRun,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::VarianceReduction => "variance-reduction",
            Experiment::CltTrajectory => "clt-trajectory",
            Experiment::DriftCheck => "drift-check",
            Experiment::SingleRun => "single-run",
            Experiment::MeanfieldRun => "meanfield-run",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "variance-reduction" => Experiment::VarianceReduction,
            "clt-trajectory" => Experiment::CltTrajectory,
            "drift-check" => Experiment::DriftCheck,
            "single-run" => Experiment::SingleRun,
            "meanfield-run" => Experiment::MeanfieldRun,
            other => return Err(Error::config(format!("unknown experiment `{other}`"))),
        })
    }
}

/// Parameter presets: `Desk` runs in minutes on a laptop, `Paper` uses the
/// published sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::config(format!("unknown scale `{other}`"))),
        }
    }
}

/// How `mu_bar` is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceProvider {
    /// A single large-`N'` SGD run.
    Sgd,
    /// The particle ODE.
    Ode,
}

impl ReferenceProvider {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReferenceProvider::Sgd => "sgd",
            ReferenceProvider::Ode => "ode",
        }
    }
}

impl FromStr for ReferenceProvider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(ReferenceProvider::Sgd),
            "ode" => Ok(ReferenceProvider::Ode),
            other => Err(Error::config(format!("unknown reference provider `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub provider: ReferenceProvider,
    /// `N'` of the SGD reference.
    pub n: usize,
    /// Noise exponent of the SGD reference.
    pub beta: f64,
    /// ODE particles.
    pub particles: usize,
    /// ODE quadrature size.
    pub quadrature: usize,
    pub dt: f64,
    pub integrator: Integrator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub sgd: SgdConfig,
    pub data: DataModel,
    pub activation: ActivationSpec,
    pub t_end: f64,
    /// `L` (variance experiment) or `R` (fluctuation ensembles).
    pub replications: usize,
    pub batch_sizes: Vec<usize>,
    pub betas: Vec<f64>,
    pub probes: Vec<String>,
    pub bootstrap: usize,
    /// Time stride of recorded traces; 0 keeps every step.
    pub record_stride: f64,
    /// Share init, batch and noise streams across the beta ensembles.
    pub coupled: bool,
    pub reference: ReferenceConfig,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
}

impl ExperimentConfig {
    /// Preset for `experiment` at `scale`.
    pub fn preset(experiment: Experiment, scale: Scale) -> Self {
        let paper = scale == Scale::Paper;
        let (n, d, t_end, reps) = match experiment {
            Experiment::VarianceReduction if paper => (800, 40, 1.25, 1000),
            Experiment::VarianceReduction => (200, 10, 1.25, 200),
            Experiment::CltTrajectory | Experiment::DriftCheck if paper => (20000, 1, 8.0, 20000),
            Experiment::CltTrajectory | Experiment::DriftCheck => (2000, 1, 8.0, 2000),
            Experiment::SingleRun | Experiment::MeanfieldRun if paper => (20000, 1, 8.0, 1),
            Experiment::SingleRun | Experiment::MeanfieldRun => (2000, 1, 8.0, 1),
        };
        let probes = match experiment {
            Experiment::VarianceReduction => vec!["norm2".to_string()],
            _ => vec!["square".to_string()],
        };
        let betas = match experiment {
            Experiment::DriftCheck => vec![0.75, 1.0],
            _ => vec![0.75, 1.0, 2.0],
        };
        Self {
            experiment,
            sgd: SgdConfig {
                seed: 20240,
                ..SgdConfig::new(n, d)
            },
            data: DataModel::two_scale_mixture(d),
            activation: ActivationSpec::ramp(),
            t_end,
            replications: reps,
            batch_sizes: vec![1, 2, 4, 8, 16],
            betas,
            probes,
            bootstrap: 10,
            record_stride: match experiment {
                Experiment::VarianceReduction => 0.0,
                _ => 0.5,
            },
            coupled: experiment == Experiment::DriftCheck,
            reference: ReferenceConfig {
                provider: ReferenceProvider::Sgd,
                n: if paper { 250_000 } else { 10 * n },
                beta: 1.0,
                particles: if experiment == Experiment::MeanfieldRun && !paper { 500 } else { n },
                quadrature: if experiment == Experiment::MeanfieldRun && !paper { 1000 } else { 4000 },
                dt: 1.0 / (2.0 * n as f64),
                integrator: Integrator::Rk4,
            },
            out_dir: PathBuf::from("results"),
            threads: 0,
        }
    }

    /// Parsed probe functions.
    pub fn probe_functions(&self) -> Result<Vec<TestFunction>> {
        self.probes.iter().map(|p| TestFunction::parse(p, self.sgd.d)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.activation.validate()?;
        Error::check_dim(self.sgd.d, self.data.dim())?;
        if self.probes.is_empty() {
            return Err(Error::config("at least one probe is required"));
        }
        self.probe_functions()?;
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::config("t_end must be finite and >= 0"));
        }
        if !(self.record_stride >= 0.0) {
            return Err(Error::config("record_stride must be >= 0"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications must be >= 1"));
        }
        match self.experiment {
            Experiment::VarianceReduction => {
                if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
                    return Err(Error::config("batch_sizes must be a non-empty list of positive sizes"));
                }
                if self.replications < 2 {
                    return Err(Error::config("the variance experiment needs replications >= 2"));
                }
            }
            Experiment::CltTrajectory | Experiment::DriftCheck => {
                if self.betas.is_empty() {
                    return Err(Error::config("betas must be non-empty"));
                }
                for b in &self.betas {
                    SgdConfig { beta: *b, ..self.sgd.clone() }.validate()?;
                }
                if self.experiment == Experiment::DriftCheck && self.betas.len() != 2 {
                    return Err(Error::config("drift-check needs exactly two betas (low, high)"));
                }
            }
            _ => {}
        }
        let r = &self.reference;
        if r.n == 0 || r.particles == 0 || r.quadrature == 0 || !(r.dt > 0.0) {
            return Err(Error::config("reference sizes and dt must be positive"));
        }
        SgdConfig { n: r.n, beta: r.beta, ..self.sgd.clone() }.validate()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("experiment", self.experiment.as_str().into());
        put("t_end", fmt_f64(self.t_end));
        put("replications", self.replications.to_string());
        put("batch_sizes", join(&self.batch_sizes, |v| v.to_string()));
        put("betas", join(&self.betas, |v| fmt_f64(*v)));
        put("probes", self.probes.join(","));
        put("bootstrap", self.bootstrap.to_string());
        put("record_stride", fmt_f64(self.record_stride));
        put("coupled", self.coupled.to_string());
        put("out", self.out_dir.display().to_string());
        put("threads", self.threads.to_string());

        let s = &self.sgd;
        put("sgd.n", s.n.to_string());
        put("sgd.d", s.d.to_string());
        put("sgd.alpha", fmt_f64(s.alpha));
        put("sgd.beta", fmt_f64(s.beta));
        put("sgd.noise_std", fmt_f64(s.noise_std));
        put("sgd.seed", s.seed.to_string());
        put("sgd.batch", s.batch.limit_size().to_string());
        if let BatchSchedule::Sequence { sizes, .. } = &s.batch {
            put("sgd.batch_prefix", join(sizes, |v| v.to_string()));
        }
        put("sgd.init", fmt_init(&s.init));

        let a = &self.activation;
        put("activation.kind", a.kind.as_str().into());
        put("activation.lo", fmt_f64(a.lo));
        put("activation.slope", fmt_f64(a.slope));
        put("activation.intercept", fmt_f64(a.intercept));
        put("activation.hi", fmt_f64(a.hi));
        put("activation.t_lo", fmt_f64(a.t_lo));
        put("activation.t_hi", fmt_f64(a.t_hi));
        put("activation.h", fmt_f64(a.h));

        put("data.components", self.data.components().len().to_string());
        for (i, c) in self.data.components().iter().enumerate() {
            put(&format!("data.c{i}.weight"), fmt_f64(c.weight));
            put(&format!("data.c{i}.label"), fmt_f64(c.label));
            put(&format!("data.c{i}.mean"), join(&c.mean, |v| fmt_f64(*v)));
            put(&format!("data.c{i}.std"), fmt_f64(c.std));
        }

        let r = &self.reference;
        put("reference.provider", r.provider.as_str().into());
        put("reference.n", r.n.to_string());
        put("reference.beta", fmt_f64(r.beta));
        put("reference.particles", r.particles.to_string());
        put("reference.quadrature", r.quadrature.to_string());
        put("reference.dt", fmt_f64(r.dt));
        put("reference.integrator", r.integrator.as_str().into());
        out
    }

    /// Parses `text` on top of the preset named by its `experiment` key (or
    /// `fallback` when absent) at `scale`.
    pub fn parse(text: &str, fallback: Experiment, scale: Scale) -> Result<Self> {
        let mut kv = parse_pairs(text)?;
        let experiment = match kv.remove("experiment") {
            Some(v) => v.parse()?,
            None => fallback,
        };
        let mut cfg = Self::preset(experiment, scale);
        cfg.apply(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` overrides (the `experiment` key is not allowed).
    pub fn apply(&mut self, mut kv: BTreeMap<String, String>) -> Result<()> {
        let dim_before = self.sgd.d;
        let mut init_given = false;
        let mut data_given = false;
        if let Some(v) = kv.remove("sgd.d") {
            self.sgd.d = parse_num(&v, "sgd.d")?;
        }
        let d = self.sgd.d;
        let mut batch_limit = None;
        let mut batch_prefix = None;
        let mut components: Option<usize> = None;
        let mut comp_fields = BTreeMap::new();
        for (key, v) in kv {
            let v = v.as_str();
            match key.as_str() {
                "t_end" => self.t_end = parse_num(v, &key)?,
                "replications" => self.replications = parse_num(v, &key)?,
                "batch_sizes" => self.batch_sizes = parse_list(v, &key)?,
                "betas" => self.betas = parse_list(v, &key)?,
                "probes" => {
                    self.probes = v.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
                }
                "bootstrap" => self.bootstrap = parse_num(v, &key)?,
                "record_stride" => self.record_stride = parse_num(v, &key)?,
                "coupled" => self.coupled = parse_num(v, &key)?,
                "out" => self.out_dir = PathBuf::from(v),
                "threads" => self.threads = parse_num(v, &key)?,
                "sgd.n" => self.sgd.n = parse_num(v, &key)?,
                "sgd.alpha" => self.sgd.alpha = parse_num(v, &key)?,
                "sgd.beta" => self.sgd.beta = parse_num(v, &key)?,
                "sgd.noise_std" => self.sgd.noise_std = parse_num(v, &key)?,
                "sgd.seed" => self.sgd.seed = parse_num(v, &key)?,
                "sgd.batch" => batch_limit = Some(parse_num::<usize>(v, &key)?),
                "sgd.batch_prefix" => batch_prefix = Some(parse_list::<usize>(v, &key)?),
                "sgd.init" => {
                    self.sgd.init = parse_init(v)?;
                    init_given = true;
                }
                "activation.kind" => {
                    self.activation.kind = match v {
                        "ramp" => ActivationKind::Ramp,
                        "smooth-ramp" => ActivationKind::SmoothRamp,
                        other => return Err(Error::config(format!("unknown activation `{other}`"))),
                    }
                }
                "activation.lo" => self.activation.lo = parse_num(v, &key)?,
                "activation.slope" => self.activation.slope = parse_num(v, &key)?,
                "activation.intercept" => self.activation.intercept = parse_num(v, &key)?,
                "activation.hi" => self.activation.hi = parse_num(v, &key)?,
                "activation.t_lo" => self.activation.t_lo = parse_num(v, &key)?,
                "activation.t_hi" => self.activation.t_hi = parse_num(v, &key)?,
                "activation.h" => self.activation.h = parse_num(v, &key)?,
                "data.components" => {
                    components = Some(parse_num(v, &key)?);
                    data_given = true;
                }
                k if k.starts_with("data.c") => {
                    comp_fields.insert(k.to_string(), v.to_string());
                    data_given = true;
                }
                "reference.provider" => self.reference.provider = v.parse()?,
                "reference.n" => self.reference.n = parse_num(v, &key)?,
                "reference.beta" => self.reference.beta = parse_num(v, &key)?,
                "reference.particles" => self.reference.particles = parse_num(v, &key)?,
                "reference.quadrature" => self.reference.quadrature = parse_num(v, &key)?,
                "reference.dt" => self.reference.dt = parse_num(v, &key)?,
                "reference.integrator" => self.reference.integrator = v.parse()?,
                "experiment" => return Err(Error::config("`experiment` cannot be overridden here")),
                other => return Err(Error::config(format!("unknown key `{other}`"))),
            }
        }
        let limit = batch_limit.unwrap_or(self.sgd.batch.limit_size());
        self.sgd.batch = match batch_prefix {
            Some(sizes) if !sizes.is_empty() => BatchSchedule::Sequence { sizes, limit },
            _ => BatchSchedule::Fixed(limit),
        };
        if d != dim_before && !init_given {
            self.sgd.init = InitSpec::default_for(d);
        }
        if data_given {
            let count = components.ok_or_else(|| Error::config("data.components is required with data.c* keys"))?;
            self.data = parse_components(d, count, comp_fields)?;
        } else if d != dim_before {
            self.data = DataModel::two_scale_mixture(d);
        }
        Ok(())
    }
}

/// Shortest decimal that parses back to the same `f64` (`inf` for infinity).
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn fmt_init(init: &InitSpec) -> String {
    match init {
        InitSpec::Gaussian { std } => format!("gaussian:{}", fmt_f64(*std)),
        InitSpec::UniformBall { radius } => format!("ball:{}", fmt_f64(*radius)),
        InitSpec::Point(w) => format!("point:{}", join(w, |v| fmt_f64(*v))),
    }
}

fn parse_init(v: &str) -> Result<InitSpec> {
    let (kind, arg) = v
        .split_once(':')
        .ok_or_else(|| Error::config(format!("bad init `{v}`, expected kind:value")))?;
    Ok(match kind.trim() {
        "gaussian" => InitSpec::Gaussian { std: parse_num(arg, "sgd.init")? },
        "ball" => InitSpec::UniformBall { radius: parse_num(arg, "sgd.init")? },
        "point" => InitSpec::Point(parse_list(arg, "sgd.init")?),
        other => return Err(Error::config(format!("unknown init `{other}`"))),
    })
}

fn parse_components(d: usize, count: usize, mut fields: BTreeMap<String, String>) -> Result<DataModel> {
    let mut comps = Vec::with_capacity(count);
    for i in 0..count {
        let mut take = |name: &str| {
            let key = format!("data.c{i}.{name}");
            fields
                .remove(&key)
                .ok_or_else(|| Error::config(format!("missing `{key}`")))
                .map(|v| (key, v))
        };
        let (k, w) = take("weight")?;
        let weight = parse_num(&w, &k)?;
        let (k, l) = take("label")?;
        let label = parse_num(&l, &k)?;
        let (k, m) = take("mean")?;
        let mean = parse_list(&m, &k)?;
        let (k, s) = take("std")?;
        let std = parse_num(&s, &k)?;
        comps.push(MixtureComponent { weight, label, mean, std });
    }
    if let Some(extra) = fields.keys().next() {
        return Err(Error::config(format!("unknown key `{extra}`")));
    }
    DataModel::new(d, comps)
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let k = k.trim().to_string();
        if kv.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
    }
    Ok(kv)
}

fn parse_num<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(s, key))
        .collect()
}
