//! Sample measures, test functions and traces.

use crate::error::{Error, Result};
use crate::model::{dot, ActivationSpec};

/// Uniform probability measure on `M` points of `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSnapshot {
    d: usize,
    samples: Vec<f64>,
    time: f64,
}

impl EmpiricalSnapshot {
    pub fn new(d: usize, samples: Vec<f64>, time: f64) -> Result<Self> {
        if d == 0 || samples.is_empty() || !samples.len().is_multiple_of(d) {
            return Err(Error::config(
                "snapshot needs d >= 1 and a non-empty multiple of d samples",
            ));
        }
        Ok(Self { d, samples, time })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.samples.chunks_exact(self.d)
    }
}

/// Probe functions `f: R^d -> R` integrated against measures.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    /// `||w||_2`
    Norm2,
    /// `|w|^2`
    Square,
    /// `w_j`
    Coordinate(usize),
    /// `a . w + b`
    Affine { a: Vec<f64>, b: f64 },
    /// `w^T A w + a . w + b` with `A` symmetric, row-major.
    Quadratic { mat: Vec<f64>, a: Vec<f64>, b: f64 },
    /// `w -> sigma_*(w, x0)`
    Activation { act: ActivationSpec, x0: Vec<f64> },
}

impl TestFunction {
    /// The constant function 1.
    pub fn one(d: usize) -> Self {
        TestFunction::Affine {
            a: vec![0.0; d],
            b: 1.0,
        }
    }

    pub fn id(&self) -> String {
        match self {
            TestFunction::Norm2 => "norm2".into(),
            TestFunction::Square => "square".into(),
            TestFunction::Coordinate(j) => format!("coordinate:{j}"),
            TestFunction::Affine { a, b } if a.iter().all(|v| *v == 0.0) => {
                format!("constant:{b}")
            }
            TestFunction::Affine { .. } => "affine".into(),
            TestFunction::Quadratic { .. } => "quadratic".into(),
            TestFunction::Activation { .. } => "activation".into(),
        }
    }

    /// Parses `norm2`, `square`, `coordinate:J` or `constant:C`.
    pub fn parse(s: &str, d: usize) -> Result<Self> {
        let s = s.trim();
        let f = match s.split_once(':') {
            None => match s {
                "norm2" => TestFunction::Norm2,
                "square" => TestFunction::Square,
                _ => return Err(Error::config(format!("unknown probe `{s}`"))),
            },
            Some(("coordinate", j)) => TestFunction::Coordinate(
                j.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad coordinate index in `{s}`")))?,
            ),
            Some(("constant", c)) => {
                let b = c
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad constant in `{s}`")))?;
                TestFunction::Affine {
                    a: vec![0.0; d],
                    b,
                }
            }
            _ => return Err(Error::config(format!("unknown probe `{s}`"))),
        };
        f.validate(d)?;
        Ok(f)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            TestFunction::Coordinate(j) if *j >= d => Err(Error::config(format!(
                "coordinate index {j} out of range for d = {d}"
            ))),
            TestFunction::Affine { a, .. } => Error::check_dim(d, a.len()),
            TestFunction::Quadratic { mat, a, .. } => {
                Error::check_dim(d * d, mat.len())?;
                Error::check_dim(d, a.len())?;
                for r in 0..d {
                    for c in 0..r {
                        if mat[r * d + c] != mat[c * d + r] {
                            return Err(Error::config("quadratic probe matrix must be symmetric"));
                        }
                    }
                }
                Ok(())
            }
            TestFunction::Activation { act, x0 } => {
                act.validate()?;
                Error::check_dim(d, x0.len())
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, w: &[f64]) -> f64 {
        match self {
            TestFunction::Norm2 => dot(w, w).sqrt(),
            TestFunction::Square => dot(w, w),
            TestFunction::Coordinate(j) => w[*j],
            TestFunction::Affine { a, b } => dot(a, w) + b,
            TestFunction::Quadratic { mat, a, b } => {
                let d = w.len();
                let quad: f64 = mat.chunks_exact(d).zip(w).map(|(row, wi)| wi * dot(row, w)).sum();
                quad + dot(a, w) + b
            }
            TestFunction::Activation { act, x0 } => act.eval(dot(w, x0)),
        }
    }

    /// Writes `grad f(w)` into `out`. The norm has gradient 0 at the origin.
    pub fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        match self {
            TestFunction::Norm2 => {
                let r = dot(w, w).sqrt();
                for (o, wi) in out.iter_mut().zip(w) {
                    *o = if r > 0.0 { wi / r } else { 0.0 };
                }
            }
            TestFunction::Square => {
                for (o, wi) in out.iter_mut().zip(w) {
                    *o = 2.0 * wi;
                }
            }
            TestFunction::Coordinate(j) => {
                out.fill(0.0);
                out[*j] = 1.0;
            }
            TestFunction::Affine { a, .. } => out.copy_from_slice(a),
            TestFunction::Quadratic { mat, a, .. } => {
                let d = w.len();
                for ((o, row), ai) in out.iter_mut().zip(mat.chunks_exact(d)).zip(a) {
                    *o = 2.0 * dot(row, w) + ai;
                }
            }
            TestFunction::Activation { act, x0 } => {
                let fp = act.derivative(dot(w, x0));
                for (o, xi) in out.iter_mut().zip(x0) {
                    *o = fp * xi;
                }
            }
        }
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        self.gradient_into(w, &mut g);
        g
    }

    /// Hessian when it does not depend on `w` (row-major `d x d`).
    pub fn constant_hessian(&self, d: usize) -> Option<Vec<f64>> {
        match self {
            TestFunction::Square => {
                let mut h = vec![0.0; d * d];
                for i in 0..d {
                    h[i * d + i] = 2.0;
                }
                Some(h)
            }
            TestFunction::Coordinate(_) | TestFunction::Affine { .. } => Some(vec![0.0; d * d]),
            TestFunction::Quadratic { mat, .. } => Some(mat.iter().map(|v| 2.0 * v).collect()),
            _ => None,
        }
    }

    /// Hessian at `w` for probes that are twice differentiable everywhere.
    pub fn hessian(&self, w: &[f64]) -> Option<Vec<f64>> {
        let d = w.len();
        if let Some(h) = self.constant_hessian(d) {
            return Some(h);
        }
        match self {
            TestFunction::Activation { act, x0 } if !act.is_piecewise_linear() => {
                let fpp = act.second_derivative(dot(w, x0));
                let mut h = vec![0.0; d * d];
                for r in 0..d {
                    for c in 0..d {
                        h[r * d + c] = fpp * x0[r] * x0[c];
                    }
                }
                Some(h)
            }
            _ => None,
        }
    }
}

/// `<f, snap> = (1/M) sum_i f(sample_i)`.
pub fn bracket(f: &TestFunction, snap: &EmpiricalSnapshot) -> Result<f64> {
    f.validate(snap.dim())?;
    Ok(bracket_rows(f, snap.samples(), snap.dim()))
}

#[inline]
pub(crate) fn bracket_rows(f: &TestFunction, rows: &[f64], d: usize) -> f64 {
    let m = rows.len() / d;
    rows.chunks_exact(d).map(|w| f.eval(w)).sum::<f64>() / m as f64
}

/// `(1/M) sum_i ||sample_i||^p`.
pub fn moment(snap: &EmpiricalSnapshot, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::config(format!("moment order must be >= 1 (got {p})")));
    }
    let total: f64 = snap.rows().map(|w| dot(w, w).sqrt().powf(p)).sum();
    Ok(total / snap.len() as f64)
}

/// Exact Wasserstein-1 distance between two equal-size samples on the line,
/// via the sorted (quantile) coupling.
pub fn wasserstein1_1d(a: &EmpiricalSnapshot, b: &EmpiricalSnapshot) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::Unsupported(
            "wasserstein1_1d needs one-dimensional samples".into(),
        ));
    }
    if a.len() != b.len() {
        return Err(Error::Unsupported(format!(
            "wasserstein1_1d needs equal sample counts ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut xs = a.samples().to_vec();
    let mut ys = b.samples().to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let total: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / xs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub n: usize,
    pub probe: String,
    pub seed: u64,
    pub replication: u64,
    pub beta: f64,
}

/// Values of one probe on the time grid `t_j = j / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSeries {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub meta: TraceMeta,
}

impl TraceSeries {
    pub fn new(meta: TraceMeta) -> Self {
        Self {
            grid: Vec::new(),
            values: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, t: f64, value: f64) {
        debug_assert!(self.grid.last().is_none_or(|last| *last < t));
        self.grid.push(t);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Linear interpolation at `t`, rejected outside the grid range.
    pub fn interpolate(&self, t: f64) -> Result<f64> {
        let (first, last) = match (self.grid.first(), self.grid.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(Error::Grid("empty trace".into())),
        };
        let slack = 1e-9 * (1.0 + last.abs());
        if t < first - slack || t > last + slack {
            return Err(Error::Grid(format!(
                "time {t} outside trace range [{first}, {last}]"
            )));
        }
        let idx = self.grid.partition_point(|g| *g <= t);
        if idx == 0 {
            return Ok(self.values[0]);
        }
        if idx >= self.grid.len() {
            return Ok(self.values[self.grid.len() - 1]);
        }
        let (t0, t1) = (self.grid[idx - 1], self.grid[idx]);
        let (v0, v1) = (self.values[idx - 1], self.values[idx]);
        let lambda = (t - t0) / (t1 - t0);
        Ok(if lambda == 0.0 { v0 } else { v0 + lambda * (v1 - v0) })
    }

    /// Keeps every grid point within `1e-9` of a multiple of `dt`.
    pub fn thinned(&self, dt: f64) -> TraceSeries {
        let mut out = TraceSeries::new(self.meta.clone());
        for (t, v) in self.grid.iter().zip(&self.values) {
            if on_stride(*t, dt) {
                out.push(*t, *v);
            }
        }
        out
    }
}

pub(crate) fn on_stride(t: f64, dt: f64) -> bool {
    if dt <= 0.0 {
        return true;
    }
    let q = t / dt;
    (q - q.round()).abs() < 1e-9 * (1.0 + q.abs())
}
