//! Closed-form drift expectation for one-dimensional Gaussian mixtures.
//!
//! In `d = 1` with the exact ramp, both `g(x) = <sigma_*(., x), nu>` and
//! `h(x) = <f' sigma_*'(., x), nu>` are piecewise polynomials in `x` whose
//! breakpoints are `t_lo / w_i` and `t_hi / w_i`. Between breakpoints
//! `g = a + b x` and `h = c x`, so `E[(y - g(x)) h(x)]` reduces to truncated
//! Gaussian moments of order 0 to 2.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::measure::TestFunction;
use crate::model::{ActivationSpec, DataModel};
use crate::sgd::{DriftExpectation, NetworkState};

#[derive(Debug, Clone, Copy)]
struct Event {
    x: f64,
    da: f64,
    db: f64,
    dc: f64,
}

/// Standard normal quantities at a breakpoint.
#[derive(Debug, Clone, Copy)]
struct Tail {
    cdf: f64,
    sf: f64,
    pdf: f64,
    z_pdf: f64,
    z: f64,
}

impl Tail {
    fn at(z: f64) -> Self {
        if z == f64::NEG_INFINITY {
            return Tail { cdf: 0.0, sf: 1.0, pdf: 0.0, z_pdf: 0.0, z };
        }
        if z == f64::INFINITY {
            return Tail { cdf: 1.0, sf: 0.0, pdf: 0.0, z_pdf: 0.0, z };
        }
        let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        // one erfc for the tail on z's side; `mass` only reads the other
        // side's complement where it is not small
        let (cdf, sf) = if z >= 0.0 {
            let sf = 0.5 * libm::erfc(z * FRAC_1_SQRT_2);
            (1.0 - sf, sf)
        } else {
            let cdf = 0.5 * libm::erfc(-z * FRAC_1_SQRT_2);
            (cdf, 1.0 - cdf)
        };
        Tail { cdf, sf, pdf, z_pdf: z * pdf, z }
    }

    /// `P(lo < Z < hi)` without cancellation in either tail.
    fn mass(lo: &Tail, hi: &Tail) -> f64 {
        if lo.z >= 0.0 {
            lo.sf - hi.sf
        } else {
            hi.cdf - lo.cdf
        }
    }
}

/// Exact `E_pi[...]` for a one-dimensional mixture and the exact ramp.
#[derive(Debug, Clone)]
pub struct ExactMixture1d {
    model: DataModel,
}

impl ExactMixture1d {
    pub fn new(model: &DataModel) -> Result<Self> {
        if model.dim() != 1 {
            return Err(Error::Unsupported(
                "closed-form expectation is one-dimensional only".into(),
            ));
        }
        Ok(Self {
            model: model.clone(),
        })
    }

    /// `E_pi[(y - g(x)) h(x)]` where `g(x) = mean_i f(w_i x)` and
    /// `h(x) = mean_i grad_i f'(w_i x) x`.
    pub fn expectation(&self, act: &ActivationSpec, weights: &[f64], grads: &[f64]) -> Result<f64> {
        if !act.is_piecewise_linear() {
            return Err(Error::Unsupported(
                "closed-form expectation needs the exact ramp".into(),
            ));
        }
        Error::check_dim(weights.len(), grads.len())?;
        let n = weights.len() as f64;
        let inv_n = 1.0 / n;
        let mut a0 = 0.0;
        let mut c0 = 0.0;
        let mut events = Vec::with_capacity(2 * weights.len());
        for (&w, &gf) in weights.iter().zip(grads) {
            let dc = act.slope * gf * inv_n;
            let db = act.slope * w * inv_n;
            if w > 0.0 {
                a0 += act.lo * inv_n;
                events.push(Event { x: act.t_lo / w, da: (act.intercept - act.lo) * inv_n, db, dc });
                events.push(Event { x: act.t_hi / w, da: (act.hi - act.intercept) * inv_n, db: -db, dc: -dc });
            } else if w < 0.0 {
                a0 += act.hi * inv_n;
                events.push(Event { x: act.t_hi / w, da: (act.intercept - act.hi) * inv_n, db, dc });
                events.push(Event { x: act.t_lo / w, da: (act.lo - act.intercept) * inv_n, db: -db, dc: -dc });
            } else {
                a0 += act.eval(0.0) * inv_n;
                c0 += gf * act.derivative(0.0) * inv_n;
            }
        }
        events.sort_unstable_by(|p, q| p.x.total_cmp(&q.x));

        let mut total = 0.0;
        let piece = |lo: &Tail, hi: &Tail, y: f64, m: f64, s: f64, a: f64, b: f64, c: f64| {
            if c == 0.0 {
                return 0.0;
            }
            let j0 = Tail::mass(lo, hi);
            let j1 = lo.pdf - hi.pdf;
            let j2 = j0 + lo.z_pdf - hi.z_pdf;
            let i1 = m * j0 + s * j1;
            let i2 = m * m * j0 + 2.0 * m * s * j1 + s * s * j2;
            c * (y - a) * i1 - c * b * i2
        };
        for comp in self.model.components() {
            if comp.weight == 0.0 {
                continue;
            }
            let y = comp.label;
            let m = comp.mean[0];
            if comp.std == 0.0 {
                let g: f64 = weights.iter().map(|w| act.eval(w * m)).sum::<f64>() * inv_n;
                let h: f64 = weights
                    .iter()
                    .zip(grads)
                    .map(|(w, gf)| gf * act.derivative(w * m) * m)
                    .sum::<f64>()
                    * inv_n;
                total += comp.weight * (y - g) * h;
                continue;
            }
            let s = comp.std;
            let (mut a, mut b, mut c) = (a0, 0.0, c0);
            let mut prev = Tail::at(f64::NEG_INFINITY);
            let mut acc = 0.0;
            for ev in &events {
                let cur = Tail::at((ev.x - m) / s);
                acc += piece(&prev, &cur, y, m, s, a, b, c);
                a += ev.da;
                b += ev.db;
                c += ev.dc;
                prev = cur;
            }
            acc += piece(&prev, &Tail::at(f64::INFINITY), y, m, s, a, b, c);
            total += comp.weight * acc;
        }
        Ok(total)
    }
}

impl DriftExpectation for ExactMixture1d {
    fn residual_bracket(
        &self,
        f: &TestFunction,
        state: &NetworkState,
        act: &ActivationSpec,
    ) -> Result<f64> {
        Error::check_dim(1, state.dim())?;
        let mut g = [0.0];
        let grads: Vec<f64> = state
            .weights()
            .iter()
            .map(|w| {
                f.gradient_into(&[*w], &mut g);
                g[0]
            })
            .collect();
        self.expectation(act, state.weights(), &grads)
    }
}
