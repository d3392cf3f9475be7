//! Growth integrals and optimization/bias error bounds, evaluated in log space.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::flow::Scheduler;
use crate::quadrature::gauss_legendre;

/// `ln ∫_0^s e^{Φ(s')} ds'` and `ln ∫_0^s τ_{s'} e^{Φ(s')} ds'` with `Φ(s') = ∫_0^{s'} τ_r dr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthIntegrals {
    pub s: f64,
    pub log_i1: f64,
    pub log_i2: f64,
}

impl GrowthIntegrals {
    /// `I2 / I1`
    pub fn ratio(&self) -> f64 {
        (self.log_i2 - self.log_i1).exp()
    }
}

/// `ln(e^x − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x < 1.0 {
        x.exp_m1().ln()
    } else {
        x + (-(-x).exp()).ln_1p()
    }
}

fn check_s(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("growth integrals need s > 0, got {s}")))
    }
}

/// Closed forms where the scheduler admits one, log-domain quadrature otherwise.
pub fn growth_integrals(sched: &Scheduler, s: f64) -> Result<GrowthIntegrals> {
    check_s(s)?;
    sched.validate()?;
    let (log_i1, log_i2) = match *sched {
        Scheduler::Constant { .. } | Scheduler::HorizonConstant { .. } => {
            let tau = sched.value(0.0);
            let l1 = ln_expm1(tau * s) - tau.ln();
            (l1, l1 + tau.ln())
        }
        Scheduler::InverseLinear => (s.ln() + (0.5 * s).ln_1p(), s.ln()),
        Scheduler::InverseSqrt => {
            let r = (1.0 + s).sqrt();
            let y = 2.0 * r - 2.0;
            // e^y(2r−1) − 1 = (e^y − 1)(2r−1) + 2(r−1)
            let l1 = if y < 1.0 {
                (0.5 * (y.exp_m1() * (2.0 * r - 1.0) + 2.0 * s / (1.0 + r))).ln()
            } else {
                y + (2.0 * r - 1.0).ln() + (-(-y).exp() / (2.0 * r - 1.0)).ln_1p() - LN_2
            };
            (l1, ln_expm1(y))
        }
        Scheduler::PowerLaw { .. } => return growth_integrals_quadrature(sched, s, 1e-12),
    };
    Ok(GrowthIntegrals { s, log_i1, log_i2 })
}

/// Both integrals by adaptive Gauss–Legendre on geometric panels.
///
/// `Φ` is itself integrated numerically panel by panel, and panel contributions are merged
/// with a streaming log-sum-exp, so no closed form and no `e^Φ` is ever formed.
pub fn growth_integrals_quadrature(sched: &Scheduler, s: f64, tol: f64) -> Result<GrowthIntegrals> {
    check_s(s)?;
    sched.validate()?;
    let q = Panels::new(sched, tol);
    let mut acc1 = LogSum::default();
    let mut acc2 = LogSum::default();
    let mut phi = 0.0;
    let mut a = 0.0;
    let mut width = s.min(1.0);
    while a < s {
        let b = if s - a <= width * 1.5 { s } else { a + width };
        let (l1, l2) = q.adaptive(a, b, phi, 0)?;
        acc1.add(l1);
        acc2.add(l2);
        phi += q.tau_integral(a, b);
        a = b;
        width *= 2.0;
    }
    Ok(GrowthIntegrals { s, log_i1: acc1.value(), log_i2: acc2.value() })
}

#[derive(Default)]
struct LogSum {
    max: Option<f64>,
    sum: f64,
}

impl LogSum {
    fn add(&mut self, l: f64) {
        match self.max {
            None => {
                self.max = Some(l);
                self.sum = 1.0;
            }
            Some(m) if l <= m => self.sum += (l - m).exp(),
            Some(m) => {
                self.sum = self.sum * (m - l).exp() + 1.0;
                self.max = Some(l);
            }
        }
    }

    fn value(&self) -> f64 {
        self.max.map_or(f64::NEG_INFINITY, |m| m + self.sum.ln())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut acc = LogSum::default();
    xs.iter().for_each(|x| acc.add(*x));
    acc.value()
}

struct Panels<'a> {
    sched: &'a Scheduler,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    tol: f64,
}

const MAX_DEPTH: usize = 40;

impl<'a> Panels<'a> {
    fn new(sched: &'a Scheduler, tol: f64) -> Self {
        let (nodes, weights) = gauss_legendre(20);
        Self { sched, nodes, weights, tol }
    }

    fn tau_integral(&self, a: f64, b: f64) -> f64 {
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        r * self.nodes.iter().zip(&self.weights).map(|(t, w)| w * self.sched.value(c + r * t)).sum::<f64>()
    }

    /// One-panel rule for both integrands, in logs, given `Φ(a)`.
    fn panel(&self, a: f64, b: f64, phi_a: f64) -> (f64, f64) {
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        let mut t1 = Vec::with_capacity(self.nodes.len());
        let mut t2 = Vec::with_capacity(self.nodes.len());
        for (t, w) in self.nodes.iter().zip(&self.weights) {
            let x = c + r * t;
            let phi = phi_a + self.tau_integral(a, x);
            t1.push(w.ln() + phi);
            t2.push(w.ln() + phi + self.sched.value(x).ln());
        }
        (r.ln() + log_sum_exp(&t1), r.ln() + log_sum_exp(&t2))
    }

    fn adaptive(&self, a: f64, b: f64, phi_a: f64, depth: usize) -> Result<(f64, f64)> {
        let whole = self.panel(a, b, phi_a);
        let m = 0.5 * (a + b);
        let phi_m = phi_a + self.tau_integral(a, m);
        let left = self.panel(a, m, phi_a);
        let right = self.panel(m, b, phi_m);
        let halves = (log_sum_exp(&[left.0, right.0]), log_sum_exp(&[left.1, right.1]));
        let err = (whole.0 - halves.0).abs().max((whole.1 - halves.1).abs());
        if err <= self.tol {
            return Ok(halves);
        }
        if depth >= MAX_DEPTH {
            return Err(Error::Quadrature { a, b, tol: self.tol });
        }
        let l = self.adaptive(a, m, phi_a, depth + 1)?;
        let r = self.adaptive(m, b, phi_m, depth + 1)?;
        Ok((log_sum_exp(&[l.0, r.0]), log_sum_exp(&[l.1, r.1])))
    }
}

/// Optimization-error bound at `s` with reference weight `tau_ref`.
///
/// Continuous: `(C/τ)((1+τ)/I1 + I2/I1 − τ)`; discrete: `C(1/I1 + I2/I1 − τ)`.
pub fn optimization_bound(sched: &Scheduler, s: f64, tau_ref: f64, c: f64, discrete: bool) -> Result<f64> {
    if !(tau_ref > 0.0) {
        return Err(Error::InvalidTau(tau_ref));
    }
    let g = growth_integrals(sched, s)?;
    let inv = (-g.log_i1).exp();
    let mismatch = g.ratio() - tau_ref;
    Ok(if discrete { c * (inv + mismatch) } else { c / tau_ref * ((1.0 + tau_ref) * inv + mismatch) })
}

/// `I2/I1 − τ_ref`, the scheduler-mismatch part of the bound.
pub fn mismatch_term(sched: &Scheduler, s: f64, tau_ref: f64) -> Result<f64> {
    Ok(growth_integrals(sched, s)?.ratio() - tau_ref)
}

/// Continuous optimization bound at `τ_S` plus the bias term `C τ_S (ln 1/τ_S)^α`.
pub fn total_bound(sched: &Scheduler, horizon: f64, c: f64, alpha: f64) -> Result<f64> {
    let tau = sched.value(horizon);
    let opt = optimization_bound(sched, horizon, tau, c, false)?;
    Ok(opt + c * tau * (1.0 / tau).ln().powf(alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCurve {
    pub horizon: f64,
    pub constant_c: f64,
    pub alpha: f64,
    /// `(β, bound)` for the power-law scheduler `1/(1+s)^β`.
    pub points: Vec<(f64, f64)>,
}

impl BoundCurve {
    /// `β` with the smallest bound.
    pub fn argmin(&self) -> f64 {
        self.points.iter().fold((f64::NAN, f64::INFINITY), |b, &(x, y)| if y < b.1 { (x, y) } else { b }).0
    }

    /// Whether the minimum is attained strictly inside the grid.
    pub fn has_interior_minimum(&self) -> bool {
        let k = self
            .points
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |b, (k, &(_, y))| if y < b.1 { (k, y) } else { b })
            .0;
        k > 0 && k + 1 < self.points.len()
    }
}

/// Total bound of the power-law schedulers over `β`, one curve per horizon.
pub fn reproduce_figure(betas: &[f64], horizons: &[f64], c: f64, alpha: f64) -> Result<Vec<BoundCurve>> {
    if betas.is_empty() || horizons.is_empty() {
        return Err(Error::InvalidArgument("beta and horizon grids must be nonempty".into()));
    }
    horizons
        .iter()
        .map(|&horizon| {
            let points = betas
                .iter()
                .map(|&beta| Ok((beta, total_bound(&Scheduler::PowerLaw { beta }, horizon, c, alpha)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(BoundCurve { horizon, constant_c: c, alpha, points })
        })
        .collect()
}

/// `β ∈ {0.05, 0.10, …, 0.95}`
pub fn default_beta_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

pub fn default_horizon_grid() -> Vec<f64> {
    vec![10.0, 100.0, 1000.0, 10000.0]
}
