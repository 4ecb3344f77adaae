//! Differentiable ODE integration on the tape.
//!
//! [`solve_adaptive`] runs the Runge–Kutta–Fehlberg 4(5) pair, propagating the
//! fourth-order solution and using the fifth-order one only for error control.
//! Every accepted step stays on the tape so gradients flow through the whole
//! trajectory; rejected attempts are truncated away. Step sizes are plain
//! numbers and are never differentiated.
//!
//! When the right-hand side supplies a density, its integral over `[t0, tf]` is
//! accumulated by the trapezoid rule on the accepted grid. The density is never
//! part of the controlled state, so it cannot change which steps are taken.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Tensor, Var};

/// Runge–Kutta–Fehlberg 4(5) coefficients.
mod rkf45 {
    pub const STAGES: usize = 6;

    pub const C: [f64; STAGES] = [0.0, 1.0 / 4.0, 3.0 / 8.0, 12.0 / 13.0, 1.0, 1.0 / 2.0];

    pub const A: [[f64; STAGES - 1]; STAGES - 1] = [
        [1.0 / 4.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
        [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
        [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
        [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
    ];

    /// Propagated fourth-order weights.
    pub const B4: [f64; STAGES] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -1.0 / 5.0, 0.0];

    /// Fifth-order weights, used only for the error estimate.
    pub const B5: [f64; STAGES] = [
        16.0 / 135.0,
        0.0,
        6656.0 / 12825.0,
        28561.0 / 56430.0,
        -9.0 / 50.0,
        2.0 / 55.0,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub atol: f64,
    pub rtol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub safety: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            atol: 1e-5,
            rtol: 1e-5,
            h_init: 0.1,
            h_min: 1e-6,
            h_max: 1.0,
            safety: 0.9,
            max_steps: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.atol = tol;
        self.rtol = tol;
        self
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let ok = self.h_min > 0.0
            && self.h_min <= self.h_init
            && self.h_init <= self.h_max
            && self.atol > 0.0
            && self.rtol > 0.0
            && self.safety > 0.0
            && self.safety < 1.0
            && self.max_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(SolveError::Config(format!("{self:?}")))
        }
    }
}

/// Per-solve telemetry. `step_times` starts at `t0` and holds the end time of
/// every accepted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evals: usize,
    pub min_h: f64,
    pub max_h: f64,
    pub step_times: Vec<f64>,
}

impl SolveStats {
    fn starting_at(t0: f64) -> Self {
        Self {
            accepted_steps: 0,
            rejected_steps: 0,
            rhs_evals: 0,
            min_h: f64::INFINITY,
            max_h: 0.0,
            step_times: vec![t0],
        }
    }

    fn record_step(&mut self, h: f64, t_new: f64) {
        self.accepted_steps += 1;
        self.min_h = self.min_h.min(h);
        self.max_h = self.max_h.max(h);
        self.step_times.push(t_new);
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("invalid solver input: {0}")]
    Config(String),
    #[error("solver exceeded {} steps before reaching the final time", .stats.accepted_steps + .stats.rejected_steps)]
    Divergence { stats: Box<SolveStats> },
    #[error("step size {h:e} fell below h_min at t = {t}")]
    StepUnderflow { t: f64, h: f64, stats: Box<SolveStats> },
    #[error("numeric failure during integration: {0}")]
    Numeric(#[from] AutodiffError),
}

/// Right-hand side `F(X, t)` of `X' = F(X, t)`.
pub trait OdeRhs {
    fn eval(&self, tape: &mut Tape, x: Var, t: f64) -> autodiff::Result<Var>;

    /// Optional scalar integrand, given `fx = F(x, t)` already on the tape.
    fn density(&self, _tape: &mut Tape, _x: Var, _t: f64, _fx: Var) -> autodiff::Result<Option<Var>> {
        Ok(None)
    }
}

/// Adapts a closure into an [`OdeRhs`] without a density.
pub struct FnRhs<F>(pub F);

impl<F> OdeRhs for FnRhs<F>
where
    F: Fn(&mut Tape, Var, f64) -> autodiff::Result<Var>,
{
    fn eval(&self, tape: &mut Tape, x: Var, t: f64) -> autodiff::Result<Var> {
        (self.0)(tape, x, t)
    }
}

/// A closure right-hand side whose density is `weight · ‖F‖²_F`.
pub struct ArclengthRhs<F> {
    pub rhs: F,
    pub weight: f64,
}

impl<F> OdeRhs for ArclengthRhs<F>
where
    F: Fn(&mut Tape, Var, f64) -> autodiff::Result<Var>,
{
    fn eval(&self, tape: &mut Tape, x: Var, t: f64) -> autodiff::Result<Var> {
        (self.rhs)(tape, x, t)
    }

    fn density(&self, tape: &mut Tape, _x: Var, _t: f64, fx: Var) -> autodiff::Result<Option<Var>> {
        let sq = tape.frobenius_sq(fx)?;
        tape.scale(sq, self.weight).map(Some)
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub state: Var,
    /// Trapezoid integral of the density; a zero constant when there is none.
    pub integral: Var,
    pub stats: SolveStats,
}

/// Mixed absolute/relative RMS error norm. A step is acceptable iff the result is ≤ 1.
pub fn err_norm(x_err: &Tensor, x_old: &Tensor, x_new: &Tensor, cfg: &SolverConfig) -> f64 {
    debug_assert_eq!(x_err.shape(), x_old.shape());
    debug_assert_eq!(x_err.shape(), x_new.shape());
    if x_err.is_empty() {
        return 0.0;
    }
    let sum: f64 = x_err
        .data()
        .iter()
        .zip(x_old.data())
        .zip(x_new.data())
        .map(|((e, a), b)| {
            let scale = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / scale).powi(2)
        })
        .sum();
    (sum / x_err.len() as f64).sqrt()
}

/// Step-size multiplier for an error norm: `clamp(safety · err^(-1/5), 0.2, 5)`.
pub fn step_factor(err: f64, cfg: &SolverConfig) -> f64 {
    if err == 0.0 {
        return 5.0;
    }
    (cfg.safety * err.powf(-0.2)).clamp(0.2, 5.0)
}

struct Trapezoid {
    terms: Vec<(Var, f64)>,
}

impl Trapezoid {
    fn finish(self, tape: &mut Tape) -> autodiff::Result<Var> {
        if self.terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            tape.lincomb(&self.terms)
        }
    }
}

/// Stages k2..k6 from k1, then the fourth-order update and the error vector.
fn rkf_step(tape: &mut Tape, rhs: &dyn OdeRhs, x: Var, t: f64, h: f64, k1: Var) -> autodiff::Result<(Var, Tensor)> {
    let mut ks = [k1; rkf45::STAGES];
    let mut terms = Vec::with_capacity(rkf45::STAGES);
    for s in 1..rkf45::STAGES {
        terms.clear();
        terms.push((x, 1.0));
        for (j, &a) in rkf45::A[s - 1].iter().enumerate().take(s) {
            if a != 0.0 {
                terms.push((ks[j], h * a));
            }
        }
        let xs = tape.lincomb(&terms)?;
        ks[s] = rhs.eval(tape, xs, t + rkf45::C[s] * h)?;
    }
    terms.clear();
    terms.push((x, 1.0));
    for (k, &b) in ks.iter().zip(&rkf45::B4) {
        if b != 0.0 {
            terms.push((*k, h * b));
        }
    }
    let x_new = tape.lincomb(&terms)?;

    let (rows, cols) = tape.shape(x);
    let mut err = Tensor::zeros(rows, cols);
    for (s, k) in ks.iter().enumerate() {
        let w = h * (rkf45::B5[s] - rkf45::B4[s]);
        if w != 0.0 {
            for (e, v) in err.data_mut().iter_mut().zip(tape.value(*k).data()) {
                *e += w * v;
            }
        }
    }
    Ok((x_new, err))
}

/// Adaptive RKF4(5) solve of `X' = F(X, t)` from `t0` to `tf`.
pub fn solve_adaptive(
    tape: &mut Tape,
    rhs: &dyn OdeRhs,
    x0: Var,
    t0: f64,
    tf: f64,
    cfg: &SolverConfig,
) -> Result<Solution, SolveError> {
    cfg.validate()?;
    if !(tf > t0) {
        return Err(SolveError::Config(format!("tf = {tf} must exceed t0 = {t0}")));
    }
    let mut stats = SolveStats::starting_at(t0);
    let mut trapezoid = Trapezoid { terms: Vec::new() };

    let mut t = t0;
    let mut x = x0;
    let mut h = cfg.h_init.min(cfg.h_max);
    let mut k1 = rhs.eval(tape, x, t)?;
    stats.rhs_evals += 1;
    let mut rho = rhs.density(tape, x, t, k1)?;

    loop {
        if stats.accepted_steps + stats.rejected_steps >= cfg.max_steps {
            return Err(SolveError::Divergence { stats: Box::new(stats) });
        }
        let remaining = tf - t;
        let last = h >= remaining * (1.0 - 1e-12);
        let h_step = if last { remaining } else { h };

        let mark = tape.len();
        let (x_new, x_err) = rkf_step(tape, rhs, x, t, h_step, k1)?;
        stats.rhs_evals += rkf45::STAGES - 1;
        let err = err_norm(&x_err, tape.value(x), tape.value(x_new), cfg);

        if err <= 1.0 {
            let t_new = if last { tf } else { t + h_step };
            stats.record_step(h_step, t_new);
            x = x_new;
            t = t_new;
            if !last || rho.is_some() {
                k1 = rhs.eval(tape, x, t)?;
                stats.rhs_evals += 1;
            }
            if let Some(prev) = rho {
                let next = rhs
                    .density(tape, x, t, k1)?
                    .expect("density support cannot change mid-solve");
                trapezoid.terms.push((prev, 0.5 * h_step));
                trapezoid.terms.push((next, 0.5 * h_step));
                rho = Some(next);
            }
            if last {
                break;
            }
            h = (h_step * step_factor(err, cfg)).clamp(cfg.h_min, cfg.h_max);
        } else {
            tape.truncate(mark);
            stats.rejected_steps += 1;
            h = h_step * step_factor(err, cfg);
            if h < cfg.h_min {
                return Err(SolveError::StepUnderflow {
                    t,
                    h,
                    stats: Box::new(stats),
                });
            }
        }
    }

    let integral = trapezoid.finish(tape)?;
    Ok(Solution {
        state: x,
        integral,
        stats,
    })
}

/// RKF4(5) fourth-order solution on a prescribed time grid (no error control).
///
/// Feeding the `step_times` of an adaptive solve reproduces that solve with the
/// step sequence frozen.
pub fn solve_rk_fixed(tape: &mut Tape, rhs: &dyn OdeRhs, x0: Var, times: &[f64]) -> Result<Solution, SolveError> {
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SolveError::Config(
            "time grid needs at least two strictly increasing points".into(),
        ));
    }
    let mut stats = SolveStats::starting_at(times[0]);
    let mut trapezoid = Trapezoid { terms: Vec::new() };
    let mut x = x0;
    let mut k1 = rhs.eval(tape, x, times[0])?;
    stats.rhs_evals += 1;
    let mut rho = rhs.density(tape, x, times[0], k1)?;
    for (i, w) in times.windows(2).enumerate() {
        let (t, t_new) = (w[0], w[1]);
        let h = t_new - t;
        let (x_new, _) = rkf_step(tape, rhs, x, t, h, k1)?;
        stats.rhs_evals += rkf45::STAGES - 1;
        stats.record_step(h, t_new);
        x = x_new;
        let last = i + 2 == times.len();
        if !last || rho.is_some() {
            k1 = rhs.eval(tape, x, t_new)?;
            stats.rhs_evals += 1;
        }
        if let Some(prev) = rho {
            let next = rhs
                .density(tape, x, t_new, k1)?
                .expect("density support cannot change mid-solve");
            trapezoid.terms.push((prev, 0.5 * h));
            trapezoid.terms.push((next, 0.5 * h));
            rho = Some(next);
        }
    }
    let integral = trapezoid.finish(tape)?;
    Ok(Solution {
        state: x,
        integral,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct EulerSolution {
    pub state: Var,
    /// `‖h · F(X_n, t_n)‖_F` for every step `n`.
    pub residual_norms: Vec<f64>,
}

/// `n_steps` uniform forward-Euler steps: `X_{n+1} = X_n + h F(X_n, t0 + n h)`.
pub fn solve_euler_fixed(
    tape: &mut Tape,
    rhs: &dyn OdeRhs,
    x0: Var,
    t0: f64,
    tf: f64,
    n_steps: usize,
) -> Result<EulerSolution, SolveError> {
    if n_steps == 0 {
        return Err(SolveError::Config("n_steps must be at least 1".into()));
    }
    let h = (tf - t0) / n_steps as f64;
    let mut x = x0;
    let mut residual_norms = Vec::with_capacity(n_steps);
    for n in 0..n_steps {
        let t = t0 + h * n as f64;
        let f = rhs.eval(tape, x, t)?;
        residual_norms.push(h.abs() * tape.value(f).frobenius());
        x = tape.lincomb(&[(x, 1.0), (f, h)])?;
    }
    Ok(EulerSolution {
        state: x,
        residual_norms,
    })
}

/// Least-squares slope of `ln y` against `ln x` over points with positive
/// coordinates. `None` when fewer than two such points exist or all `x` coincide.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixedMethod {
    Euler,
    /// Fourth-order solution of the RKF4(5) pair on a uniform grid.
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OrderFit {
    Slope(f64),
    /// Too few nonzero errors to fit (e.g. the method is exact on the problem).
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderProbe {
    /// `(h, ‖X_h(tf) − X(tf)‖_F)` per step count.
    pub errors: Vec<(f64, f64)>,
    pub fit: OrderFit,
}

/// Empirical convergence order: slope of `ln error` against `ln h` at `tf`.
pub fn convergence_order_probe(
    method: FixedMethod,
    rhs: &dyn OdeRhs,
    x0: &Tensor,
    t0: f64,
    tf: f64,
    exact: &dyn Fn(f64) -> Tensor,
    step_counts: &[usize],
) -> Result<OrderProbe, SolveError> {
    let reference = exact(tf);
    let mut errors = Vec::with_capacity(step_counts.len());
    for &n in step_counts {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone())?;
        let state = match method {
            FixedMethod::Euler => solve_euler_fixed(&mut tape, rhs, x, t0, tf, n)?.state,
            FixedMethod::Rk4 => {
                if n == 0 {
                    return Err(SolveError::Config("n_steps must be at least 1".into()));
                }
                let h = (tf - t0) / n as f64;
                let times: Vec<f64> = (0..=n).map(|i| if i == n { tf } else { t0 + h * i as f64 }).collect();
                solve_rk_fixed(&mut tape, rhs, x, &times)?.state
            }
        };
        let h = (tf - t0) / n as f64;
        let diff = tape.value(state).max_abs_diff(&reference);
        let err = if diff == 0.0 {
            0.0
        } else {
            let mut d = tape.value(state).clone();
            for (a, b) in d.data_mut().iter_mut().zip(reference.data()) {
                *a -= b;
            }
            d.frobenius()
        };
        errors.push((h, err));
    }
    let fit = match loglog_slope(&errors) {
        Some(s) if errors.iter().filter(|e| e.1 > 0.0).count() >= 2 => OrderFit::Slope(s),
        _ => OrderFit::Degenerate,
    };
    Ok(OrderProbe { errors, fit })
}
