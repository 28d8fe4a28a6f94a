//! Monte Carlo estimates of deviation tail probabilities, their normalized
//! decay rates, and CLT-scale covariance checks.
//!
//! Paths are grouped into fixed blocks of consecutive indices. Blocks may
//! run on any worker, but block results are combined in index order, so
//! every aggregate is bit-identical for any worker count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::RegimeModel;
use crate::poisson;
use crate::simulate::{
    self, default_dt, solve_averaged_on, NullControls, PathObserver, SimSetup, TimeGrid,
};

const BLOCK: u64 = 256;

/// `h(eps) = eps^(-beta)`.
pub fn deviation_scale(eps: f64, h_exponent: f64) -> f64 {
    eps.powf(-h_exponent)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailEvent {
    /// `eta_1(T) >= a`.
    Terminal,
    /// `sup_t |eta(t)| >= a`.
    Sup,
}

/// How the time step is chosen for each `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtRule {
    /// `min(1e-3, eps / 10)`, rounded down to divide `T`.
    Default,
    Fixed(f64),
}

impl DtRule {
    pub fn grid(&self, eps: f64, t_end: f64) -> Result<TimeGrid> {
        match *self {
            DtRule::Default => TimeGrid::covering(t_end, default_dt(eps)),
            DtRule::Fixed(dt) => TimeGrid::new(t_end, dt),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailEstimate {
    pub eps: f64,
    pub h_eps: f64,
    pub threshold: f64,
    pub n_paths: u64,
    pub hits: u64,
    pub p_hat: f64,
    pub std_err: f64,
    /// `-ln(p_hat) / h^2`; `+inf` when no path hit.
    pub decay_rate: f64,
    /// Rule-of-three lower bound `-ln(3 / n) / h^2`, set only when no path hit.
    pub decay_lower_bound: Option<f64>,
}

impl TailEstimate {
    fn from_counts(eps: f64, h_eps: f64, threshold: f64, n_paths: u64, hits: u64) -> Self {
        let n = n_paths as f64;
        let p_hat = hits as f64 / n;
        let std_err = (p_hat * (1.0 - p_hat) / n).sqrt();
        let h2 = h_eps * h_eps;
        let (decay_rate, decay_lower_bound) = if hits == 0 {
            (f64::INFINITY, Some((-(3.0 / n).ln() / h2).max(0.0)))
        } else {
            ((-p_hat.ln() / h2).max(0.0), None)
        };
        Self {
            eps,
            h_eps,
            threshold,
            n_paths,
            hits,
            p_hat,
            std_err,
            decay_rate,
            decay_lower_bound,
        }
    }
}

/// One tail-probability experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TailProblem {
    pub eps: f64,
    /// `beta` in `h = eps^(-beta)`, in `(0, 0.5)`.
    pub h_exponent: f64,
    pub x0: Vec<f64>,
    /// Zero-based.
    pub y0: usize,
    pub t_end: f64,
    pub dt: DtRule,
    pub threshold: f64,
    pub event: TailEvent,
    pub n_paths: u64,
    pub seed: u64,
}

struct TailObserver<'a> {
    averaged: &'a [Vec<f64>],
    scale: f64,
    threshold: f64,
    event: TailEvent,
    last: usize,
    hit: bool,
}

impl PathObserver for TailObserver<'_> {
    fn knot(&mut self, k: usize, _t: f64, x: &[f64], _y: usize) {
        if self.hit {
            return;
        }
        let xb = &self.averaged[k];
        match self.event {
            TailEvent::Terminal => {
                if k == self.last && (x[0] - xb[0]) * self.scale >= self.threshold {
                    self.hit = true;
                }
            }
            TailEvent::Sup => {
                let norm = x
                    .iter()
                    .zip(xb)
                    .map(|(a, b)| ((a - b) * self.scale).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm >= self.threshold {
                    self.hit = true;
                }
            }
        }
    }
}

/// Runs `work` over consecutive blocks of path indices and returns the
/// block results in index order.
fn blocks<T: Send>(
    n_paths: u64,
    work: impl Fn(std::ops::Range<u64>) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let n_blocks = n_paths.div_ceil(BLOCK);
    (0..n_blocks)
        .into_par_iter()
        .map(|b| work(b * BLOCK..((b + 1) * BLOCK).min(n_paths)))
        .collect()
}

/// Estimates `P(eta in event)` by plain Monte Carlo.
pub fn estimate_tail(model: &RegimeModel, problem: &TailProblem) -> Result<TailEstimate> {
    let TailProblem {
        eps, h_exponent, ..
    } = *problem;
    if !(h_exponent > 0.0 && h_exponent < 0.5) {
        return Err(Error::invalid(format!(
            "h exponent must lie in (0, 0.5), got {h_exponent}"
        )));
    }
    if problem.n_paths == 0 {
        return Err(Error::invalid("n_paths must be positive"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if problem.threshold.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    let h_eps = deviation_scale(eps, h_exponent);
    let grid = problem.dt.grid(eps, problem.t_end)?;
    let averaged = solve_averaged_on(model, &problem.x0, grid)?;
    let setup = SimSetup {
        eps,
        x0: problem.x0.clone(),
        y0: problem.y0,
        grid,
    };
    let scale = 1.0 / (eps.sqrt() * h_eps);
    let counts = blocks(problem.n_paths, |range| {
        let mut hits = 0u64;
        for path in range {
            let mut obs = TailObserver {
                averaged: &averaged.x,
                scale,
                threshold: problem.threshold,
                event: problem.event,
                last: grid.steps(),
                hit: false,
            };
            simulate::run_path(model, &setup, 1.0, &NullControls, problem.seed, path, &mut obs)?;
            hits += obs.hit as u64;
        }
        Ok(hits)
    })?;
    let hits = counts.iter().sum();
    Ok(TailEstimate::from_counts(
        eps,
        h_eps,
        problem.threshold,
        problem.n_paths,
        hits,
    ))
}

/// One tail estimate per `eps`, each with the same master seed.
#[allow(clippy::too_many_arguments)]
pub fn mdp_scan(
    model: &RegimeModel,
    eps_grid: &[f64],
    h_exponent: f64,
    threshold: f64,
    event: TailEvent,
    x0: &[f64],
    y0: usize,
    t_end: f64,
    dt: DtRule,
    n_paths: u64,
    seed: u64,
) -> Result<Vec<TailEstimate>> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be positive"));
    }
    if eps_grid.is_empty() {
        return Err(Error::invalid("empty eps grid"));
    }
    if eps_grid.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid("eps grid must be decreasing"));
    }
    eps_grid
        .iter()
        .map(|&eps| {
            estimate_tail(
                model,
                &TailProblem {
                    eps,
                    h_exponent,
                    x0: x0.to_vec(),
                    y0,
                    t_end,
                    dt,
                    threshold,
                    event,
                    n_paths,
                    seed,
                },
            )
        })
        .collect()
}

/// Empirical versus predicted covariance of `eta(T)` at `h = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CltCheck {
    pub empirical_cov: DMatrix<f64>,
    pub predicted_cov: DMatrix<f64>,
    /// Largest entrywise deviation, scaled by `sqrt(P_ii P_jj)`.
    pub max_rel_dev: f64,
    pub n_paths: u64,
}

struct TerminalObserver {
    last: usize,
    x: Vec<f64>,
}

impl PathObserver for TerminalObserver {
    fn knot(&mut self, k: usize, _t: f64, x: &[f64], _y: usize) {
        if k == self.last {
            self.x.copy_from_slice(x);
        }
    }
}

/// Solves `S' = A S + S A^T + Lambda`, `S(0) = 0`, jointly with the averaged
/// ODE by RK4, where `A = grad(bbar)(Xbar)` and `Lambda = Lambda(Xbar)`.
pub fn predicted_covariance(
    model: &RegimeModel,
    x0: &[f64],
    t_end: f64,
    steps: usize,
) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if x0.len() != d {
        return Err(Error::invalid("x0 dimension does not match the model"));
    }
    let grid = TimeGrid::with_steps(t_end, steps)?;
    let h = grid.dt();
    let field = |x: &DVector<f64>, s: &DMatrix<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let xs = x.as_slice();
        let a = poisson::jacobian_bbar(model, xs, poisson::default_fd_step(xs))?;
        let lambda = poisson::effective_covariance(model, xs)?.lambda;
        let bbar = DVector::from_vec(poisson::averaged_drift(model, xs)?);
        Ok((bbar, &a * s + s * a.transpose() + lambda))
    };
    let mut x = DVector::from_column_slice(x0);
    let mut s = DMatrix::zeros(d, d);
    for _ in 0..grid.steps() {
        let (kx1, ks1) = field(&x, &s)?;
        let (kx2, ks2) = field(&(&x + &kx1 * (h / 2.0)), &(&s + &ks1 * (h / 2.0)))?;
        let (kx3, ks3) = field(&(&x + &kx2 * (h / 2.0)), &(&s + &ks2 * (h / 2.0)))?;
        let (kx4, ks4) = field(&(&x + &kx3 * h), &(&s + &ks3 * h))?;
        x += (kx1 + kx2 * 2.0 + kx3 * 2.0 + kx4) * (h / 6.0);
        s += (ks1 + ks2 * 2.0 + ks3 * 2.0 + ks4) * (h / 6.0);
    }
    Ok((&s + s.transpose()) * 0.5)
}

/// Compares the sample covariance of `(X(T) - Xbar(T)) / sqrt(eps)` with
/// the Lyapunov prediction.
#[allow(clippy::too_many_arguments)]
pub fn clt_check(
    model: &RegimeModel,
    eps: f64,
    x0: &[f64],
    y0: usize,
    t_end: f64,
    dt: f64,
    n_paths: u64,
    seed: u64,
) -> Result<CltCheck> {
    if n_paths < 1000 {
        return Err(Error::invalid("clt check needs at least 1000 paths"));
    }
    let d = model.dim();
    let setup = SimSetup::new(eps, x0.to_vec(), y0, t_end, dt)?;
    let averaged = solve_averaged_on(model, x0, setup.grid)?;
    let xbar_end = averaged.x.last().unwrap().clone();
    let scale = 1.0 / eps.sqrt();

    let partials = blocks(n_paths, |range| {
        let mut sum = DVector::zeros(d);
        let mut outer = DMatrix::zeros(d, d);
        for path in range {
            let mut obs = TerminalObserver {
                last: setup.grid.steps(),
                x: vec![0.0; d],
            };
            simulate::run_path(model, &setup, 1.0, &NullControls, seed, path, &mut obs)?;
            let eta = DVector::from_iterator(
                d,
                obs.x.iter().zip(&xbar_end).map(|(a, b)| (a - b) * scale),
            );
            outer += &eta * eta.transpose();
            sum += eta;
        }
        Ok((sum, outer))
    })?;
    let mut sum = DVector::zeros(d);
    let mut outer = DMatrix::zeros(d, d);
    for (s, o) in partials {
        sum += s;
        outer += o;
    }
    let n = n_paths as f64;
    let mean = &sum / n;
    let empirical_cov = (outer - &mean * mean.transpose() * n) / (n - 1.0);

    let steps = setup.grid.steps().clamp(256, 4096);
    let predicted_cov = predicted_covariance(model, x0, t_end, steps)?;
    let mut max_rel_dev = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let diff = (empirical_cov[(i, j)] - predicted_cov[(i, j)]).abs();
            let norm = (predicted_cov[(i, i)] * predicted_cov[(j, j)]).abs().sqrt();
            let rel = if norm > 0.0 { diff / norm } else { diff };
            max_rel_dev = max_rel_dev.max(rel);
        }
    }
    Ok(CltCheck {
        empirical_cov,
        predicted_cov,
        max_rel_dev,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_builtin, Params};

    fn params(pairs: &[(&str, f64)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn problem(eps: f64, threshold: f64, n: u64) -> TailProblem {
        TailProblem {
            eps,
            h_exponent: 0.3,
            x0: vec![0.0],
            y0: 0,
            t_end: 1.0,
            dt: DtRule::Default,
            threshold,
            event: TailEvent::Terminal,
            n_paths: n,
            seed: 5,
        }
    }

    #[test]
    fn always_true_event() {
        let m = build_builtin("two-state-constant", &Params::new()).unwrap();
        let t = estimate_tail(&m, &problem(0.05, f64::NEG_INFINITY, 300)).unwrap();
        assert_eq!(t.p_hat, 1.0);
        assert_eq!(t.decay_rate, 0.0);
        assert_eq!(t.std_err, 0.0);
    }

    #[test]
    fn never_true_event_uses_rule_of_three() {
        let m = build_builtin("two-state-constant", &Params::new()).unwrap();
        let t = estimate_tail(&m, &problem(0.05, 1e6, 300)).unwrap();
        assert_eq!(t.hits, 0);
        assert_eq!(t.decay_rate, f64::INFINITY);
        let h2 = t.h_eps * t.h_eps;
        assert!((t.decay_lower_bound.unwrap() - (-(3.0f64 / 300.0).ln() / h2)).abs() < 1e-12);
    }

    #[test]
    fn argument_checks() {
        let m = build_builtin("two-state-constant", &Params::new()).unwrap();
        let mut p = problem(0.05, 0.0, 0);
        assert!(estimate_tail(&m, &p).is_err());
        p.n_paths = 10;
        p.h_exponent = 0.5;
        assert!(estimate_tail(&m, &p).is_err());
        assert!(mdp_scan(&m, &[0.01, 0.02], 0.3, 1.0, TailEvent::Terminal, &[0.0], 0, 1.0, DtRule::Default, 10, 1).is_err());
        assert!(mdp_scan(&m, &[0.02], 0.3, 1.0, TailEvent::Terminal, &[0.0], 0, 1.0, DtRule::Default, 0, 1).is_err());
        assert!(clt_check(&m, 0.01, &[0.0], 0, 1.0, 0.01, 999, 1).is_err());
    }

    #[test]
    fn duplicate_eps_entries_agree() {
        let m = build_builtin("two-state-constant", &Params::new()).unwrap();
        let r = mdp_scan(&m, &[0.05, 0.05], 0.3, 0.5, TailEvent::Sup, &[0.0], 0, 1.0, DtRule::Default, 500, 3).unwrap();
        assert_eq!(r[0], r[1]);
    }

    #[test]
    fn lyapunov_prediction_is_linear_for_constant_coefficients() {
        let m = build_builtin("two-state-constant", &Params::new()).unwrap();
        let s1 = predicted_covariance(&m, &[0.0], 1.0, 64).unwrap();
        let s2 = predicted_covariance(&m, &[0.0], 2.0, 64).unwrap();
        assert!((s1[(0, 0)] - 4.0 / 3.0).abs() < 1e-10);
        assert!((s2[(0, 0)] - 8.0 / 3.0).abs() < 1e-10);
        let flat = build_builtin("two-state-constant", &params(&[("b1", 0.2), ("b2", 0.2)])).unwrap();
        assert_eq!(predicted_covariance(&flat, &[0.0], 1.0, 16).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn degenerate_clt_is_exactly_zero() {
        let flat = build_builtin("two-state-constant", &params(&[("b1", 0.2), ("b2", 0.2)])).unwrap();
        let c = clt_check(&flat, 0.01, &[0.0], 0, 1.0, 0.01, 1000, 2).unwrap();
        assert!(c.empirical_cov.amax() < 1e-20);
        assert_eq!(c.predicted_cov[(0, 0)], 0.0);
        assert!(c.max_rel_dev < 1e-10);
    }
}
