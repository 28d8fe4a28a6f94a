//! The moderate-deviation rate functional.
//!
//! With the slow state frozen at `x`, the occupation weights are forced to
//! the invariant measure `mu^x` and the jump controls can be taken constant
//! on each interval `[0, q_ij(x)]`. The pointwise problem is then a
//! weighted minimum-norm problem in the controls, solved in closed form by
//! the pseudo-inverse of the effective covariance `Lambda(x)`:
//! `cost = v^T Lambda^+ v / 2`. [`pointwise_rate_qp_oracle`] solves the
//! same problem with controls that may vary over `[0, zeta]`, as an
//! independent check of that reduction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::RegimeModel;
use crate::poisson::{self, EffectiveCovariance, PoissonSolution};
use crate::simulate::{AveragedPath, ConstantControls, PiecewiseControls};

/// Relative tolerance for `v` lying in the range of `Lambda`.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Minimal control cost at one time instant.
#[derive(Debug, Clone)]
pub struct PointwiseRate {
    pub x: Vec<f64>,
    /// Required control drift `v = eta' - grad(bbar) eta`.
    pub v: Vec<f64>,
    /// `+inf` when infeasible.
    pub cost: f64,
    /// `L x d` optimal Brownian controls per regime.
    pub u_star: DMatrix<f64>,
    /// `L x L` optimal constant jump densities; zero off the support.
    pub c_star: DMatrix<f64>,
    pub feasible: bool,
    pub mu: Vec<f64>,
    /// `|mu Q(x)|_inf` of the fixed occupation weights.
    pub stationarity_residual: f64,
}

impl PointwiseRate {
    pub fn controls(&self) -> ConstantControls {
        ConstantControls {
            u: self.u_star.clone(),
            c: self.c_star.clone(),
        }
    }
}

/// Solves the pointwise problem at `x` for drift `v`.
pub fn pointwise_rate(model: &RegimeModel, x: &[f64], v: &[f64]) -> Result<PointwiseRate> {
    let sol = poisson::solve_poisson(model, x)?;
    let cov = poisson::covariance_from_solution(model, &sol);
    pointwise_from_parts(model, &sol, &cov, v)
}

pub fn pointwise_from_parts(
    model: &RegimeModel,
    sol: &PoissonSolution,
    cov: &EffectiveCovariance,
    v: &[f64],
) -> Result<PointwiseRate> {
    let (l, d) = (model.regimes(), model.dim());
    if v.len() != d {
        return Err(Error::invalid("v dimension does not match the model"));
    }
    let vv = DVector::from_column_slice(v);
    let multiplier = &cov.pinv * &vv;
    let gap = (&cov.lambda * &multiplier - &vv).norm();
    let feasible = gap <= FEASIBILITY_TOL * (1.0 + vv.norm());

    let mut u_star = DMatrix::zeros(l, d);
    let mut c_star = DMatrix::zeros(l, l);
    let cost = if feasible {
        for j in 0..l {
            let s = model.diffusion(&sol.x, j);
            let u = s.transpose() * &multiplier;
            u_star.row_mut(j).copy_from(&u.transpose());
        }
        for i in 0..l {
            for j in 0..l {
                if i != j && sol.generator[(i, j)] > 0.0 {
                    let delta = sol.phi.row(j) - sol.phi.row(i);
                    c_star[(i, j)] = (delta * &multiplier)[(0, 0)];
                }
            }
        }
        0.5 * vv.dot(&multiplier)
    } else {
        f64::INFINITY
    };
    let mu_row = DVector::from_column_slice(&sol.mu).transpose();
    let stationarity_residual = (mu_row * &sol.generator).amax();
    Ok(PointwiseRate {
        x: sol.x.clone(),
        v: v.to_vec(),
        cost,
        u_star,
        c_star,
        feasible,
        mu: sol.mu.clone(),
        stationarity_residual,
    })
}

/// Brute-force pointwise cost: each jump control is piecewise constant on a
/// uniform grid of `z_grid_size` cells over `[0, zeta]` (the cell holding
/// `q_ij(x)` is split there), cells outside `[0, q_ij(x)]` are masked, and
/// the equality-constrained QP is solved through its KKT system.
/// Returns `+inf` when `v` cannot be produced.
pub fn pointwise_rate_qp_oracle(
    model: &RegimeModel,
    x: &[f64],
    v: &[f64],
    z_grid_size: usize,
) -> Result<f64> {
    if z_grid_size < 2 {
        return Err(Error::invalid("z grid needs at least 2 cells"));
    }
    let (l, d) = (model.regimes(), model.dim());
    if v.len() != d {
        return Err(Error::invalid("v dimension does not match the model"));
    }
    let sol = poisson::solve_poisson(model, x)?;
    let zeta = model.zeta();
    let cell = zeta / z_grid_size as f64;

    // columns of the constraint matrix and their quadratic weights
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for j in 0..l {
        let s = model.diffusion(x, j);
        for k in 0..d {
            columns.push(s.column(k) * sol.mu[j]);
            weights.push(sol.mu[j]);
        }
    }
    for &(i, j) in model.support() {
        let q = sol.generator[(i, j)];
        if q <= 0.0 {
            continue;
        }
        let delta = (sol.phi.row(j) - sol.phi.row(i)).transpose();
        for c in 0..z_grid_size {
            let lo = c as f64 * cell;
            let hi = ((c + 1) as f64 * cell).min(q);
            if hi <= lo {
                break;
            }
            let width = hi - lo;
            columns.push(&delta * (sol.mu[i] * width));
            weights.push(sol.mu[i] * width);
        }
    }

    let n = columns.len();
    if n == 0 {
        return Ok(if v.iter().all(|&c| c == 0.0) { 0.0 } else { f64::INFINITY });
    }
    let m = n + d;
    let mut kkt = DMatrix::zeros(m, m);
    for (c, col) in columns.iter().enumerate() {
        kkt[(c, c)] = weights[c];
        for r in 0..d {
            kkt[(n + r, c)] = col[r];
            kkt[(c, n + r)] = col[r];
        }
    }
    let mut rhs = DVector::zeros(m);
    for r in 0..d {
        rhs[n + r] = v[r];
    }
    let z = solve_kkt(&kkt, &rhs)?;

    let mut produced = DVector::zeros(d);
    let mut cost = 0.0;
    for (c, col) in columns.iter().enumerate() {
        produced += col * z[c];
        cost += 0.5 * weights[c] * z[c] * z[c];
    }
    let vv = DVector::from_column_slice(v);
    if (produced - &vv).norm() > FEASIBILITY_TOL * (1.0 + vv.norm()) {
        return Ok(f64::INFINITY);
    }
    Ok(cost)
}

/// LU first; the SVD least-squares solution when the system is singular.
fn solve_kkt(kkt: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(z) = kkt.clone().lu().solve(rhs) {
        if z.iter().all(|v| v.is_finite()) && (kkt * &z - rhs).amax() <= 1e-10 * (1.0 + rhs.amax()) {
            return Ok(z);
        }
    }
    let svd = kkt.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    svd.solve(rhs, eps)
        .map_err(|e| Error::invalid(format!("KKT solve failed: {e}")))
}

/// Value of the rate functional on a sampled path, with per-knot optima.
#[derive(Debug, Clone)]
pub struct RateEvaluation {
    pub value: f64,
    pub per_knot: Vec<PointwiseRate>,
    pub grid: Vec<f64>,
    pub first_infeasible_time: Option<f64>,
}

impl RateEvaluation {
    /// Piecewise-constant feedback controls realizing the per-knot optima.
    pub fn feedback_controls(&self) -> PiecewiseControls {
        PiecewiseControls {
            times: self.grid.clone(),
            knots: self
                .per_knot
                .iter()
                .map(|p| {
                    if p.feasible {
                        p.controls()
                    } else {
                        ConstantControls {
                            u: DMatrix::zeros(p.u_star.nrows(), p.u_star.ncols()),
                            c: DMatrix::zeros(p.c_star.nrows(), p.c_star.ncols()),
                        }
                    }
                })
                .collect(),
        }
    }
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 3 {
        return Err(Error::invalid("path needs at least 3 knots"));
    }
    let n = times.len() - 1;
    let dt = (times[n] - times[0]) / n as f64;
    if !(dt > 0.0) {
        return Err(Error::GridMismatch("time grid is not increasing".into()));
    }
    for k in 0..=n {
        let expected = times[0] + k as f64 * dt;
        if (times[k] - expected).abs() > 1e-9 * (1.0 + expected.abs()) {
            return Err(Error::GridMismatch(format!("time grid is not uniform at knot {k}")));
        }
    }
    Ok(dt)
}

/// Second-order finite-difference derivative on a uniform grid.
pub fn path_derivative(eta: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = eta.len() - 1;
    let d = eta[0].len();
    (0..=n)
        .map(|k| {
            (0..d)
                .map(|r| {
                    if k == 0 {
                        (-3.0 * eta[0][r] + 4.0 * eta[1][r] - eta[2][r]) / (2.0 * dt)
                    } else if k == n {
                        (3.0 * eta[n][r] - 4.0 * eta[n - 1][r] + eta[n - 2][r]) / (2.0 * dt)
                    } else {
                        (eta[k + 1][r] - eta[k - 1][r]) / (2.0 * dt)
                    }
                })
                .collect()
        })
        .collect()
}

/// `I(eta) = int v^T Lambda^+ v / 2 dt` with `v = eta' - grad(bbar)(Xbar) eta`,
/// by trapezoidal quadrature over the grid of `averaged`.
pub fn rate_functional(
    model: &RegimeModel,
    averaged: &AveragedPath,
    eta: &[Vec<f64>],
) -> Result<RateEvaluation> {
    if eta.len() != averaged.times.len() {
        return Err(Error::GridMismatch(format!(
            "{} path knots vs {} averaged knots",
            eta.len(),
            averaged.times.len()
        )));
    }
    let d = model.dim();
    if eta.iter().any(|e| e.len() != d) {
        return Err(Error::invalid("path dimension does not match the model"));
    }
    if eta[0].iter().any(|&e| e.abs() > 1e-12) {
        return Err(Error::invalid("deviation path must start at 0"));
    }
    let dt = uniform_step(&averaged.times)?;
    let deriv = path_derivative(eta, dt);

    let mut per_knot = Vec::with_capacity(eta.len());
    let mut first_infeasible_time = None;
    for (k, xbar) in averaged.x.iter().enumerate() {
        let jac = poisson::jacobian_bbar(model, xbar, poisson::default_fd_step(xbar))?;
        let e = DVector::from_column_slice(&eta[k]);
        let drift = jac * e;
        let v: Vec<f64> = (0..d).map(|r| deriv[k][r] - drift[r]).collect();
        let sol = poisson::solve_poisson(model, xbar)?;
        let cov = poisson::covariance_from_solution(model, &sol);
        let p = pointwise_from_parts(model, &sol, &cov, &v)?;
        if !p.feasible && first_infeasible_time.is_none() {
            first_infeasible_time = Some(averaged.times[k]);
        }
        per_knot.push(p);
    }
    let value = if first_infeasible_time.is_some() {
        f64::INFINITY
    } else {
        let n = per_knot.len() - 1;
        per_knot
            .iter()
            .enumerate()
            .map(|(k, p)| if k == 0 || k == n { 0.5 * p.cost } else { p.cost })
            .sum::<f64>()
            * dt
    };
    Ok(RateEvaluation {
        value,
        per_knot,
        grid: averaged.times.clone(),
        first_infeasible_time,
    })
}

/// Minimizer of the discretized rate over paths hitting a terminal target.
#[derive(Debug, Clone)]
pub struct TargetRate {
    pub value: f64,
    pub times: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    /// Control drift `v_k` on `[t_k, t_{k+1})`.
    pub v: Vec<Vec<f64>>,
}

/// `inf { I(eta) : eta(T) = a }` over `n_knots` Euler intervals.
pub fn min_rate_to_target(
    model: &RegimeModel,
    averaged: &AveragedPath,
    a: &[f64],
    t_end: f64,
    n_knots: usize,
) -> Result<TargetRate> {
    let d = model.dim();
    min_rate_with_terminal(model, averaged, &DMatrix::identity(d, d), a, t_end, n_knots)
}

/// `inf { I(eta) : C eta(T) = a }`: the discrete LQ problem
/// `min sum_k v_k^T Lambda_k^+ v_k dt / 2` subject to
/// `eta_{k+1} = eta_k + (A_k eta_k + v_k) dt`, `eta_0 = 0`, `C eta_N = a`,
/// and `v_k` in the range of `Lambda_k`, solved through one KKT system.
pub fn min_rate_with_terminal(
    model: &RegimeModel,
    averaged: &AveragedPath,
    selector: &DMatrix<f64>,
    a: &[f64],
    t_end: f64,
    n_knots: usize,
) -> Result<TargetRate> {
    let d = model.dim();
    if n_knots < 8 {
        return Err(Error::invalid("need at least 8 knots"));
    }
    if selector.ncols() != d || selector.nrows() != a.len() {
        return Err(Error::invalid("terminal constraint shape mismatch"));
    }
    let horizon = *averaged.times.last().unwrap();
    if !(t_end > 0.0) || t_end > horizon * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "horizon {t_end} not covered by the averaged path (ends at {horizon})"
        )));
    }
    let n = n_knots;
    let dt = t_end / n as f64;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();

    let mut jac = Vec::with_capacity(n);
    let mut covs = Vec::with_capacity(n);
    for &t in &times[..n] {
        let xb = averaged.at(t);
        jac.push(poisson::jacobian_bbar(model, &xb, poisson::default_fd_step(&xb))?);
        covs.push(poisson::effective_covariance(model, &xb)?);
    }

    // unknowns: eta_1..eta_N then v_0..v_{N-1}
    let eta_at = |k: usize, r: usize| (k - 1) * d + r;
    let v_at = |k: usize, r: usize| n * d + k * d + r;
    let nvar = 2 * n * d;
    let nullity: usize = covs.iter().map(|c| c.null_basis.ncols()).sum();
    let ncon = n * d + a.len() + nullity;
    let size = nvar + ncon;
    let mut kkt = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);

    for (k, cov) in covs.iter().enumerate() {
        for r in 0..d {
            for c in 0..d {
                kkt[(v_at(k, r), v_at(k, c))] = cov.pinv[(r, c)] * dt;
            }
        }
    }
    let mut row = nvar;
    let put = |kkt: &mut DMatrix<f64>, row: usize, col: usize, val: f64| {
        kkt[(row, col)] += val;
        kkt[(col, row)] += val;
    };
    for k in 0..n {
        for r in 0..d {
            put(&mut kkt, row, eta_at(k + 1, r), 1.0);
            if k > 0 {
                put(&mut kkt, row, eta_at(k, r), -1.0);
                for c in 0..d {
                    let coef = -dt * jac[k][(r, c)];
                    if coef != 0.0 {
                        put(&mut kkt, row, eta_at(k, c), coef);
                    }
                }
            }
            put(&mut kkt, row, v_at(k, r), -dt);
            row += 1;
        }
    }
    for (m, &target) in a.iter().enumerate() {
        for c in 0..d {
            if selector[(m, c)] != 0.0 {
                put(&mut kkt, row, eta_at(n, c), selector[(m, c)]);
            }
        }
        rhs[row] = target;
        row += 1;
    }
    for (k, cov) in covs.iter().enumerate() {
        for b in 0..cov.null_basis.ncols() {
            for r in 0..d {
                put(&mut kkt, row, v_at(k, r), cov.null_basis[(r, b)]);
            }
            row += 1;
        }
    }
    debug_assert_eq!(row, size);

    let z = solve_kkt(&kkt, &rhs)?;
    let mut eta = vec![vec![0.0; d]];
    for k in 1..=n {
        eta.push((0..d).map(|r| z[eta_at(k, r)]).collect());
    }
    let v: Vec<Vec<f64>> = (0..n)
        .map(|k| (0..d).map(|r| z[v_at(k, r)]).collect())
        .collect();

    // constraint check decides reachability
    let mut worst = 0.0f64;
    for k in 0..n {
        for r in 0..d {
            let mut drift = 0.0;
            for c in 0..d {
                drift += jac[k][(r, c)] * eta[k][c];
            }
            let step = eta[k + 1][r] - eta[k][r] - dt * (drift + v[k][r]);
            worst = worst.max(step.abs());
        }
        let vk = DVector::from_column_slice(&v[k]);
        worst = worst.max((covs[k].null_basis.transpose() * vk).amax());
    }
    let hit = selector * DVector::from_column_slice(&eta[n]);
    for (m, &target) in a.iter().enumerate() {
        worst = worst.max((hit[m] - target).abs());
    }
    let scale = 1.0 + a.iter().map(|t| t.abs()).fold(0.0, f64::max);
    if !(worst <= 1e-7 * scale) {
        return Err(Error::Infeasible(format!(
            "terminal target {a:?} violates constraints by {worst:e}"
        )));
    }

    let value = v
        .iter()
        .zip(&covs)
        .map(|(vk, cov)| {
            let vk = DVector::from_column_slice(vk);
            0.5 * vk.dot(&(&cov.pinv * &vk)) * dt
        })
        .sum();
    Ok(TargetRate { value, times, eta, v })
}
