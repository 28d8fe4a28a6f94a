//! Averaged drift, the centered Poisson equation of the fast generator and
//! the effective covariance that drives the quadratic rate.

use nalgebra::{DMatrix, DVector};

use crate::chain;
use crate::error::{Error, Result};
use crate::model::RegimeModel;

/// Residuals above this are reported as ill-conditioned.
pub const POISSON_RESIDUAL_LIMIT: f64 = 1e-8;

/// Relative singular-value cutoff for the pseudo-inverse of `Lambda`.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

/// Solution `Phi(x, .)` of `Q(x) Phi = -(b(x, .) - bbar(x))` with
/// `sum_i Phi(x, i) mu_i = 0`.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    /// `L x d`, row `i` is `Phi(x, i)`.
    pub phi: DMatrix<f64>,
    pub bbar: Vec<f64>,
    pub residual: f64,
    pub centering: f64,
    pub generator: DMatrix<f64>,
}

/// `Lambda(x) = sum_j mu_j sigma_j sigma_j^T + sum_{i != j} mu_i q_ij dPhi_ij dPhi_ij^T`.
#[derive(Debug, Clone)]
pub struct EffectiveCovariance {
    pub lambda: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    /// Orthonormal basis of the null space of `lambda`, one column per
    /// truncated direction.
    pub null_basis: DMatrix<f64>,
}

fn drift_table(model: &RegimeModel, x: &[f64]) -> DMatrix<f64> {
    let (l, d) = (model.regimes(), model.dim());
    let mut table = DMatrix::zeros(l, d);
    let mut buf = vec![0.0; d];
    for i in 0..l {
        model.drift_into(x, i, &mut buf);
        for k in 0..d {
            table[(i, k)] = buf[k];
        }
    }
    table
}

fn check_point(model: &RegimeModel, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() {
        return Err(Error::invalid(format!(
            "point has dimension {}, model has {}",
            x.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// `bbar(x) = sum_i b(x, i) mu_i^x`.
pub fn averaged_drift(model: &RegimeModel, x: &[f64]) -> Result<Vec<f64>> {
    check_point(model, x)?;
    let q = model.generator(x);
    let mu = chain::invariant_measure(&q).map_err(|e| e.at_point(x))?;
    let table = drift_table(model, x);
    Ok((0..model.dim())
        .map(|k| (0..model.regimes()).map(|i| mu.mu[i] * table[(i, k)]).sum())
        .collect())
}

/// Solves the centered Poisson equation for every slow coordinate at once.
pub fn solve_poisson(model: &RegimeModel, x: &[f64]) -> Result<PoissonSolution> {
    check_point(model, x)?;
    let (l, d) = (model.regimes(), model.dim());
    let q = model.generator(x);
    let mu = chain::invariant_measure(&q).map_err(|e| e.at_point(x))?.mu;
    let table = drift_table(model, x);
    let bbar: Vec<f64> = (0..d)
        .map(|k| (0..l).map(|i| mu[i] * table[(i, k)]).sum())
        .collect();
    let centered = DMatrix::from_fn(l, d, |i, k| table[(i, k)] - bbar[k]);

    let mut a = DMatrix::zeros(l + 1, l);
    a.view_mut((0, 0), (l, l)).copy_from(&q);
    for i in 0..l {
        a[(l, i)] = mu[i];
    }
    let mut rhs = DMatrix::zeros(l + 1, d);
    rhs.view_mut((0, 0), (l, d)).copy_from(&(-&centered));

    let phi = a
        .svd(true, true)
        .solve(&rhs, 0.0)
        .map_err(|e| Error::invalid(format!("Poisson solve failed: {e}")))?;

    let residual = (&q * &phi + &centered).amax();
    let mu_row = DVector::from_column_slice(&mu).transpose();
    let centering = (mu_row * &phi).amax();
    if !(residual <= POISSON_RESIDUAL_LIMIT) {
        return Err(Error::IllConditioned { residual });
    }
    Ok(PoissonSolution {
        x: x.to_vec(),
        mu,
        phi,
        bbar,
        residual,
        centering,
        generator: q,
    })
}

/// Default finite-difference step `1e-5 (1 + |x|)`.
pub fn default_fd_step(x: &[f64]) -> f64 {
    1e-5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Central-difference Jacobian of the averaged drift; column `k` is
/// `(bbar(x + h e_k) - bbar(x - h e_k)) / 2h`.
pub fn jacobian_bbar(model: &RegimeModel, x: &[f64], h_fd: f64) -> Result<DMatrix<f64>> {
    check_point(model, x)?;
    if !(h_fd > 0.0 && h_fd.is_finite()) {
        return Err(Error::invalid(format!("h_fd must be positive, got {h_fd}")));
    }
    let d = model.dim();
    let mut jac = DMatrix::zeros(d, d);
    let mut probe = x.to_vec();
    for k in 0..d {
        probe[k] = x[k] + h_fd;
        let plus = averaged_drift(model, &probe)?;
        probe[k] = x[k] - h_fd;
        let minus = averaged_drift(model, &probe)?;
        probe[k] = x[k];
        for r in 0..d {
            jac[(r, k)] = (plus[r] - minus[r]) / (2.0 * h_fd);
        }
    }
    Ok(jac)
}

/// Assembles `Lambda(x)` and its truncated pseudo-inverse.
pub fn effective_covariance(model: &RegimeModel, x: &[f64]) -> Result<EffectiveCovariance> {
    let sol = solve_poisson(model, x)?;
    Ok(covariance_from_solution(model, &sol))
}

/// Same as [`effective_covariance`] for an already solved point.
pub fn covariance_from_solution(model: &RegimeModel, sol: &PoissonSolution) -> EffectiveCovariance {
    let (l, d) = (model.regimes(), model.dim());
    let x = &sol.x;
    let mut lambda = DMatrix::zeros(d, d);
    for j in 0..l {
        let s = model.diffusion(x, j);
        lambda += (&s * s.transpose()) * sol.mu[j];
    }
    for i in 0..l {
        for j in 0..l {
            let q = sol.generator[(i, j)];
            if i == j || q == 0.0 {
                continue;
            }
            let delta = (sol.phi.row(j) - sol.phi.row(i)).transpose();
            lambda += (&delta * delta.transpose()) * (sol.mu[i] * q);
        }
    }
    // exact symmetry
    let lambda = (&lambda + lambda.transpose()) * 0.5;
    let (pinv, rank, null_basis) = symmetric_pinv(&lambda, PINV_RELATIVE_CUTOFF);
    EffectiveCovariance {
        lambda,
        pinv,
        rank,
        null_basis,
    }
}

/// Pseudo-inverse of a symmetric PSD matrix via its eigen-decomposition,
/// dropping eigenvalues below `cutoff * max`. Returns the inverse, the rank
/// and an orthonormal basis of the dropped directions.
pub fn symmetric_pinv(m: &DMatrix<f64>, cutoff: f64) -> (DMatrix<f64>, usize, DMatrix<f64>) {
    let d = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut pinv = DMatrix::zeros(d, d);
    let mut rank = 0;
    let mut null_cols = Vec::new();
    for k in 0..d {
        let lam = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        if top > 0.0 && lam > cutoff * top {
            pinv += (v * v.transpose()) / lam;
            rank += 1;
        } else {
            null_cols.push(v.into_owned());
        }
    }
    let null_basis = if null_cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&null_cols)
    };
    (pinv, rank, null_basis)
}
