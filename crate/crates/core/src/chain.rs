//! The fast chain with the slow state frozen: invariant measures and the
//! jump-rate operators built from (possibly controlled) rates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Stationary distribution of a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantMeasure {
    pub mu: Vec<f64>,
    /// `max_j |(mu Q)_j|`.
    pub residual: f64,
}

/// Generator-like matrix whose off-diagonal entries are integrated jump
/// intensities; rows sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    pub gamma: DMatrix<f64>,
}

/// Largest acceptable condition number of the augmented stationary system.
pub const MAX_CONDITION: f64 = 1e12;

/// Strong connectivity of the transition graph `{(i, j) : q_ij > threshold}`.
pub fn is_irreducible(q: &DMatrix<f64>, threshold: f64) -> bool {
    let n = q.nrows();
    if n == 0 {
        return false;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let rate = if forward { q[(i, j)] } else { q[(j, i)] };
                if i != j && !seen[j] && rate > threshold {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Solves `mu Q = 0`, `sum(mu) = 1` as the least-squares problem
/// `[Q^T; 1^T] mu = [0; 1]`.
pub fn invariant_measure(q: &DMatrix<f64>) -> Result<InvariantMeasure> {
    let n = q.nrows();
    if n == 0 || q.ncols() != n {
        return Err(Error::invalid("generator must be square and non-empty"));
    }
    if !is_irreducible(q, crate::model::RATE_THRESHOLD) && n > 1 {
        return Err(Error::NotIrreducible { x: None });
    }
    let mut a = DMatrix::zeros(n + 1, n);
    a.view_mut((0, 0), (n, n)).copy_from(&q.transpose());
    a.row_mut(n).fill(1.0);
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = 1.0;

    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(Error::NotIrreducible { x: None });
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::invalid(format!("stationary solve failed: {e}")))?;
    let total = sol.sum();
    let sol = sol / total;
    let mu: Vec<f64> = sol.iter().copied().collect();
    if mu.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::NotIrreducible { x: None });
    }
    let residual = (q.transpose() * &sol).amax();
    Ok(InvariantMeasure { mu, residual })
}

/// Jump operator with unit controls: integrates the constant density 1 over
/// `[0, q_ij(x)]`, so it reproduces the generator.
pub fn gamma_of_constant_rates(q: &DMatrix<f64>) -> GammaMatrix {
    let ones = DMatrix::from_element(q.nrows(), q.ncols(), 1.0);
    gamma_of_controlled_rates(q, &ones)
}

/// Jump operator for densities constant on each interval `[0, q_ij(x)]`:
/// off-diagonal `c_ij q_ij`, diagonal completing zero row sums.
pub fn gamma_of_controlled_rates(q: &DMatrix<f64>, c: &DMatrix<f64>) -> GammaMatrix {
    let n = q.nrows();
    let mut gamma = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..n {
            if i != j {
                let g = c[(i, j)] * q[(i, j)];
                gamma[(i, j)] = g;
                total += g;
            }
        }
        gamma[(i, i)] = -total;
    }
    GammaMatrix { gamma }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, rows, data)
    }

    #[test]
    fn symmetric_two_state() {
        let mu = invariant_measure(&m(2, &[-1.0, 1.0, 1.0, -1.0])).unwrap();
        assert!((mu.mu[0] - 0.5).abs() < 1e-15 && (mu.mu[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_two_state() {
        let mu = invariant_measure(&m(2, &[-1.0, 1.0, 2.0, -2.0])).unwrap();
        assert!((mu.mu[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((mu.mu[1] - 1.0 / 3.0).abs() < 1e-14);
        assert!(mu.residual < 1e-14);
    }

    #[test]
    fn single_state() {
        let mu = invariant_measure(&m(1, &[0.0])).unwrap();
        assert_eq!(mu.mu, vec![1.0]);
    }

    #[test]
    fn reducible_chains_rejected() {
        // absorbing regime 0
        assert!(matches!(
            invariant_measure(&m(2, &[0.0, 0.0, 1.0, -1.0])),
            Err(Error::NotIrreducible { .. })
        ));
        // two closed classes
        let q = m(
            4,
            &[
                -1.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, -2.0, 2.0, 0.0, 0.0, 3.0, -3.0,
            ],
        );
        assert!(!is_irreducible(&q, 1e-12));
        assert!(invariant_measure(&q).is_err());
    }

    #[test]
    fn gamma_examples() {
        let q = m(2, &[-1.0, 1.0, 2.0, -2.0]);
        assert_eq!(gamma_of_constant_rates(&q).gamma, q);
        let c = m(2, &[0.0, 2.0, 0.5, 0.0]);
        assert_eq!(
            gamma_of_controlled_rates(&q, &c).gamma,
            m(2, &[-2.0, 2.0, 1.0, -1.0])
        );
        let zero = DMatrix::zeros(2, 2);
        assert_eq!(gamma_of_controlled_rates(&q, &zero).gamma, zero);

        let sparse = m(3, &[-1.0, 1.0, 0.0, 0.0, -2.0, 2.0, 3.0, 0.0, -3.0]);
        let g = gamma_of_constant_rates(&sparse).gamma;
        assert_eq!(g[(0, 2)], 0.0);
        assert_eq!(g[(1, 0)], 0.0);
    }

    fn generator_strategy() -> impl Strategy<Value = DMatrix<f64>> {
        (2usize..=6).prop_flat_map(|n| {
            prop::collection::vec(0.05f64..3.0, n * n).prop_map(move |v| {
                let mut q = DMatrix::from_row_slice(n, n, &v);
                for i in 0..n {
                    q[(i, i)] = 0.0;
                    let s: f64 = q.row(i).sum();
                    q[(i, i)] = -s;
                }
                q
            })
        })
    }

    proptest! {
        #[test]
        fn gamma_rows_sum_to_zero_and_is_additive(
            q in generator_strategy(),
            seed in 0u64..1000,
        ) {
            let n = q.nrows();
            let c1 = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3 + seed as usize) % 11) as f64 * 0.3 - 1.0);
            let c2 = DMatrix::from_fn(n, n, |i, j| ((i * 5 + j + 2 * seed as usize) % 13) as f64 * 0.2);
            let g1 = gamma_of_controlled_rates(&q, &c1).gamma;
            let g2 = gamma_of_controlled_rates(&q, &c2).gamma;
            let g12 = gamma_of_controlled_rates(&q, &(&c1 + &c2)).gamma;
            for i in 0..n {
                prop_assert!(g12.row(i).sum().abs() < 1e-12);
                for j in 0..n {
                    if i != j {
                        prop_assert!((g12[(i, j)] - g1[(i, j)] - g2[(i, j)]).abs() < 1e-12);
                    }
                }
            }
            let g = gamma_of_constant_rates(&q).gamma;
            for i in 0..n {
                prop_assert!(g.row(i).sum().abs() < 1e-12);
            }
        }

        #[test]
        fn invariant_measure_solves_stationary_system(q in generator_strategy()) {
            let mu = invariant_measure(&q).unwrap();
            prop_assert!(mu.residual < 1e-10);
            prop_assert!((mu.mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(mu.mu.iter().all(|&p| p > 0.0));
        }
    }

    /// Independent route: power iteration on the uniformized transition
    /// matrix `P = I + Q / r`.
    fn power_iteration(q: &DMatrix<f64>) -> Vec<f64> {
        let n = q.nrows();
        let r = (0..n).map(|i| -q[(i, i)]).fold(0.0, f64::max) * 1.1;
        let p = DMatrix::identity(n, n) + q / r;
        let mut v = DVector::from_element(n, 1.0 / n as f64).transpose();
        for _ in 0..200_000 {
            let next = &v * &p;
            if (&next - &v).amax() < 1e-16 {
                v = next;
                break;
            }
            v = next;
        }
        let s = v.sum();
        v.iter().map(|x| x / s).collect()
    }

    #[test]
    fn random_five_state_matches_power_iteration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut q = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(0.1..2.0));
            for i in 0..5 {
                q[(i, i)] = 0.0;
                let s = q.row(i).sum();
                q[(i, i)] = -s;
            }
            let mu = invariant_measure(&q).unwrap();
            assert!(mu.residual < 1e-10);
            let pi = power_iteration(&q);
            for (a, b) in mu.mu.iter().zip(&pi) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}
