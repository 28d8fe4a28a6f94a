//! Random instances shared by the integration suites.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use switching_mdp::model::{Coefficients, RegimeModel};

/// Affine drifts, constant diffusions and rates `alpha + beta tanh(x_1)`.
#[derive(Debug, Clone)]
pub struct RandomCoefficients {
    pub d: usize,
    pub l: usize,
    /// Per regime, row-major `d x d`.
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    /// Per regime, row-major `d x d`.
    pub sigma: Vec<Vec<f64>>,
    /// Row-major `l x l`, zero on the diagonal and off the support.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Coefficients for RandomCoefficients {
    fn dim(&self) -> usize {
        self.d
    }
    fn regimes(&self) -> usize {
        self.l
    }
    fn drift(&self, x: &[f64], i: usize, out: &mut [f64]) {
        let d = self.d;
        for r in 0..d {
            out[r] = self.c[i][r] + (0..d).map(|k| self.a[i][r * d + k] * x[k]).sum::<f64>();
        }
    }
    fn diffusion(&self, _x: &[f64], i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.sigma[i]);
    }
    fn rate(&self, x: &[f64], i: usize, j: usize) -> f64 {
        let k = i * self.l + j;
        self.alpha[k] + self.beta[k] * x[0].tanh()
    }
}

impl RandomCoefficients {
    pub fn into_model(self) -> RegimeModel {
        let l = self.l;
        let mut support = Vec::new();
        let mut sup = 0.0f64;
        for i in 0..l {
            for j in 0..l {
                let k = i * l + j;
                if i != j && self.alpha[k] > 0.0 {
                    support.push((i, j));
                    sup = sup.max(self.alpha[k] + self.beta[k].abs());
                }
            }
        }
        RegimeModel::new("random", self, sup + 1.0, support).unwrap()
    }
}

/// Strongly connected support: a random cycle plus each other pair with
/// probability `density`.
pub fn random_support(rng: &mut impl Rng, l: usize, density: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..l).collect();
    for k in (1..l).rev() {
        order.swap(k, rng.gen_range(0..=k));
    }
    let mut on = vec![false; l * l];
    for k in 0..l {
        on[order[k] * l + order[(k + 1) % l]] = true;
    }
    for i in 0..l {
        for j in 0..l {
            if i != j && rng.gen_bool(density) {
                on[i * l + j] = true;
            }
        }
    }
    on
}

/// Random irreducible generator with rates in `[0.1, 3)`.
pub fn random_generator(rng: &mut impl Rng, l: usize) -> DMatrix<f64> {
    let density = rng.gen_range(0.0..1.0);
    let on = random_support(rng, l, density);
    let mut q = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in 0..l {
            if on[i * l + j] {
                q[(i, j)] = rng.gen_range(0.1..3.0);
            }
        }
        let s = q.row(i).sum();
        q[(i, i)] = -s;
    }
    q
}

/// Random model; with `degenerate` some diffusions vanish.
pub fn random_model(rng: &mut impl Rng, l: usize, d: usize, degenerate: bool) -> RegimeModel {
    let on = random_support(rng, l, 0.5);
    let mut alpha = vec![0.0; l * l];
    let mut beta = vec![0.0; l * l];
    for k in 0..l * l {
        if on[k] {
            alpha[k] = rng.gen_range(0.2..3.0);
            beta[k] = rng.gen_range(-0.9..0.9) * alpha[k];
        }
    }
    let mut sigma = Vec::with_capacity(l);
    for _ in 0..l {
        if degenerate && rng.gen_bool(0.5) {
            sigma.push(vec![0.0; d * d]);
        } else {
            sigma.push((0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
    }
    RandomCoefficients {
        d,
        l,
        a: (0..l).map(|_| (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        c: (0..l).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
        sigma,
        alpha,
        beta,
    }
    .into_model()
}

/// Model with a fixed generator, drift `c_i` and no diffusion.
pub fn constant_model(q: &DMatrix<f64>, drifts: &[Vec<f64>]) -> RegimeModel {
    let l = q.nrows();
    let d = drifts[0].len();
    let mut alpha = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            if i != j {
                alpha[i * l + j] = q[(i, j)];
            }
        }
    }
    RandomCoefficients {
        d,
        l,
        a: vec![vec![0.0; d * d]; l],
        c: drifts.to_vec(),
        sigma: vec![vec![0.0; d * d]; l],
        alpha,
        beta: vec![0.0; l * l],
    }
    .into_model()
}

/// `Phi(i) = int_0^inf (exp(Q t) btilde)_i dt` by composite Simpson on a
/// grid fine enough for `|Q| h` to be small, stopped once the integrand
/// has decayed below `1e-14`.
pub fn poisson_by_quadrature(q: &DMatrix<f64>, btilde: &DMatrix<f64>) -> DMatrix<f64> {
    let rate = (0..q.nrows()).map(|i| -q[(i, i)]).fold(0.0, f64::max);
    let h = 1e-2 / rate.max(1.0);
    let step = (q * h).exp();
    let mut f = btilde.clone();
    let mut acc = btilde.clone();
    let mut k = 0usize;
    loop {
        let next = &step * &f;
        let mid = &step * &next;
        acc += &next * 4.0 + &mid * 2.0;
        f = mid;
        k += 2;
        if f.amax() < 1e-14 || k > 50_000_000 {
            break;
        }
    }
    // the last term was added with weight 2 instead of 1
    (acc - &f) * (h / 3.0)
}
