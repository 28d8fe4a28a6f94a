//! Coefficients of a slow–fast regime-switching system.
//!
//! The slow component `X` lives in `R^d` and solves
//! `dX = b(X, Y) dt + sqrt(eps) sigma(X, Y) dW`; the fast component `Y`
//! jumps on `{0, .., L-1}` with rates `q_ij(X) / eps`.
//!
//! Regime indices are zero-based throughout the library. Files and the
//! command line use one-based regimes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::chain;
use crate::error::{Error, Result};

/// Pointwise coefficient evaluators for one system.
///
/// Implementations must be pure: no interior mutability, identical inputs
/// give bit-identical outputs. They are called concurrently from many
/// workers.
pub trait Coefficients: Send + Sync {
    /// Dimension `d` of the slow process.
    fn dim(&self) -> usize;

    /// Number of regimes `L`.
    fn regimes(&self) -> usize;

    /// Writes `b(x, i)` into `out` (length `d`).
    fn drift(&self, x: &[f64], i: usize, out: &mut [f64]);

    /// Writes `sigma(x, i)` into `out`, row-major `d x d`.
    fn diffusion(&self, x: &[f64], i: usize, out: &mut [f64]);

    /// Off-diagonal jump rate `q_ij(x)`, `i != j`.
    fn rate(&self, x: &[f64], i: usize, j: usize) -> f64;

    /// Writes the full generator `Q(x)` row-major into `out` (length `L*L`).
    fn generator(&self, x: &[f64], out: &mut [f64]) {
        let l = self.regimes();
        for i in 0..l {
            let mut total = 0.0;
            for j in 0..l {
                if i != j {
                    let q = self.rate(x, i, j);
                    out[i * l + j] = q;
                    total += q;
                }
            }
            out[i * l + i] = -total;
        }
    }
}

/// A slow–fast system: coefficient evaluators plus the jump-intensity
/// bound `zeta` and the support of the jump rates.
#[derive(Clone)]
pub struct RegimeModel {
    name: String,
    coefficients: Arc<dyn Coefficients>,
    zeta: f64,
    support: Vec<(usize, usize)>,
}

impl fmt::Debug for RegimeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegimeModel")
            .field("name", &self.name)
            .field("d", &self.dim())
            .field("regimes", &self.regimes())
            .field("zeta", &self.zeta)
            .field("support", &self.support)
            .finish()
    }
}

impl RegimeModel {
    /// Wraps user coefficients. `support` lists the ordered pairs `(i, j)`,
    /// `i != j`, whose rate is positive somewhere; `zeta` must bound every
    /// rate by `zeta - 1`.
    pub fn new(
        name: impl Into<String>,
        coefficients: impl Coefficients + 'static,
        zeta: f64,
        support: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let l = coefficients.regimes();
        if coefficients.dim() == 0 || l == 0 {
            return Err(Error::invalid("dimension and regime count must be positive"));
        }
        if !(zeta.is_finite() && zeta > 0.0) {
            return Err(Error::invalid(format!("zeta must be positive, got {zeta}")));
        }
        for &(i, j) in &support {
            if i == j || i >= l || j >= l {
                return Err(Error::invalid(format!("bad support pair ({i}, {j})")));
            }
        }
        let mut support = support;
        support.sort_unstable();
        support.dedup();
        Ok(Self {
            name: name.into(),
            coefficients: Arc::new(coefficients),
            zeta,
            support,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.coefficients.dim()
    }

    pub fn regimes(&self) -> usize {
        self.coefficients.regimes()
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn support(&self) -> &[(usize, usize)] {
        &self.support
    }

    /// Support pairs leaving regime `i`, in increasing target order.
    pub fn targets(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().filter(move |p| p.0 == i).map(|p| p.1)
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coefficients.as_ref()
    }

    pub fn drift_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        self.coefficients.drift(x, i, out)
    }

    pub fn diffusion_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        self.coefficients.diffusion(x, i, out)
    }

    pub fn rate(&self, x: &[f64], i: usize, j: usize) -> f64 {
        self.coefficients.rate(x, i, j)
    }

    pub fn drift(&self, x: &[f64], i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.drift_into(x, i, &mut out);
        out
    }

    pub fn diffusion(&self, x: &[f64], i: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        self.diffusion_into(x, i, &mut out);
        DMatrix::from_row_slice(d, d, &out)
    }

    pub fn generator(&self, x: &[f64]) -> DMatrix<f64> {
        let l = self.regimes();
        let mut out = vec![0.0; l * l];
        self.coefficients.generator(x, &mut out);
        DMatrix::from_row_slice(l, l, &out)
    }
}

/// Parameter map for the built-in models.
pub type Params = BTreeMap<String, f64>;

/// Names accepted by [`build_builtin`].
pub const BUILTIN_MODELS: &[&str] = &[
    "two-state-constant",
    "two-state-linear",
    "two-state-tanh",
    "three-state-tanh",
    "linear-2d",
    "single-regime",
];

struct ParamReader<'a> {
    model: &'a str,
    given: &'a Params,
    used: Vec<&'static str>,
}

impl<'a> ParamReader<'a> {
    fn new(model: &'a str, given: &'a Params) -> Self {
        Self {
            model,
            given,
            used: Vec::new(),
        }
    }

    fn get(&mut self, key: &'static str, default: f64) -> Result<f64> {
        self.used.push(key);
        let value = self.given.get(key).copied().unwrap_or(default);
        if !value.is_finite() {
            return Err(out_of_range(key, value, "must be finite"));
        }
        Ok(value)
    }

    fn nonneg(&mut self, key: &'static str, default: f64) -> Result<f64> {
        let v = self.get(key, default)?;
        if v < 0.0 {
            return Err(out_of_range(key, v, "must be non-negative"));
        }
        Ok(v)
    }

    fn positive(&mut self, key: &'static str, default: f64) -> Result<f64> {
        let v = self.get(key, default)?;
        if v <= 0.0 {
            return Err(out_of_range(key, v, "must be positive"));
        }
        Ok(v)
    }

    fn dim(&mut self, default: usize) -> Result<usize> {
        let v = self.get("d", default as f64)?;
        if v < 1.0 || v > 64.0 || v.fract() != 0.0 {
            return Err(out_of_range("d", v, "must be an integer in 1..=64"));
        }
        Ok(v as usize)
    }

    fn finish(self) -> Result<()> {
        for key in self.given.keys() {
            if !self.used.iter().any(|u| u == key) {
                return Err(Error::UnknownParameter {
                    model: self.model.to_string(),
                    param: key.clone(),
                });
            }
        }
        Ok(())
    }
}

fn out_of_range(name: &str, value: f64, reason: &str) -> Error {
    Error::ParameterOutOfRange {
        name: name.to_string(),
        value,
        reason: reason.to_string(),
    }
}

/// Two regimes, constant rates, drift `b_i * 1`, diffusion `sigma * I`.
#[derive(Debug, Clone)]
pub struct ConstantTwoState {
    pub d: usize,
    pub q12: f64,
    pub q21: f64,
    pub b: [f64; 2],
    pub sigma: f64,
}

impl Coefficients for ConstantTwoState {
    fn dim(&self) -> usize {
        self.d
    }
    fn regimes(&self) -> usize {
        2
    }
    fn drift(&self, _x: &[f64], i: usize, out: &mut [f64]) {
        out.fill(self.b[i]);
    }
    fn diffusion(&self, _x: &[f64], _i: usize, out: &mut [f64]) {
        scaled_identity(self.d, self.sigma, out);
    }
    fn rate(&self, _x: &[f64], i: usize, j: usize) -> f64 {
        match (i, j) {
            (0, 1) => self.q12,
            (1, 0) => self.q21,
            _ => 0.0,
        }
    }
}

/// Two regimes, constant rates, drift `a_i x + b_i * 1`, diffusion
/// `sigma_i * I`. Satisfies the bounded-derivative growth condition.
#[derive(Debug, Clone)]
pub struct LinearTwoState {
    pub d: usize,
    pub q12: f64,
    pub q21: f64,
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub sigma: [f64; 2],
}

impl Coefficients for LinearTwoState {
    fn dim(&self) -> usize {
        self.d
    }
    fn regimes(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], i: usize, out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.a[i] * xi + self.b[i];
        }
    }
    fn diffusion(&self, _x: &[f64], i: usize, out: &mut [f64]) {
        scaled_identity(self.d, self.sigma[i], out);
    }
    fn rate(&self, x: &[f64], i: usize, j: usize) -> f64 {
        ConstantTwoState {
            d: x.len(),
            q12: self.q12,
            q21: self.q21,
            b: [0.0; 2],
            sigma: 0.0,
        }
        .rate(x, i, j)
    }
}

/// `L` regimes with rates `alpha_ij + beta_ij tanh(x_1)`, drift
/// `b_i * 1 - kappa x` and diffusion `sigma_i * I`.
#[derive(Debug, Clone)]
pub struct TanhRates {
    pub d: usize,
    /// Row-major `L x L`; diagonal ignored.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub b: Vec<f64>,
    pub kappa: f64,
    pub sigma: Vec<f64>,
}

impl Coefficients for TanhRates {
    fn dim(&self) -> usize {
        self.d
    }
    fn regimes(&self) -> usize {
        self.b.len()
    }
    fn drift(&self, x: &[f64], i: usize, out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.b[i] - self.kappa * xi;
        }
    }
    fn diffusion(&self, _x: &[f64], i: usize, out: &mut [f64]) {
        scaled_identity(self.d, self.sigma[i], out);
    }
    fn rate(&self, x: &[f64], i: usize, j: usize) -> f64 {
        let l = self.regimes();
        if i == j {
            return 0.0;
        }
        self.alpha[i * l + j] + self.beta[i * l + j] * x[0].tanh()
    }
}

/// Two-dimensional linear drift `A_i x + c_i` in two regimes with constant
/// rates and diffusion `sigma_i * I`.
#[derive(Debug, Clone)]
pub struct Linear2d {
    pub a: [[[f64; 2]; 2]; 2],
    pub c: [[f64; 2]; 2],
    pub q12: f64,
    pub q21: f64,
    pub sigma: [f64; 2],
}

impl Coefficients for Linear2d {
    fn dim(&self) -> usize {
        2
    }
    fn regimes(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], i: usize, out: &mut [f64]) {
        let a = &self.a[i];
        out[0] = a[0][0] * x[0] + a[0][1] * x[1] + self.c[i][0];
        out[1] = a[1][0] * x[0] + a[1][1] * x[1] + self.c[i][1];
    }
    fn diffusion(&self, _x: &[f64], i: usize, out: &mut [f64]) {
        scaled_identity(2, self.sigma[i], out);
    }
    fn rate(&self, _x: &[f64], i: usize, j: usize) -> f64 {
        match (i, j) {
            (0, 1) => self.q12,
            (1, 0) => self.q21,
            _ => 0.0,
        }
    }
}

/// One regime: a plain diffusion with constant drift and `sigma * I`.
#[derive(Debug, Clone)]
pub struct SingleRegime {
    pub d: usize,
    pub b: f64,
    pub sigma: f64,
}

impl Coefficients for SingleRegime {
    fn dim(&self) -> usize {
        self.d
    }
    fn regimes(&self) -> usize {
        1
    }
    fn drift(&self, _x: &[f64], _i: usize, out: &mut [f64]) {
        out.fill(self.b);
    }
    fn diffusion(&self, _x: &[f64], _i: usize, out: &mut [f64]) {
        scaled_identity(self.d, self.sigma, out);
    }
    fn rate(&self, _x: &[f64], _i: usize, _j: usize) -> f64 {
        0.0
    }
}

fn scaled_identity(d: usize, s: f64, out: &mut [f64]) {
    out.fill(0.0);
    for k in 0..d {
        out[k * d + k] = s;
    }
}

fn all_pairs(l: usize) -> Vec<(usize, usize)> {
    (0..l)
        .flat_map(|i| (0..l).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Instantiates a named model from the built-in zoo. Missing parameters
/// take documented defaults; unknown parameters are rejected.
///
/// | name | parameters (defaults) |
/// |---|---|
/// | `two-state-constant` | `q12` (1), `q21` (2), `b1` (1), `b2` (-2), `sigma` (0), `d` (1) |
/// | `two-state-linear` | `q12` (1), `q21` (1), `a1` (-1), `a2` (-1), `b1` (0), `b2` (0), `sigma1` (0), `sigma2` (0), `d` (1) |
/// | `two-state-tanh` | `alpha12` (1), `beta12` (0.5), `alpha21` (2), `beta21` (-1), `b1` (1), `b2` (-2), `kappa` (0), `sigma` (0), `d` (1) |
/// | `three-state-tanh` | `alphaIJ`, `betaIJ` for `I != J` in 1..=3, `b1..b3`, `kappa` (0.5), `sigma` (0.3), `d` (1) |
/// | `linear-2d` | `a1_11`..`a2_22`, `c1_1`..`c2_2`, `q12` (1), `q21` (1.5), `sigma1` (0.5), `sigma2` (0.2) |
/// | `single-regime` | `b` (0), `sigma` (1), `d` (1) |
///
/// Rates must keep every support pair strictly positive for all `x`
/// (`alpha > |beta|` for tanh rates), so each zoo generator is irreducible
/// everywhere. `zeta` is the analytic supremum of the rates plus one.
pub fn build_builtin(name: &str, params: &Params) -> Result<RegimeModel> {
    let mut p = ParamReader::new(name, params);
    let model = match name {
        "two-state-constant" => {
            let c = ConstantTwoState {
                q12: p.positive("q12", 1.0)?,
                q21: p.positive("q21", 2.0)?,
                b: [p.get("b1", 1.0)?, p.get("b2", -2.0)?],
                sigma: p.nonneg("sigma", 0.0)?,
                d: p.dim(1)?,
            };
            let zeta = c.q12.max(c.q21) + 1.0;
            RegimeModel::new(name, c, zeta, all_pairs(2))?
        }
        "two-state-linear" => {
            let c = LinearTwoState {
                q12: p.positive("q12", 1.0)?,
                q21: p.positive("q21", 1.0)?,
                a: [p.get("a1", -1.0)?, p.get("a2", -1.0)?],
                b: [p.get("b1", 0.0)?, p.get("b2", 0.0)?],
                sigma: [p.nonneg("sigma1", 0.0)?, p.nonneg("sigma2", 0.0)?],
                d: p.dim(1)?,
            };
            let zeta = c.q12.max(c.q21) + 1.0;
            RegimeModel::new(name, c, zeta, all_pairs(2))?
        }
        "two-state-tanh" => {
            let alpha12 = p.get("alpha12", 1.0)?;
            let beta12 = p.get("beta12", 0.5)?;
            let alpha21 = p.get("alpha21", 2.0)?;
            let beta21 = p.get("beta21", -1.0)?;
            check_tanh_pair("alpha12", alpha12, beta12)?;
            check_tanh_pair("alpha21", alpha21, beta21)?;
            let sigma = p.nonneg("sigma", 0.0)?;
            let c = TanhRates {
                alpha: vec![0.0, alpha12, alpha21, 0.0],
                beta: vec![0.0, beta12, beta21, 0.0],
                b: vec![p.get("b1", 1.0)?, p.get("b2", -2.0)?],
                kappa: p.nonneg("kappa", 0.0)?,
                sigma: vec![sigma; 2],
                d: p.dim(1)?,
            };
            let zeta = (alpha12 + beta12.abs()).max(alpha21 + beta21.abs()) + 1.0;
            RegimeModel::new(name, c, zeta, all_pairs(2))?
        }
        "three-state-tanh" => {
            const KEYS: [(&str, &str, f64, f64); 6] = [
                ("alpha12", "beta12", 1.0, 0.4),
                ("alpha13", "beta13", 0.5, -0.2),
                ("alpha21", "beta21", 0.8, 0.3),
                ("alpha23", "beta23", 1.2, -0.5),
                ("alpha31", "beta31", 1.5, 0.6),
                ("alpha32", "beta32", 0.7, 0.2),
            ];
            const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
            let mut alpha = vec![0.0; 9];
            let mut beta = vec![0.0; 9];
            let mut sup = 0.0f64;
            for ((ak, bk, ad, bd), (i, j)) in KEYS.into_iter().zip(PAIRS) {
                let a = p.get(ak, ad)?;
                let b = p.get(bk, bd)?;
                check_tanh_pair(ak, a, b)?;
                alpha[i * 3 + j] = a;
                beta[i * 3 + j] = b;
                sup = sup.max(a + b.abs());
            }
            let sigma = p.nonneg("sigma", 0.3)?;
            let c = TanhRates {
                alpha,
                beta,
                b: vec![p.get("b1", 1.0)?, p.get("b2", -1.0)?, p.get("b3", 0.5)?],
                kappa: p.nonneg("kappa", 0.5)?,
                sigma: vec![sigma; 3],
                d: p.dim(1)?,
            };
            RegimeModel::new(name, c, sup + 1.0, all_pairs(3))?
        }
        "linear-2d" => {
            let c = Linear2d {
                a: [
                    [
                        [p.get("a1_11", -1.0)?, p.get("a1_12", 0.5)?],
                        [p.get("a1_21", 0.0)?, p.get("a1_22", -1.0)?],
                    ],
                    [
                        [p.get("a2_11", -0.5)?, p.get("a2_12", 0.0)?],
                        [p.get("a2_21", -0.5)?, p.get("a2_22", -2.0)?],
                    ],
                ],
                c: [
                    [p.get("c1_1", 1.0)?, p.get("c1_2", 0.0)?],
                    [p.get("c2_1", -1.0)?, p.get("c2_2", 0.5)?],
                ],
                q12: p.positive("q12", 1.0)?,
                q21: p.positive("q21", 1.5)?,
                sigma: [p.nonneg("sigma1", 0.5)?, p.nonneg("sigma2", 0.2)?],
            };
            let zeta = c.q12.max(c.q21) + 1.0;
            RegimeModel::new(name, c, zeta, all_pairs(2))?
        }
        "single-regime" => {
            let c = SingleRegime {
                b: p.get("b", 0.0)?,
                sigma: p.nonneg("sigma", 1.0)?,
                d: p.dim(1)?,
            };
            RegimeModel::new(name, c, 1.0, Vec::new())?
        }
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    p.finish()?;
    Ok(model)
}

fn check_tanh_pair(key: &str, alpha: f64, beta: f64) -> Result<()> {
    if alpha <= beta.abs() {
        return Err(out_of_range(
            key,
            alpha,
            &format!("alpha must exceed |beta| = {} to keep the rate positive", beta.abs()),
        ));
    }
    Ok(())
}

/// Rate threshold below which a transition is treated as absent.
pub const RATE_THRESHOLD: f64 = 1e-12;

/// Sampled diagnostics for the regularity and ergodicity assumptions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelValidationReport {
    /// Max difference quotient of `b`.
    pub lipschitz_drift: f64,
    /// Max difference quotient of `sigma` (Frobenius norm).
    pub lipschitz_diffusion: f64,
    /// Max difference quotient of `Q` in the row-l1 norm.
    pub lipschitz_generator: f64,
    /// Sampled `(lower, upper)` bounds of the rates over the support.
    pub rate_bounds: (f64, f64),
    pub irreducible_everywhere: bool,
    /// Smallest invariant-measure entry over irreducible samples.
    pub min_invariant_mass: f64,
    /// Every sampled rate stayed below `zeta - 1`.
    pub zeta_respected: bool,
}

/// Estimates the regularity constants and checks the generator structure
/// at each sample point.
pub fn validate_model(
    model: &RegimeModel,
    samples: &[Vec<f64>],
    h_fd: f64,
) -> Result<ModelValidationReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no sample points"));
    }
    if !(h_fd > 0.0 && h_fd.is_finite()) {
        return Err(Error::invalid(format!("h_fd must be positive, got {h_fd}")));
    }
    let d = model.dim();
    let l = model.regimes();
    let mut report = ModelValidationReport {
        lipschitz_drift: 0.0,
        lipschitz_diffusion: 0.0,
        lipschitz_generator: 0.0,
        rate_bounds: (f64::INFINITY, 0.0),
        irreducible_everywhere: true,
        min_invariant_mass: f64::INFINITY,
        zeta_respected: true,
    };

    for x in samples {
        if x.len() != d {
            return Err(Error::invalid(format!(
                "sample has dimension {}, model has {d}",
                x.len()
            )));
        }
        let q = model.generator(x);
        check_generator(&q, x)?;

        for &(i, j) in model.support() {
            let r = q[(i, j)];
            report.rate_bounds.0 = report.rate_bounds.0.min(r);
            report.rate_bounds.1 = report.rate_bounds.1.max(r);
            if r > model.zeta() - 1.0 {
                report.zeta_respected = false;
            }
        }

        if chain::is_irreducible(&q, RATE_THRESHOLD) {
            let mu = chain::invariant_measure(&q).map_err(|e| e.at_point(x))?;
            let m = mu.mu.iter().copied().fold(f64::INFINITY, f64::min);
            report.min_invariant_mass = report.min_invariant_mass.min(m);
        } else {
            report.irreducible_everywhere = false;
        }

        let mut shifted = x.clone();
        for k in 0..d {
            shifted[k] = x[k] + h_fd;
            for i in 0..l {
                let db: f64 = model
                    .drift(&shifted, i)
                    .iter()
                    .zip(model.drift(x, i))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                report.lipschitz_drift = report.lipschitz_drift.max(db / h_fd);
                let ds = (model.diffusion(&shifted, i) - model.diffusion(x, i)).norm();
                report.lipschitz_diffusion = report.lipschitz_diffusion.max(ds / h_fd);
            }
            let dq = model.generator(&shifted) - &q;
            let l1 = (0..l)
                .map(|i| (0..l).filter(|&j| j != i).map(|j| dq[(i, j)].abs()).sum::<f64>())
                .fold(0.0, f64::max);
            report.lipschitz_generator = report.lipschitz_generator.max(l1 / h_fd);
            shifted[k] = x[k];
        }
    }
    if model.support().is_empty() {
        report.rate_bounds = (0.0, 0.0);
    }
    if !report.min_invariant_mass.is_finite() {
        report.min_invariant_mass = 0.0;
    }
    Ok(report)
}

/// Row sums within `1e-10`, non-negative off-diagonals.
fn check_generator(q: &DMatrix<f64>, x: &[f64]) -> Result<()> {
    for i in 0..q.nrows() {
        let row = q.row(i);
        if let Some(j) = (0..q.ncols()).find(|&j| j != i && row[j] < 0.0) {
            return Err(Error::InvalidGenerator {
                x: x.to_vec(),
                row: i,
                detail: format!("has negative off-diagonal entry {} in column {j}", row[j]),
            });
        }
        let sum: f64 = row.iter().sum();
        if sum.abs() > 1e-10 {
            return Err(Error::InvalidGenerator {
                x: x.to_vec(),
                row: i,
                detail: format!("sums to {sum:e}"),
            });
        }
    }
    Ok(())
}
