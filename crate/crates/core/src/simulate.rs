//! Time stepping: the averaged ODE, the coupled slow–fast system with and
//! without controls, and deviation paths.
//!
//! The slow component is advanced by Euler–Maruyama on a uniform grid. The
//! switching process is simulated exactly between grid knots by thinning a
//! homogeneous candidate stream, with `X` frozen at the last knot while
//! rates are evaluated. Drift is accumulated piecewise over the regime
//! segments inside each step, so regime changes within a step are felt by
//! the drift immediately.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::model::RegimeModel;
use crate::poisson::averaged_drift;
use crate::rng::{self, Channel};

/// Uniform grid `t_k = k T / N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    /// Grid with step `dt`, which must divide `t_end` up to rounding.
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {t_end}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let n = (t_end / dt).round();
        if n < 1.0 || ((n * dt - t_end) / t_end).abs() > 1e-9 {
            return Err(Error::invalid(format!("dt = {dt} does not divide T = {t_end}")));
        }
        Self::with_steps(t_end, n as usize)
    }

    /// Finest grid whose step does not exceed `dt_max`.
    pub fn covering(t_end: f64, dt_max: f64) -> Result<Self> {
        if !(dt_max > 0.0 && dt_max.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {dt_max}")));
        }
        let n = (t_end / dt_max * (1.0 - 1e-12)).ceil().max(1.0);
        Self::with_steps(t_end, n as usize)
    }

    pub fn with_steps(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) || steps == 0 {
            return Err(Error::invalid("grid needs a positive horizon and at least one step"));
        }
        Ok(Self { t_end, steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            k as f64 * self.t_end / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// `min(1e-3, eps / 10)`: keeps the expected number of switches per step
/// small relative to the switching speed.
pub fn default_dt(eps: f64) -> f64 {
    (eps / 10.0).min(1e-3)
}

/// Solution of the averaged ODE on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedPath {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
}

impl AveragedPath {
    /// Linear interpolation in time, clamped to the grid.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.x[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.x[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        self.x[k]
            .iter()
            .zip(&self.x[k + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }
}

/// Classical RK4 for `dx = bbar(x) dt`.
pub fn solve_averaged(model: &RegimeModel, x0: &[f64], t_end: f64, dt: f64) -> Result<AveragedPath> {
    solve_averaged_on(model, x0, TimeGrid::new(t_end, dt)?)
}

pub fn solve_averaged_on(model: &RegimeModel, x0: &[f64], grid: TimeGrid) -> Result<AveragedPath> {
    if x0.len() != model.dim() {
        return Err(Error::invalid("x0 dimension does not match the model"));
    }
    let h = grid.dt();
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(grid.steps() + 1);
    out.push(x.clone());
    let axpy = |base: &[f64], s: f64, k: &[f64]| -> Vec<f64> {
        base.iter().zip(k).map(|(b, v)| b + s * v).collect()
    };
    for _ in 0..grid.steps() {
        let k1 = averaged_drift(model, &x)?;
        let k2 = averaged_drift(model, &axpy(&x, h / 2.0, &k1))?;
        let k3 = averaged_drift(model, &axpy(&x, h / 2.0, &k2))?;
        let k4 = averaged_drift(model, &axpy(&x, h, &k3))?;
        for r in 0..x.len() {
            x[r] += h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
        }
        out.push(x.clone());
    }
    Ok(AveragedPath {
        times: grid.times(),
        x: out,
    })
}

/// Accepted switch of the fast process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

/// A sampled trajectory of the coupled (or controlled) system.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Regime at each grid time, right-continuous.
    pub y: Vec<usize>,
    pub jump_log: Vec<JumpEvent>,
    pub seed: u64,
    pub path_index: u64,
}

impl CoupledPath {
    /// Exact fraction of `[0, T]` spent in each regime.
    pub fn occupation_fractions(&self, regimes: usize) -> Vec<f64> {
        let t_end = *self.times.last().unwrap();
        let mut occ = vec![0.0; regimes];
        let mut current = self.y[0];
        let mut last = 0.0;
        for ev in &self.jump_log {
            occ[current] += ev.time - last;
            last = ev.time;
            current = ev.to;
        }
        occ[current] += t_end - last;
        occ.iter().map(|o| o / t_end).collect()
    }
}

/// Scaled deviation `(X - Xbar) / (sqrt(eps) h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationPath {
    pub times: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub h_eps: f64,
}

pub fn deviation_path(
    coupled: &CoupledPath,
    averaged: &AveragedPath,
    eps: f64,
    h_eps: f64,
) -> Result<DeviationPath> {
    if !(eps > 0.0 && h_eps > 0.0) {
        return Err(Error::invalid("eps and h must be positive"));
    }
    check_same_grid(&coupled.times, &averaged.times)?;
    let scale = 1.0 / (eps.sqrt() * h_eps);
    let eta = coupled
        .x
        .iter()
        .zip(&averaged.x)
        .map(|(x, xb)| x.iter().zip(xb).map(|(a, b)| (a - b) * scale).collect())
        .collect();
    Ok(DeviationPath {
        times: coupled.times.clone(),
        eta,
        epsilon: eps,
        h_eps,
    })
}

pub(crate) fn check_same_grid(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!("{} vs {} knots", a.len(), b.len())));
    }
    let scale = a.last().copied().unwrap_or(1.0).abs().max(1.0);
    if let Some(k) = a.iter().zip(b).position(|(s, t)| (s - t).abs() > 1e-12 * scale) {
        return Err(Error::GridMismatch(format!(
            "knot {k}: {} vs {}",
            a[k], b[k]
        )));
    }
    Ok(())
}

/// Time-dependent controls in feedback form: the Brownian control follows
/// the current regime, the jump density of pair `(i, j)` is
/// `1 + sqrt(eps) h c_ij(t)` while in regime `i`.
pub trait ControlPolicy: Sync {
    /// Writes `u*_regime(t)` into `out`.
    fn brownian(&self, t: f64, regime: usize, out: &mut [f64]);

    /// `c*_ij(t)`.
    fn jump(&self, t: f64, i: usize, j: usize) -> f64;

    /// Infimum and supremum of `c*_ij(t)` over time and pairs.
    fn jump_range(&self) -> (f64, f64);
}

/// No control: recovers the uncontrolled dynamics.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullControls;

impl ControlPolicy for NullControls {
    fn brownian(&self, _t: f64, _regime: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn jump(&self, _t: f64, _i: usize, _j: usize) -> f64 {
        0.0
    }
    fn jump_range(&self) -> (f64, f64) {
        (0.0, 0.0)
    }
}

/// Time-constant controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantControls {
    /// `L x d`, row `i` is `u*_i`.
    pub u: DMatrix<f64>,
    /// `L x L`, diagonal ignored.
    pub c: DMatrix<f64>,
}

impl ConstantControls {
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            u: &self.u * alpha,
            c: &self.c * alpha,
        }
    }
}

fn off_diagonal_range(c: &DMatrix<f64>) -> (f64, f64) {
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            if i != j {
                lo = lo.min(c[(i, j)]);
                hi = hi.max(c[(i, j)]);
            }
        }
    }
    (lo, hi)
}

impl ControlPolicy for ConstantControls {
    fn brownian(&self, _t: f64, regime: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.u[(regime, k)];
        }
    }
    fn jump(&self, _t: f64, i: usize, j: usize) -> f64 {
        self.c[(i, j)]
    }
    fn jump_range(&self) -> (f64, f64) {
        off_diagonal_range(&self.c)
    }
}

/// Controls held constant on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseControls {
    pub times: Vec<f64>,
    pub knots: Vec<ConstantControls>,
}

impl PiecewiseControls {
    fn index(&self, t: f64) -> usize {
        self.times
            .partition_point(|&s| s <= t)
            .saturating_sub(1)
            .min(self.knots.len() - 1)
    }
}

impl ControlPolicy for PiecewiseControls {
    fn brownian(&self, t: f64, regime: usize, out: &mut [f64]) {
        self.knots[self.index(t)].brownian(t, regime, out)
    }
    fn jump(&self, t: f64, i: usize, j: usize) -> f64 {
        self.knots[self.index(t)].jump(t, i, j)
    }
    fn jump_range(&self) -> (f64, f64) {
        self.knots.iter().fold((0.0, 0.0), |(lo, hi), k| {
            let (a, b) = k.jump_range();
            (lo.min(a), hi.max(b))
        })
    }
}

/// Initial data and resolution of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSetup {
    pub eps: f64,
    pub x0: Vec<f64>,
    /// Zero-based initial regime.
    pub y0: usize,
    pub grid: TimeGrid,
}

impl SimSetup {
    pub fn new(eps: f64, x0: Vec<f64>, y0: usize, t_end: f64, dt: f64) -> Result<Self> {
        Ok(Self {
            eps,
            x0,
            y0,
            grid: TimeGrid::new(t_end, dt)?,
        })
    }

    fn check(&self, model: &RegimeModel) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("eps must be positive, got {}", self.eps)));
        }
        if self.x0.len() != model.dim() {
            return Err(Error::invalid("x0 dimension does not match the model"));
        }
        if self.y0 >= model.regimes() {
            return Err(Error::invalid(format!(
                "initial regime {} out of range for {} regimes",
                self.y0 + 1,
                model.regimes()
            )));
        }
        Ok(())
    }
}

/// Receives the state at every grid knot and every accepted switch.
pub trait PathObserver {
    fn knot(&mut self, k: usize, t: f64, x: &[f64], y: usize);

    fn jump(&mut self, _event: &JumpEvent) {}
}

struct Recorder {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    jumps: Vec<JumpEvent>,
}

impl PathObserver for Recorder {
    fn knot(&mut self, _k: usize, _t: f64, x: &[f64], y: usize) {
        self.x.push(x.to_vec());
        self.y.push(y);
    }
    fn jump(&mut self, event: &JumpEvent) {
        self.jumps.push(*event);
    }
}

/// Simulates one path of the coupled system.
pub fn simulate_coupled(model: &RegimeModel, setup: &SimSetup, seed: u64) -> Result<CoupledPath> {
    record(model, setup, 1.0, &NullControls, seed, 0)
}

/// Simulates one path of the controlled system with feedback controls.
pub fn simulate_controlled(
    model: &RegimeModel,
    setup: &SimSetup,
    h_eps: f64,
    controls: &dyn ControlPolicy,
    seed: u64,
) -> Result<CoupledPath> {
    record(model, setup, h_eps, controls, seed, 0)
}

/// Path `path_index` of the family generated by `seed`.
pub fn record(
    model: &RegimeModel,
    setup: &SimSetup,
    h_eps: f64,
    controls: &dyn ControlPolicy,
    seed: u64,
    path_index: u64,
) -> Result<CoupledPath> {
    let n = setup.grid.steps() + 1;
    let mut rec = Recorder {
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        jumps: Vec::new(),
    };
    run_path(model, setup, h_eps, controls, seed, path_index, &mut rec)?;
    Ok(CoupledPath {
        times: setup.grid.times(),
        x: rec.x,
        y: rec.y,
        jump_log: rec.jumps,
        seed,
        path_index,
    })
}

struct Scratch {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    u: Vec<f64>,
    velocity: Vec<f64>,
}

impl Scratch {
    /// Drift plus control drift in regime `y` with `x` frozen.
    fn velocity(
        &mut self,
        model: &RegimeModel,
        controls: &dyn ControlPolicy,
        control_scale: f64,
        x: &[f64],
        y: usize,
        t: f64,
    ) {
        let d = x.len();
        model.drift_into(x, y, &mut self.drift);
        self.velocity.copy_from_slice(&self.drift);
        controls.brownian(t, y, &mut self.u);
        if self.u.iter().any(|&v| v != 0.0) {
            model.diffusion_into(x, y, &mut self.sigma);
            for r in 0..d {
                let su: f64 = (0..d).map(|c| self.sigma[r * d + c] * self.u[c]).sum();
                self.velocity[r] += control_scale * su;
            }
        }
    }
}

/// Core stepping loop shared by all simulators.
pub fn run_path(
    model: &RegimeModel,
    setup: &SimSetup,
    h_eps: f64,
    controls: &dyn ControlPolicy,
    seed: u64,
    path_index: u64,
    observer: &mut impl PathObserver,
) -> Result<()> {
    setup.check(model)?;
    let d = model.dim();
    let grid = setup.grid;
    let eps = setup.eps;
    let sqrt_eps = eps.sqrt();
    let control_scale = sqrt_eps * h_eps;

    let (c_lo, c_hi) = controls.jump_range();
    if 1.0 + control_scale * c_lo < 0.0 {
        let (i, j) = model.support().first().copied().unwrap_or((0, 0));
        return Err(Error::NegativeJumpControl {
            i,
            j,
            value: 1.0 + control_scale * c_lo,
        });
    }
    let band = model.zeta() * (1.0 + control_scale * c_hi).max(1.0);
    let targets: Vec<Vec<usize>> = (0..model.regimes())
        .map(|i| model.targets(i).collect())
        .collect();
    let candidate_rate = |i: usize| targets[i].len() as f64 * band / eps;

    let mut gauss = rng::stream(seed, path_index, Channel::Gaussian);
    let mut jumps = rng::stream(seed, path_index, Channel::Jump);
    let next_exp = |rate: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        if rate > 0.0 {
            let e: f64 = rng.sample(Exp1);
            e / rate
        } else {
            f64::INFINITY
        }
    };

    let mut x = setup.x0.clone();
    let mut y = setup.y0;
    let mut scratch = Scratch {
        drift: vec![0.0; d],
        sigma: vec![0.0; d * d],
        u: vec![0.0; d],
        velocity: vec![0.0; d],
    };
    let mut increment = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut next_candidate = next_exp(candidate_rate(y), &mut jumps);

    for k in 0..grid.steps() {
        let t0 = grid.time(k);
        let t1 = grid.time(k + 1);
        observer.knot(k, t0, &x, y);

        let y_left = y;
        increment.fill(0.0);
        scratch.velocity(model, controls, control_scale, &x, y, t0);
        let mut seg_start = t0;
        while next_candidate < t1 {
            let tau = next_candidate;
            for r in 0..d {
                increment[r] += scratch.velocity[r] * (tau - seg_start);
            }
            seg_start = tau;

            let tgt = &targets[y];
            let mark = jumps.gen::<f64>() * band * tgt.len() as f64;
            let slot = ((mark / band) as usize).min(tgt.len() - 1);
            let offset = mark - slot as f64 * band;
            let j = tgt[slot];
            let q = model.rate(&x, y, j);
            let phi = 1.0 + control_scale * controls.jump(tau, y, j);
            if phi < 0.0 {
                return Err(Error::NegativeJumpControl { i: y, j, value: phi });
            }
            let width = q * phi;
            if width > band || q > model.zeta() {
                return Err(Error::ZetaViolated {
                    x: x.clone(),
                    i: y,
                    j,
                    rate: q,
                    bound: model.zeta(),
                });
            }
            if offset < width {
                let event = JumpEvent {
                    time: tau,
                    from: y,
                    to: j,
                };
                observer.jump(&event);
                y = j;
                scratch.velocity(model, controls, control_scale, &x, y, tau);
            }
            next_candidate = tau + next_exp(candidate_rate(y), &mut jumps);
        }
        for r in 0..d {
            increment[r] += scratch.velocity[r] * (t1 - seg_start);
        }

        model.diffusion_into(&x, y_left, &mut scratch.sigma);
        if scratch.sigma.iter().any(|&s| s != 0.0) {
            let sqrt_dt = (t1 - t0).sqrt();
            for w in noise.iter_mut() {
                let z: f64 = gauss.sample(StandardNormal);
                *w = z * sqrt_dt;
            }
            for r in 0..d {
                let sw: f64 = (0..d).map(|c| scratch.sigma[r * d + c] * noise[c]).sum();
                increment[r] += sqrt_eps * sw;
            }
        }
        for r in 0..d {
            x[r] += increment[r];
        }
    }
    observer.knot(grid.steps(), grid.t_end(), &x, y);
    Ok(())
}
