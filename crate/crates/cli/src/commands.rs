//! The five experiment drivers. Each writes its CSV files into the output
//! directory and returns their paths.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use switching_mdp::mc::{deviation_scale, mdp_scan};
use switching_mdp::model::validate_model;
use switching_mdp::poisson::{self, default_fd_step};
use switching_mdp::rate::{min_rate_with_terminal, rate_functional};
use switching_mdp::simulate::{
    deviation_path, simulate_coupled, solve_averaged_on, AveragedPath, SimSetup, TimeGrid,
};

use crate::config::{Experiment, Knots};
use crate::csvio::{parse_table, real, CsvWriter, Table};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Simulate,
    Rate,
    Mc,
    Validate,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 picks the number of cores.
    pub workers: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Loads the config, applies the overrides and runs `command` on a
/// dedicated worker pool.
pub fn run(command: Command, config: &Path, options: &RunOptions) -> CliResult<Vec<PathBuf>> {
    let experiment = Experiment::load(config, options.seed)?;
    let out = options.out.clone().unwrap_or_else(|| experiment.output_dir());
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {} workers: {e}", options.workers)))?;
    pool.install(|| match command {
        Command::Analyze => run_analyze(&experiment, &out),
        Command::Simulate => run_simulate(&experiment, &out),
        Command::Rate => run_rate(&experiment, &out),
        Command::Mc => run_mc(&experiment, &out),
        Command::Validate => run_validate(&experiment, &out),
    })
}

fn names(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |k| format!("{prefix}_{k}"))
}

fn pair_names(prefix: &str, rows: usize, cols: usize) -> impl Iterator<Item = String> + '_ {
    (1..=rows).flat_map(move |i| (1..=cols).map(move |k| format!("{prefix}_{i}_{k}")))
}

fn averaged(exp: &Experiment, grid: TimeGrid) -> CliResult<AveragedPath> {
    solve_averaged_on(&exp.model, &exp.config.x0, grid)
        .map_err(|e| CliError::core("averaged ODE", e))
}

fn main_grid(exp: &Experiment) -> CliResult<TimeGrid> {
    TimeGrid::new(exp.config.t_end, exp.config.dt).map_err(|e| CliError::core("time grid", e))
}

/// `analyze.csv`: averaged state, invariant measure, Poisson solution,
/// averaged drift, its Jacobian and the effective covariance at each knot.
pub fn run_analyze(exp: &Experiment, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = &exp.model;
    let (d, l) = (model.dim(), model.regimes());
    let t_end = exp.config.t_end;
    let knots = match exp.config.analyze.as_ref().map(|a| a.knots.clone()) {
        Some(Knots::Times(ts)) => ts,
        Some(Knots::Count(n)) => evenly(t_end, n),
        None => evenly(t_end, 11),
    };
    let path = averaged(exp, main_grid(exp)?)?;

    let mut columns = vec!["t".to_string()];
    columns.extend(names("x", d));
    columns.extend(names("mu", l));
    columns.extend(pair_names("phi", l, d));
    columns.extend(names("bbar", d));
    columns.extend(pair_names("grad", d, d));
    columns.extend(pair_names("lambda", d, d));

    let rows = knots
        .par_iter()
        .map(|&t| {
            let x = path.at(t);
            let context = || format!("analysis at t = {t}");
            let sol = poisson::solve_poisson(model, &x).map_err(|e| CliError::core(context(), e))?;
            let jac = poisson::jacobian_bbar(model, &x, default_fd_step(&x))
                .map_err(|e| CliError::core(context(), e))?;
            let cov = poisson::covariance_from_solution(model, &sol);
            let mut row = vec![real(t)];
            row.extend(x.iter().map(|&v| real(v)));
            row.extend(sol.mu.iter().map(|&v| real(v)));
            row.extend(row_major(&sol.phi));
            row.extend(sol.bbar.iter().map(|&v| real(v)));
            row.extend(row_major(&jac));
            row.extend(row_major(&cov.lambda));
            Ok(row)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut w = CsvWriter::new(&exp.hash, None, &columns);
    for row in &rows {
        w.row(row);
    }
    Ok(vec![w.write(&out.join("analyze.csv"))?])
}

fn evenly(t_end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|k| if k == n - 1 { t_end } else { t_end * k as f64 / (n - 1) as f64 })
        .collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<String> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |k| real(m[(i, k)])))
        .collect()
}

/// `path.csv` (t, x, one-based y), `jumps.csv` (t, from, to) and
/// `deviation.csv` (t, eta) for one path.
pub fn run_simulate(exp: &Experiment, out: &Path) -> CliResult<Vec<PathBuf>> {
    let block = exp
        .config
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::config("missing [simulate] block"))?;
    let model = &exp.model;
    let d = model.dim();
    let c = &exp.config;
    let setup = SimSetup::new(block.eps, c.x0.clone(), exp.y0(), c.t_end, c.dt)
        .map_err(|e| CliError::core("simulation setup", e))?;
    let path = simulate_coupled(model, &setup, block.seed)
        .map_err(|e| CliError::core("simulation", e))?;
    let avg = averaged(exp, setup.grid)?;
    let h_eps = deviation_scale(block.eps, block.h_exponent);
    let dev = deviation_path(&path, &avg, block.eps, h_eps)
        .map_err(|e| CliError::core("deviation", e))?;
    let seed = Some(block.seed);

    let mut columns = vec!["t".to_string()];
    columns.extend(names("x", d));
    columns.push("y".into());
    let mut w = CsvWriter::new(&exp.hash, seed, &columns);
    for ((t, x), y) in path.times.iter().zip(&path.x).zip(&path.y) {
        let mut row = vec![real(*t)];
        row.extend(x.iter().map(|&v| real(v)));
        row.push((y + 1).to_string());
        w.row(&row);
    }
    let path_file = w.write(&out.join("path.csv"))?;

    let mut w = CsvWriter::new(&exp.hash, seed, &["t".into(), "from".into(), "to".into()]);
    for ev in &path.jump_log {
        w.row(&[real(ev.time), (ev.from + 1).to_string(), (ev.to + 1).to_string()]);
    }
    let jumps_file = w.write(&out.join("jumps.csv"))?;

    let mut columns = vec!["t".to_string()];
    columns.extend(names("eta", d));
    let mut w = CsvWriter::new(&exp.hash, seed, &columns);
    for (t, eta) in dev.times.iter().zip(&dev.eta) {
        let mut row = vec![real(*t)];
        row.extend(eta.iter().map(|&v| real(v)));
        w.row(&row);
    }
    let dev_file = w.write(&out.join("deviation.csv"))?;
    Ok(vec![path_file, jumps_file, dev_file])
}

/// Grid of a table's `t` column, which must start at 0 and be uniform.
fn table_grid(table: &Table) -> CliResult<TimeGrid> {
    let t_col = table
        .column("t")
        .ok_or_else(|| CliError::config("path file has no `t` column"))?;
    let times: Vec<f64> = table.rows.iter().map(|r| r[t_col]).collect();
    if times.len() < 3 {
        return Err(CliError::config("path file needs at least 3 rows"));
    }
    if times[0] != 0.0 {
        return Err(CliError::config("path file must start at t = 0"));
    }
    let n = times.len() - 1;
    let grid = TimeGrid::with_steps(times[n], n).map_err(|e| CliError::core("path file", e))?;
    for (k, &t) in times.iter().enumerate() {
        if (t - grid.time(k)).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(CliError::config(format!("path file time grid is not uniform at row {}", k + 1)));
        }
    }
    Ok(grid)
}

fn columns_with(table: &Table, prefix: &str, d: usize) -> Option<Vec<usize>> {
    names(prefix, d).map(|n| table.column(&n)).collect()
}

/// `rate.csv` with per-knot drift, cost and optimal controls, and
/// `rate_value.csv` with the value of the rate functional.
pub fn run_rate(exp: &Experiment, out: &Path) -> CliResult<Vec<PathBuf>> {
    let block = exp
        .config
        .rate
        .as_ref()
        .ok_or_else(|| CliError::config("missing [rate] block"))?;
    let model = &exp.model;
    let (d, l) = (model.dim(), model.regimes());
    let file = exp.resolve(&block.path_file);
    let text = std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
    let table = parse_table(&text)?;
    let grid = table_grid(&table)?;
    let avg = averaged(exp, grid)?;

    let eta: Vec<Vec<f64>> = if let Some(cols) = columns_with(&table, "eta", d) {
        table.rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect()
    } else if let Some(cols) = columns_with(&table, "x", d) {
        let sim = exp.config.simulate.as_ref().ok_or_else(|| {
            CliError::config("a state path needs the [simulate] block for eps and h_exponent")
        })?;
        let scale = 1.0 / (sim.eps.sqrt() * deviation_scale(sim.eps, sim.h_exponent));
        table
            .rows
            .iter()
            .zip(&avg.x)
            .map(|(r, xb)| cols.iter().zip(xb).map(|(&c, b)| (r[c] - b) * scale).collect())
            .collect()
    } else {
        return Err(CliError::config(format!(
            "path file needs columns eta_1..eta_{d} or x_1..x_{d}"
        )));
    };
    let eval = rate_functional(model, &avg, &eta).map_err(|e| CliError::core("rate functional", e))?;

    let mut columns = vec!["t".to_string()];
    columns.extend(names("eta", d));
    columns.extend(names("v", d));
    columns.push("cost".into());
    columns.extend(pair_names("u", l, d));
    let pairs: Vec<(usize, usize)> = (0..l)
        .flat_map(|i| (0..l).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    columns.extend(pairs.iter().map(|(i, j)| format!("c_{}_{}", i + 1, j + 1)));
    let mut w = CsvWriter::new(&exp.hash, None, &columns);
    for ((t, e), p) in eval.grid.iter().zip(&eta).zip(&eval.per_knot) {
        let mut row = vec![real(*t)];
        row.extend(e.iter().map(|&v| real(v)));
        row.extend(p.v.iter().map(|&v| real(v)));
        row.push(real(p.cost));
        row.extend(row_major(&p.u_star));
        row.extend(pairs.iter().map(|&(i, j)| real(p.c_star[(i, j)])));
        w.row(&row);
    }
    let knots_file = w.write(&out.join("rate.csv"))?;

    let mut w = CsvWriter::new(
        &exp.hash,
        None,
        &["value".into(), "feasible".into(), "first_infeasible_time".into()],
    );
    w.row(&[
        real(eval.value),
        u8::from(eval.first_infeasible_time.is_none()).to_string(),
        real(eval.first_infeasible_time.unwrap_or(f64::NAN)),
    ]);
    let value_file = w.write(&out.join("rate_value.csv"))?;
    Ok(vec![knots_file, value_file])
}

/// Minimal rate of `{eta_1(T) >= a}`: zero when the zero path is in the
/// event, else the cost of reaching the boundary.
pub fn terminal_target_rate(exp: &Experiment, a: f64, knots: usize) -> CliResult<f64> {
    if a <= 0.0 {
        return Ok(0.0);
    }
    let model = &exp.model;
    let d = model.dim();
    let grid = TimeGrid::with_steps(exp.config.t_end, knots).map_err(|e| CliError::core("target grid", e))?;
    let avg = averaged(exp, grid)?;
    let mut selector = DMatrix::zeros(1, d);
    selector[(0, 0)] = 1.0;
    let target = min_rate_with_terminal(model, &avg, &selector, &[a], exp.config.t_end, knots)
        .map_err(|e| CliError::core("target rate", e))?;
    Ok(target.value)
}

/// `mc.csv`: one tail estimate per `eps`.
pub fn run_mc(exp: &Experiment, out: &Path) -> CliResult<Vec<PathBuf>> {
    let block = exp
        .config
        .mc
        .as_ref()
        .ok_or_else(|| CliError::config("missing [mc] block"))?;
    let c = &exp.config;
    let target = if block.target_rate {
        Some(terminal_target_rate(exp, block.a, block.target_knots)?)
    } else {
        None
    };
    let estimates = mdp_scan(
        &exp.model,
        &block.eps_grid,
        block.h_exponent,
        block.a,
        block.event.into(),
        &c.x0,
        exp.y0(),
        c.t_end,
        c.dt_rule(),
        block.n_paths,
        block.seed,
    )
    .map_err(|e| CliError::core("tail estimation", e))?;

    let mut columns: Vec<String> = ["eps", "h_eps", "a", "n_paths", "p_hat", "std_err", "decay_rate"]
        .into_iter()
        .map(String::from)
        .collect();
    if target.is_some() {
        columns.push("target_rate".into());
    }
    let mut w = CsvWriter::new(&exp.hash, Some(block.seed), &columns);
    for est in &estimates {
        let mut row = vec![
            real(est.eps),
            real(est.h_eps),
            real(est.threshold),
            est.n_paths.to_string(),
            real(est.p_hat),
            real(est.std_err),
            real(est.decay_rate),
        ];
        if let Some(t) = target {
            row.push(real(t));
        }
        w.row(&row);
    }
    Ok(vec![w.write(&out.join("mc.csv"))?])
}

/// Tensor grid `[lo, hi]^d` with `points` nodes per axis.
fn tensor_grid(lo: f64, hi: f64, points: usize, d: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
        .collect();
    let total = points.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            let mut x = vec![0.0; d];
            for xk in x.iter_mut().rev() {
                *xk = axis[idx % points];
                idx /= points;
            }
            x
        })
        .collect()
}

/// `validate.csv`: one row of sampled model diagnostics.
pub fn run_validate(exp: &Experiment, out: &Path) -> CliResult<Vec<PathBuf>> {
    let block = exp.config.validate.clone().unwrap_or_default();
    let model = &exp.model;
    let samples = tensor_grid(block.grid_min, block.grid_max, block.grid_points, model.dim());
    let report = validate_model(model, &samples, 1e-5).map_err(|e| CliError::core("validation", e))?;
    let columns: Vec<String> = [
        "samples",
        "lipschitz_drift",
        "lipschitz_diffusion",
        "lipschitz_generator",
        "rate_min",
        "rate_max",
        "zeta",
        "zeta_respected",
        "irreducible_everywhere",
        "min_invariant_mass",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    let mut w = CsvWriter::new(&exp.hash, None, &columns);
    w.row(&[
        samples.len().to_string(),
        real(report.lipschitz_drift),
        real(report.lipschitz_diffusion),
        real(report.lipschitz_generator),
        real(report.rate_bounds.0),
        real(report.rate_bounds.1),
        real(model.zeta()),
        u8::from(report.zeta_respected).to_string(),
        u8::from(report.irreducible_everywhere).to_string(),
        real(report.min_invariant_mass),
    ]);
    Ok(vec![w.write(&out.join("validate.csv"))?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_grid_covers_corners() {
        let g = tensor_grid(-1.0, 1.0, 3, 2);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![-1.0, -1.0]);
        assert_eq!(g[1], vec![-1.0, 0.0]);
        assert_eq!(g[8], vec![1.0, 1.0]);
    }

    #[test]
    fn evenly_spaced_knots_hit_both_ends() {
        assert_eq!(evenly(2.0, 5), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(evenly(2.0, 1), vec![0.0]);
    }

    #[test]
    fn table_grid_requires_uniform_times() {
        let ok = parse_table("t,eta_1\n0,0\n0.5,1\n1,2\n").unwrap();
        assert_eq!(table_grid(&ok).unwrap().steps(), 2);
        let bad = parse_table("t,eta_1\n0,0\n0.4,1\n1,2\n").unwrap();
        assert!(table_grid(&bad).is_err());
        let late = parse_table("t,eta_1\n0.1,0\n0.5,1\n1,2\n").unwrap();
        assert!(table_grid(&late).is_err());
    }
}
