//! Particle runs against the grid reference for a sweep of particle counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OracleSection};
use super::experiment::simulate;
use crate::error::{Error, Result};
use crate::oracle::{force_convergence_stat, solve, weak_distance, GridDensity, GridSpec, OracleRun, TestDictionary};

/// Grid reference for the configured density; `refined` doubles both resolutions.
pub fn reference(cfg: &ExperimentConfig, refined: bool) -> Result<OracleRun> {
    let o = oracle_section(cfg)?;
    let f = if refined { 2 } else { 1 };
    let grid = GridSpec::new(o.nx * f, o.nv * f, o.lx, o.lv)?;
    let f0 = GridDensity::from_spec(&cfg.density_spec()?, grid)?;
    let (dt, store_every) = oracle_steps(cfg.run.t_end, o.dt / f as f64, o.checkpoints);
    solve(&f0, cfg.run.t_end, dt, &cfg.kernel()?, store_every)
}

fn oracle_section(cfg: &ExperimentConfig) -> Result<&OracleSection> {
    if cfg.run.d != 1 {
        return Err(Error::Config(format!(
            "oracle: the grid reference needs run.d = 1, got {}",
            cfg.run.d
        )));
    }
    cfg.oracle
        .as_ref()
        .ok_or_else(|| Error::Config("oracle: section required for the convergence study".into()))
}

/// Step no longer than `dt` with the checkpoints on whole, stored steps.
fn oracle_steps(t_end: f64, dt: f64, checkpoints: usize) -> (f64, usize) {
    let per = (t_end / (checkpoints as f64 * dt) - 1e-9).ceil().max(1.0) as usize;
    (t_end / (per * checkpoints) as f64, per)
}

pub fn checkpoint_times(t_end: f64, checkpoints: usize) -> Vec<f64> {
    (0..=checkpoints)
        .map(|j| t_end * j as f64 / checkpoints as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub epsilon: f64,
    pub t: f64,
    /// Offset of the nearest particle instant from `t`.
    pub t_offset: f64,
    pub weak_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `-log2(distance)` against `log2(N)` per checkpoint.
    pub weak_exponent: BTreeMap<String, f64>,
    #[serde(rename = "fconv_by_N")]
    pub fconv_by_n: BTreeMap<usize, f64>,
    pub fconv_exponent: f64,
    /// Largest `|F_inf(coarse) - F_inf(fine)|` at particle positions of the
    /// largest run; `None` without refinement.
    pub grid_floor: Option<f64>,
    /// Every consecutive pair decreases unless the larger count is already at
    /// the floor.
    pub fconv_monotone_to_floor: bool,
    pub oracle_max_mass_error: f64,
    pub oracle_max_raw_drift: f64,
}

/// Slope `b` of the least-squares fit `y = a + b x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Decay exponent of `values` against `counts` in `log2`.
pub fn decay_exponent(counts: &[usize], values: &[f64]) -> f64 {
    let x: Vec<f64> = counts.iter().map(|&n| (n as f64).log2()).collect();
    let y: Vec<f64> = values.iter().map(|v| -v.max(f64::MIN_POSITIVE).log2()).collect();
    fit_slope(&x, &y)
}

fn grid_gap(traj: &crate::integrator::Trajectory, coarse: &OracleRun, fine: &OracleRun) -> Result<f64> {
    let stride = (traj.len() / 32).max(1);
    let idx: Vec<usize> = (0..traj.len()).step_by(stride).collect();
    let gaps = idx
        .par_iter()
        .map(|&k| -> Result<f64> {
            let t = traj.times()[k];
            let x = traj.snapshot(k).positions();
            let mut g = 0.0f64;
            for &xi in x {
                g = g.max((coarse.field(t, xi)? - fine.field(t, xi)?).abs());
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

/// Weak distances at the checkpoints and the windowed force statistic for every `N`.
pub fn convergence_study(cfg: &ExperimentConfig) -> Result<ConvergenceTable> {
    cfg.validate()?;
    let o = oracle_section(cfg)?.clone();
    let oracle = reference(cfg, false)?;
    let fine = if o.refine { Some(reference(cfg, true)?) } else { None };
    let spec = cfg.density_spec()?;
    let dict = TestDictionary::new(
        spec.r0_x() + o.dictionary_width,
        spec.r0_v() + o.dictionary_width,
        o.dictionary_width,
    )?;
    let times = checkpoint_times(cfg.run.t_end, o.checkpoints);
    let per_n = cfg
        .run
        .n
        .par_iter()
        .map(|&n| -> Result<(Vec<ConvergenceRow>, f64, Option<f64>)> {
            let res = cfg.resolve(n)?;
            let traj = simulate(cfg, &res)?;
            let mut rows = Vec::with_capacity(times.len());
            for &t in &times {
                let k = ((t / traj.dt()).round() as usize).min(traj.steps());
                let f = oracle.density_at(t)?;
                rows.push(ConvergenceRow {
                    n,
                    epsilon: res.epsilon,
                    t,
                    t_offset: traj.times()[k] - t,
                    weak_distance: weak_distance(traj.snapshot(k), f, &dict)?,
                });
            }
            let sup = force_convergence_stat(&traj, &oracle, res.epsilon)?.sup;
            let gap = match (&fine, Some(&n) == cfg.run.n.last()) {
                (Some(fine), true) => Some(grid_gap(&traj, &oracle, fine)?),
                _ => None,
            };
            Ok((rows, sup, gap))
        })
        .collect::<Result<Vec<_>>>()?;
    let counts = cfg.run.n.clone();
    let mut rows = Vec::new();
    let mut fconv = BTreeMap::new();
    let mut floor = None;
    for (&n, (r, sup, gap)) in counts.iter().zip(per_n) {
        rows.extend(r);
        fconv.insert(n, sup);
        floor = floor.or(gap);
    }
    let mut weak_exponent = BTreeMap::new();
    for &t in &times[1..] {
        let vals: Vec<f64> = counts
            .iter()
            .map(|&n| rows.iter().find(|r| r.n == n && r.t == t).unwrap().weak_distance)
            .collect();
        weak_exponent.insert(format!("{t}"), decay_exponent(&counts, &vals));
    }
    let sups: Vec<f64> = counts.iter().map(|n| fconv[n]).collect();
    let fl = floor.unwrap_or(0.0);
    Ok(ConvergenceTable {
        weak_exponent,
        fconv_exponent: decay_exponent(&counts, &sups),
        fconv_monotone_to_floor: sups.windows(2).all(|w| w[1] < w[0] || w[0] <= fl),
        fconv_by_n: fconv,
        grid_floor: floor,
        oracle_max_mass_error: oracle.max_mass_error(),
        oracle_max_raw_drift: oracle.max_raw_drift(),
        rows,
    })
}

pub const CONVERGENCE_HEADER: &str = "N,eps,t,t_offset,weak_distance";

impl ConvergenceTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CONVERGENCE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.n, r.epsilon, r.t, r.t_offset, r.weak_distance);
        }
        out
    }

    /// Weak distances of one count in checkpoint order.
    pub fn distances(&self, n: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.n == n).map(|r| r.weak_distance).collect()
    }
}

/// Runs the study and writes `convergence.csv` and `convergence.json` to the output directory.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceTable> {
    let table = convergence_study(cfg)?;
    let root = &cfg.output.dir;
    fs::create_dir_all(root)?;
    fs::write(root.join("convergence.csv"), table.to_csv())?;
    fs::write(root.join("convergence.json"), serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn slope_of_power_law() {
        let counts = [256, 1024, 4096];
        let vals: Vec<f64> = counts.iter().map(|&n| 3.0 * (n as f64).powf(-0.35)).collect();
        assert_relative_eq!(decay_exponent(&counts, &vals), 0.35, epsilon = 1e-12);
        assert_eq!(fit_slope(&[1.0, 1.0], &[2.0, 3.0]), 0.0);
    }

    #[test]
    fn oracle_steps_hit_checkpoints() {
        for (t, dt, c) in [(0.5, 1.0 / 256.0, 4), (0.3, 0.007, 3), (1.0, 0.5, 7)] {
            let (h, per) = oracle_steps(t, dt, c);
            assert!(h <= dt * (1.0 + 1e-12));
            assert_relative_eq!(h * (per * c) as f64, t, max_relative = 1e-14);
        }
    }
}
