//! Per-`N` simulation runs with the full diagnostic suite and the bundle writer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Resolved};
use crate::diagnostics::{
    check_mlinf, diagnostics_record, short_time_check, DiagnosticsRecord, DiagnosticsRow, DiffAvgOptions,
    RecordOptions, ShortTimeCheck,
};
use crate::ensemble::quiet_start_init;
use crate::error::{Error, Result};
use crate::field::ForceKernel;
use crate::integrator::{run, total_energy, total_momentum, RunOptions, Trajectory};
use crate::oracle::{force_convergence_stat, OracleRun};
use crate::parallelepiped::{
    linf_preservation_report, pilot_growth_constant, track_back, LinfOptions, LinfPreservationReport,
    PhaseParallelepiped, TrackingStep,
};
use crate::shells::{
    position_shells, q0_split, shell_count_bound_check, shell_stability_check, shell_sum, two_scale_shells,
    two_scale_sum, velocity_shells, CountReport, ShellPartition, StabilityReport,
};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Collision radius as a fraction of `eps`.
const COLLISION_FRACTION: f64 = 1e-9;

pub const GATE_M: &str = "m <= 1/(12 eps K dEbar)";
pub const GATE_K: &str = "eps^(d-alpha) m^(2d) K^(2d-alpha) <= eps^beta";
pub const GATE_E: &str = "eps^(2d-3alpha) m^(2d) Ebar^d K^(d-alpha) <= eps^beta";
pub const GATE_C: &str = "C <= eps^(-1/(8M))";
pub const GATE_T: &str = "T' >= T/M";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateViolation {
    pub t: f64,
    pub inequality: String,
    pub lhs: f64,
    pub rhs: f64,
}

/// The pointwise gate inequalities at one diagnostics row, as `(name, lhs, rhs)`.
pub fn row_gates(row: &DiagnosticsRow, d: usize, alpha: f64, beta: f64, eps: f64) -> [(&'static str, f64, f64); 3] {
    let df = d as f64;
    let denom = 12.0 * eps * row.k * row.debar;
    let m_cap = if denom > 0.0 { 1.0 / denom } else { f64::MAX };
    let m2d = row.m.powf(2.0 * df);
    let rhs = eps.powf(beta);
    [
        (GATE_M, row.m, m_cap),
        (GATE_K, eps.powf(df - alpha) * m2d * row.k.powf(2.0 * df - alpha), rhs),
        (
            GATE_E,
            eps.powf(2.0 * df - 3.0 * alpha) * m2d * row.ebar.powf(df) * row.k.powf(df - alpha),
            rhs,
        ),
    ]
}

/// First row at which a pointwise gate fails.
pub fn first_row_violation(
    rows: &[DiagnosticsRow],
    d: usize,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Option<GateViolation> {
    rows.iter().find_map(|row| {
        row_gates(row, d, alpha, beta, eps)
            .into_iter()
            .find(|(_, l, r)| !(l <= r))
            .map(|(name, lhs, rhs)| GateViolation {
                t: row.t,
                inequality: name.to_string(),
                lhs,
                rhs,
            })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub eta: f64,
    pub growth_const: f64,
    pub no_stretch_horizon: f64,
    pub max_ratio: f64,
    pub max_fitted_c: f64,
    pub monotone_violations: usize,
    pub bound_violations: usize,
    /// Set when the stage could not be evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub t_start: f64,
    pub eta: f64,
    pub growth_const: f64,
    pub pilot_boxes: usize,
    pub boxes: usize,
    pub completed: usize,
    pub steps: usize,
    pub monotone_violations: usize,
    pub radius_bound_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellSizes {
    pub base_radius: f64,
    pub k_max: usize,
    /// `(k, |shell k|)`.
    pub sizes: Vec<(usize, usize)>,
    pub remainder: usize,
}

impl From<&ShellPartition> for ShellSizes {
    fn from(p: &ShellPartition) -> Self {
        Self {
            base_radius: p.base_radius,
            k_max: p.k_max,
            sizes: p.shells.iter().map(|(k, m)| (*k, m.len())).collect(),
            remainder: p.remainder.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorShells {
    pub anchor: usize,
    pub k: f64,
    pub ebar: f64,
    pub debar: f64,
    pub position: ShellSizes,
    pub position_stability: StabilityReport,
    pub position_count: CountReport,
    pub velocity: ShellSizes,
    pub velocity_stability: StabilityReport,
    pub velocity_count: CountReport,
    /// `(|Q0'|, |Q0''|)`.
    pub q0: (usize, usize),
    pub shell_sum: f64,
    /// `(outer, inner)` contributions of the two-scale decomposition at `eta`.
    pub two_scale_sum: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellsSummary {
    pub anchors: usize,
    pub stability_violations: usize,
    pub count_failures: usize,
}

/// Everything computed for one particle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NRun {
    #[serde(flatten)]
    pub resolved: Resolved,
    pub dt: f64,
    pub steps: usize,
    pub short_time_check: ShortTimeCheck,
    pub mlinf_violations: usize,
    pub mlinf_max_ratio: f64,
    pub gate_first_violation: Option<GateViolation>,
    pub stages: Vec<StageSummary>,
    pub tracking: TrackingSummary,
    pub shells: ShellsSummary,
    pub energy_drift: f64,
    pub momentum_drift: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fconv_sup: Option<f64>,
}

/// Files of one per-`N` bundle directory.
#[derive(Debug, Clone)]
pub struct NArtifacts {
    pub record: DiagnosticsRecord,
    pub shells: Vec<AnchorShells>,
    pub tracking_lines: Vec<TrackingLine>,
    pub linf: Vec<LinfPreservationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingLine {
    #[serde(rename = "box")]
    pub box_id: usize,
    pub center: usize,
    #[serde(flatten)]
    pub step: TrackingStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TObs {
    /// Smallest `T_obs` over the tested counts.
    pub common: f64,
    pub by_n: BTreeMap<usize, f64>,
    pub nondecreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortTimeChecks {
    pub by_n: BTreeMap<usize, ShortTimeCheck>,
    /// Rows with `linf_eps_hi > (4 m)^{2d}`.
    pub mlinf_violations: BTreeMap<usize, usize>,
    pub all_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub epsilon: BTreeMap<usize, f64>,
    #[serde(rename = "T_obs")]
    pub t_obs: TObs,
    pub gate_first_violation: BTreeMap<usize, Option<GateViolation>>,
    #[serde(rename = "theorem1_checks")]
    pub short_time_checks: ShortTimeChecks,
    /// Largest fitted slack constant per escalation stage.
    #[serde(rename = "theorem4_fitted_C")]
    pub fitted_c: BTreeMap<usize, Vec<f64>>,
    #[serde(rename = "fconv_by_N")]
    pub fconv_by_n: BTreeMap<usize, f64>,
    /// Smallest tested requested `N` whose gates all hold up to `T`.
    pub empirical_n_tilde: Option<usize>,
    pub code_version: String,
    pub runs: Vec<NRun>,
}

pub(crate) fn simulate(cfg: &ExperimentConfig, res: &Resolved) -> Result<Trajectory> {
    let spec = cfg.density_spec()?;
    let qs = quiet_start_init(&spec, res.requested_n, cfg.run.d, cfg.run.seed)?;
    let kernel = cfg.kernel()?.with_collision_radius(COLLISION_FRACTION * res.epsilon);
    let opts = RunOptions::new(res.epsilon).with_kappa(cfg.run.kappa);
    let out = run(&qs.ensemble, cfg.run.t_end, &kernel, &opts)?;
    match out.aborted {
        Some(e) => Err(e),
        None => Ok(out.trajectory),
    }
}

fn seed_for(cfg: &ExperimentConfig, n: usize, salt: u64) -> u64 {
    cfg.run.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

fn anchor_shells(
    traj: &Trajectory,
    record: &DiagnosticsRecord,
    anchor: usize,
    eta: f64,
    alpha: f64,
) -> Result<AnchorShells> {
    let eps = traj.eps();
    let d = traj.dim();
    let n = traj.n();
    let ens = traj.snapshot(0);
    let row0 = record.rows[0];
    let row1 = *record.rows.get(1).unwrap_or(&row0);
    let k = row0.k;
    let (ebar, debar) = (row1.ebar, row1.debar);
    let window_end = eps.min(traj.final_time());
    let pos = position_shells(ens, anchor, eps, k)?;
    let pos_stab = shell_stability_check(traj, &pos, 0.0, window_end, eps)?;
    let pos_count = shell_count_bound_check(&pos, row0.linf_eps_hi, eps, 2.0 * k, d, n);
    let vel = velocity_shells(ens, anchor, &pos.remainder, eps, ebar)?;
    let vel_stab = shell_stability_check(traj, &vel, 0.0, window_end, eps)?;
    let vel_count = shell_count_bound_check(&vel, row0.linf_eps_hi, eps, 5.0 * eps * k, d, n);
    let (q0p, q0pp) = q0_split(&vel.remainder, ens, anchor, eps, k, debar)?;
    let two = two_scale_shells(ens, anchor, eps, eta, k)?;
    Ok(AnchorShells {
        anchor,
        k,
        ebar,
        debar,
        position: (&pos).into(),
        position_stability: pos_stab,
        position_count: pos_count,
        velocity: (&vel).into(),
        velocity_stability: vel_stab,
        velocity_count: vel_count,
        q0: (q0p.len(), q0pp.len()),
        shell_sum: shell_sum(&pos, alpha, n),
        two_scale_sum: two_scale_sum(&two, alpha, n),
    })
}

/// Runs one particle count through the whole suite.
pub fn run_single(
    cfg: &ExperimentConfig,
    requested_n: usize,
    oracle: Option<&OracleRun>,
) -> Result<(NRun, NArtifacts)> {
    let res = cfg.resolve(requested_n)?;
    let traj = simulate(cfg, &res)?;
    let eps = res.epsilon;
    let d = cfg.run.d;
    let n = traj.n();
    let t_end = traj.final_time();
    let m_stages = cfg.schedule.stages;

    let diff = DiffAvgOptions {
        beta: res.beta,
        pair_budget: cfg.run.pair_budget,
        seed: seed_for(cfg, n, 1),
        short_time: res.short_time,
    };
    let record = diagnostics_record(
        &traj,
        &RecordOptions {
            eta: Some(res.eta_schedule[0]),
            diff: Some(diff),
        },
    )?;
    let short_time = short_time_check(&record);
    let mlinf: Vec<_> = record.rows.iter().map(|r| check_mlinf(r.m, r.linf_eps_hi, d)).collect();
    let mlinf_violations = mlinf.iter().filter(|r| !r.holds).count();
    let mlinf_max_ratio = mlinf.iter().map(|r| r.ratio).fold(0.0, f64::max);

    // pilot and tracked boxes are disjoint; the pilot runs from every checkpoint and scale
    let checkpoints = (t_end / eps + 1e-9).floor() as usize;
    let t_track = checkpoints as f64 * eps;
    let k_track = traj.index_of(t_track).ok_or(Error::WindowMissing {
        start: 0.0,
        end: t_track,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg, n, 2));
    let picks = rand::seq::index::sample(&mut rng, n, (2 * cfg.schedule.tracked).min(n)).into_vec();
    let half = picks.len() / 2;
    let (pilot, tracked) = picks.split_at(half);

    // one growth constant for all scales
    let mut c = 0.0f64;
    for &eta in &res.eta_schedule {
        for j in 1..=checkpoints {
            let t = j as f64 * eps;
            c = c.max(pilot_growth_constant(
                &traj,
                pilot,
                t,
                eta,
                eps,
                res.beta,
                cfg.schedule.pilot_safety,
            )?);
        }
    }
    let mut stages = Vec::with_capacity(m_stages + 1);
    let mut linf = Vec::new();
    for (i, &eta) in res.eta_schedule.iter().enumerate() {
        let stage = (|| -> Result<(f64, LinfPreservationReport)> {
            let rep = linf_preservation_report(
                &traj,
                &LinfOptions {
                    eta,
                    eps,
                    beta: res.beta,
                    growth_const: c,
                    horizon: t_end,
                    boxes: cfg.schedule.boxes,
                    seed: seed_for(cfg, n, 16 + i as u64),
                },
            )?;
            Ok((c, rep))
        })();
        stages.push(match stage {
            Ok((c, rep)) => {
                let s = StageSummary {
                    stage: i,
                    eta,
                    growth_const: c,
                    no_stretch_horizon: rep.no_stretch_horizon,
                    max_ratio: rep.max_ratio,
                    max_fitted_c: rep.max_fitted_c.max(0.0),
                    monotone_violations: rep.checkpoints.iter().map(|c| c.monotone_violations).sum(),
                    bound_violations: rep.checkpoints.iter().map(|c| c.bound_violations).sum(),
                    error: None,
                };
                linf.push(rep);
                s
            }
            Err(e) => StageSummary {
                stage: i,
                eta,
                growth_const: 0.0,
                no_stretch_horizon: 0.0,
                max_ratio: 0.0,
                max_fitted_c: 0.0,
                monotone_violations: 0,
                bound_violations: 0,
                error: Some(e.to_string()),
            },
        });
    }

    let eta0 = res.eta_schedule[0];
    let c0 = stages[0].growth_const;
    let snap = traj.snapshot(k_track);
    let reports = tracked
        .par_iter()
        .map(|&i| {
            let s = PhaseParallelepiped::ball(snap.x(i), snap.v(i), eta0)?;
            track_back(&s, &traj, t_track, eps, res.beta, c0)
        })
        .collect::<Result<Vec<_>>>()?;
    let tracking = TrackingSummary {
        t_start: t_track,
        eta: eta0,
        growth_const: c0,
        pilot_boxes: pilot.len(),
        boxes: reports.len(),
        completed: reports.iter().filter(|r| r.completed()).count(),
        steps: reports.iter().map(|r| r.steps.len()).sum(),
        monotone_violations: reports.iter().flat_map(|r| &r.steps).filter(|s| !s.monotone).count(),
        radius_bound_failures: reports
            .iter()
            .flat_map(|r| &r.steps)
            .filter(|s| !s.radius_bound_holds)
            .count(),
    };
    let tracking_lines = reports
        .iter()
        .zip(tracked)
        .enumerate()
        .flat_map(|(b, (rep, &center))| {
            rep.steps.iter().map(move |s| TrackingLine {
                box_id: b,
                center,
                step: s.clone(),
            })
        })
        .collect();

    let anchors: Vec<usize> = rand::seq::index::sample(
        &mut ChaCha8Rng::seed_from_u64(seed_for(cfg, n, 3)),
        n,
        cfg.schedule.anchors.min(n),
    )
    .into_vec();
    let alpha = if traj.kernel().is_off() {
        cfg.run.alpha
    } else {
        traj.kernel().alpha
    };
    let shells = anchors
        .iter()
        .map(|&a| anchor_shells(&traj, &record, a, eta0, alpha))
        .collect::<Result<Vec<_>>>()?;
    let shell_summary = ShellsSummary {
        anchors: shells.len(),
        stability_violations: shells
            .iter()
            .map(|s| s.position_stability.violations.len() + s.velocity_stability.violations.len())
            .sum(),
        count_failures: shells
            .iter()
            .map(|s| !s.position_count.all_hold as usize + !s.velocity_count.all_hold as usize)
            .sum(),
    };

    let mut gate = first_row_violation(&record.rows, d, cfg.run.alpha, res.beta, eps);
    let run_gates = [
        (GATE_C, stages[0].max_fitted_c, res.growth_cap, t_track),
        (
            GATE_T,
            stages[0].no_stretch_horizon,
            cfg.run.t_end / m_stages as f64,
            stages[0].no_stretch_horizon,
        ),
    ];
    for (name, lhs, rhs, t) in run_gates {
        let fails = if name == GATE_T { lhs < rhs } else { lhs > rhs };
        if fails && gate.as_ref().is_none_or(|g| t < g.t) {
            gate = Some(GateViolation {
                t,
                inequality: name.to_string(),
                lhs,
                rhs,
            });
        }
    }

    let kernel: &ForceKernel = traj.kernel();
    let e0 = total_energy(traj.snapshot(0), kernel);
    let e1 = total_energy(traj.snapshot(traj.steps()), kernel);
    let p0 = total_momentum(traj.snapshot(0));
    let p1 = total_momentum(traj.snapshot(traj.steps()));
    let momentum_drift = p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let nrun = NRun {
        dt: traj.dt(),
        steps: traj.steps(),
        short_time_check: short_time,
        mlinf_violations,
        mlinf_max_ratio,
        gate_first_violation: gate,
        stages,
        tracking,
        shells: shell_summary,
        energy_drift: (e1 - e0).abs() / e0.abs().max(f64::MIN_POSITIVE),
        momentum_drift,
        fconv_sup: match oracle {
            Some(o) => Some(force_convergence_stat(&traj, o, eps)?.sup),
            None => None,
        },
        resolved: res,
    };
    Ok((
        nrun,
        NArtifacts {
            record,
            shells,
            tracking_lines,
            linf,
        },
    ))
}

pub fn summarize(cfg: &ExperimentConfig, runs: Vec<NRun>) -> Summary {
    let by_n = |f: &dyn Fn(&NRun) -> f64| runs.iter().map(|r| (r.resolved.requested_n, f(r))).collect();
    let t_obs_by: BTreeMap<usize, f64> = by_n(&|r| r.short_time_check.t_obs);
    let t_seq: Vec<f64> = runs.iter().map(|r| r.short_time_check.t_obs).collect();
    let checks = ShortTimeChecks {
        by_n: runs
            .iter()
            .map(|r| (r.resolved.requested_n, r.short_time_check.clone()))
            .collect(),
        mlinf_violations: runs
            .iter()
            .map(|r| (r.resolved.requested_n, r.mlinf_violations))
            .collect(),
        all_hold: runs
            .iter()
            .all(|r| r.short_time_check.first_failure.is_none() && r.mlinf_violations == 0),
    };
    Summary {
        config: cfg.clone(),
        epsilon: by_n(&|r| r.resolved.epsilon),
        t_obs: TObs {
            common: t_seq.iter().copied().fold(f64::INFINITY, f64::min),
            by_n: t_obs_by,
            nondecreasing: t_seq.windows(2).all(|w| w[1] >= w[0]),
        },
        gate_first_violation: runs
            .iter()
            .map(|r| (r.resolved.requested_n, r.gate_first_violation.clone()))
            .collect(),
        short_time_checks: checks,
        fitted_c: runs
            .iter()
            .map(|r| {
                (
                    r.resolved.requested_n,
                    r.stages.iter().map(|s| s.max_fitted_c).collect(),
                )
            })
            .collect(),
        fconv_by_n: runs
            .iter()
            .filter_map(|r| r.fconv_sup.map(|v| (r.resolved.requested_n, v)))
            .collect(),
        empirical_n_tilde: runs
            .iter()
            .find(|r| r.gate_first_violation.is_none())
            .map(|r| r.resolved.requested_n),
        code_version: CODE_VERSION.to_string(),
        runs,
    }
}

pub fn n_dir(root: &Path, requested_n: usize) -> std::path::PathBuf {
    root.join(format!("N{requested_n}"))
}

fn write_artifacts(dir: &Path, art: &NArtifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("diagnostics.csv"), art.record.to_csv())?;
    fs::write(dir.join("shells.json"), serde_json::to_string_pretty(&art.shells)?)?;
    let mut lines = String::new();
    for l in &art.tracking_lines {
        lines.push_str(&serde_json::to_string(l)?);
        lines.push('\n');
    }
    fs::write(dir.join("tracking.jsonl"), lines)?;
    fs::write(dir.join("linf_stages.json"), serde_json::to_string_pretty(&art.linf)?)?;
    Ok(())
}

/// Runs every configured `N` (concurrently) and writes the bundle under `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let root = &cfg.output.dir;
    let oracle = match &cfg.oracle {
        Some(_) => Some(super::convergence::reference(cfg, false)?),
        None => None,
    };
    let results = cfg
        .run
        .n
        .par_iter()
        .map(|&n| -> Result<NRun> {
            let (nrun, art) = run_single(cfg, n, oracle.as_ref())?;
            write_artifacts(&n_dir(root, n), &art)?;
            Ok(nrun)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, results);
    fs::create_dir_all(root)?;
    fs::write(root.join("config.toml"), cfg.to_toml())?;
    fs::write(root.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(m: f64, k: f64, ebar: f64, debar: f64) -> DiagnosticsRow {
        DiagnosticsRow {
            t: 0.5,
            r: 1.0,
            k,
            m,
            ebar,
            debar,
            linf_eps_lo: 0.0,
            linf_eps_hi: 0.0,
            linf_eta_lo: 0.0,
            linf_eta_hi: 0.0,
            r_inf: 1.0,
            k_inf: k,
        }
    }

    #[test]
    fn gate_values_by_hand() {
        // d = 1, alpha = 1/2, beta = 1, eps = 1/4
        let g = row_gates(&row(2.0, 1.0, 4.0, 1.0), 1, 0.5, 1.0, 0.25);
        assert_eq!(g[0].2, 1.0 / 3.0);
        assert!(g[0].1 > g[0].2);
        // eps^{1/2} m^2 K^{3/2} = 0.5 * 4
        assert!((g[1].1 - 2.0).abs() < 1e-15);
        // eps^{1/2} m^2 Ebar K^{1/2} = 0.5 * 4 * 4
        assert!((g[2].1 - 8.0).abs() < 1e-15);
        assert_eq!(g[1].2, 0.25);
        let v = first_row_violation(&[row(2.0, 1.0, 4.0, 1.0)], 1, 0.5, 1.0, 0.25).unwrap();
        assert_eq!(v.inequality, GATE_M);
    }

    #[test]
    fn zero_difference_quotient_never_gates_m() {
        let g = row_gates(&row(1e6, 1.0, 0.0, 0.0), 2, 0.5, 1.25, 0.1);
        assert!(g[0].1 <= g[0].2);
    }
}
