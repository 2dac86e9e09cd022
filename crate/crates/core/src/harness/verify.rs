//! Offline re-check of a written bundle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{first_row_violation, n_dir, AnchorShells, Summary, TrackingLine, GATE_E, GATE_K, GATE_M};
use crate::diagnostics::{check_mlinf, short_time_check, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::parallelepiped::LinfPreservationReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: String, passed: bool, detail: String) {
        self.checks.push(Check { name, passed, detail });
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Re-derives the recorded invariants from the bundle files. Malformed or
/// missing files are errors; failed invariants are reported as checks.
pub fn verify_bundle(root: &Path) -> Result<VerifyReport> {
    let summary_path = root.join("summary.json");
    let summary: Summary = parse(&summary_path, &read(&summary_path)?)?;
    summary.config.validate()?;
    let d = summary.config.run.d;
    let alpha = summary.config.run.alpha;
    let mut rep = VerifyReport { checks: Vec::new() };
    for run in &summary.runs {
        let n = run.resolved.requested_n;
        let dir = n_dir(root, n);
        let eps = run.resolved.epsilon;

        let rows = DiagnosticsRecord::rows_from_csv(&read(&dir.join("diagnostics.csv"))?)?;
        if rows.is_empty() {
            return Err(Error::Config(format!("{}: no diagnostics rows", dir.display())));
        }
        let bad: Vec<f64> = rows
            .iter()
            .filter(|r| !check_mlinf(r.m, r.linf_eps_hi, d).holds)
            .map(|r| r.t)
            .collect();
        rep.push(
            format!("N={n} linf_eps_hi <= (4m)^2d"),
            bad.is_empty() && bad.len() == run.mlinf_violations,
            format!(
                "{} of {} rows violate; summary records {}",
                bad.len(),
                rows.len(),
                run.mlinf_violations
            ),
        );
        let record = DiagnosticsRecord {
            dim: d,
            eps,
            eta: run.resolved.eta_schedule[0],
            beta: Some(run.resolved.beta),
            debar_exhaustive: false,
            rows: rows.clone(),
        };
        let st = short_time_check(&record);
        rep.push(
            format!("N={n} T_obs reproduced"),
            st.t_obs == run.short_time_check.t_obs,
            format!("recomputed {}, summary {}", st.t_obs, run.short_time_check.t_obs),
        );
        let row_gate = first_row_violation(&rows, d, alpha, run.resolved.beta, eps);
        let consistent = match (&row_gate, &run.gate_first_violation) {
            (None, None) => true,
            (Some(a), Some(b)) => b.t <= a.t,
            // the recorded one must be a run-level gate
            (None, Some(b)) => ![GATE_M, GATE_K, GATE_E].contains(&b.inequality.as_str()),
            (Some(_), None) => false,
        };
        rep.push(
            format!("N={n} gate record consistent"),
            consistent,
            format!("recomputed {row_gate:?}, summary {:?}", run.gate_first_violation),
        );

        let track_path = dir.join("tracking.jsonl");
        let lines: Vec<TrackingLine> = read(&track_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse(&track_path, l))
            .collect::<Result<_>>()?;
        let non_monotone = lines
            .iter()
            .filter(|l| l.step.info.count_before > l.step.info.count_after)
            .count();
        rep.push(
            format!("N={n} backward counts monotone"),
            non_monotone == 0
                && lines
                    .iter()
                    .all(|l| l.step.monotone == (l.step.info.count_before <= l.step.info.count_after)),
            format!("{non_monotone} of {} steps with N_t > N_(t-h)", lines.len()),
        );
        let radius = lines.iter().filter(|l| !l.step.radius_bound_holds).count();
        rep.push(
            format!("N={n} radius recursion bound"),
            radius == 0,
            format!("{radius} of {} steps exceed the alpha_n bound", lines.len()),
        );

        let shells_path = dir.join("shells.json");
        let shells: Vec<AnchorShells> = parse(&shells_path, &read(&shells_path)?)?;
        let stab: usize = shells
            .iter()
            .map(|s| s.position_stability.violations.len() + s.velocity_stability.violations.len())
            .sum();
        rep.push(
            format!("N={n} shell stability"),
            stab == 0,
            format!("{stab} violations over {} anchors", shells.len()),
        );
        let counts = shells
            .iter()
            .filter(|s| !s.position_count.all_hold || !s.velocity_count.all_hold)
            .count();
        rep.push(
            format!("N={n} shell count bounds"),
            counts == 0,
            format!("{counts} anchors exceed the volumetric bound"),
        );

        let linf_path = dir.join("linf_stages.json");
        let linf: Vec<LinfPreservationReport> = parse(&linf_path, &read(&linf_path)?)?;
        let (mono, bound): (usize, usize) = linf
            .iter()
            .flat_map(|r| &r.checkpoints)
            .fold((0, 0), |(a, b), c| (a + c.monotone_violations, b + c.bound_violations));
        rep.push(
            format!("N={n} covering bounds along tracking"),
            mono == 0 && bound == 0,
            format!("{mono} non-monotone boxes, {bound} covering-bound violations"),
        );
    }
    Ok(rep)
}
