use meanfield_core::diagnostics::{DiagnosticsRecord, CSV_HEADER};
use meanfield_core::parallelepiped::Termination;
use meanfield_core::{
    check_mlinf, diagnostics_record, epsilon_scale, quiet_start_init, run, run_experiment, short_time_check,
    total_momentum, track_back, verify_bundle, Coupling, DensityKind, ExperimentConfig, ForceKernel,
    InitialDensitySpec, PhaseParallelepiped, RecordOptions, RunOptions,
};
use proptest::prelude::*;

#[test]
fn quiet_start_run_record_and_track() {
    let spec = InitialDensitySpec::uniform_box(1.0, 1.0).with_jitter(0.1);
    let ens = quiet_start_init(&spec, 256, 2, 4).unwrap().ensemble;
    let eps = epsilon_scale(1.0, ens.n(), 2).unwrap();
    let out = run(&ens, 0.5, &ForceKernel::repulsive(0.5).unwrap(), &RunOptions::new(eps)).unwrap();
    assert!(out.aborted.is_none());
    let traj = out.trajectory;

    let rec = diagnostics_record(&traj, &RecordOptions { eta: None, diff: None }).unwrap();
    assert_eq!(rec.rows.len(), 3);
    for row in &rec.rows {
        assert!(check_mlinf(row.m, row.linf_eps_hi, 2).holds);
        assert!(row.linf_eps_lo <= row.linf_eps_hi);
    }
    let csv = rec.to_csv();
    assert!(csv.starts_with(CSV_HEADER));
    assert_eq!(DiagnosticsRecord::rows_from_csv(&csv).unwrap(), rec.rows);
    assert!(short_time_check(&rec).t_obs > 0.0);

    let k = traj.steps();
    let snap = traj.snapshot(k);
    for i in [0, 100, 200] {
        let s = PhaseParallelepiped::ball(snap.x(i), snap.v(i), eps.sqrt()).unwrap();
        let rep = track_back(&s, &traj, traj.final_time(), eps, 1.0, 1.0).unwrap();
        assert!(rep.all_monotone);
        match &rep.termination {
            Termination::Completed => assert_eq!(rep.steps.len(), 2),
            Termination::NormConditions { failed, .. } => assert!(!failed.is_empty()),
        }
    }
}

#[test]
fn experiment_bundle_passes_its_own_verification() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
[density]
kind = "two-stream"
r0_x = 1.0
v_center = 0.5
v_halfwidth = 0.25
jitter = 0.1

[run]
n = [64, 100]
d = 1
alpha = 0.5
t_end = 0.5
seed = 11

[schedule]
boxes = 8
tracked = 8

[output]
dir = "{}"
"#,
        dir.path().display()
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert!(matches!(
        cfg.density_spec().unwrap().kind,
        DensityKind::TwoStream { .. }
    ));
    let s = run_experiment(&cfg).unwrap();
    assert_eq!(s.runs.len(), 2);
    let report = verify_bundle(dir.path()).unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    let back = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(back, cfg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn momentum_conserved_for_random_lattices(seed in 0u64..1000, d in 1usize..=2, attractive in any::<bool>()) {
        let spec = InitialDensitySpec::uniform_box(1.0, 0.5).with_jitter(0.1);
        let ens = quiet_start_init(&spec, 81, d, seed).unwrap().ensemble;
        let coupling = if attractive { Coupling::Attractive } else { Coupling::Repulsive };
        let kernel = ForceKernel::new(0.5, coupling).unwrap();
        let eps = epsilon_scale(1.0, ens.n(), d).unwrap();
        let out = run(&ens, 0.25, &kernel, &RunOptions::new(eps)).unwrap();
        let p0 = total_momentum(&ens);
        for snap in out.trajectory.snapshots() {
            for (a, b) in total_momentum(snap).iter().zip(&p0) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
