//! Self-documentation printed by `meanfield print-schema`.

use crate::diagnostics::CSV_HEADER;

use super::convergence::CONVERGENCE_HEADER;

/// Annotated configuration template; every key is shown with its default.
pub const CONFIG_TEMPLATE: &str = r#"# meanfield experiment configuration (TOML, one level of sections)

[density]
# uniform-box: r0_x, r0_v
# product-gaussian-truncated: sigma_x, sigma_v, r0_x, r0_v
# two-stream: r0_x, v_center, v_halfwidth
kind = "product-gaussian-truncated"
sigma_x = 0.5
sigma_v = 0.5
r0_x = 1.0
r0_v = 1.0
jitter = 0.1            # fraction of a quantile cell, in [0, 0.1]

[run]
n = [256, 1024, 4096]   # strictly ascending; padded down to k^(2d)
d = 1                   # 1, 2 or 3
alpha = 0.5             # kernel exponent in (0, 1)
sign = "repulsive"      # repulsive | attractive | off
t_end = 0.5
kappa = 8               # steps per eps
# beta = 1.25           # default: midpoint of (1, min(d - alpha, 2d - 3 alpha)); 1 when empty
pair_budget = 100000    # sampled pairs for dEbar above the exact limit
seed = 0
allow_large = false     # permit N > 4096

[schedule]
stages = 4              # M; eta_i = eps^(1/2) eps^(-i/(4M)), i = 0..=M
boxes = 32              # boxes per checkpoint in each L^inf stage report
tracked = 40            # boxes written to tracking.jsonl (plus as many pilot boxes)
pilot_safety = 2.0      # growth constant = safety * largest pilot requirement
anchors = 4             # shell decomposition anchors

[oracle]                # optional, d = 1 only
nx = 256
nv = 256
lx = 2.0
lv = 2.0
dt = 0.03125
checkpoints = 4         # comparison times j T / checkpoints
dictionary_width = 0.25
refine = true           # rerun on a 2x grid to estimate the reference error

[output]
dir = "out"
"#;

pub fn schema_text() -> String {
    format!(
        "{CONFIG_TEMPLATE}
# Bundle layout (simulate)
#   <dir>/config.toml        resolved configuration
#   <dir>/summary.json       keys: config, epsilon, T_obs, gate_first_violation,
#                            theorem1_checks, theorem4_fitted_C, fconv_by_N,
#                            empirical_n_tilde, code_version, runs
#   <dir>/N<n>/diagnostics.csv   columns: {CSV_HEADER}
#   <dir>/N<n>/shells.json       shell sizes, stability and count reports per anchor
#   <dir>/N<n>/tracking.jsonl    one backward step per line, keyed by box and center
#   <dir>/N<n>/linf_stages.json  L^inf preservation report per eta stage
#
# Convergence study (converge)
#   <dir>/convergence.csv    columns: {CONVERGENCE_HEADER}
#   <dir>/convergence.json   table, weak_exponent, fconv_by_N, fconv_exponent, grid_floor
#
# Exit codes: 0 ok, 2 config error, 3 collision, 4 invariant violation
"
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ExperimentConfig;

    #[test]
    fn template_is_a_valid_config() {
        let cfg = ExperimentConfig::from_toml(CONFIG_TEMPLATE).unwrap();
        assert_eq!(cfg.run.n, vec![256, 1024, 4096]);
        assert!(cfg.oracle.is_some());
        assert!(schema_text().contains(CSV_HEADER));
    }
}
