//! Experiment configuration: a flat TOML document with one level of sections.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{default_beta, validate_beta, DEFAULT_PAIR_BUDGET};
use crate::ensemble::{epsilon_scale, lattice_side, DensityKind, InitialDensitySpec};
use crate::error::{Error, Result};
use crate::field::{Coupling, ForceKernel};

/// Largest particle count accepted without `allow_large`.
pub const DESK_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r0_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r0_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_halfwidth: Option<f64>,
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n: Vec<usize>,
    pub d: usize,
    pub alpha: f64,
    #[serde(default = "default_sign")]
    pub sign: Coupling,
    pub t_end: f64,
    #[serde(default = "default_kappa")]
    pub kappa: usize,
    /// Overrides the midpoint of the admissible interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default = "default_budget")]
    pub pair_budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub allow_large: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Number of escalation stages `M`.
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Boxes per checkpoint in the `L^inf` preservation report.
    #[serde(default = "default_boxes")]
    pub boxes: usize,
    /// Boxes tracked back from the horizon and written to `tracking.jsonl`.
    #[serde(default = "default_tracked")]
    pub tracked: usize,
    #[serde(default = "default_safety")]
    pub pilot_safety: f64,
    /// Anchors for the shell decompositions.
    #[serde(default = "default_anchors")]
    pub anchors: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            stages: default_stages(),
            boxes: default_boxes(),
            tracked: default_tracked(),
            pilot_safety: default_safety(),
            anchors: default_anchors(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub nx: usize,
    pub nv: usize,
    pub lx: f64,
    pub lv: f64,
    #[serde(default = "default_oracle_dt")]
    pub dt: f64,
    /// Equispaced comparison times `j T / checkpoints`.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    /// Widest test function of the weak-distance dictionary.
    #[serde(default = "default_width")]
    pub dictionary_width: f64,
    /// Repeat the reference on a grid refined by two to estimate its error.
    #[serde(default = "default_true")]
    pub refine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub density: DensitySection,
    pub run: RunSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    pub output: OutputSection,
}

fn default_sign() -> Coupling {
    Coupling::Repulsive
}
fn default_kappa() -> usize {
    8
}
fn default_budget() -> usize {
    DEFAULT_PAIR_BUDGET
}
fn default_stages() -> usize {
    4
}
fn default_boxes() -> usize {
    32
}
fn default_tracked() -> usize {
    40
}
fn default_safety() -> f64 {
    2.0
}
fn default_anchors() -> usize {
    4
}
fn default_oracle_dt() -> f64 {
    1.0 / 32.0
}
fn default_checkpoints() -> usize {
    4
}
fn default_width() -> f64 {
    0.25
}
fn default_true() -> bool {
    true
}

/// Per-`N` quantities derived from the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub requested_n: usize,
    /// `k^{2d}` actually used by the quiet start.
    pub n: usize,
    pub epsilon: f64,
    /// `eta_i = eps^{1/2} r^i`, `i = 0..=M`, `r = eps^{-1/(4M)}`.
    pub eta_schedule: Vec<f64>,
    pub beta: f64,
    /// `beta = 1` estimator, used when the admissible interval is empty.
    pub short_time: bool,
    /// `eps^{-1/(8M)}`.
    pub growth_cap: f64,
}

pub fn eta_schedule(eps: f64, stages: usize) -> Vec<f64> {
    let r = eps.powf(-1.0 / (4.0 * stages as f64));
    (0..=stages).map(|i| eps.sqrt() * r.powi(i as i32)).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn density_spec(&self) -> Result<InitialDensitySpec> {
        let s = &self.density;
        let need = |name: &'static str, v: Option<f64>| {
            v.ok_or_else(|| Error::Config(format!("density.{name}: required for kind `{}`", s.kind)))
        };
        let allowed: &[&str] = match s.kind.as_str() {
            "uniform-box" => &["r0_x", "r0_v"],
            "product-gaussian-truncated" => &["sigma_x", "sigma_v", "r0_x", "r0_v"],
            "two-stream" => &["r0_x", "v_center", "v_halfwidth"],
            other => return Err(Error::UnsupportedDensity(other.to_string())),
        };
        let given = [
            ("r0_x", s.r0_x),
            ("r0_v", s.r0_v),
            ("sigma_x", s.sigma_x),
            ("sigma_v", s.sigma_v),
            ("v_center", s.v_center),
            ("v_halfwidth", s.v_halfwidth),
        ];
        if let Some((name, _)) = given.iter().find(|(n, v)| v.is_some() && !allowed.contains(n)) {
            return Err(Error::Config(format!(
                "density.{name}: not a parameter of kind `{}`",
                s.kind
            )));
        }
        let kind = match s.kind.as_str() {
            "uniform-box" => DensityKind::UniformBox {
                r0_x: need("r0_x", s.r0_x)?,
                r0_v: need("r0_v", s.r0_v)?,
            },
            "product-gaussian-truncated" => DensityKind::ProductGaussianTruncated {
                sigma_x: need("sigma_x", s.sigma_x)?,
                sigma_v: need("sigma_v", s.sigma_v)?,
                r0_x: need("r0_x", s.r0_x)?,
                r0_v: need("r0_v", s.r0_v)?,
            },
            _ => DensityKind::TwoStream {
                r0_x: need("r0_x", s.r0_x)?,
                v_center: need("v_center", s.v_center)?,
                v_halfwidth: need("v_halfwidth", s.v_halfwidth)?,
            },
        };
        let spec = InitialDensitySpec::new(kind).with_jitter(s.jitter);
        spec.validate().map_err(|e| Error::Config(format!("density: {e}")))?;
        Ok(spec)
    }

    pub fn kernel(&self) -> Result<ForceKernel> {
        if self.run.sign == Coupling::Off {
            return Ok(ForceKernel::off());
        }
        ForceKernel::new(self.run.alpha, self.run.sign)
    }

    /// Field-level validation; all problems are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let r = &self.run;
        if let Err(e) = self.density_spec() {
            errs.push(match e {
                Error::Config(m) => m,
                other => format!("density.kind: {other}"),
            });
        }
        if !(1..=3).contains(&r.d) {
            errs.push(format!("run.d: must be 1, 2 or 3, got {}", r.d));
        }
        if !(r.alpha > 0.0 && r.alpha < 1.0) {
            errs.push(format!("run.alpha: must lie in (0, 1), got {}", r.alpha));
        }
        if r.n.is_empty() {
            errs.push("run.n: at least one particle count is required".into());
        }
        if r.n.windows(2).any(|w| w[0] >= w[1]) {
            errs.push(format!("run.n: must be strictly ascending, got {:?}", r.n));
        }
        if !r.allow_large && r.n.iter().any(|&n| n > DESK_LIMIT) {
            errs.push(format!("run.n: counts above {DESK_LIMIT} need run.allow_large = true"));
        }
        if !(r.t_end > 0.0 && r.t_end.is_finite()) {
            errs.push(format!("run.t_end: must be positive, got {}", r.t_end));
        }
        if r.kappa < 2 {
            errs.push(format!("run.kappa: need at least 2 steps per eps, got {}", r.kappa));
        }
        if r.pair_budget == 0 {
            errs.push("run.pair_budget: must be positive".into());
        }
        if (1..=3).contains(&r.d) && r.alpha > 0.0 && r.alpha < 1.0 {
            if let Some(b) = r.beta {
                if let Err(e) = validate_beta(r.d, r.alpha, b, b == 1.0) {
                    errs.push(format!("run.beta: {e}"));
                }
            }
        }
        let s = &self.schedule;
        if s.stages < 1 {
            errs.push("schedule.stages: M must be at least 1".into());
        }
        if s.boxes < 1 {
            errs.push("schedule.boxes: must be positive".into());
        }
        if !(s.pilot_safety >= 1.0) {
            errs.push(format!("schedule.pilot_safety: must be >= 1, got {}", s.pilot_safety));
        }
        if let Some(o) = &self.oracle {
            if r.d != 1 {
                errs.push(format!("oracle: the grid reference needs run.d = 1, got {}", r.d));
            }
            if o.nx < 8 || o.nv < 8 {
                errs.push(format!("oracle.nx/nv: need at least 8 cells, got {} x {}", o.nx, o.nv));
            }
            if !(o.lx > 0.0 && o.lv > 0.0) {
                errs.push("oracle.lx/lv: must be positive".into());
            }
            if !(o.dt > 0.0) {
                errs.push(format!("oracle.dt: must be positive, got {}", o.dt));
            }
            if o.checkpoints < 1 {
                errs.push("oracle.checkpoints: must be positive".into());
            }
            if !(o.dictionary_width > 0.0) {
                errs.push("oracle.dictionary_width: must be positive".into());
            }
        }
        if errs.is_empty() {
            for &n in &r.n {
                match self.resolve(n) {
                    Ok(res) if res.epsilon >= 1.0 => errs.push(format!(
                        "run.n: eps = {} >= 1 for N = {n}; the eta schedule needs eps < 1",
                        res.epsilon
                    )),
                    Ok(_) => {}
                    Err(e) => errs.push(format!("run.n: {e}")),
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn resolve(&self, requested_n: usize) -> Result<Resolved> {
        let d = self.run.d;
        let spec = self.density_spec()?;
        let k = lattice_side(requested_n, d);
        if k < 2 {
            return Err(Error::param(
                "n",
                format!("N = {requested_n} is below the smallest lattice for d = {d}"),
            ));
        }
        let n = k.pow(2 * d as u32);
        let epsilon = epsilon_scale(spec.support_radius(), n, d)?;
        let (beta, short_time) = match self.run.beta {
            Some(b) => (b, b == 1.0),
            None => match default_beta(d, self.run.alpha) {
                Some(b) => (b, false),
                None => (1.0, true),
            },
        };
        let m = self.schedule.stages.max(1);
        Ok(Resolved {
            requested_n,
            n,
            epsilon,
            eta_schedule: eta_schedule(epsilon, m),
            beta,
            short_time,
            growth_cap: epsilon.powf(-1.0 / (8.0 * m as f64)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const BASE: &str = r#"
[density]
kind = "uniform-box"
r0_x = 1.0
r0_v = 1.0

[run]
n = [64, 256]
d = 1
alpha = 0.5
t_end = 0.25

[output]
dir = "out"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.run.kappa, 8);
        assert_eq!(cfg.schedule.stages, 4);
        assert_eq!(cfg.run.sign, Coupling::Repulsive);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn eta_schedule_endpoints() {
        for eps in [0.3, 0.01, 1e-4] {
            for m in [1, 4, 7] {
                let s = eta_schedule(eps, m);
                assert_eq!(s.len(), m + 1);
                assert_relative_eq!(s[0], eps.sqrt(), max_relative = 1e-14);
                assert_relative_eq!(s[m], eps.powf(0.25), max_relative = 1e-12);
                assert!(s.windows(2).all(|w| w[1] > w[0]));
            }
        }
    }

    #[test]
    fn resolve_pads_and_scales() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let r = cfg.resolve(70).unwrap();
        assert_eq!(r.n, 64);
        assert_relative_eq!(r.epsilon, 1.0 / 8.0);
        // d = 1 has no admissible beta > 1
        assert!(r.short_time);
        assert_eq!(r.beta, 1.0);
        assert_relative_eq!(r.growth_cap, (1.0f64 / 8.0).powf(-1.0 / 32.0));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = BASE.replace("t_end = 0.25", "t_end = 0.25\ntend = 1.0");
        let e = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(e.to_string().contains("tend"), "{e}");
    }

    #[test]
    fn field_level_messages() {
        let text = BASE
            .replace("alpha = 0.5", "alpha = 1.5")
            .replace("n = [64, 256]", "n = [256, 64]");
        let e = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("run.alpha"), "{e}");
        assert!(e.contains("run.n"), "{e}");
        let text = BASE.replace("r0_v = 1.0", "r0_v = 1.0\nsigma_x = 0.3");
        let e = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("density.sigma_x"), "{e}");
        let text = BASE.replace("r0_v = 1.0", "");
        let e = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("density.r0_v"), "{e}");
        let text = BASE.replace("n = [64, 256]", "n = [64, 8192]");
        let e = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("allow_large"), "{e}");
    }

    #[test]
    fn oracle_requires_one_dimension() {
        let text = BASE
            .replace("d = 1", "d = 2")
            .replace("[output]", "[oracle]\nnx = 64\nnv = 64\nlx = 2.0\nlv = 2.0\n\n[output]");
        let e = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("oracle"), "{e}");
    }

    #[test]
    fn beta_override_checked() {
        let text = BASE
            .replace("d = 1", "d = 2")
            .replace("t_end = 0.25", "t_end = 0.25\nbeta = 1.9");
        let e = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("run.beta"), "{e}");
        let text = BASE
            .replace("d = 1", "d = 2")
            .replace("t_end = 0.25", "t_end = 0.25\nbeta = 1.2");
        let r = ExperimentConfig::from_toml(&text).unwrap().resolve(256).unwrap();
        assert_eq!(r.beta, 1.2);
        assert!(!r.short_time);
    }
}
