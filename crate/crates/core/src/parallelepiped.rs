//! Block-matrix phase-space parallelepipeds tracked backward along the flow,
//! with their lattice covers.
//!
//! A parallelepiped is `S = {z : ||M (z - z0)|| <= eta}` in `R^{2d}`, where
//! `||(x, v)|| = max(|x|, |v|)` with Euclidean norms inside each block and
//! `M = [[A, B], [C, D]]`.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::discrete_linf;
use crate::ensemble::{check_dim, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::field::{field_regularized, grad_field_regularized};
use crate::integrator::Trajectory;

/// Slack on the norm-condition thresholds.
const COND_TOL: f64 = 1e-12;

/// Largest lattice enumeration accepted by [`lattice_cover`].
pub const COVER_LIMIT: usize = 20_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseParallelepiped {
    dim: usize,
    center: Vec<f64>,
    m: DMatrix<f64>,
    radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    A,
    B,
    C,
    D,
}

impl PhaseParallelepiped {
    pub fn new(center_x: &[f64], center_v: &[f64], m: DMatrix<f64>, radius: f64) -> Result<Self> {
        let d = center_x.len();
        check_dim(d)?;
        if center_v.len() != d {
            return Err(Error::param("center", "position and velocity blocks differ in length"));
        }
        if m.nrows() != 2 * d || m.ncols() != 2 * d {
            return Err(Error::param("M", format!("expected a {0}x{0} matrix", 2 * d)));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::param("radius", format!("must be positive, got {radius}")));
        }
        if !m.iter().chain(center_x).chain(center_v).all(|v| v.is_finite()) {
            return Err(Error::param("M", "blocks and center must be finite"));
        }
        let mut center = center_x.to_vec();
        center.extend_from_slice(center_v);
        Ok(Self {
            dim: d,
            center,
            m,
            radius,
        })
    }

    pub fn from_blocks(center_x: &[f64], center_v: &[f64], blocks: [&DMatrix<f64>; 4], radius: f64) -> Result<Self> {
        let d = center_x.len();
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        for (b, (r, c)) in blocks.iter().zip([(0, 0), (0, d), (d, 0), (d, d)]) {
            if b.nrows() != d || b.ncols() != d {
                return Err(Error::param("blocks", format!("each block must be {d}x{d}")));
            }
            m.view_mut((r, c), (d, d)).copy_from(b);
        }
        Self::new(center_x, center_v, m, radius)
    }

    /// Axis box `max(|x - x0|, |v - v0|) <= radius`.
    pub fn ball(center_x: &[f64], center_v: &[f64], radius: f64) -> Result<Self> {
        let d = center_x.len();
        Self::new(center_x, center_v, DMatrix::identity(2 * d, 2 * d), radius)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn center_x(&self) -> &[f64] {
        &self.center[..self.dim]
    }

    pub fn center_v(&self) -> &[f64] {
        &self.center[self.dim..]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn block(&self, b: Block) -> DMatrix<f64> {
        let d = self.dim;
        let (r, c) = match b {
            Block::A => (0, 0),
            Block::B => (0, d),
            Block::C => (d, 0),
            Block::D => (d, d),
        };
        self.m.view((r, c), (d, d)).into_owned()
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    /// `||M (z - z0)||` for a phase point `z = (x, v)`.
    pub fn level(&self, x: &[f64], v: &[f64]) -> f64 {
        let d = self.dim;
        let mut dz = [0.0; 6];
        for k in 0..d {
            dz[k] = x[k] - self.center[k];
            dz[d + k] = v[k] - self.center[d + k];
        }
        block_norm(&apply(&self.m, &dz[..2 * d]), d)
    }

    pub fn contains(&self, x: &[f64], v: &[f64]) -> bool {
        self.level(x, v) <= self.radius
    }

    /// Same set, shifted center.
    pub fn translated(&self, shift: &[f64]) -> Self {
        let mut s = self.clone();
        for (c, d) in s.center.iter_mut().zip(shift) {
            *c += d;
        }
        s
    }

    fn inverse(&self) -> Result<DMatrix<f64>> {
        self.m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::ConditionViolated("singular block matrix".into()))
    }
}

fn apply(m: &DMatrix<f64>, z: &[f64]) -> [f64; 6] {
    let n = z.len();
    let mut out = [0.0; 6];
    for (r, o) in out.iter_mut().enumerate().take(n) {
        *o = (0..n).map(|c| m[(r, c)] * z[c]).sum();
    }
    out
}

/// `max(|z_x|, |z_v|)` with Euclidean block norms.
pub fn block_norm(z: &[f64], d: usize) -> f64 {
    let a = z[..d].iter().map(|c| c * c).sum::<f64>().sqrt();
    let b = z[d..2 * d].iter().map(|c| c * c).sum::<f64>().sqrt();
    a.max(b)
}

/// Induced 2-norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.singular_values().max()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConditions {
    /// `max(||A - I||, ||D - I||)`.
    pub diagonal: f64,
    /// `max(||B||, ||C||)`.
    pub off_diagonal: f64,
    /// `||A - I|| + ||B||`.
    pub row_x: f64,
    /// `||C|| + ||D - I||`.
    pub row_v: f64,
    /// Block conditions: each of the four norms at most 1/2.
    pub blocks_hold: bool,
    /// Row conditions, under which `S` lies in the `2 eta` ball.
    pub admissible: bool,
}

impl NormConditions {
    /// `(1/2 - diagonal, 1/2 - off_diagonal)`.
    pub fn block_margins(&self) -> [f64; 2] {
        [0.5 - self.diagonal, 0.5 - self.off_diagonal]
    }

    pub fn row_margins(&self) -> [f64; 2] {
        [0.5 - self.row_x, 0.5 - self.row_v]
    }

    /// Names of the failing conditions.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.row_x > 0.5 + COND_TOL {
            out.push("||A - I|| + ||B|| <= 1/2");
        }
        if self.row_v > 0.5 + COND_TOL {
            out.push("||C|| + ||D - I|| <= 1/2");
        }
        out
    }
}

pub fn norm_conditions(s: &PhaseParallelepiped) -> NormConditions {
    let id = DMatrix::<f64>::identity(s.dim, s.dim);
    let a = operator_norm(&(s.block(Block::A) - &id));
    let b = operator_norm(&s.block(Block::B));
    let c = operator_norm(&s.block(Block::C));
    let d = operator_norm(&(s.block(Block::D) - &id));
    let diagonal = a.max(d);
    let off_diagonal = b.max(c);
    NormConditions {
        diagonal,
        off_diagonal,
        row_x: a + b,
        row_v: c + d,
        blocks_hold: diagonal <= 0.5 + COND_TOL && off_diagonal <= 0.5 + COND_TOL,
        admissible: a + b <= 0.5 + COND_TOL && c + d <= 0.5 + COND_TOL,
    }
}

fn require_admissible(s: &PhaseParallelepiped) -> Result<NormConditions> {
    let nc = norm_conditions(s);
    if !nc.admissible {
        return Err(Error::NormConditionsViolated(describe(&nc)));
    }
    Ok(nc)
}

fn describe(nc: &NormConditions) -> String {
    let f = nc.failures();
    format!(
        "{} (row sums {:.6}, {:.6})",
        if f.is_empty() { "none".to_string() } else { f.join(", ") },
        nc.row_x,
        nc.row_v
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    /// Largest `||z - z0||` over the probed boundary points.
    pub max_distance: f64,
    /// `2 eta`.
    pub bound: f64,
    /// `eta max_b (||K_b1|| + ||K_b2||)` with `K = M^{-1}`; a rigorous upper value.
    pub analytic_bound: f64,
    pub points: usize,
    /// `true` when the extreme points were enumerated exactly (d = 1).
    pub exact: bool,
    pub holds: bool,
    /// Boundary point attaining `max_distance`, as a displacement from the center.
    pub witness: Vec<f64>,
}

/// Probes the boundary of `S` for points outside the `2 eta` ball; requires
/// the row conditions.
pub fn containment_check(s: &PhaseParallelepiped, samples: usize, seed: u64) -> Result<ContainmentReport> {
    require_admissible(s)?;
    containment_probe(s, samples, seed)
}

/// As [`containment_check`] without the precondition: for d = 1 the four
/// corners `M^{-1}(+-eta, +-eta)` are exact; otherwise pairs of sphere points
/// are sampled and refined by coordinate ascent.
pub fn containment_probe(s: &PhaseParallelepiped, samples: usize, seed: u64) -> Result<ContainmentReport> {
    let d = s.dim;
    let k = s.inverse()?;
    let eta = s.radius;
    let dist = |w: &[f64]| -> (f64, Vec<f64>) {
        let z = apply(&k, w);
        (block_norm(&z[..2 * d], d), z[..2 * d].to_vec())
    };
    let analytic = {
        let seg = |r: usize, c: usize| operator_norm(&k.view((r, c), (d, d)).into_owned());
        eta * (seg(0, 0) + seg(0, d)).max(seg(d, 0) + seg(d, d))
    };
    let mut best = (0.0, vec![0.0; 2 * d]);
    let mut points = 0;
    let exact = d == 1;
    if exact {
        for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let r = dist(&[a * eta, b * eta]);
            points += 1;
            if r.0 > best.0 {
                best = r;
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples.max(1) {
            let mut w = sphere_pair(&mut rng, d, eta);
            let mut cur = dist(&w);
            // coordinate ascent over each sphere: random rotations, keep improvements
            let mut step = 0.5;
            for _ in 0..40 {
                let mut trial = w.clone();
                for c in trial.iter_mut() {
                    *c += step * eta * rng.random_range(-1.0..1.0);
                }
                normalize_blocks(&mut trial, d, eta);
                let r = dist(&trial);
                if r.0 > cur.0 {
                    cur = r;
                    w = trial;
                } else {
                    step *= 0.8;
                }
            }
            points += 1;
            if cur.0 > best.0 {
                best = cur;
            }
        }
    }
    Ok(ContainmentReport {
        max_distance: best.0,
        bound: 2.0 * eta,
        analytic_bound: analytic,
        points,
        exact,
        holds: best.0 <= 2.0 * eta * (1.0 + 1e-12),
        witness: best.1,
    })
}

fn normalize_blocks(w: &mut [f64], d: usize, eta: f64) {
    for blk in w.chunks_exact_mut(d) {
        let n = blk.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.0 {
            for c in blk.iter_mut() {
                *c *= eta / n;
            }
        }
    }
}

fn sphere_pair(rng: &mut ChaCha8Rng, d: usize, eta: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize_blocks(&mut w, d, eta);
    w
}

/// Uniform sample from the product of two Euclidean `d`-balls of radius `r`.
fn ball_pair(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(2 * d);
    for _ in 0..2 {
        loop {
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
            if p.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
                w.extend(p.iter().map(|c| c * r));
                break;
            }
        }
    }
    w
}

/// Uniform sample of members of `S`.
pub fn sample_members(s: &PhaseParallelepiped, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let k = s.inverse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = s.dim;
    Ok((0..count)
        .map(|_| {
            let w = ball_pair(&mut rng, d, s.radius);
            let z = apply(&k, &w);
            (0..2 * d).map(|c| s.center[c] + z[c]).collect()
        })
        .collect())
}

/// Random matrix satisfying the row conditions with total row budgets drawn
/// in `(0, max_row]`.
pub fn random_admissible_matrix(d: usize, rng: &mut impl Rng, max_row: f64) -> DMatrix<f64> {
    let mut m = DMatrix::identity(2 * d, 2 * d);
    for row in 0..2 {
        let budget = max_row * rng.random_range(0.0..=1.0f64).max(1e-3);
        let share = rng.random_range(0.0..=1.0f64);
        for (col, part) in [(0, share), (1, 1.0 - share)] {
            let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let n = operator_norm(&g);
            if n == 0.0 {
                continue;
            }
            let scaled = g * (budget * part / n);
            let mut view = m.view_mut((row * d, col * d), (d, d));
            view += scaled;
        }
    }
    m
}

/// Number of particles in `S`.
pub fn count_in(ens: &ParticleEnsemble, s: &PhaseParallelepiped) -> usize {
    (0..ens.n()).filter(|&i| s.contains(ens.x(i), ens.v(i))).count()
}

/// Indices of the particles in `S`.
pub fn members_in(ens: &ParticleEnsemble, s: &PhaseParallelepiped) -> Vec<usize> {
    (0..ens.n()).filter(|&i| s.contains(ens.x(i), ens.v(i))).collect()
}

/// Time-integrated regularized field and mean gradient at the center over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepField {
    /// `int E_eps(s, X0) ds` over the step.
    pub field_integral: Vec<f64>,
    /// `(1/h) int grad E_eps(s, X0) ds`.
    pub mean_gradient: DMatrix<f64>,
}

/// The backward map with a prescribed field: blocks
/// `A' = A + h B G`, `B' = B + h A`, `C' = C + h D G`, `D' = D + h C`,
/// center `X0' = X0 - h V0`, `V0' = V0 - int E`, radius
/// `eta' = eta + c h (eta^beta + h)`.
pub fn backward_map(s: &PhaseParallelepiped, field: &StepField, h: f64, beta: f64, c: f64) -> PhaseParallelepiped {
    let d = s.dim;
    let g = &field.mean_gradient;
    let (a, b, cc, dd) = (
        s.block(Block::A),
        s.block(Block::B),
        s.block(Block::C),
        s.block(Block::D),
    );
    let a2 = &a + &b * g * h;
    let b2 = &b + &a * h;
    let c2 = &cc + &dd * g * h;
    let d2 = &dd + &cc * h;
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&a2);
    m.view_mut((0, d), (d, d)).copy_from(&b2);
    m.view_mut((d, 0), (d, d)).copy_from(&c2);
    m.view_mut((d, d), (d, d)).copy_from(&d2);
    let mut center = s.center.clone();
    for k in 0..d {
        center[k] = s.center[k] - h * s.center[d + k];
        center[d + k] = s.center[d + k] - field.field_integral[k];
    }
    PhaseParallelepiped {
        dim: d,
        center,
        m,
        radius: s.radius + c * h * (s.radius.powf(beta) + h),
    }
}

/// Trapezoid integrals of `E_eps` and `grad E_eps` at the fixed center over `[t - h, t]`.
pub fn step_field(traj: &Trajectory, s: &PhaseParallelepiped, t: f64, h: f64, eps: f64) -> Result<StepField> {
    let (k0, k1) = window(traj, t, h)?;
    let d = s.dim;
    let x0 = s.center_x();
    let kernel = traj.kernel();
    let mut e = vec![0.0; d];
    let mut g = DMatrix::zeros(d, d);
    for k in k0..=k1 {
        let w = if k == k0 || k == k1 { 0.5 } else { 1.0 } * traj.dt();
        let snap = traj.snapshot(k);
        let ek = field_regularized(snap, x0, eps, kernel)?;
        for (a, b) in e.iter_mut().zip(&ek) {
            *a += w * b;
        }
        g += grad_field_regularized(snap, x0, eps, kernel)? * w;
    }
    let span = (k1 - k0) as f64 * traj.dt();
    Ok(StepField {
        field_integral: e,
        mean_gradient: if span > 0.0 { g / span } else { g },
    })
}

fn window(traj: &Trajectory, t: f64, h: f64) -> Result<(usize, usize)> {
    let start = t - h;
    match (traj.index_of(start), traj.index_of(t)) {
        (Some(a), Some(b)) if a < b => Ok((a, b)),
        _ => Err(Error::WindowMissing { start, end: t }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Time after the step (`t - h`).
    pub t: f64,
    pub h: f64,
    /// Particles of `S` at `t` (before the step).
    pub count_before: usize,
    /// Particles of `S'` at `t - h`.
    pub count_after: usize,
    pub radius: f64,
    pub det: f64,
    pub det_drift: f64,
    /// `max` over the four blocks of `||X' - X||`.
    pub block_drift: f64,
    /// `h (max(||A||, ||C||) + max(||B||, ||D||) ||G||)`.
    pub drift_bound: f64,
    /// Smallest growth constant that keeps every member of `S` inside `S'`.
    pub required_c: f64,
    /// Members of `S` that left `S'`.
    pub escaped: usize,
    pub block_margins: [f64; 2],
    pub row_margins: [f64; 2],
}

/// One backward step of length `h` from time `t`.
pub fn backward_step(
    s: &PhaseParallelepiped,
    traj: &Trajectory,
    t: f64,
    h: f64,
    eps: f64,
    beta: f64,
    c: f64,
) -> Result<(PhaseParallelepiped, StepInfo)> {
    require_admissible(s)?;
    if traj.dim() != s.dim {
        return Err(Error::param("traj", "dimension differs from the parallelepiped"));
    }
    if !(h > 0.0 && h <= eps * (1.0 + 1e-9)) {
        return Err(Error::param(
            "h",
            format!("step length {h} must lie in (0, eps = {eps}]"),
        ));
    }
    let (k0, k1) = window(traj, t, h)?;
    let field = step_field(traj, s, t, h, eps)?;
    let next = backward_map(s, &field, h, beta, c);
    let before = traj.snapshot(k1);
    let after = traj.snapshot(k0);
    let members = members_in(before, s);
    let mut required: f64 = 0.0;
    let mut escaped = 0;
    let scale = h * (s.radius.powf(beta) + h);
    for &j in &members {
        let lvl = next.level(after.x(j), after.v(j));
        required = required.max((lvl - s.radius) / scale);
        if lvl > next.radius {
            escaped += 1;
        }
    }
    let blocks = [Block::A, Block::B, Block::C, Block::D];
    let block_drift = blocks
        .iter()
        .map(|&b| operator_norm(&(next.block(b) - s.block(b))))
        .fold(0.0, f64::max);
    let n = |b| operator_norm(&s.block(b));
    let drift_bound =
        h * (n(Block::A).max(n(Block::C)) + n(Block::B).max(n(Block::D)) * operator_norm(&field.mean_gradient));
    let nc = norm_conditions(&next);
    let det = next.det();
    let info = StepInfo {
        t: t - h,
        h,
        count_before: members.len(),
        count_after: count_in(after, &next),
        radius: next.radius,
        det,
        det_drift: (det - s.det()).abs(),
        block_drift,
        drift_bound,
        required_c: required.max(0.0),
        escaped,
        block_margins: nc.block_margins(),
        row_margins: nc.row_margins(),
    };
    Ok((next, info))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    NormConditions {
        t: f64,
        failed: Vec<String>,
        row_margins: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingStep {
    pub step: usize,
    #[serde(flatten)]
    pub info: StepInfo,
    /// `alpha_n = r_n - eta - c n eps (eps + eta^beta)`.
    pub alpha_n: f64,
    /// `((1 + q eps)^n - 1) c t (eps + eta^beta)` with `q = c beta 2^{beta-1} eta^{beta-1}`.
    pub alpha_bound: f64,
    pub radius_bound_holds: bool,
    /// `N_t <= N_{t - h}`.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub t_start: f64,
    pub eta: f64,
    pub eps: f64,
    pub beta: f64,
    pub growth_const: f64,
    pub initial_count: usize,
    pub steps: Vec<TrackingStep>,
    pub termination: Termination,
    /// `eta + c (n eps + ((1 + q eps)^n - 1) t)(eps + eta^beta)` for the full step count.
    pub final_radius_bound: f64,
    pub all_monotone: bool,
    #[serde(skip)]
    pub final_set: Option<PhaseParallelepiped>,
}

impl TrackingReport {
    pub fn completed(&self) -> bool {
        self.termination == Termination::Completed
    }

    pub fn final_radius(&self) -> f64 {
        self.steps.last().map_or(self.eta, |s| s.info.radius)
    }

    /// One JSON object per backward step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Step lengths from `t` back to 0: full `eps` steps, then one shorter step.
fn step_lengths(t: f64, eps: f64) -> Vec<f64> {
    let full = (t / eps + 1e-9).floor() as usize;
    let mut out = vec![eps; full];
    let rest = t - full as f64 * eps;
    if rest > 1e-9 * eps {
        out.push(rest);
    }
    out
}

/// Tracks `s` from time `t` back to 0, stopping when the row conditions fail;
/// the set reached at 0 must satisfy them too for the tracking to complete.
pub fn track_back(
    s: &PhaseParallelepiped,
    traj: &Trajectory,
    t: f64,
    eps: f64,
    beta: f64,
    c: f64,
) -> Result<TrackingReport> {
    let eta = s.radius;
    let lengths = step_lengths(t, eps);
    let q = c * beta * 2f64.powf(beta - 1.0) * eta.powf(beta - 1.0);
    let unit = c * (eps + eta.powf(beta));
    let n_total = lengths.len() as i32;
    let final_radius_bound = eta + unit * (n_total as f64 * eps + ((1.0 + q * eps).powi(n_total) - 1.0) * t);
    let k_start = traj.index_of(t).ok_or(Error::WindowMissing { start: 0.0, end: t })?;
    let initial_count = count_in(traj.snapshot(k_start), s);
    let mut cur = s.clone();
    let mut time = t;
    let mut steps = Vec::with_capacity(lengths.len());
    let mut termination = Termination::Completed;
    for (n, &h) in lengths.iter().enumerate() {
        let nc = norm_conditions(&cur);
        if !nc.admissible {
            termination = Termination::NormConditions {
                t: time,
                failed: nc.failures().iter().map(|s| s.to_string()).collect(),
                row_margins: nc.row_margins(),
            };
            break;
        }
        let (next, info) = backward_step(&cur, traj, time, h, eps, beta, c)?;
        let k = (n + 1) as i32;
        let alpha_n = info.radius - eta - unit * k as f64 * eps;
        let alpha_bound = ((1.0 + q * eps).powi(k) - 1.0) * unit * t;
        steps.push(TrackingStep {
            step: n + 1,
            monotone: info.count_before <= info.count_after,
            radius_bound_holds: alpha_n <= alpha_bound + 1e-12 * eta,
            alpha_n,
            alpha_bound,
            info,
        });
        cur = next;
        time -= h;
    }
    if termination == Termination::Completed {
        // the set reached at time 0 must itself be admissible
        let nc = norm_conditions(&cur);
        if !nc.admissible {
            termination = Termination::NormConditions {
                t: time,
                failed: nc.failures().iter().map(|s| s.to_string()).collect(),
                row_margins: nc.row_margins(),
            };
        }
    }
    let all_monotone = steps.iter().all(|s| s.monotone);
    let done = termination == Termination::Completed;
    Ok(TrackingReport {
        t_start: t,
        eta,
        eps,
        beta,
        growth_const: c,
        initial_count,
        steps,
        termination,
        final_radius_bound,
        all_monotone,
        final_set: done.then_some(cur),
    })
}

/// Growth constant from a pilot pass: boxes around `centers` at time `t` are
/// tracked with `c = 0`, and the largest required constant is multiplied by
/// `safety`.
pub fn pilot_growth_constant(
    traj: &Trajectory,
    centers: &[usize],
    t: f64,
    eta: f64,
    eps: f64,
    beta: f64,
    safety: f64,
) -> Result<f64> {
    let k = traj.index_of(t).ok_or(Error::WindowMissing { start: 0.0, end: t })?;
    let snap = traj.snapshot(k);
    let worst = centers
        .par_iter()
        .map(|&i| -> Result<f64> {
            let s = PhaseParallelepiped::ball(snap.x(i), snap.v(i), eta)?;
            let rep = track_back(&s, traj, t, eps, beta, 0.0)?;
            Ok(rep.steps.iter().map(|s| s.info.required_c).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(safety * worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeCover {
    pub eps: f64,
    /// Integer coordinates `p` of the points `eps p`.
    pub points: Vec<Vec<i64>>,
    pub det: f64,
    /// `|P| (2 eps)^{2d}`.
    pub literal_lhs: f64,
    /// `det(M) (eta + 4 eps)^{2d}`.
    pub literal_rhs: f64,
    pub literal_holds: bool,
    /// `|P| eps^{2d}`: the disjoint lattice cells of side `eps`.
    pub volume_lhs: f64,
    /// `vol(S+_{4 eps}) = omega_d^2 (eta + 4 eps)^{2d} / |det M|`.
    pub volume_rhs: f64,
    pub volume_holds: bool,
    /// `C'` in `|P| = eps^{-2d} eta^{2d-1} (eta + C' eps)`.
    pub c_prime: f64,
}

impl LatticeCover {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Volume of the Euclidean unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => f64::NAN,
    }
}

/// All points of `eps Z^{2d}` inside `S+_{2 eps}`.
pub fn lattice_cover(s: &PhaseParallelepiped, eps: f64) -> Result<LatticeCover> {
    let nc = norm_conditions(s);
    if !nc.admissible {
        return Err(Error::ConditionViolated(describe(&nc)));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    let d = s.dim;
    let n = 2 * d;
    let k = s.inverse()?;
    let big = s.radius + 2.0 * eps;
    let mut lo = vec![0i64; n];
    let mut hi = vec![0i64; n];
    let mut total: usize = 1;
    for i in 0..n {
        let seg = |c0: usize| (0..d).map(|c| k[(i, c0 + c)].powi(2)).sum::<f64>().sqrt();
        let ext = big * (seg(0) + seg(d));
        lo[i] = ((s.center[i] - ext) / eps).ceil() as i64;
        hi[i] = ((s.center[i] + ext) / eps).floor() as i64;
        let span = (hi[i] - lo[i] + 1).max(0) as usize;
        total = total.saturating_mul(span);
    }
    if total > COVER_LIMIT {
        return Err(Error::TooLarge {
            n: total,
            limit: COVER_LIMIT,
        });
    }
    let mut points = Vec::new();
    if total > 0 {
        let mut p = lo.clone();
        let mut z = vec![0.0; n];
        'outer: loop {
            for c in 0..n {
                z[c] = p[c] as f64 * eps;
            }
            if s.level(&z[..d], &z[d..]) <= big {
                points.push(p.clone());
            }
            for c in 0..n {
                if p[c] < hi[c] {
                    p[c] += 1;
                    continue 'outer;
                }
                p[c] = lo[c];
            }
            break;
        }
    }
    let det = s.det();
    let count = points.len() as f64;
    let n_i = n as i32;
    let literal_lhs = count * (2.0 * eps).powi(n_i);
    let literal_rhs = det * (s.radius + 4.0 * eps).powi(n_i);
    let volume_lhs = count * eps.powi(n_i);
    let volume_rhs = unit_ball_volume(d).powi(2) * (s.radius + 4.0 * eps).powi(n_i) / det.abs();
    Ok(LatticeCover {
        eps,
        det,
        literal_lhs,
        literal_rhs,
        literal_holds: literal_lhs <= literal_rhs,
        volume_lhs,
        volume_rhs,
        volume_holds: volume_lhs <= volume_rhs * (1.0 + 1e-12),
        c_prime: (volume_lhs / s.radius.powi(n_i - 1) - s.radius) / eps,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverCheck {
    pub checked: usize,
    /// Largest distance from a checked point to its nearest lattice point.
    pub max_distance: f64,
    /// Checked points whose nearest lattice point is missing from `P` or farther than `eps`.
    pub failures: usize,
}

/// Verifies `S ⊂ ∪ B(p, eps)` on `samples` uniform members of `S` plus the given extra points.
pub fn verify_cover(
    s: &PhaseParallelepiped,
    cover: &LatticeCover,
    samples: usize,
    seed: u64,
    extra: &[Vec<f64>],
) -> Result<CoverCheck> {
    let d = s.dim;
    let set: HashSet<&[i64]> = cover.points.iter().map(Vec::as_slice).collect();
    let mut pts = sample_members(s, samples, seed)?;
    pts.extend(extra.iter().filter(|z| s.contains(&z[..d], &z[d..])).cloned());
    let eps = cover.eps;
    let mut max_distance: f64 = 0.0;
    let mut failures = 0;
    for z in &pts {
        let p: Vec<i64> = z.iter().map(|c| (c / eps).round() as i64).collect();
        let diff: Vec<f64> = z.iter().zip(&p).map(|(c, &q)| c - q as f64 * eps).collect();
        let dist = block_norm(&diff, d);
        max_distance = max_distance.max(dist);
        if dist > eps || !set.contains(p.as_slice()) {
            failures += 1;
        }
    }
    Ok(CoverCheck {
        checked: pts.len(),
        max_distance,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinfCheckpoint {
    pub t: f64,
    pub boxes: usize,
    /// Boxes tracked back to time 0 without a norm-condition stop.
    pub completed: usize,
    pub monotone_violations: usize,
    /// Boxes with `N_t <= N_0 <= ||mu(0)||_upper (2 eps)^{2d} N |P|` violated.
    pub bound_violations: usize,
    /// Largest `N_t / (N (2 eta)^{2d})` over the tracked boxes.
    pub tracked_density: f64,
    /// Largest `N_0 / (N (2 eta)^{2d})`.
    pub covered_density: f64,
    /// Largest covering bound `||mu(0)||_upper |P| (eps / eta)^{2d}`.
    pub cover_bound: f64,
    /// Particle-centred lower value of `||mu(t)||_{inf, eta}`.
    pub linf_eta: f64,
    /// `linf_eta / linf_eps_0`.
    pub ratio: f64,
    /// `ratio - 1`.
    pub slack: f64,
    /// `slack / (eta^beta + eps / eta)`.
    pub fitted_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinfPreservationReport {
    pub eta: f64,
    pub eps: f64,
    pub beta: f64,
    pub growth_const: f64,
    /// Particle-centred lower value of `||mu(0)||_{inf, eps}`.
    pub linf_eps_0: f64,
    pub linf_eps_0_upper: f64,
    /// Last checkpoint at which every box tracked back to 0.
    pub no_stretch_horizon: f64,
    pub checkpoints: Vec<LinfCheckpoint>,
    pub max_ratio: f64,
    pub max_fitted_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinfOptions {
    pub eta: f64,
    pub eps: f64,
    pub beta: f64,
    pub growth_const: f64,
    pub horizon: f64,
    pub boxes: usize,
    pub seed: u64,
}

/// Tracks `boxes` particle-centred `eta`-boxes back from every `eps`-multiple up
/// to `horizon`, covers the time-0 sets and compares densities. Checkpoints stop
/// at the first one where a box fails the row conditions.
pub fn linf_preservation_report(traj: &Trajectory, opts: &LinfOptions) -> Result<LinfPreservationReport> {
    let LinfOptions {
        eta,
        eps,
        beta,
        growth_const: c,
        horizon,
        boxes,
        seed,
    } = *opts;
    if !(eta > eps) {
        return Err(Error::ScaleOrder { eps, eta });
    }
    let d = traj.dim();
    let n = traj.n();
    let dims = 2 * d as i32;
    let lin0 = discrete_linf(traj.snapshot(0), eps)?;
    let per_ball = lin0.upper * (2.0 * eps).powi(dims) * n as f64;
    let box_vol = n as f64 * (2.0 * eta).powi(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = horizon.min(traj.final_time());
    let n_ck = (t_max / eps + 1e-9).floor() as usize;
    let mut checkpoints = Vec::new();
    let mut no_stretch = 0.0;
    for ck in 0..=n_ck {
        let t = ck as f64 * eps;
        let Some(k) = traj.index_of(t) else { break };
        let snap = traj.snapshot(k);
        let centers = rand::seq::index::sample(&mut rng, n, boxes.min(n)).into_vec();
        let tracks = centers
            .par_iter()
            .map(|&i| -> Result<(TrackingReport, Option<LatticeCover>)> {
                let s = PhaseParallelepiped::ball(snap.x(i), snap.v(i), eta)?;
                let rep = track_back(&s, traj, t, eps, beta, c)?;
                let cover = match &rep.final_set {
                    Some(s0) => Some(lattice_cover(s0, eps)?),
                    None => None,
                };
                Ok((rep, cover))
            })
            .collect::<Result<Vec<_>>>()?;
        let completed = tracks.iter().filter(|(r, _)| r.completed()).count();
        let mut row = LinfCheckpoint {
            t,
            boxes: centers.len(),
            completed,
            monotone_violations: tracks.iter().filter(|(r, _)| !r.all_monotone).count(),
            bound_violations: 0,
            tracked_density: 0.0,
            covered_density: 0.0,
            cover_bound: 0.0,
            linf_eta: discrete_linf(snap, eta)?.lower,
            ratio: 0.0,
            slack: 0.0,
            fitted_c: 0.0,
        };
        for (rep, cover) in &tracks {
            let (Some(s0), Some(cover)) = (&rep.final_set, cover) else {
                continue;
            };
            let n0 = count_in(traj.snapshot(0), s0);
            let bound = per_ball * cover.len() as f64;
            if rep.initial_count > n0 || n0 as f64 > bound {
                row.bound_violations += 1;
            }
            row.tracked_density = row.tracked_density.max(rep.initial_count as f64 / box_vol);
            row.covered_density = row.covered_density.max(n0 as f64 / box_vol);
            row.cover_bound = row.cover_bound.max(bound / box_vol);
        }
        row.ratio = row.linf_eta / lin0.lower;
        row.slack = row.ratio - 1.0;
        row.fitted_c = row.slack / (eta.powf(beta) + eps / eta);
        let all_done = completed == centers.len();
        checkpoints.push(row);
        if !all_done {
            break;
        }
        no_stretch = t;
    }
    let max_ratio = checkpoints.iter().map(|c| c.ratio).fold(0.0, f64::max);
    let max_fitted_c = checkpoints.iter().map(|c| c.fitted_c).fold(f64::NEG_INFINITY, f64::max);
    Ok(LinfPreservationReport {
        eta,
        eps,
        beta,
        growth_const: c,
        linf_eps_0: lin0.lower,
        linf_eps_0_upper: lin0.upper,
        no_stretch_horizon: no_stretch,
        checkpoints,
        max_ratio,
        max_fitted_c,
    })
}
