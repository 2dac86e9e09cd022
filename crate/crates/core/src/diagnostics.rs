//! Scalar diagnostics of a trajectory: support radii, minimal phase
//! separation, windowed field averages and the discrete `L^inf` bracket.
//!
//! Suprema over continuous time are taken over the recorded instants, and
//! window starts are restricted to the step grid; every such value is a lower
//! bound for its continuum counterpart.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::integrator::{norm3, FieldPath, Trajectory};
use crate::quadrature::tanh_sinh_split;

/// Largest `N` for which all-pairs quantities are evaluated exactly.
pub const EXACT_PAIR_LIMIT: usize = 32768;

/// Default number of sampled pairs for the windowed field difference.
pub const DEFAULT_PAIR_BUDGET: usize = 100_000;

/// Running suprema of the support radii.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportRadii {
    /// `sup |X_i|`, Euclidean.
    pub r: f64,
    /// `sup |V_i|`, Euclidean.
    pub k: f64,
    pub r_inf: f64,
    pub k_inf: f64,
    /// `R(0)`.
    pub r_initial: f64,
    /// `R(0) + T K(T) + allowance - R(T)`; the allowance covers the half-step
    /// velocities of the scheme, which are not recorded instants.
    pub transport_slack: f64,
    pub transport_holds: bool,
}

/// `[max |x|_2, max |v|_2, max |x|_inf, max |v|_inf]` over the particles.
pub fn instant_radii(ens: &ParticleEnsemble) -> [f64; 4] {
    let d = ens.dim();
    let mut out = [0.0f64; 4];
    for (xs, vs) in ens.positions().chunks_exact(d).zip(ens.velocities().chunks_exact(d)) {
        let x2 = xs.iter().map(|c| c * c).sum::<f64>().sqrt();
        let v2 = vs.iter().map(|c| c * c).sum::<f64>().sqrt();
        let xi = xs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let vi = vs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        out[0] = out[0].max(x2);
        out[1] = out[1].max(v2);
        out[2] = out[2].max(xi);
        out[3] = out[3].max(vi);
    }
    out
}

/// Running suprema of [`instant_radii`] at every recorded instant.
pub fn support_radii_series(traj: &Trajectory) -> Vec<[f64; 4]> {
    let mut acc = [0.0f64; 4];
    traj.snapshots()
        .iter()
        .map(|s| {
            let r = instant_radii(s);
            for c in 0..4 {
                acc[c] = acc[c].max(r[c]);
            }
            acc
        })
        .collect()
}

/// `R(T)`, `K(T)` over the instants `t <= up_to`, with the transport check
/// `R(T) <= R(0) + T K(T)`.
pub fn support_radii(traj: &Trajectory, up_to: f64) -> Result<SupportRadii> {
    if !(up_to >= 0.0) || up_to > traj.final_time() + 0.1 * traj.dt() {
        return Err(Error::param(
            "up_to",
            format!("time {up_to} outside the trajectory [0, {}]", traj.final_time()),
        ));
    }
    let last = traj
        .times()
        .iter()
        .rposition(|&t| t <= up_to + 0.1 * traj.dt())
        .unwrap_or(0);
    let series = support_radii_series(&traj.truncated(last));
    let [r, k, r_inf, k_inf] = series[last];
    let t = traj.times()[last];
    let e_max = (0..=last)
        .map(|s| traj.field_mags(s).iter().fold(0.0f64, |m, &e| m.max(e)))
        .fold(0.0f64, f64::max);
    let allowance = 0.5 * t * traj.dt() * e_max;
    let r_initial = series[0][0];
    let slack = r_initial + t * k + allowance - r;
    Ok(SupportRadii {
        r,
        k,
        r_inf,
        k_inf,
        r_initial,
        transport_slack: slack,
        transport_holds: slack >= -1e-12 * r.max(1.0),
    })
}

/// Pair realizing the smallest `|X_i - X_j| + |V_i - V_j|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePair {
    pub i: usize,
    pub j: usize,
    pub separation: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact all-pairs minimum of `|X_i - X_j| + |V_i - V_j|`; ties go to the
/// lexicographically smallest pair.
pub fn closest_phase_pair(ens: &ParticleEnsemble) -> Result<PhasePair> {
    let n = ens.n();
    if n > EXACT_PAIR_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: EXACT_PAIR_LIMIT,
        });
    }
    let best = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            let (xi, vi) = (ens.x(i), ens.v(i));
            let mut best = PhasePair {
                i,
                j: i + 1,
                separation: f64::INFINITY,
            };
            for j in i + 1..n {
                let s = dist(xi, ens.x(j)) + dist(vi, ens.v(j));
                if s < best.separation {
                    best = PhasePair { i, j, separation: s };
                }
            }
            best
        })
        .reduce_with(|a, b| {
            if b.separation < a.separation || (b.separation == a.separation && (b.i, b.j) < (a.i, a.j)) {
                b
            } else {
                a
            }
        })
        .unwrap();
    Ok(best)
}

/// `m = eps / min_{i != j} (|X_i - X_j| + |V_i - V_j|)`; `+inf` for a
/// coincident pair.
pub fn min_phase_separation(ens: &ParticleEnsemble, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    let p = closest_phase_pair(ens)?;
    Ok(if p.separation == 0.0 {
        f64::INFINITY
    } else {
        eps / p.separation
    })
}

fn window_steps(traj: &Trajectory, eps: f64) -> Result<usize> {
    let dt = traj.dt();
    if !(eps >= 2.0 * dt * (1.0 - 1e-12)) {
        return Err(Error::WindowTooCoarse { eps, dt });
    }
    let w = (eps / dt).round();
    if (w * dt - eps).abs() > 1e-9 * eps {
        return Err(Error::param(
            "eps",
            format!("window {eps} is not a whole number of steps dt = {dt}"),
        ));
    }
    Ok(w as usize)
}

/// Running grid sup of windowed averages, given per-item step integrals.
/// `series[k]` covers windows ending at instants `<= k`; windows that would
/// start before `0` are truncated (short-horizon form).
fn window_sup_series(step_integrals: &[f64], w: usize, eps: f64, series: &mut [f64]) {
    let mut prefix = 0.0;
    let mut hist = Vec::with_capacity(step_integrals.len() + 1);
    hist.push(0.0);
    for (s, &v) in step_integrals.iter().enumerate() {
        prefix += v;
        hist.push(prefix);
        let k = s + 1;
        let start = k.saturating_sub(w);
        let value = (hist[k] - hist[start]) / eps;
        if value > series[k] {
            series[k] = value;
        }
    }
}

fn running_max(series: &mut [f64]) {
    for k in 1..series.len() {
        if series[k - 1] > series[k] {
            series[k] = series[k - 1];
        }
    }
}

/// `Ebar(t_k)` at every recorded instant.
pub fn windowed_force_avg_series(traj: &Trajectory, eps: f64) -> Result<Vec<f64>> {
    let w = window_steps(traj, eps)?;
    let n = traj.n();
    let steps = traj.steps();
    let series = (0..n)
        .into_par_iter()
        .fold(
            || vec![0.0; steps + 1],
            |mut acc, i| {
                let ints: Vec<f64> = (0..steps).map(|s| traj.abs_integrals(s)[i]).collect();
                window_sup_series(&ints, w, eps, &mut acc);
                acc
            },
        )
        .reduce(
            || vec![0.0; steps + 1],
            |a, b| a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect(),
        );
    let mut series = series;
    running_max(&mut series);
    Ok(series)
}

/// `Ebar(T)` at the final instant.
pub fn windowed_force_avg(traj: &Trajectory, eps: f64) -> Result<f64> {
    Ok(*windowed_force_avg_series(traj, eps)?.last().unwrap())
}

/// Midpoint of the admissible interval `(1, min(d - alpha, 2d - 3 alpha))`,
/// or `None` when it is empty.
pub fn default_beta(d: usize, alpha: f64) -> Option<f64> {
    let hi = beta_upper(d, alpha);
    (hi > 1.0).then_some(0.5 * (1.0 + hi))
}

fn beta_upper(d: usize, alpha: f64) -> f64 {
    let d = d as f64;
    (d - alpha).min(2.0 * d - 3.0 * alpha)
}

/// Checks `beta` against the admissible interval. With `short_time`, `beta = 1`
/// is accepted in any dimension; in `d = 1` it is the only option.
pub fn validate_beta(d: usize, alpha: f64, beta: f64, short_time: bool) -> Result<()> {
    if short_time && beta == 1.0 {
        return Ok(());
    }
    let hi = beta_upper(d, alpha);
    if hi <= 1.0 {
        return if short_time {
            Err(Error::InvalidBeta { beta, lo: 1.0, hi: 1.0 })
        } else {
            Err(Error::UnsupportedDimension)
        };
    }
    if !(beta > 1.0 && beta < hi) {
        return Err(Error::InvalidBeta { beta, lo: 1.0, hi });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffAvgOptions {
    pub beta: f64,
    pub pair_budget: usize,
    pub seed: u64,
    pub short_time: bool,
}

impl DiffAvgOptions {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            pair_budget: DEFAULT_PAIR_BUDGET,
            seed: 0,
            short_time: false,
        }
    }

    /// `beta = 1` under the short-time flag.
    pub fn short_time() -> Self {
        Self {
            short_time: true,
            ..Self::new(1.0)
        }
    }
}

/// Windowed field-difference quotient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffAvg {
    /// Value at the final instant.
    pub value: f64,
    /// Value at every recorded instant.
    pub series: Vec<f64>,
    /// All pairs were evaluated; otherwise the value is a sampled lower bound.
    pub exhaustive: bool,
    pub pairs: usize,
}

/// Pairs used for the difference quotient: all pairs within the budget,
/// otherwise the closest phase pairs at every `eps` multiple plus a seeded
/// uniform sample of `budget` distinct pairs.
pub fn diff_pairs(traj: &Trajectory, eps: f64, budget: usize, seed: u64) -> Result<(Vec<(usize, usize)>, bool)> {
    let n = traj.n();
    let total = n * (n - 1) / 2;
    if total <= budget {
        let all = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        return Ok((all, true));
    }
    let w = window_steps(traj, eps)?;
    let mut chosen: HashSet<(usize, usize)> = HashSet::with_capacity(budget + 16);
    let mut ordered = Vec::with_capacity(budget + 16);
    for k in (0..traj.len()).step_by(w) {
        let p = closest_phase_pair(traj.snapshot(k))?;
        if chosen.insert((p.i, p.j)) {
            ordered.push((p.i, p.j));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = ordered.len() + budget;
    while ordered.len() < target {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let p = (i.min(j), i.max(j));
        if chosen.insert(p) {
            ordered.push(p);
        }
    }
    Ok((ordered, false))
}

/// Close partners per particle for every step.
pub(crate) fn partner_maps(traj: &Trajectory) -> Vec<HashMap<usize, Vec<usize>>> {
    (0..traj.steps())
        .map(|s| {
            let mut m: HashMap<usize, Vec<usize>> = HashMap::new();
            for &(a, b) in traj.close_pairs(s) {
                m.entry(a as usize).or_default().push(b as usize);
                m.entry(b as usize).or_default().push(a as usize);
            }
            m
        })
        .collect()
}

pub(crate) fn path_for(
    traj: &Trajectory,
    step: usize,
    i: usize,
    partners: &HashMap<usize, Vec<usize>>,
) -> Option<FieldPath> {
    let vecs = traj.field_vecs.as_ref()?;
    let d = traj.dim();
    let list = partners.get(&i).map(Vec::as_slice).unwrap_or(&[]);
    Some(FieldPath::new(
        d,
        traj.snapshot(step).positions(),
        traj.snapshot(step + 1).positions(),
        &vecs[step][i * d..(i + 1) * d],
        &vecs[step + 1][i * d..(i + 1) * d],
        i,
        list,
        traj.kernel(),
    ))
}

fn diff_quotient(ei: &[f64], ej: &[f64], xi: &[f64], xj: &[f64], reg: f64) -> f64 {
    dist(ei, ej) / (reg + dist(xi, xj))
}

/// `int |E_i - E_j| / (eps^beta + |X_i - X_j|) ds` over every step.
pub(crate) fn pair_step_integrals(
    traj: &Trajectory,
    partners: &[HashMap<usize, Vec<usize>>],
    i: usize,
    j: usize,
    reg: f64,
) -> Vec<f64> {
    let d = traj.dim();
    let dt = traj.dt();
    let vecs = traj.field_vecs.as_ref().expect("field vectors checked by caller");
    let q = |k: usize| {
        let (x, e) = (traj.snapshot(k).positions(), &vecs[k]);
        diff_quotient(
            &e[i * d..(i + 1) * d],
            &e[j * d..(j + 1) * d],
            &x[i * d..(i + 1) * d],
            &x[j * d..(j + 1) * d],
            reg,
        )
    };
    let mut prev = q(0);
    (0..traj.steps())
        .map(|s| {
            let next = q(s + 1);
            let smooth = !partners[s].contains_key(&i) && !partners[s].contains_key(&j);
            let v = if smooth {
                0.5 * dt * (prev + next)
            } else {
                let pi = path_for(traj, s, i, &partners[s]).unwrap();
                let pj = path_for(traj, s, j, &partners[s]).unwrap();
                let mut splits = pi.splits().to_vec();
                splits.extend_from_slice(pj.splits());
                let f = |tau: f64| {
                    let (ei, ej) = (pi.field(tau), pj.field(tau));
                    let (xi, xj) = (pi.position(tau), pj.position(tau));
                    let de = [ei[0] - ej[0], ei[1] - ej[1], ei[2] - ej[2]];
                    let dx = [xi[0] - xj[0], xi[1] - xj[1], xi[2] - xj[2]];
                    norm3(&de) / (reg + norm3(&dx))
                };
                dt * tanh_sinh_split(f, 0.0, 1.0, &splits, 1e-8, 6)
            };
            prev = next;
            v
        })
        .collect()
}

/// `Delta Ebar` at every recorded instant.
pub fn windowed_force_diff_avg(traj: &Trajectory, eps: f64, opts: &DiffAvgOptions) -> Result<DiffAvg> {
    validate_beta(traj.dim(), traj.kernel().alpha, opts.beta, opts.short_time)?;
    if !traj.has_field_vecs() {
        return Err(Error::MissingRecord("field vectors"));
    }
    let w = window_steps(traj, eps)?;
    let (pairs, exhaustive) = diff_pairs(traj, eps, opts.pair_budget, opts.seed)?;
    let partners = partner_maps(traj);
    let reg = eps.powf(opts.beta);
    let steps = traj.steps();
    let mut series = pairs
        .par_iter()
        .fold(
            || vec![0.0; steps + 1],
            |mut acc, &(i, j)| {
                let ints = pair_step_integrals(traj, &partners, i, j, reg);
                window_sup_series(&ints, w, eps, &mut acc);
                acc
            },
        )
        .reduce(
            || vec![0.0; steps + 1],
            |a, b| a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect(),
        );
    running_max(&mut series);
    Ok(DiffAvg {
        value: *series.last().unwrap(),
        series,
        exhaustive,
        pairs: pairs.len(),
    })
}

/// Two-sided bracket of the discrete `L^inf` norm at one scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinfBracket {
    pub scale: f64,
    pub lower: f64,
    pub upper: f64,
    /// Largest particle count in a closed box of radius `scale` centred at a particle.
    pub lower_count: usize,
    /// Largest particle count in a half-open lattice cell of side `2 scale`.
    pub upper_count: usize,
}

type CellKey = [i64; 6];

fn cell_key(x: &[f64], v: &[f64], side: f64) -> CellKey {
    let mut k = [0i64; 6];
    for (slot, c) in k.iter_mut().zip(x.iter().chain(v)) {
        *slot = (c / side).floor() as i64;
    }
    k
}

fn build_cells(ens: &ParticleEnsemble, side: f64) -> HashMap<CellKey, Vec<u32>> {
    let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
    for i in 0..ens.n() {
        cells
            .entry(cell_key(ens.x(i), ens.v(i), side))
            .or_default()
            .push(i as u32);
    }
    cells
}

/// Number of particles in the closed box `|x - cx|_inf <= r`, `|v - cv|_inf <= r`.
pub fn box_count(ens: &ParticleEnsemble, cx: &[f64], cv: &[f64], r: f64) -> usize {
    (0..ens.n()).filter(|&i| in_box(ens.x(i), ens.v(i), cx, cv, r)).count()
}

fn in_box(x: &[f64], v: &[f64], cx: &[f64], cv: &[f64], r: f64) -> bool {
    x.iter()
        .zip(cx)
        .chain(v.iter().zip(cv))
        .all(|(a, b)| (a - b).abs() <= r)
}

/// Particle-centred lower value and lattice upper value of
/// `sup_boxes mu(B_inf(., scale)) / (2 scale)^{2d}`.
pub fn discrete_linf(ens: &ParticleEnsemble, scale: f64) -> Result<LinfBracket> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::param("scale", format!("must be positive, got {scale}")));
    }
    let d = ens.dim();
    let side = 2.0 * scale;
    let cells = build_cells(ens, side);
    let upper_count = cells.values().map(Vec::len).max().unwrap_or(0);
    let dims = 2 * d;
    let offsets: Vec<CellKey> = (0..3usize.pow(dims as u32))
        .map(|mut code| {
            let mut o = [0i64; 6];
            for slot in o.iter_mut().take(dims) {
                *slot = (code % 3) as i64 - 1;
                code /= 3;
            }
            o
        })
        .collect();
    let lower_count = (0..ens.n())
        .into_par_iter()
        .map(|i| {
            let (xi, vi) = (ens.x(i), ens.v(i));
            let key = cell_key(xi, vi, side);
            let mut count = 0;
            for off in &offsets {
                let mut k = key;
                for c in 0..6 {
                    k[c] += off[c];
                }
                if let Some(members) = cells.get(&k) {
                    count += members
                        .iter()
                        .filter(|&&j| in_box(ens.x(j as usize), ens.v(j as usize), xi, vi, scale))
                        .count();
                }
            }
            count
        })
        .max()
        .unwrap_or(0);
    let vol = side.powi(dims as i32);
    let w = ens.weight();
    Ok(LinfBracket {
        scale,
        lower: lower_count as f64 * w / vol,
        upper: 2f64.powi(dims as i32) * upper_count as f64 * w / vol,
        lower_count,
        upper_count,
    })
}

/// Comparison of the lattice upper value with `(4 m)^{2d}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlinfReport {
    pub linf_upper: f64,
    pub bound: f64,
    /// `linf_upper / bound`.
    pub ratio: f64,
    pub holds: bool,
}

pub fn check_mlinf(m: f64, linf_upper: f64, d: usize) -> MlinfReport {
    let bound = (4.0 * m).powi(2 * d as i32);
    let ratio = if bound.is_infinite() { 0.0 } else { linf_upper / bound };
    MlinfReport {
        linf_upper,
        bound,
        ratio,
        holds: linf_upper <= bound,
    }
}

/// One row of the diagnostics time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub r: f64,
    pub k: f64,
    pub m: f64,
    pub ebar: f64,
    pub debar: f64,
    pub linf_eps_lo: f64,
    pub linf_eps_hi: f64,
    pub linf_eta_lo: f64,
    pub linf_eta_hi: f64,
    pub r_inf: f64,
    pub k_inf: f64,
}

/// Diagnostics sampled at multiples of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub dim: usize,
    pub eps: f64,
    pub eta: f64,
    pub beta: Option<f64>,
    pub debar_exhaustive: bool,
    pub rows: Vec<DiagnosticsRow>,
}

pub const CSV_HEADER: &str = "t,R,K,m,Ebar,dEbar,linf_eps_lo,linf_eps_hi,linf_eta_lo,linf_eta_hi,R_inf,K_inf";

impl DiagnosticsRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.r,
                r.k,
                r.m,
                r.ebar,
                r.debar,
                r.linf_eps_lo,
                r.linf_eps_hi,
                r.linf_eta_lo,
                r.linf_eta_hi,
                r.r_inf,
                r.k_inf
            );
        }
        out
    }

    /// Parses rows written by [`Self::to_csv`]; the scalar metadata is not part of the CSV.
    pub fn rows_from_csv(text: &str) -> Result<Vec<DiagnosticsRow>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Config("diagnostics.csv header mismatch".into()));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let v: Vec<f64> = l
                    .split(',')
                    .map(|c| {
                        c.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Config(format!("bad number `{c}`: {e}")))
                    })
                    .collect::<Result<_>>()?;
                if v.len() != 12 {
                    return Err(Error::Config(format!("expected 12 columns, got {}", v.len())));
                }
                Ok(DiagnosticsRow {
                    t: v[0],
                    r: v[1],
                    k: v[2],
                    m: v[3],
                    ebar: v[4],
                    debar: v[5],
                    linf_eps_lo: v[6],
                    linf_eps_hi: v[7],
                    linf_eta_lo: v[8],
                    linf_eta_hi: v[9],
                    r_inf: v[10],
                    k_inf: v[11],
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordOptions {
    /// Outer scale; defaults to `sqrt(eps)`.
    pub eta: Option<f64>,
    /// Difference quotient settings; `None` leaves the column at zero.
    pub diff: Option<DiffAvgOptions>,
}

/// Computes the diagnostics at every multiple of `eps` on the trajectory
/// grid (and at the final instant). `m` is the running sup over all recorded
/// instants.
pub fn diagnostics_record(traj: &Trajectory, opts: &RecordOptions) -> Result<DiagnosticsRecord> {
    let eps = traj.eps();
    let eta = opts.eta.unwrap_or_else(|| eps.sqrt());
    let w = window_steps(traj, eps)?;
    let radii = support_radii_series(traj);
    let ebar = windowed_force_avg_series(traj, eps)?;
    let (debar, exhaustive, beta) = match &opts.diff {
        Some(o) => {
            let r = windowed_force_diff_avg(traj, eps, o)?;
            (r.series, r.exhaustive, Some(o.beta))
        }
        None => (vec![0.0; traj.len()], false, None),
    };
    let m_inst: Vec<f64> = traj
        .snapshots()
        .iter()
        .map(|s| min_phase_separation(s, eps))
        .collect::<Result<_>>()?;
    let mut m_run = Vec::with_capacity(m_inst.len());
    let mut acc = 0.0f64;
    for m in m_inst {
        acc = acc.max(m);
        m_run.push(acc);
    }
    let mut idx: Vec<usize> = (0..traj.len()).step_by(w).collect();
    if *idx.last().unwrap() != traj.steps() {
        idx.push(traj.steps());
    }
    let rows = idx
        .into_iter()
        .map(|k| {
            let s = traj.snapshot(k);
            let le = discrete_linf(s, eps)?;
            let ln = discrete_linf(s, eta)?;
            Ok(DiagnosticsRow {
                t: traj.times()[k],
                r: radii[k][0],
                k: radii[k][1],
                m: m_run[k],
                ebar: ebar[k],
                debar: debar[k],
                linf_eps_lo: le.lower,
                linf_eps_hi: le.upper,
                linf_eta_lo: ln.lower,
                linf_eta_hi: ln.upper,
                r_inf: radii[k][2],
                k_inf: radii[k][3],
            })
        })
        .collect::<Result<_>>()?;
    Ok(DiagnosticsRecord {
        dim: traj.dim(),
        eps,
        eta,
        beta,
        debar_exhaustive: exhaustive,
        rows,
    })
}

/// Short-time bounds: the largest sampled time up to which
/// `m <= 2 m(0)`, `K <= 2 (1 + K(0))`, `R <= 2 (1 + R(0))` and
/// `linf_eps_hi <= (8 m(0))^{2d}` hold at every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortTimeCheck {
    pub t_obs: f64,
    pub horizon: f64,
    pub m0: f64,
    pub k0: f64,
    pub r0: f64,
    pub first_failure: Option<String>,
}

pub fn short_time_check(record: &DiagnosticsRecord) -> ShortTimeCheck {
    let first = record.rows[0];
    let linf_cap = (8.0 * first.m).powi(2 * record.dim as i32);
    let mut t_obs = first.t;
    let mut failure = None;
    for row in &record.rows {
        let reason = if row.m > 2.0 * first.m {
            Some(format!("m = {} > 2 m(0) at t = {}", row.m, row.t))
        } else if row.k > 2.0 * (1.0 + first.k) {
            Some(format!("K = {} > 2 (1 + K(0)) at t = {}", row.k, row.t))
        } else if row.r > 2.0 * (1.0 + first.r) {
            Some(format!("R = {} > 2 (1 + R(0)) at t = {}", row.r, row.t))
        } else if row.linf_eps_hi > linf_cap {
            Some(format!(
                "linf_eps_hi = {} > (8 m(0))^2d at t = {}",
                row.linf_eps_hi, row.t
            ))
        } else {
            None
        };
        if reason.is_some() {
            failure = reason;
            break;
        }
        t_obs = row.t;
    }
    ShortTimeCheck {
        t_obs,
        horizon: record.rows.last().unwrap().t,
        m0: first.m,
        k0: first.k,
        r0: first.r,
        first_failure: failure,
    }
}

/// Smallest `C` with `K(t) - K(0) <= C (t + eps Ebar(t) + int_0^t Ebar)` at every row.
pub fn velocity_growth_constant(record: &DiagnosticsRecord) -> f64 {
    let k0 = record.rows[0].k;
    let mut integral = 0.0;
    let mut c = 0.0f64;
    for w in record.rows.windows(2) {
        integral += 0.5 * (w[1].t - w[0].t) * (w[0].ebar + w[1].ebar);
        let denom = w[1].t + record.eps * w[1].ebar + integral;
        if denom > 0.0 {
            c = c.max((w[1].k - k0) / denom);
        }
    }
    c
}
