//! Velocity-Verlet time stepping and trajectory recording.
//!
//! Between two recorded instants each particle moves on the straight drift
//! segment of the Verlet step. Field time integrals are taken along these
//! segments: with the trapezoid rule when no pair comes close during the step,
//! and otherwise by splitting the field into a linearly interpolated far part
//! plus the exact contributions of the close pairs, integrated with tanh-sinh
//! quadrature split at each pair's closest approach.

use rayon::prelude::*;

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::field::{dispatch_dim, field_all, pair_sweep, potential_energy, CompensatedSum, ForceKernel, Sweep};
use crate::quadrature::{tanh_sinh_split, Integrand};

pub(crate) type Vec3 = [f64; 3];

const QUAD_TOL: f64 = 1e-8;
const QUAD_LEVELS: u32 = 6;
/// A close pair is resolved when the trapezoid defect of its own term exceeds
/// this fraction of the field magnitude.
const CLOSE_PAIR_SHARE: f64 = 0.1;

/// One velocity-Verlet step: half kick, drift, half kick.
///
/// A negative `dt` integrates backward in time.
pub fn verlet_step(ens: &ParticleEnsemble, dt: f64, kernel: &ForceKernel) -> Result<ParticleEnsemble> {
    if !(dt != 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", format!("must be finite and nonzero, got {dt}")));
    }
    let e0 = field_all(ens, kernel)?;
    let (mut x, mut v) = ens.clone().into_parts();
    for (vi, ei) in v.iter_mut().zip(&e0) {
        *vi += 0.5 * dt * ei;
    }
    for (xi, vi) in x.iter_mut().zip(&v) {
        *xi += dt * vi;
    }
    let mid = ParticleEnsemble::from_parts_unchecked(ens.dim(), x, v);
    let e1 = field_all(&mid, kernel)?;
    let (x, mut v) = mid.into_parts();
    for (vi, ei) in v.iter_mut().zip(&e1) {
        *vi += 0.5 * dt * ei;
    }
    let out = ParticleEnsemble::from_parts_unchecked(ens.dim(), x, v);
    if !out.is_finite() {
        return Err(Error::NonFiniteState { step: 1, time: dt });
    }
    Ok(out)
}

/// Kinetic plus interaction energy, both with weight `1/N`.
pub fn total_energy(ens: &ParticleEnsemble, kernel: &ForceKernel) -> f64 {
    let kinetic: f64 = ens.velocities().iter().map(|v| v * v).sum::<f64>() * 0.5 * ens.weight();
    kinetic + potential_energy(ens, kernel)
}

/// Settings for [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Discrete scale; the step is `eps / kappa`.
    pub eps: f64,
    pub kappa: usize,
    /// Keep the field vectors of every instant (needed for pair differences and tracking).
    pub record_field_vecs: bool,
    /// Resolve close passages inside a step instead of using the plain trapezoid rule.
    pub resolve_close_pairs: bool,
}

impl RunOptions {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            kappa: 8,
            record_field_vecs: true,
            resolve_close_pairs: true,
        }
    }

    pub fn with_kappa(mut self, kappa: usize) -> Self {
        self.kappa = kappa;
        self
    }
}

/// Recorded particle history on a uniform time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub(crate) dim: usize,
    pub(crate) dt: f64,
    pub(crate) eps: f64,
    pub(crate) kernel: ForceKernel,
    pub(crate) times: Vec<f64>,
    pub(crate) snapshots: Vec<ParticleEnsemble>,
    pub(crate) field_mags: Vec<Vec<f64>>,
    pub(crate) field_vecs: Option<Vec<Vec<f64>>>,
    /// `abs_integrals[n][i]` is `int |E(X_i(s))| ds` over `[t_n, t_{n+1}]`.
    pub(crate) abs_integrals: Vec<Vec<f64>>,
    /// Close pairs `(i, j)`, `i < j`, per step.
    pub(crate) close_pairs: Vec<Vec<(u32, u32)>>,
}

/// Result of [`run`]: the trajectory up to the last successful step and the
/// error that stopped it, if any.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub aborted: Option<Error>,
}

impl Trajectory {
    /// Builds a trajectory from externally produced samples; time integrals use
    /// the trapezoid rule.
    pub fn from_samples(
        eps: f64,
        dt: f64,
        kernel: ForceKernel,
        snapshots: Vec<ParticleEnsemble>,
        field_vecs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if snapshots.is_empty() || snapshots.len() != field_vecs.len() {
            return Err(Error::param("snapshots", "need one field sample per snapshot"));
        }
        if !(dt > 0.0 && eps > 0.0) {
            return Err(Error::param("dt", "dt and eps must be positive"));
        }
        let dim = snapshots[0].dim();
        let n = snapshots[0].n();
        if snapshots.iter().any(|s| s.dim() != dim || s.n() != n) || field_vecs.iter().any(|f| f.len() != n * dim) {
            return Err(Error::param("snapshots", "inconsistent shapes"));
        }
        let field_mags: Vec<Vec<f64>> = field_vecs.iter().map(|f| magnitudes(f, dim)).collect();
        let abs_integrals = field_mags
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * dt * (a + b)).collect())
            .collect();
        let steps = snapshots.len() - 1;
        Ok(Self {
            dim,
            dt,
            eps,
            kernel,
            times: (0..=steps).map(|k| k as f64 * dt).collect(),
            snapshots,
            field_mags,
            field_vecs: Some(field_vecs),
            abs_integrals,
            close_pairs: vec![Vec::new(); steps],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.snapshots[0].n()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn kernel(&self) -> &ForceKernel {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn snapshot(&self, k: usize) -> &ParticleEnsemble {
        &self.snapshots[k]
    }

    pub fn snapshots(&self) -> &[ParticleEnsemble] {
        &self.snapshots
    }

    pub fn field_mags(&self, k: usize) -> &[f64] {
        &self.field_mags[k]
    }

    pub fn field_vecs(&self, k: usize) -> Option<&[f64]> {
        self.field_vecs.as_ref().map(|f| f[k].as_slice())
    }

    pub fn has_field_vecs(&self) -> bool {
        self.field_vecs.is_some()
    }

    /// `int |E(X_i)| ds` over step `n`, per particle.
    pub fn abs_integrals(&self, step: usize) -> &[f64] {
        &self.abs_integrals[step]
    }

    pub fn close_pairs(&self, step: usize) -> &[(u32, u32)] {
        &self.close_pairs[step]
    }

    /// Index of the grid instant equal to `t` up to a tenth of a step.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || (k * self.dt - t).abs() > 0.1 * self.dt {
            return None;
        }
        let k = k as usize;
        (k < self.times.len()).then_some(k)
    }

    /// Keeps instants `0..=k`.
    pub fn truncated(&self, k: usize) -> Trajectory {
        let k = k.min(self.steps());
        Trajectory {
            dim: self.dim,
            dt: self.dt,
            eps: self.eps,
            kernel: self.kernel,
            times: self.times[..=k].to_vec(),
            snapshots: self.snapshots[..=k].to_vec(),
            field_mags: self.field_mags[..=k].to_vec(),
            field_vecs: self.field_vecs.as_ref().map(|f| f[..=k].to_vec()),
            abs_integrals: self.abs_integrals[..k].to_vec(),
            close_pairs: self.close_pairs[..k].to_vec(),
        }
    }

    /// Close partners of each listed particle during `step`.
    pub(crate) fn partners(&self, step: usize, of: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); of.len()];
        for &(a, b) in &self.close_pairs[step] {
            for (slot, &i) in of.iter().enumerate() {
                if a as usize == i {
                    out[slot].push(b as usize);
                } else if b as usize == i {
                    out[slot].push(a as usize);
                }
            }
        }
        out
    }

    /// Field and position of particle `i` along step `step`, as functions of the
    /// step fraction `tau` in `[0, 1]`.
    pub fn field_path(&self, step: usize, i: usize) -> Result<FieldPath> {
        let vecs = self.field_vecs.as_ref().ok_or(Error::MissingRecord("field vectors"))?;
        if step >= self.steps() {
            return Err(Error::param("step", format!("step {step} beyond trajectory")));
        }
        let partners = self.partners(step, &[i]).pop().unwrap();
        let d = self.dim;
        Ok(FieldPath::new(
            d,
            self.snapshots[step].positions(),
            self.snapshots[step + 1].positions(),
            &vecs[step][i * d..(i + 1) * d],
            &vecs[step + 1][i * d..(i + 1) * d],
            i,
            &partners,
            &self.kernel,
        ))
    }
}

fn magnitudes(field: &[f64], d: usize) -> Vec<f64> {
    field
        .chunks_exact(d)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

pub(crate) fn to3(s: &[f64]) -> Vec3 {
    let mut o = [0.0; 3];
    o[..s.len()].copy_from_slice(s);
    o
}

/// Field and position of one particle along a drift segment, with close
/// partners evaluated exactly.
#[derive(Debug, Clone)]
pub struct FieldPath {
    dim: usize,
    far0: Vec3,
    far1: Vec3,
    x0: Vec3,
    dx: Vec3,
    partners: Vec<(Vec3, Vec3)>,
    kernel: ForceKernel,
    weight: f64,
    splits: Vec<f64>,
}

impl FieldPath {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        dim: usize,
        before: &[f64],
        after: &[f64],
        e0: &[f64],
        e1: &[f64],
        i: usize,
        partners: &[usize],
        kernel: &ForceKernel,
    ) -> Self {
        let weight = d_weight(before.len() / dim);
        let xi0 = to3(&before[i * dim..(i + 1) * dim]);
        let xi1 = to3(&after[i * dim..(i + 1) * dim]);
        let mut far0 = to3(e0);
        let mut far1 = to3(e1);
        let mut list = Vec::with_capacity(partners.len());
        let mut splits = Vec::with_capacity(partners.len());
        for &j in partners {
            let xj0 = to3(&before[j * dim..(j + 1) * dim]);
            let xj1 = to3(&after[j * dim..(j + 1) * dim]);
            let mut r0 = [0.0; 3];
            let mut delta = [0.0; 3];
            for c in 0..dim {
                r0[c] = xi0[c] - xj0[c];
                delta[c] = (xi1[c] - xj1[c]) - r0[c];
            }
            let f0 = pair_term(&r0, kernel, weight);
            let mut r1 = r0;
            for c in 0..dim {
                r1[c] += delta[c];
            }
            let f1 = pair_term(&r1, kernel, weight);
            for c in 0..dim {
                far0[c] -= f0[c];
                far1[c] -= f1[c];
            }
            splits.push(closest_approach(&r0, &delta).0);
            list.push((r0, delta));
        }
        let mut dx = [0.0; 3];
        for c in 0..dim {
            dx[c] = xi1[c] - xi0[c];
        }
        Self {
            dim,
            far0,
            far1,
            x0: xi0,
            dx,
            partners: list,
            kernel: *kernel,
            weight,
            splits,
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.partners.is_empty()
    }

    /// Step fractions of closest approach of the close partners.
    pub fn splits(&self) -> &[f64] {
        &self.splits
    }

    pub fn field(&self, tau: f64) -> Vec3 {
        let mut e = [0.0; 3];
        for c in 0..self.dim {
            e[c] = self.far0[c] + tau * (self.far1[c] - self.far0[c]);
        }
        for (r0, delta) in &self.partners {
            let mut r = [0.0; 3];
            for c in 0..self.dim {
                r[c] = r0[c] + tau * delta[c];
            }
            let f = pair_term(&r, &self.kernel, self.weight);
            for c in 0..self.dim {
                e[c] += f[c];
            }
        }
        e
    }

    pub fn position(&self, tau: f64) -> Vec3 {
        let mut x = [0.0; 3];
        for c in 0..self.dim {
            x[c] = self.x0[c] + tau * self.dx[c];
        }
        x
    }

    /// `int_0^1 |E(tau)| dtau`.
    pub fn abs_integral(&self) -> f64 {
        tanh_sinh_split(|t| norm3(&self.field(t)), 0.0, 1.0, &self.splits, QUAD_TOL, QUAD_LEVELS)
    }
}

fn d_weight(n: usize) -> f64 {
    1.0 / n as f64
}

pub(crate) fn norm3(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn pair_term(r: &Vec3, kernel: &ForceKernel, weight: f64) -> Vec3 {
    let rn = norm3(r);
    if rn == 0.0 || kernel.is_off() {
        return [0.0; 3];
    }
    let s = kernel.radial(rn) * weight;
    [r[0] * s, r[1] * s, r[2] * s]
}

/// Step fraction and distance of closest approach along `r0 + tau * delta`.
pub(crate) fn closest_approach(r0: &Vec3, delta: &Vec3) -> (f64, f64) {
    let dd = delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2];
    if dd == 0.0 {
        return (0.0, norm3(r0));
    }
    let rd = r0[0] * delta[0] + r0[1] * delta[1] + r0[2] * delta[2];
    let tau = (-rd / dd).clamp(0.0, 1.0);
    let r = [r0[0] + tau * delta[0], r0[1] + tau * delta[1], r0[2] + tau * delta[2]];
    (tau, norm3(&r))
}

fn sweep(dim: usize, before: &[f64], after: &[f64], kernel: &ForceKernel, detect: bool) -> Result<Sweep> {
    let before = detect.then_some(before);
    dispatch_dim!(dim, pair_sweep(after, before, kernel))
}

/// Error of the trapezoid rule on the single pair term over the step, in units of the step fraction.
///
/// Returns a cheap upper bound instead when that bound is already below `cutoff`.
fn pair_trapezoid_defect(
    dim: usize,
    before: &[f64],
    after: &[f64],
    (i, j): (usize, usize),
    kernel: &ForceKernel,
    cutoff: f64,
) -> f64 {
    let w = 1.0 / (after.len() / dim) as f64;
    let mut r0 = [0.0; 3];
    let mut delta = [0.0; 3];
    for c in 0..dim {
        r0[c] = before[i * dim + c] - before[j * dim + c];
        delta[c] = (after[i * dim + c] - after[j * dim + c]) - r0[c];
    }
    let at = |tau: f64| {
        let r = [r0[0] + tau * delta[0], r0[1] + tau * delta[1], r0[2] + tau * delta[2]];
        pair_term(&r, kernel, w)
    };
    let (tau, _) = closest_approach(&r0, &delta);
    // |r(tau)| >= |delta| |tau - tau*| bounds both the integral and the defect
    let (a, dn) = (kernel.alpha, norm3(&delta));
    let bound = w * dn.powf(-a) * (tau.powf(1.0 - a) + (1.0 - tau).powf(1.0 - a)) / (1.0 - a)
        + 0.5 * (norm3(&at(0.0)) + norm3(&at(1.0)));
    if bound <= cutoff {
        return bound;
    }
    let exact: Vec3 = tanh_sinh_split(at, 0.0, 1.0, &[tau], 1e-6, 5);
    let mut trap = at(0.0);
    trap.axpy(1.0, at(1.0));
    exact.distance(&trap.scaled(0.5))
}

/// Integrates from `ens0` up to the first grid instant `>= t_end` with
/// `dt = eps / kappa`, recording every instant.
///
/// Invalid arguments and a collision in the initial state are errors; a
/// collision or non-finite state later on stops the run and is returned in
/// [`RunOutcome::aborted`] alongside the partial trajectory.
pub fn run(ens0: &ParticleEnsemble, t_end: f64, kernel: &ForceKernel, opts: &RunOptions) -> Result<RunOutcome> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::param("t_end", format!("horizon must be positive, got {t_end}")));
    }
    if opts.kappa < 2 {
        return Err(Error::param(
            "kappa",
            format!("need at least 2 steps per eps, got {}", opts.kappa),
        ));
    }
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(Error::param("eps", format!("must be positive, got {}", opts.eps)));
    }
    let dim = ens0.dim();
    let n = ens0.n();
    let dt = opts.eps / opts.kappa as f64;
    let steps = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;

    let e0 = field_all(ens0, kernel).map_err(|e| e.at_time(0.0))?;
    let mut traj = Trajectory {
        dim,
        dt,
        eps: opts.eps,
        kernel: *kernel,
        times: vec![0.0],
        snapshots: vec![ens0.clone()],
        field_mags: vec![magnitudes(&e0, dim)],
        field_vecs: opts.record_field_vecs.then(|| vec![e0.clone()]),
        abs_integrals: Vec::with_capacity(steps),
        close_pairs: Vec::with_capacity(steps),
    };
    let mut field = e0;
    let mut state = ens0.clone();
    for step in 0..steps {
        let t_next = (step + 1) as f64 * dt;
        let (x0, v0) = (state.positions(), state.velocities());
        let vhalf: Vec<f64> = v0.iter().zip(&field).map(|(v, e)| v + 0.5 * dt * e).collect();
        let x1: Vec<f64> = x0.iter().zip(&vhalf).map(|(x, v)| x + dt * v).collect();
        let (field1, candidates) = match sweep(dim, x0, &x1, kernel, opts.resolve_close_pairs) {
            Ok(r) => r,
            Err(e) => {
                return Ok(RunOutcome {
                    trajectory: traj,
                    aborted: Some(e.at_time(t_next)),
                })
            }
        };
        let v1: Vec<f64> = vhalf.iter().zip(&field1).map(|(v, e)| v + 0.5 * dt * e).collect();
        if x1.iter().chain(&v1).chain(&field1).any(|c| !c.is_finite()) {
            return Ok(RunOutcome {
                trajectory: traj,
                aborted: Some(Error::NonFiniteState {
                    step: step + 1,
                    time: t_next,
                }),
            });
        }
        let mags1 = magnitudes(&field1, dim);
        let mags0 = traj.field_mags.last().unwrap();
        // close pairs whose own term the trapezoid rule would miss by a visible fraction
        let threshold = |i: u32, j: u32| {
            let scale = |i: usize| mags0[i].max(mags1[i]);
            CLOSE_PAIR_SHARE * scale(i as usize).min(scale(j as usize))
        };
        let pairs: Vec<(u32, u32)> = candidates
            .par_iter()
            .filter(|&&(i, j)| {
                let cut = threshold(i, j);
                pair_trapezoid_defect(dim, x0, &x1, (i as usize, j as usize), kernel, cut) > cut
            })
            .copied()
            .collect();
        let mut partners: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(i, j) in &pairs {
            partners[i as usize].push(j as usize);
            partners[j as usize].push(i as usize);
        }
        let integrals: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                if partners[i].is_empty() {
                    0.5 * dt * (mags0[i] + mags1[i])
                } else {
                    let path = FieldPath::new(
                        dim,
                        x0,
                        &x1,
                        &field[i * dim..(i + 1) * dim],
                        &field1[i * dim..(i + 1) * dim],
                        i,
                        &partners[i],
                        kernel,
                    );
                    dt * path.abs_integral()
                }
            })
            .collect();

        let next = ParticleEnsemble::from_parts_unchecked(dim, x1, v1);
        traj.times.push(t_next);
        traj.snapshots.push(next.clone());
        traj.field_mags.push(mags1);
        if let Some(vecs) = traj.field_vecs.as_mut() {
            vecs.push(field1.clone());
        }
        traj.abs_integrals.push(integrals);
        traj.close_pairs.push(pairs);
        field = field1;
        state = next;
    }
    Ok(RunOutcome {
        trajectory: traj,
        aborted: None,
    })
}

/// Sum of `sum_i V_i` per component, compensated.
pub fn total_momentum(ens: &ParticleEnsemble) -> Vec<f64> {
    let d = ens.dim();
    let mut acc = CompensatedSum::<3>::new();
    for v in ens.velocities().chunks_exact(d) {
        acc.add(to3(v));
    }
    acc.value()[..d].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{quiet_start_init, InitialDensitySpec};
    use approx::assert_relative_eq;

    fn k05() -> ForceKernel {
        ForceKernel::repulsive(0.5).unwrap()
    }

    #[test]
    fn free_transport_step_is_pure_drift() {
        let ens = ParticleEnsemble::new(2, vec![0.0, 0.0, 1.0, 2.0], vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let next = verlet_step(&ens, 0.1, &ForceKernel::off()).unwrap();
        assert_eq!(next.velocities(), ens.velocities());
        for (x1, (x0, v)) in next
            .positions()
            .iter()
            .zip(ens.positions().iter().zip(ens.velocities()))
        {
            assert_eq!(*x1, x0 + 0.1 * v);
        }
    }

    #[test]
    fn verlet_is_reversible_with_regularization() {
        let spec = InitialDensitySpec::uniform_box(1.0, 1.0).with_jitter(0.1);
        let ens = quiet_start_init(&spec, 81, 1, 4).unwrap().ensemble;
        let k = k05().with_regularization(0.05).unwrap();
        let fwd = verlet_step(&ens, 0.01, &k).unwrap();
        let back = verlet_step(&fwd, -0.01, &k).unwrap();
        for (a, b) in back
            .positions()
            .iter()
            .chain(back.velocities())
            .zip(ens.positions().iter().chain(ens.velocities()))
        {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    /// Classical RK4 on the reduced two-body problem `r'' = 2 * (1/2) F(r)`.
    fn rk4_two_body(r0: f64, w0: f64, t: f64, steps: usize) -> (f64, f64) {
        let acc = |r: f64| r.signum() * r.abs().powf(-0.5);
        let h = t / steps as f64;
        let (mut r, mut w) = (r0, w0);
        for _ in 0..steps {
            let k1 = (w, acc(r));
            let k2 = (w + 0.5 * h * k1.1, acc(r + 0.5 * h * k1.0));
            let k3 = (w + 0.5 * h * k2.1, acc(r + 0.5 * h * k2.0));
            let k4 = (w + h * k3.1, acc(r + h * k3.0));
            r += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            w += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        (r, w)
    }

    #[test]
    fn two_body_symmetric_against_rk4() {
        // X = (-0.5, 0.5), V = (0.3, -0.3): approach then repel
        let ens = ParticleEnsemble::new(1, vec![-0.5, 0.5], vec![0.3, -0.3]).unwrap();
        let (t, steps) = (1.0, 4000);
        let mut s = ens.clone();
        for _ in 0..steps {
            s = verlet_step(&s, t / steps as f64, &k05()).unwrap();
            assert_eq!(s.x(0)[0], -s.x(1)[0]);
            assert_eq!(s.v(0)[0], -s.v(1)[0]);
        }
        let (r, w) = rk4_two_body(1.0, -0.6, t, 40_000);
        assert!((s.x(1)[0] - s.x(0)[0] - r).abs() < 1e-6);
        assert!((s.v(1)[0] - s.v(0)[0] - w).abs() < 1e-6);
    }

    #[test]
    fn run_free_transport_exact() {
        let spec = InitialDensitySpec::uniform_box(1.0, 1.0);
        let ens = quiet_start_init(&spec, 16, 1, 0).unwrap().ensemble;
        let out = run(&ens, 1.0, &ForceKernel::off(), &RunOptions::new(0.25)).unwrap();
        assert!(out.aborted.is_none());
        let tr = out.trajectory;
        assert_eq!(tr.steps(), 32);
        assert_relative_eq!(tr.final_time(), 1.0, max_relative = 1e-14);
        let last = tr.snapshot(tr.steps());
        for i in 0..16 {
            assert_relative_eq!(last.x(i)[0], ens.x(i)[0] + ens.v(i)[0], epsilon = 1e-14);
        }
        assert!(tr.abs_integrals(0).iter().all(|&c| c == 0.0));
    }

    #[test]
    fn head_on_pair_never_crosses() {
        let ens = ParticleEnsemble::new(1, vec![-0.5, 0.5], vec![0.5, -0.5]).unwrap();
        let out = run(&ens, 2.0, &k05(), &RunOptions::new(0.05)).unwrap();
        assert!(out.aborted.is_none());
        let gap = out
            .trajectory
            .snapshots()
            .iter()
            .map(|s| s.x(1)[0] - s.x(0)[0])
            .fold(f64::INFINITY, f64::min);
        assert!(gap > 0.0);
        let fine = run(&ens, 2.0, &k05(), &RunOptions::new(0.005)).unwrap().trajectory;
        let fine_gap = fine
            .snapshots()
            .iter()
            .map(|s| s.x(1)[0] - s.x(0)[0])
            .fold(f64::INFINITY, f64::min);
        assert!((gap - fine_gap).abs() < 1e-2);
    }

    #[test]
    fn momentum_conserved() {
        let spec = InitialDensitySpec::uniform_box(1.0, 1.0).with_jitter(0.1);
        let ens = quiet_start_init(&spec, 64, 1, 9).unwrap().ensemble;
        let p0 = total_momentum(&ens);
        let out = run(&ens, 1.0, &k05(), &RunOptions::new(0.125)).unwrap();
        assert!(out.aborted.is_none(), "{:?}", out.aborted);
        for s in out.trajectory.snapshots() {
            let p = total_momentum(s);
            assert!((p[0] - p0[0]).abs() <= 1e-9);
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let spec = InitialDensitySpec::uniform_box(1.0, 1.0).with_jitter(0.1);
        let ens = quiet_start_init(&spec, 81, 2, 2).unwrap().ensemble;
        let k = k05().with_regularization(0.1).unwrap();
        let h0 = total_energy(&ens, &k);
        let drift = |dt: f64| {
            let mut s = ens.clone();
            let steps = (0.5 / dt).round() as usize;
            let mut worst: f64 = 0.0;
            for _ in 0..steps {
                s = verlet_step(&s, dt, &k).unwrap();
                worst = worst.max((total_energy(&s, &k) - h0).abs());
            }
            worst
        };
        let (a, b) = (drift(0.02), drift(0.01));
        let order = (a / b).log2();
        assert!(order >= 1.9, "order {order}");
    }

    #[test]
    fn collision_aborts_with_partial_trajectory() {
        let ens = ParticleEnsemble::new(1, vec![-0.5, 0.5], vec![1.0, 0.0]).unwrap();
        // the first step closes the gap below the collision radius
        let k = k05().with_collision_radius(0.6);
        let out = run(&ens, 1.0, &k, &RunOptions::new(1.0).with_kappa(2)).unwrap();
        match out.aborted {
            Some(Error::Collision { time: Some(t), .. }) => assert!(t > 0.0),
            other => panic!("expected collision, got {other:?}"),
        }
        assert!(!out.trajectory.is_empty());
    }

    #[test]
    fn rejects_bad_arguments() {
        let ens = ParticleEnsemble::new(1, vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert!(run(&ens, 0.0, &k05(), &RunOptions::new(0.1)).is_err());
        assert!(run(&ens, 1.0, &k05(), &RunOptions::new(0.1).with_kappa(1)).is_err());
        assert!(verlet_step(&ens, 0.0, &k05()).is_err());
    }

    #[test]
    fn close_pass_integral_matches_fine_quadrature() {
        // two particles crossing in d = 1; the exact integral of |E| over the step
        // follows from |r(tau)|^{-1/2} / 2 with r linear in tau
        let ens = ParticleEnsemble::new(1, vec![-0.01, 0.01], vec![1.0, -1.0]).unwrap();
        let out = run(&ens, 0.04, &k05(), &RunOptions::new(0.08).with_kappa(2)).unwrap();
        let tr = out.trajectory;
        assert_eq!(tr.close_pairs(0), &[(0, 1)]);
        let x0 = tr.snapshot(0).positions().to_vec();
        let x1 = tr.snapshot(1).positions().to_vec();
        let (r0, r1) = (x0[1] - x0[0], x1[1] - x1[0]);
        // int_0^dt |r0 + (r1-r0) s/dt|^{-1/2} / 2 ds
        let dt = tr.dt();
        let slope = (r1 - r0) / dt;
        let prim = |r: f64| 2.0 * r.signum() * r.abs().sqrt() / slope;
        let exact = 0.5 * (prim(r1) - prim(r0)).abs();
        let exact = if r0.signum() != r1.signum() {
            0.5 * (2.0 * r0.abs().sqrt() + 2.0 * r1.abs().sqrt()) / slope.abs()
        } else {
            exact
        };
        assert_relative_eq!(tr.abs_integrals(0)[0], exact, max_relative = 1e-7);
    }

    #[test]
    fn field_path_endpoints_match_samples() {
        let spec = InitialDensitySpec::uniform_box(1.0, 1.0).with_jitter(0.1);
        let ens = quiet_start_init(&spec, 256, 1, 1).unwrap().ensemble;
        let out = run(&ens, 0.05, &k05(), &RunOptions::new(1.0 / 16.0)).unwrap();
        let tr = out.trajectory;
        let (step, i) = tr
            .close_pairs
            .iter()
            .enumerate()
            .find_map(|(s, p)| p.first().map(|&(i, _)| (s, i as usize)))
            .expect("jittered lattice has close passages");
        let path = tr.field_path(step, i).unwrap();
        assert!(!path.is_smooth());
        let e0 = tr.field_vecs(step).unwrap()[i];
        let e1 = tr.field_vecs(step + 1).unwrap()[i];
        assert_relative_eq!(path.field(0.0)[0], e0, max_relative = 1e-9, epsilon = 1e-12);
        assert_relative_eq!(path.field(1.0)[0], e1, max_relative = 1e-9, epsilon = 1e-12);
        assert_relative_eq!(path.position(1.0)[0], tr.snapshot(step + 1).x(i)[0], epsilon = 1e-14);
    }
}
