//! Pairwise singular kernel `x / |x|^{1+alpha}` and the fields it induces.
//!
//! Every pairwise sum is accumulated with Neumaier compensation in a fixed
//! `j` order per target, so per-particle results do not depend on how the
//! targets are partitioned across threads.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};

/// Direction of the interaction. `Off` gives the zero kernel (free transport).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    Repulsive,
    Attractive,
    Off,
}

impl Coupling {
    pub fn sign(self) -> f64 {
        match self {
            Coupling::Repulsive => 1.0,
            Coupling::Attractive => -1.0,
            Coupling::Off => 0.0,
        }
    }
}

/// `F(r) = sign * r / (|r| + delta)^{1+alpha}` with `0 < alpha < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceKernel {
    pub alpha: f64,
    pub coupling: Coupling,
    /// Regularization length `delta`; zero selects the exact singular kernel.
    pub regularization: f64,
    /// Separations at or below this radius are reported as collisions when
    /// `delta == 0`. Exact coincidence is always a collision.
    pub collision_radius: f64,
}

impl ForceKernel {
    pub fn new(alpha: f64, coupling: Coupling) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::param(
                "alpha",
                format!("kernel exponent must satisfy 0 < alpha < 1, got {alpha}"),
            ));
        }
        Ok(Self {
            alpha,
            coupling,
            regularization: 0.0,
            collision_radius: 0.0,
        })
    }

    pub fn repulsive(alpha: f64) -> Result<Self> {
        Self::new(alpha, Coupling::Repulsive)
    }

    /// Kernel that vanishes identically.
    pub fn off() -> Self {
        Self {
            alpha: 0.5,
            coupling: Coupling::Off,
            regularization: 0.0,
            collision_radius: 0.0,
        }
    }

    pub fn with_regularization(mut self, delta: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::param("regularization", format!("must be >= 0, got {delta}")));
        }
        self.regularization = delta;
        Ok(self)
    }

    pub fn with_collision_radius(mut self, radius: f64) -> Self {
        self.collision_radius = radius.max(0.0);
        self
    }

    pub fn is_off(&self) -> bool {
        self.coupling == Coupling::Off
    }

    pub fn is_singular(&self) -> bool {
        self.regularization == 0.0 && !self.is_off()
    }

    /// Radial factor `sign * (rn + delta)^{-(1+alpha)}` for `|r| = rn`.
    #[inline(always)]
    pub(crate) fn radial(&self, rn: f64) -> f64 {
        let s = rn + self.regularization;
        let mag = if self.alpha == 0.5 {
            1.0 / (s * s.sqrt())
        } else {
            s.powf(-(1.0 + self.alpha))
        };
        self.coupling.sign() * mag
    }

    /// Pair potential `U` with `F = -grad U`.
    pub fn potential(&self, rn: f64) -> f64 {
        let (a, d) = (self.alpha, self.regularization);
        let s = rn + d;
        let mut u = s.powf(1.0 - a) / (1.0 - a);
        if d > 0.0 {
            u += d * s.powf(-a) / a;
        }
        -self.coupling.sign() * u
    }

    #[inline(always)]
    fn check_collision(&self, rn: f64, i: usize, j: usize) -> Result<()> {
        if self.is_singular() && (rn <= self.collision_radius || rn == 0.0) {
            Err(Error::Collision {
                i,
                j,
                distance: rn,
                time: None,
            })
        } else {
            Ok(())
        }
    }
}

/// Neumaier-compensated vector accumulator.
#[derive(Clone, Copy)]
pub(crate) struct CompensatedSum<const D: usize> {
    sum: [f64; D],
    carry: [f64; D],
}

impl<const D: usize> CompensatedSum<D> {
    #[inline(always)]
    pub(crate) fn new() -> Self {
        Self {
            sum: [0.0; D],
            carry: [0.0; D],
        }
    }

    #[inline(always)]
    pub(crate) fn add(&mut self, term: [f64; D]) {
        for c in 0..D {
            // TwoSum: exact rounding error without a branch
            let t = self.sum[c] + term[c];
            let bp = t - self.sum[c];
            self.carry[c] += (self.sum[c] - (t - bp)) + (term[c] - bp);
            self.sum[c] = t;
        }
    }

    #[inline(always)]
    pub(crate) fn value(&self) -> [f64; D] {
        let mut out = [0.0; D];
        for c in 0..D {
            out[c] = self.sum[c] + self.carry[c];
        }
        out
    }
}

#[inline(always)]
pub(crate) fn point<const D: usize>(flat: &[f64], i: usize) -> [f64; D] {
    let mut p = [0.0; D];
    p.copy_from_slice(&flat[i * D..(i + 1) * D]);
    p
}

#[inline(always)]
pub(crate) fn norm<const D: usize>(r: &[f64; D]) -> f64 {
    if D == 1 {
        r[0].abs()
    } else {
        r.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Unweighted sum `sum_j F(target - X_j)` over all `j != skip`.
///
/// `target_index` is only used to label collisions.
pub(crate) fn kernel_sum<const D: usize>(
    positions: &[f64],
    target: [f64; D],
    skip: Option<usize>,
    target_index: usize,
    kernel: &ForceKernel,
) -> Result<[f64; D]> {
    let mut acc = CompensatedSum::<D>::new();
    if kernel.is_off() {
        return Ok(acc.value());
    }
    let n = positions.len() / D;
    for j in 0..n {
        if Some(j) == skip {
            continue;
        }
        let xj = point::<D>(positions, j);
        let mut r = [0.0; D];
        for c in 0..D {
            r[c] = target[c] - xj[c];
        }
        let rn = norm(&r);
        kernel.check_collision(rn, target_index, j)?;
        if rn == 0.0 {
            continue;
        }
        let s = kernel.radial(rn);
        for c in r.iter_mut() {
            *c *= s;
        }
        acc.add(r);
    }
    Ok(acc.value())
}

macro_rules! dispatch_dim {
    ($d:expr, $f:ident ( $($arg:expr),* )) => {
        match $d {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            other => Err(Error::InvalidDimension(other)),
        }
    };
}
pub(crate) use dispatch_dim;

fn check_point(ens: &ParticleEnsemble, x: &[f64]) -> Result<()> {
    if x.len() != ens.dim() {
        return Err(Error::param(
            "x",
            format!("point has {} coordinates, ensemble has d = {}", x.len(), ens.dim()),
        ));
    }
    Ok(())
}

/// Force of a single pair at displacement `r`.
pub fn pair_force(r: &[f64], kernel: &ForceKernel) -> Result<Vec<f64>> {
    if kernel.is_off() {
        return Ok(vec![0.0; r.len()]);
    }
    let rn = r.iter().map(|c| c * c).sum::<f64>().sqrt();
    if rn == 0.0 {
        return if kernel.regularization > 0.0 {
            Ok(vec![0.0; r.len()])
        } else {
            Err(Error::SingularInput)
        };
    }
    let s = kernel.radial(rn);
    Ok(r.iter().map(|c| c * s).collect())
}

fn field_exact_d<const D: usize>(ens: &ParticleEnsemble, i: usize, kernel: &ForceKernel) -> Result<Vec<f64>> {
    let w = ens.weight();
    let sum = kernel_sum::<D>(ens.positions(), point::<D>(ens.positions(), i), Some(i), i, kernel)?;
    Ok(sum.iter().map(|c| c * w).collect())
}

/// `E(X_i) = (1/N) sum_{j != i} F(X_i - X_j)`.
pub fn field_exact(ens: &ParticleEnsemble, i: usize, kernel: &ForceKernel) -> Result<Vec<f64>> {
    if i >= ens.n() {
        return Err(Error::param("i", format!("index {i} out of range for N = {}", ens.n())));
    }
    dispatch_dim!(ens.dim(), field_exact_d(ens, i, kernel))
}

/// Fields and the close pairs found by a sweep.
pub(crate) type Sweep = (Vec<f64>, Vec<(u32, u32)>);

/// Weighted fields at every particle of `after` and, when `before` is given,
/// the pairs `(i, j)`, `i < j`, whose relative displacement between the two
/// configurations exceeds half their closest approach along the segment.
///
/// Each particle sums its terms in ascending `j`, so the sequential sweep
/// (each pair evaluated once) and the parallel one agree bit for bit.
pub(crate) fn pair_sweep<const D: usize>(after: &[f64], before: Option<&[f64]>, kernel: &ForceKernel) -> Result<Sweep> {
    let n = after.len() / D;
    let w = 1.0 / n as f64;
    let (acc, candidates) = if rayon::current_num_threads() <= 1 {
        sweep_symmetric::<D>(after, before, kernel)?
    } else {
        sweep_rows::<D>(after, before, kernel)?
    };
    let mut field = Vec::with_capacity(n * D);
    for a in &acc {
        field.extend(a.value().iter().map(|c| c * w));
    }
    Ok((field, candidates))
}

#[inline(always)]
fn is_candidate<const D: usize>(r1: &[f64; D], rn: f64, xi0: &[f64; D], xj0: &[f64; D]) -> bool {
    let mut delta = [0.0; 3];
    let mut r0 = [0.0; 3];
    let mut dd = 0.0;
    for c in 0..D {
        r0[c] = xi0[c] - xj0[c];
        delta[c] = r1[c] - r0[c];
        dd += delta[c] * delta[c];
    }
    // necessary condition: the closest approach is at least |r1| - |delta|
    if 2.25 * dd <= rn * rn {
        return false;
    }
    let (_, dmin) = crate::integrator::closest_approach(&r0, &delta);
    dd.sqrt() > 0.5 * dmin
}

type SweepOut<const D: usize> = (Vec<CompensatedSum<D>>, Vec<(u32, u32)>);

fn sweep_symmetric<const D: usize>(after: &[f64], before: Option<&[f64]>, kernel: &ForceKernel) -> Result<SweepOut<D>> {
    let n = after.len() / D;
    let mut acc = vec![CompensatedSum::<D>::new(); n];
    let mut candidates = Vec::new();
    let singular = kernel.is_singular();
    let off = kernel.is_off();
    for i in 0..n {
        let xi = point::<D>(after, i);
        let xi0 = before.map(|b| point::<D>(b, i));
        let (head, tail) = acc.split_at_mut(i + 1);
        let ai = &mut head[i];
        for (k, aj) in tail.iter_mut().enumerate() {
            let j = i + 1 + k;
            let xj = point::<D>(after, j);
            let mut r = [0.0; D];
            for c in 0..D {
                r[c] = xi[c] - xj[c];
            }
            let rn = norm(&r);
            if singular && (rn <= kernel.collision_radius || rn == 0.0) {
                return Err(Error::Collision {
                    i,
                    j,
                    distance: rn,
                    time: None,
                });
            }
            if let (Some(b), Some(xi0)) = (before, xi0.as_ref()) {
                if is_candidate(&r, rn, xi0, &point::<D>(b, j)) {
                    candidates.push((i as u32, j as u32));
                }
            }
            if off || rn == 0.0 {
                continue;
            }
            let s = kernel.radial(rn);
            let mut term = [0.0; D];
            let mut neg = [0.0; D];
            for c in 0..D {
                term[c] = r[c] * s;
                neg[c] = -term[c];
            }
            ai.add(term);
            aj.add(neg);
        }
    }
    Ok((acc, candidates))
}

fn sweep_rows<const D: usize>(after: &[f64], before: Option<&[f64]>, kernel: &ForceKernel) -> Result<SweepOut<D>> {
    let n = after.len() / D;
    let rows: Vec<Result<(CompensatedSum<D>, Vec<u32>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = point::<D>(after, i);
            let mut acc = CompensatedSum::<D>::new();
            let mut close = Vec::new();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = point::<D>(after, j);
                let mut r = [0.0; D];
                for c in 0..D {
                    r[c] = xi[c] - xj[c];
                }
                let rn = norm(&r);
                kernel.check_collision(rn, i.min(j), i.max(j))?;
                if let Some(b) = before {
                    if j > i && is_candidate(&r, rn, &point::<D>(b, i), &point::<D>(b, j)) {
                        close.push(j as u32);
                    }
                }
                if kernel.is_off() || rn == 0.0 {
                    continue;
                }
                let s = kernel.radial(rn);
                for c in r.iter_mut() {
                    *c *= s;
                }
                acc.add(r);
            }
            Ok((acc, close))
        })
        .collect();
    let mut acc = Vec::with_capacity(n);
    let mut candidates = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        let (a, close) = row?;
        acc.push(a);
        candidates.extend(close.into_iter().map(|j| (i as u32, j)));
    }
    Ok((acc, candidates))
}

fn field_all_d<const D: usize>(positions: &[f64], kernel: &ForceKernel) -> Result<Vec<f64>> {
    Ok(pair_sweep::<D>(positions, None, kernel)?.0)
}

/// Fields at every particle, flattened as `N x d`.
pub fn field_all(ens: &ParticleEnsemble, kernel: &ForceKernel) -> Result<Vec<f64>> {
    field_all_raw(ens.positions(), ens.dim(), kernel)
}

pub(crate) fn field_all_raw(positions: &[f64], dim: usize, kernel: &ForceKernel) -> Result<Vec<f64>> {
    dispatch_dim!(dim, field_all_d(positions, kernel))
}

fn field_at_d<const D: usize>(ens: &ParticleEnsemble, x: &[f64], kernel: &ForceKernel) -> Result<Vec<f64>> {
    let mut target = [0.0; D];
    target.copy_from_slice(x);
    let w = ens.weight();
    let sum = kernel_sum::<D>(ens.positions(), target, None, usize::MAX, kernel)?;
    Ok(sum.iter().map(|c| c * w).collect())
}

/// `F_N(x) = (1/N) sum_j F(x - X_j)` at an arbitrary point.
///
/// A collision at a probe point is reported with `i == usize::MAX`.
pub fn field_at(ens: &ParticleEnsemble, x: &[f64], kernel: &ForceKernel) -> Result<Vec<f64>> {
    check_point(ens, x)?;
    dispatch_dim!(ens.dim(), field_at_d(ens, x, kernel))
}

/// Field of the kernel regularized at scale `eps`.
pub fn field_regularized(ens: &ParticleEnsemble, x: &[f64], eps: f64, kernel: &ForceKernel) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    let k = kernel.with_regularization(eps)?;
    field_at(ens, x, &k)
}

fn grad_d<const D: usize>(positions: &[f64], x: &[f64], kernel: &ForceKernel) -> Result<DMatrix<f64>> {
    let n = positions.len() / D;
    let (a, delta, sign) = (kernel.alpha, kernel.regularization, kernel.coupling.sign());
    let mut acc = vec![CompensatedSum::<D>::new(); D];
    if sign != 0.0 {
        for j in 0..n {
            let xj = point::<D>(positions, j);
            let mut r = [0.0; D];
            for c in 0..D {
                r[c] = x[c] - xj[c];
            }
            let rn = norm(&r);
            let s = rn + delta;
            let diag = s.powf(-(1.0 + a));
            let off = if rn > 0.0 {
                (1.0 + a) * s.powf(-(2.0 + a)) / rn
            } else {
                0.0
            };
            for row in 0..D {
                let mut term = [0.0; D];
                for col in 0..D {
                    let id = if row == col { diag } else { 0.0 };
                    term[col] = sign * (id - off * r[row] * r[col]);
                }
                acc[row].add(term);
            }
        }
    }
    let w = 1.0 / n as f64;
    Ok(DMatrix::from_fn(D, D, |row, col| acc[row].value()[col] * w))
}

/// Jacobian of [`field_regularized`] at `x`; row `a`, column `b` is `dE_a/dx_b`.
pub fn grad_field_regularized(
    ens: &ParticleEnsemble,
    x: &[f64],
    eps: f64,
    kernel: &ForceKernel,
) -> Result<DMatrix<f64>> {
    check_point(ens, x)?;
    if !(eps > 0.0) {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    let k = kernel.with_regularization(eps)?;
    dispatch_dim!(ens.dim(), grad_d(ens.positions(), x, &k))
}

/// Interaction energy `(1/N^2) sum_{i<j} U(|X_i - X_j|)`.
pub fn potential_energy(ens: &ParticleEnsemble, kernel: &ForceKernel) -> f64 {
    if kernel.is_off() {
        return 0.0;
    }
    let n = ens.n();
    let mut total = 0.0;
    let mut carry = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let rn = ens
                .x(i)
                .iter()
                .zip(ens.x(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let u = kernel.potential(rn);
            let t = total + u;
            carry += if total.abs() >= u.abs() {
                (total - t) + u
            } else {
                (u - t) + total
            };
            total = t;
        }
    }
    (total + carry) / (n as f64 * n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k05() -> ForceKernel {
        ForceKernel::repulsive(0.5).unwrap()
    }

    fn random_ensemble(n: usize, d: usize, seed: u64) -> ParticleEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vs = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        ParticleEnsemble::new(d, xs, vs).unwrap()
    }

    #[test]
    fn pair_force_examples() {
        assert_eq!(pair_force(&[1.0, 0.0], &k05()).unwrap(), vec![1.0, 0.0]);
        assert_eq!(pair_force(&[-1.0, 0.0], &k05()).unwrap(), vec![-1.0, 0.0]);
        let f = pair_force(&[4.0, 0.0], &k05()).unwrap();
        assert_relative_eq!(f[0], 0.5, max_relative = 1e-15);
        assert_eq!(pair_force(&[0.0, 0.0], &k05()), Err(Error::SingularInput));
        let reg = k05().with_regularization(0.1).unwrap();
        assert_eq!(pair_force(&[0.0, 0.0], &reg).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_alpha_outside_unit_interval() {
        assert!(ForceKernel::repulsive(1.0).is_err());
        assert!(ForceKernel::repulsive(0.0).is_err());
        assert!(ForceKernel::repulsive(1.5).is_err());
    }

    #[test]
    fn two_body_antisymmetry() {
        let ens = ParticleEnsemble::new(1, vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_relative_eq!(field_exact(&ens, 0, &k05()).unwrap()[0], -0.5);
        assert_relative_eq!(field_exact(&ens, 1, &k05()).unwrap()[0], 0.5);
    }

    #[test]
    fn equilateral_triangle() {
        let h = 3f64.sqrt() / 2.0;
        let ens = ParticleEnsemble::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.5, h], vec![0.0; 6]).unwrap();
        let fields: Vec<Vec<f64>> = (0..3).map(|i| field_exact(&ens, i, &k05()).unwrap()).collect();
        let mags: Vec<f64> = fields.iter().map(|f| f[0].hypot(f[1])).collect();
        assert_relative_eq!(mags[0], mags[1], max_relative = 1e-14);
        assert_relative_eq!(mags[0], mags[2], max_relative = 1e-14);
        let sx: f64 = fields.iter().map(|f| f[0]).sum();
        let sy: f64 = fields.iter().map(|f| f[1]).sum();
        assert!(sx.abs() < 1e-15 && sy.abs() < 1e-15);
    }

    #[test]
    fn four_points_scalar_oracle() {
        let xs = [0.0, 0.25, 0.5, 1.0];
        let ens = ParticleEnsemble::new(1, xs.to_vec(), vec![0.0; 4]).unwrap();
        // independent term-by-term sum of sign(r)|r|^{-1/2} / 4
        let mut oracle = 0.0;
        for &xj in &xs[1..] {
            let r: f64 = 0.0 - xj;
            oracle += r.signum() * r.abs().powf(-0.5);
        }
        oracle /= 4.0;
        assert_relative_eq!(field_exact(&ens, 0, &k05()).unwrap()[0], oracle, max_relative = 1e-14);
    }

    #[test]
    fn collision_reported_with_pair() {
        let ens = ParticleEnsemble::new(2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0], vec![0.0; 6]).unwrap();
        match field_exact(&ens, 0, &k05()) {
            Err(Error::Collision { i, j, distance, .. }) => {
                assert_eq!((i, j), (0, 2));
                assert_eq!(distance, 0.0);
            }
            other => panic!("expected collision, got {other:?}"),
        }
        let close = ParticleEnsemble::new(1, vec![0.0, 1e-6, 1.0], vec![0.0; 3]).unwrap();
        let k = k05().with_collision_radius(1e-5);
        assert!(matches!(
            field_all(&close, &k),
            Err(Error::Collision { i: 0, j: 1, .. })
        ));
        let reg = k05().with_regularization(0.1).unwrap();
        assert!(field_exact(&ens, 0, &reg).is_ok());
    }

    #[test]
    fn field_at_far_point_bounded() {
        let ens = random_ensemble(16, 2, 1);
        let x = [40.0, -30.0];
        let f = field_at(&ens, &x, &k05()).unwrap();
        // every particle lies within sqrt(2) of the origin
        let dist = 50.0 - 2f64.sqrt();
        assert!(f[0].hypot(f[1]) <= dist.powf(-0.5));
    }

    #[test]
    fn field_at_particle_with_regularization_drops_self_term() {
        let ens = random_ensemble(10, 2, 2);
        let k = k05().with_regularization(0.05).unwrap();
        let at = field_at(&ens, ens.x(3), &k).unwrap();
        let exact = field_exact(&ens, 3, &k).unwrap();
        assert_relative_eq!(at[0], exact[0], max_relative = 1e-14);
        assert_relative_eq!(at[1], exact[1], max_relative = 1e-14);
    }

    #[test]
    fn field_at_matches_reverse_order_sum() {
        let ens = random_ensemble(8, 3, 3);
        let x = [0.3, -0.2, 0.9];
        let f = field_at(&ens, &x, &k05()).unwrap();
        let mut oracle = [0.0; 3];
        for j in (0..8).rev() {
            let r: Vec<f64> = (0..3).map(|c| x[c] - ens.x(j)[c]).collect();
            let rn = r.iter().map(|c| c * c).sum::<f64>().sqrt();
            for c in 0..3 {
                oracle[c] += r[c] / rn.powf(1.5) / 8.0;
            }
        }
        for c in 0..3 {
            assert_relative_eq!(f[c], oracle[c], max_relative = 1e-12);
        }
    }

    #[test]
    fn regularized_two_particles_hand_value() {
        let ens = ParticleEnsemble::new(1, vec![0.0, 1.0], vec![0.0; 2]).unwrap();
        let f = field_regularized(&ens, &[0.0], 1.0, &k05()).unwrap();
        // self term vanishes; the other particle contributes (1/2) * 1/2^{1.5}
        assert_relative_eq!(f[0].abs(), 0.5 / 2f64.powf(1.5), max_relative = 1e-14);
        assert_relative_eq!(f[0].abs(), 0.176_776_695_296_636_9, max_relative = 1e-12);
    }

    #[test]
    fn regularized_converges_monotonically_to_exact() {
        let ens = random_ensemble(12, 2, 4);
        let x = [0.05, 0.02];
        let min_dist = (0..12)
            .map(|j| (x[0] - ens.x(j)[0]).hypot(x[1] - ens.x(j)[1]))
            .fold(f64::INFINITY, f64::min);
        assert!(min_dist > 0.0);
        let exact = field_at(&ens, &x, &k05()).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..30 {
            let eps = 2f64.powi(-k);
            let f = field_regularized(&ens, &x, eps, &k05()).unwrap();
            let err = (f[0] - exact[0]).hypot(f[1] - exact[1]);
            assert!(err <= prev * (1.0 + 1e-12), "error grew at eps = {eps}");
            prev = err;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn regularization_error_is_first_order() {
        let ens = random_ensemble(20, 2, 5);
        let x = [1.7, -1.6];
        let exact = field_at(&ens, &x, &k05()).unwrap();
        let errs: Vec<f64> = (4..10)
            .map(|k| {
                let f = field_regularized(&ens, &x, 2f64.powi(-k), &k05()).unwrap();
                (f[0] - exact[0]).hypot(f[1] - exact[1])
            })
            .collect();
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!((slope - 1.0).abs() < 0.05, "slope {slope}");
        }
    }

    #[test]
    fn gradient_single_particle_closed_form() {
        let ens = ParticleEnsemble::new(2, vec![0.0, 0.0, 1e9, 1e9], vec![0.0; 4]).unwrap();
        let ens1 = ParticleEnsemble::new(1, vec![0.0, 1e9], vec![0.0; 2]).unwrap();
        let (eps, a) = (0.3, 0.5);
        // d = 1: d/dr [r/(r+eps)^{1+a}] = (r+eps)^{-1-a} - (1+a) r (r+eps)^{-2-a}
        let r: f64 = 0.7;
        let g = grad_field_regularized(&ens1, &[r], eps, &k05()).unwrap();
        let far = {
            let rr = r - 1e9;
            let s = rr.abs() + eps;
            s.powf(-1.0 - a) - (1.0 + a) * rr.abs() * s.powf(-2.0 - a)
        };
        let expected = ((r + eps).powf(-1.0 - a) - (1.0 + a) * r * (r + eps).powf(-2.0 - a) + far) / 2.0;
        assert_relative_eq!(g[(0, 0)], expected, max_relative = 1e-12);
        // on-axis in d = 2: radial entry as above, transverse entry (r+eps)^{-1-a}
        let g2 = grad_field_regularized(&ens, &[r, 0.0], eps, &k05()).unwrap();
        let radial = (r + eps).powf(-1.0 - a) - (1.0 + a) * r * (r + eps).powf(-2.0 - a);
        let transverse = (r + eps).powf(-1.0 - a);
        assert_relative_eq!(g2[(0, 0)], radial / 2.0, max_relative = 1e-3);
        assert_relative_eq!(g2[(1, 1)], transverse / 2.0, max_relative = 1e-3);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for d in 1..=3 {
            let ens = random_ensemble(9, d, 10 + d as u64);
            let x: Vec<f64> = (0..d).map(|c| 0.1 * c as f64 - 0.05).collect();
            let eps = 0.2;
            let g = grad_field_regularized(&ens, &x, eps, &k05()).unwrap();
            let h = 1e-5;
            for col in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[col] += h;
                xm[col] -= h;
                let fp = field_regularized(&ens, &xp, eps, &k05()).unwrap();
                let fm = field_regularized(&ens, &xm, eps, &k05()).unwrap();
                for row in 0..d {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    assert!(
                        (fd - g[(row, col)]).abs() < 1e-6,
                        "d={d} ({row},{col}): {fd} vs {}",
                        g[(row, col)]
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_even_under_reflection() {
        let ens = ParticleEnsemble::new(1, vec![-0.5, 0.5], vec![0.0; 2]).unwrap();
        let gp = grad_field_regularized(&ens, &[0.2], 0.1, &k05()).unwrap();
        let gm = grad_field_regularized(&ens, &[-0.2], 0.1, &k05()).unwrap();
        assert_relative_eq!(gp[(0, 0)], gm[(0, 0)], max_relative = 1e-14);
    }

    #[test]
    fn momentum_identity() {
        for d in 1..=3 {
            let ens = random_ensemble(200, d, 20 + d as u64);
            let f = field_all(&ens, &k05()).unwrap();
            for c in 0..d {
                let total: f64 = f.iter().skip(c).step_by(d).sum();
                assert!(total.abs() <= 1e-12 * 200.0, "d={d}: {total}");
            }
        }
    }

    #[test]
    fn field_all_agrees_with_field_exact() {
        let ens = random_ensemble(30, 2, 6);
        let all = field_all(&ens, &k05()).unwrap();
        for i in 0..30 {
            let e = field_exact(&ens, i, &k05()).unwrap();
            assert_eq!(&all[2 * i..2 * i + 2], &e[..]);
        }
    }

    #[test]
    fn sequential_and_parallel_sweeps_agree_bitwise() {
        for d in 1..=3 {
            let ens = random_ensemble(57, d, 30 + d as u64);
            let before: Vec<f64> = ens.positions().iter().map(|x| x - 0.03).collect();
            let with_threads = |t: usize| {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
                pool.install(|| dispatch_dim!(d, pair_sweep(ens.positions(), Some(&before), &k05())).unwrap())
            };
            let (f1, c1) = with_threads(1);
            let (f3, c3) = with_threads(3);
            assert_eq!(f1, f3);
            assert_eq!(c1, c3);
        }
    }

    #[test]
    fn off_kernel_is_zero() {
        let ens = random_ensemble(5, 2, 7);
        assert!(field_all(&ens, &ForceKernel::off()).unwrap().iter().all(|&c| c == 0.0));
        assert_eq!(potential_energy(&ens, &ForceKernel::off()), 0.0);
    }

    #[test]
    fn potential_gradient_is_minus_force() {
        for delta in [0.0, 0.2] {
            let k = k05().with_regularization(delta).unwrap();
            let (r, h) = (0.8, 1e-6);
            let du = (k.potential(r + h) - k.potential(r - h)) / (2.0 * h);
            assert_relative_eq!(-du, pair_force(&[r], &k).unwrap()[0], max_relative = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn kernel_magnitude_bound(x in -50.0f64..50.0, y in -50.0f64..50.0, alpha in 0.05f64..0.95) {
            prop_assume!(x.hypot(y) > 1e-8);
            let k = ForceKernel::repulsive(alpha).unwrap();
            let f = pair_force(&[x, y], &k).unwrap();
            prop_assert!(f[0].hypot(f[1]) <= x.hypot(y).powf(-alpha) * (1.0 + 1e-12));
            let g = pair_force(&[-x, -y], &k).unwrap();
            prop_assert_eq!(g[0], -f[0]);
            prop_assert_eq!(g[1], -f[1]);
        }

        #[test]
        fn exact_gradient_bound(x in -5.0f64..5.0, y in -5.0f64..5.0, alpha in 0.05f64..0.95) {
            let rn = x.hypot(y);
            prop_assume!(rn > 1e-3);
            // Jacobian of r/|r|^{1+a}: |r|^{-1-a} (I - (1+a) r r^T/|r|^2)
            let k = ForceKernel::repulsive(alpha).unwrap();
            let one = ParticleEnsemble::new(2, vec![0.0, 0.0, 1e12, 1e12], vec![0.0; 4]).unwrap();
            let g = grad_field_regularized(&one, &[x, y], 1e-300, &k).unwrap() * 2.0;
            let norm = g.singular_values().max();
            prop_assert!(norm <= (2.0 + alpha) / rn.powf(1.0 + alpha));
        }
    }
}
