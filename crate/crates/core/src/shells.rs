//! Dyadic shell decompositions around an anchor particle.
//!
//! Shell `k >= 1` holds the particles with `base 2^{k-1} < dist <= base 2^k`;
//! the remainder holds `dist <= base`. Particles beyond the last shell are
//! merged into it.

use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::integrator::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShellKind {
    Position,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellPartition {
    pub anchor: usize,
    pub kind: ShellKind,
    /// `3 eps K` for position shells, `3 eps Ebar` for velocity shells.
    pub base_radius: f64,
    /// `(k, members)` for `k = 1..=k_max`, empty shells included.
    pub shells: Vec<(usize, Vec<usize>)>,
    pub remainder: Vec<usize>,
    pub k_max: usize,
}

impl ShellPartition {
    /// All indices covered by the partition.
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.remainder
            .iter()
            .copied()
            .chain(self.shells.iter().flat_map(|(_, m)| m.iter().copied()))
    }

    pub fn len(&self) -> usize {
        self.remainder.len() + self.shells.iter().map(|(_, m)| m.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `eps K` (position) or `eps Ebar` (velocity).
    pub fn unit(&self) -> f64 {
        self.base_radius / 3.0
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Shell index of `dist` for the given base: `0` when `dist <= base`.
fn shell_index(dist: f64, base: f64) -> usize {
    if dist <= base {
        return 0;
    }
    let mut k = 1;
    let mut edge = 2.0 * base;
    while dist > edge && edge.is_finite() {
        k += 1;
        edge *= 2.0;
    }
    k
}

/// Ceiling of `log2(ratio)`, at least 1.
fn dyadic_cap(ratio: f64) -> usize {
    if !(ratio > 1.0) || !ratio.is_finite() {
        return 1;
    }
    (ratio.ln() / 2f64.ln()).ceil().max(1.0) as usize
}

fn partition(
    anchor: usize,
    kind: ShellKind,
    base: f64,
    k_max: usize,
    items: impl Iterator<Item = (usize, f64)>,
) -> ShellPartition {
    let mut shells: Vec<(usize, Vec<usize>)> = (1..=k_max).map(|k| (k, Vec::new())).collect();
    let mut remainder = Vec::new();
    for (j, d) in items {
        match shell_index(d, base) {
            0 => remainder.push(j),
            k => shells[k.min(k_max) - 1].1.push(j),
        }
    }
    ShellPartition {
        anchor,
        kind,
        base_radius: base,
        shells,
        remainder,
        k_max,
    }
}

fn check_anchor(ens: &ParticleEnsemble, anchor: usize) -> Result<()> {
    if anchor >= ens.n() {
        return Err(Error::param(
            "anchor",
            format!("index {anchor} out of range for N = {}", ens.n()),
        ));
    }
    Ok(())
}

/// Position shells with base `3 eps K`; `k_max = ceil(log2(R / (4 eps K)))`
/// with `R` the largest `|X_j|` of the snapshot.
pub fn position_shells(ens: &ParticleEnsemble, anchor: usize, eps: f64, k: f64) -> Result<ShellPartition> {
    check_anchor(ens, anchor)?;
    if !(k > 0.0) || !(eps > 0.0) {
        return Err(Error::param(
            "K",
            format!("eps and K must be positive, got eps = {eps}, K = {k}"),
        ));
    }
    let r = (0..ens.n())
        .map(|j| dist(ens.x(j), &vec![0.0; ens.dim()]))
        .fold(0.0f64, f64::max);
    let base = 3.0 * eps * k;
    let k_max = dyadic_cap(r / (4.0 * eps * k));
    let xa = ens.x(anchor);
    Ok(partition(
        anchor,
        ShellKind::Position,
        base,
        k_max,
        (0..ens.n()).filter(|&j| j != anchor).map(|j| (j, dist(ens.x(j), xa))),
    ))
}

/// Velocity shells of `subset` with base `3 eps Ebar`;
/// `l_max = ceil(log2(K / (eps Ebar)))` with `K` the largest `|V_j|`.
/// With `Ebar = 0` everything goes to the remainder.
pub fn velocity_shells(
    ens: &ParticleEnsemble,
    anchor: usize,
    subset: &[usize],
    eps: f64,
    ebar: f64,
) -> Result<ShellPartition> {
    check_anchor(ens, anchor)?;
    if !(ebar >= 0.0) || !(eps > 0.0) {
        return Err(Error::param(
            "Ebar",
            format!("need eps > 0 and Ebar >= 0, got {eps}, {ebar}"),
        ));
    }
    let va = ens.v(anchor);
    if ebar == 0.0 {
        return Ok(ShellPartition {
            anchor,
            kind: ShellKind::Velocity,
            base_radius: 0.0,
            shells: vec![(1, Vec::new())],
            remainder: subset.iter().copied().filter(|&j| j != anchor).collect(),
            k_max: 1,
        });
    }
    let k = (0..ens.n())
        .map(|j| dist(ens.v(j), &vec![0.0; ens.dim()]))
        .fold(0.0f64, f64::max);
    let base = 3.0 * eps * ebar;
    let l_max = dyadic_cap(k / (eps * ebar));
    Ok(partition(
        anchor,
        ShellKind::Velocity,
        base,
        l_max,
        subset
            .iter()
            .copied()
            .filter(|&j| j != anchor)
            .map(|j| (j, dist(ens.v(j), va))),
    ))
}

/// Splits `subset` by `|V_j - V_anchor| >= 6 eps^2 K dEbar` into `(Q0', Q0'')`.
pub fn q0_split(
    subset: &[usize],
    ens: &ParticleEnsemble,
    anchor: usize,
    eps: f64,
    k: f64,
    debar: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_anchor(ens, anchor)?;
    if !(debar >= 0.0) {
        return Err(Error::param("dEbar", format!("must be >= 0, got {debar}")));
    }
    let threshold = 6.0 * eps * eps * k * debar;
    let va = ens.v(anchor);
    Ok(subset
        .iter()
        .copied()
        .filter(|&j| j != anchor)
        .partition(|&j| dist(ens.v(j), va) >= threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityViolation {
    pub j: usize,
    pub shell: usize,
    pub t: f64,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub anchor: usize,
    pub kind: ShellKind,
    pub instants: usize,
    pub checked: usize,
    pub violations: Vec<StabilityViolation>,
}

/// Checks that shells built at `start` persist over `[start, end]`:
/// position shell `k >= 1` members stay at distance `>= eps K 2^{k-1}`, the
/// remainder within `5 eps K`; velocity shell `l` members keep
/// `|V_j - V_anchor| > eps Ebar 2^{l-1}`.
pub fn shell_stability_check(
    traj: &Trajectory,
    part: &ShellPartition,
    start: f64,
    end: f64,
    eps: f64,
) -> Result<StabilityReport> {
    if end < start || end - start > eps * (1.0 + 1e-12) {
        return Err(Error::InvalidWindow { start, end, eps });
    }
    let tol = 0.1 * traj.dt();
    let idx: Vec<usize> = (0..traj.len())
        .filter(|&k| traj.times()[k] >= start - tol && traj.times()[k] <= end + tol)
        .collect();
    if idx.is_empty() {
        return Err(Error::WindowMissing { start, end });
    }
    let unit = part.unit();
    let mut violations = Vec::new();
    let mut checked = 0;
    for &k in &idx {
        let s = traj.snapshot(k);
        let t = traj.times()[k];
        let a = part.anchor;
        let d = |j: usize| match part.kind {
            ShellKind::Position => dist(s.x(j), s.x(a)),
            ShellKind::Velocity => dist(s.v(j), s.v(a)),
        };
        if part.kind == ShellKind::Position {
            for &j in &part.remainder {
                checked += 1;
                let v = d(j);
                if v > 5.0 * unit {
                    violations.push(StabilityViolation {
                        j,
                        shell: 0,
                        t,
                        value: v,
                        bound: 5.0 * unit,
                    });
                }
            }
        }
        for (shell, members) in &part.shells {
            let bound = unit * 2f64.powi(*shell as i32 - 1);
            for &j in members {
                checked += 1;
                let v = d(j);
                let ok = match part.kind {
                    ShellKind::Position => v >= bound,
                    ShellKind::Velocity => v > bound,
                };
                if !ok {
                    violations.push(StabilityViolation {
                        j,
                        shell: *shell,
                        t,
                        value: v,
                        bound,
                    });
                }
            }
        }
    }
    Ok(StabilityReport {
        anchor: part.anchor,
        kind: part.kind,
        instants: idx.len(),
        checked,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellCount {
    pub k: usize,
    pub count: usize,
    pub bound: f64,
    /// `None` for an empty shell.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub anchor: usize,
    pub kind: ShellKind,
    pub shells: Vec<ShellCount>,
    pub all_hold: bool,
}

/// Compares shell sizes with the volumetric bound
/// `count <= N linf_upper (2 scale)^{2d} boxes`, where `boxes` counts the side
/// `2 scale` boxes covering the shell's phase-space extent: the shell radius
/// in its own block and `other_extent` in the complementary block.
pub fn shell_count_bound_check(
    part: &ShellPartition,
    linf_upper: f64,
    scale: f64,
    other_extent: f64,
    d: usize,
    n: usize,
) -> CountReport {
    let per_box = n as f64 * linf_upper * (2.0 * scale).powi(2 * d as i32);
    let cover = |radius: f64| ((radius / scale).ceil().max(1.0)).powi(d as i32);
    let other = cover(other_extent);
    let shells: Vec<ShellCount> = part
        .shells
        .iter()
        .map(|(k, members)| {
            let outer = part.base_radius * 2f64.powi(*k as i32);
            let bound = per_box * cover(outer) * other;
            let count = members.len();
            ShellCount {
                k: *k,
                count,
                bound,
                ratio: (count > 0).then(|| count as f64 / bound),
            }
        })
        .collect();
    let all_hold = shells.iter().all(|s| s.ratio.is_none_or(|r| r <= 1.0));
    CountReport {
        anchor: part.anchor,
        kind: part.kind,
        shells,
        all_hold,
    }
}

/// Outer shells at scale `eta` with the outer remainder redecomposed into
/// `eps` shells up to `ceil(log2(eta / eps))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoScalePartition {
    pub outer: ShellPartition,
    pub inner: ShellPartition,
}

pub fn two_scale_shells(
    ens: &ParticleEnsemble,
    anchor: usize,
    eps: f64,
    eta: f64,
    k: f64,
) -> Result<TwoScalePartition> {
    if !(eta > eps) {
        return Err(Error::ScaleOrder { eps, eta });
    }
    let outer = position_shells(ens, anchor, eta, k)?;
    let xa = ens.x(anchor);
    let inner_max = dyadic_cap(eta / eps);
    let inner = partition(
        anchor,
        ShellKind::Position,
        3.0 * eps * k,
        inner_max,
        outer.remainder.iter().map(|&j| (j, dist(ens.x(j), xa))),
    );
    Ok(TwoScalePartition { outer, inner })
}

/// `sum_{k >= 1} |C_k| (eps K 2^{k-1})^{-alpha} / N`.
pub fn shell_sum(part: &ShellPartition, alpha: f64, n: usize) -> f64 {
    part.shells
        .iter()
        .map(|(k, m)| m.len() as f64 * (part.unit() * 2f64.powi(*k as i32 - 1)).powf(-alpha))
        .sum::<f64>()
        / n as f64
}

/// `linf^{alpha'/d} K^{alpha'} R^{alpha' - alpha}` with `alpha' = (alpha + 1) / 2`.
pub fn shell_sum_scale(linf: f64, k: f64, r: f64, alpha: f64, d: usize) -> f64 {
    let ap = 0.5 * (alpha + 1.0);
    linf.powf(ap / d as f64) * k.powf(ap) * r.powf(ap - alpha)
}

/// Two-scale sum: the `eta` shells plus the `eps` shells of the outer remainder.
pub fn two_scale_sum(p: &TwoScalePartition, alpha: f64, n: usize) -> (f64, f64) {
    (shell_sum(&p.outer, alpha, n), shell_sum(&p.inner, alpha, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{discrete_linf, support_radii, windowed_force_avg};
    use crate::ensemble::{epsilon_scale, quiet_start_init, InitialDensitySpec};
    use crate::field::ForceKernel;
    use crate::integrator::{run, RunOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(n: usize, d: usize, seed: u64) -> ParticleEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vs = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        ParticleEnsemble::new(d, xs, vs).unwrap()
    }

    fn assert_partition(p: &ShellPartition, expected: &[usize]) {
        let mut got: Vec<usize> = p.members().collect();
        got.sort_unstable();
        let mut want = expected.to_vec();
        want.sort_unstable();
        assert_eq!(got, want, "exhaustive and disjoint");
    }

    #[test]
    fn everything_close_goes_to_remainder() {
        let ens = ParticleEnsemble::new(1, vec![0.0, 0.01, -0.02], vec![0.0; 3]).unwrap();
        let p = position_shells(&ens, 0, 0.1, 1.0).unwrap();
        assert_eq!(p.remainder, vec![1, 2]);
        assert!(p.shells.iter().all(|(_, m)| m.is_empty()));
    }

    #[test]
    fn boundary_is_left_exclusive() {
        let (eps, k) = (0.125, 1.0);
        let base = 3.0 * eps * k;
        let ens = ParticleEnsemble::new(1, vec![0.0, 2.0 * base, 2.0 * base + 1e-12, 5.0], vec![0.0; 4]).unwrap();
        let p = position_shells(&ens, 0, eps, k).unwrap();
        assert_eq!(p.shells[0].1, vec![1]);
        assert_eq!(p.shells[1].1, vec![2]);
    }

    #[test]
    fn random_cloud_partition_rescan() {
        let ens = random_ensemble(256, 2, 1);
        let (eps, k) = (0.05, 1.0);
        let p = position_shells(&ens, 7, eps, k).unwrap();
        let others: Vec<usize> = (0..256).filter(|&j| j != 7).collect();
        assert_partition(&p, &others);
        for (shell, members) in &p.shells {
            for &j in members {
                let d = dist(ens.x(j), ens.x(7));
                assert!(d > p.base_radius * 2f64.powi(*shell as i32 - 1));
                if *shell < p.k_max {
                    assert!(d <= p.base_radius * 2f64.powi(*shell as i32));
                }
            }
        }
    }

    #[test]
    fn velocity_shell_examples() {
        let ens = ParticleEnsemble::new(1, vec![0.0, 0.1, 0.2], vec![0.5, 0.5, 0.5]).unwrap();
        let p = velocity_shells(&ens, 0, &[1, 2], 0.1, 1.0).unwrap();
        assert_eq!(p.remainder, vec![1, 2]);
        let (eps, ebar, l) = (0.1, 1.0, 2);
        let dv = 3.0 * eps * ebar * 2f64.powi(l - 1) * 1.5;
        let ens = ParticleEnsemble::new(1, vec![0.0, 0.0, 0.0], vec![0.0, dv, 5.0]).unwrap();
        let p = velocity_shells(&ens, 0, &[1, 2], eps, ebar).unwrap();
        assert_eq!(p.shells[l as usize - 1].1, vec![1]);
        let zero = velocity_shells(&ens, 0, &[1, 2], eps, 0.0).unwrap();
        assert_eq!(zero.remainder, vec![1, 2]);
    }

    #[test]
    fn q0_split_conventions() {
        let ens = ParticleEnsemble::new(1, vec![0.0; 4], vec![0.0, 0.0, 0.75, 1.5]).unwrap();
        // zero threshold: every member satisfies |dV| >= 0, coincident velocities included
        let (p, s) = q0_split(&[1, 2, 3], &ens, 0, 0.5, 1.0, 0.0).unwrap();
        assert_eq!(p, vec![1, 2, 3]);
        assert!(s.is_empty());
        // threshold exactly 0.75 = 6 eps^2 K dEbar with eps = 0.5, K = 1, dEbar = 0.5
        let (p, s) = q0_split(&[1, 2, 3], &ens, 0, 0.5, 1.0, 0.5).unwrap();
        assert_eq!(p, vec![2, 3]);
        assert_eq!(s, vec![1]);
    }

    #[test]
    fn free_transport_shells_are_stable() {
        let ens = random_ensemble(128, 2, 3);
        let eps = 0.05;
        let tr = run(&ens, eps, &ForceKernel::off(), &RunOptions::new(eps))
            .unwrap()
            .trajectory;
        let k = support_radii(&tr, eps).unwrap().k;
        for anchor in [0, 17, 99] {
            let p = position_shells(&ens, anchor, eps, k).unwrap();
            let rep = shell_stability_check(&tr, &p, 0.0, eps, eps).unwrap();
            assert!(rep.violations.is_empty());
            assert_eq!(rep.instants, 9);
        }
        assert!(matches!(
            shell_stability_check(&tr, &position_shells(&ens, 0, eps, k).unwrap(), 0.0, 2.0 * eps, eps),
            Err(Error::InvalidWindow { .. })
        ));
    }

    #[test]
    fn understated_speed_bound_breaks_stability() {
        // head-on approach at speed 1.5 against a claimed K = 0.1
        let ens = ParticleEnsemble::new(1, vec![0.0, 0.15], vec![0.0, -1.5]).unwrap();
        let eps = 0.1;
        let tr = run(&ens, eps, &ForceKernel::off(), &RunOptions::new(eps))
            .unwrap()
            .trajectory;
        let p = position_shells(&ens, 0, eps, 0.1).unwrap();
        // shell 3 exceeds the cap k_max = 2 and is merged into shell 2
        assert_eq!(p.shells[1].1, vec![1]);
        let rep = shell_stability_check(&tr, &p, 0.0, eps, eps).unwrap();
        assert!(!rep.violations.is_empty());
        assert!(rep.violations.iter().all(|v| v.j == 1 && v.shell == 2));
    }

    #[test]
    fn full_dynamics_shells_stable() {
        let spec = InitialDensitySpec::uniform_box(1.0, 1.0).with_jitter(0.1);
        let n = 256;
        let ens = quiet_start_init(&spec, n, 2, 2).unwrap().ensemble;
        let eps = epsilon_scale(1.0, n, 2).unwrap();
        let tr = run(
            &ens,
            3.0 * eps,
            &ForceKernel::repulsive(0.5).unwrap(),
            &RunOptions::new(eps),
        )
        .unwrap()
        .trajectory;
        let t0 = 2.0 * eps;
        let k0 = tr.index_of(t0).unwrap();
        let k = support_radii(&tr, tr.final_time()).unwrap().k;
        let ebar = windowed_force_avg(&tr, eps).unwrap();
        for anchor in [0, 100, 200] {
            let snap = tr.snapshot(k0);
            let p = position_shells(snap, anchor, eps, k).unwrap();
            let rep = shell_stability_check(&tr, &p, t0, t0 + eps, eps).unwrap();
            assert!(rep.violations.is_empty(), "{:?}", rep.violations);
            let q = velocity_shells(snap, anchor, &p.remainder, eps, ebar).unwrap();
            let rep = shell_stability_check(&tr, &q, t0, t0 + eps, eps).unwrap();
            assert!(rep.violations.is_empty(), "{:?}", rep.violations);
        }
    }

    #[test]
    fn count_bounds_on_lattice() {
        let ens = quiet_start_init(&InitialDensitySpec::uniform_box(1.0, 1.0), 256, 1, 0)
            .unwrap()
            .ensemble;
        let eps = epsilon_scale(1.0, 256, 1).unwrap();
        let lin = discrete_linf(&ens, eps).unwrap();
        let k = 1.0;
        for anchor in [0, 100, 255] {
            let p = position_shells(&ens, anchor, eps, k).unwrap();
            let rep = shell_count_bound_check(&p, lin.upper, eps, k, 1, 256);
            assert!(rep.all_hold, "{rep:?}");
        }
    }

    #[test]
    fn count_bound_single_cluster_and_adversarial_shell() {
        let ens = ParticleEnsemble::new(1, vec![0.0, 1e-3, 2e-3], vec![0.0, 1e-3, 0.0]).unwrap();
        let lin = discrete_linf(&ens, 0.1).unwrap();
        let p = position_shells(&ens, 0, 0.1, 1.0).unwrap();
        assert_eq!(p.remainder.len(), 2);
        let rep = shell_count_bound_check(&p, lin.upper, 0.1, 1.0, 1, 3);
        assert!(rep.all_hold && rep.shells.iter().all(|s| s.ratio.is_none()));
        // every other particle packed into shell 1, inside one lattice cell
        let (eps, k) = (0.1, 1.0);
        let base = 3.0 * eps * k;
        let n = 20;
        let mut xs = vec![0.0];
        let mut vs = vec![0.0];
        for j in 1..n {
            xs.push(1.2 * base + 0.0001 * j as f64);
            vs.push(0.0001 * j as f64);
        }
        let ens = ParticleEnsemble::new(1, xs, vs).unwrap();
        let lin = discrete_linf(&ens, eps).unwrap();
        let p = position_shells(&ens, 0, eps, k).unwrap();
        assert_eq!(p.shells[0].1.len(), n - 1);
        let rep = shell_count_bound_check(&p, lin.upper, eps, k, 1, n);
        let r = rep.shells[0].ratio.unwrap();
        // the cluster fills a single box: tight up to the cover count and the bracket slack 2^{2d}
        let boxes = (2.0 * base / eps).ceil() * (k / eps).ceil();
        assert!(r <= 1.0 && r * boxes >= 1.0 / 16.0, "ratio {r}");
    }

    #[test]
    fn two_scale_examples() {
        let ens = random_ensemble(300, 2, 5);
        let (eps, k) = (0.02, 1.0);
        let p = two_scale_shells(&ens, 3, eps, 2.0 * eps, k).unwrap();
        assert_eq!(p.inner.k_max, 1);
        let others: Vec<usize> = (0..300).filter(|&j| j != 3).collect();
        let mut all: Vec<usize> = p.outer.shells.iter().flat_map(|(_, m)| m.iter().copied()).collect();
        all.extend(p.inner.members());
        all.sort_unstable();
        assert_eq!(all, others);
        assert!(matches!(
            two_scale_shells(&ens, 3, eps, eps, k),
            Err(Error::ScaleOrder { .. })
        ));
        let q = two_scale_shells(&ens, 3, eps, 0.3, k).unwrap();
        let lin_eta = discrete_linf(&ens, 0.3).unwrap();
        let lin_eps = discrete_linf(&ens, eps).unwrap();
        assert!(shell_count_bound_check(&q.outer, lin_eta.upper, 0.3, k, 2, 300).all_hold);
        assert!(shell_count_bound_check(&q.inner, lin_eps.upper, eps, k, 2, 300).all_hold);
    }

    proptest! {
        #[test]
        fn partitions_exhaustive_and_disjoint(seed in 0u64..1000, d in 1usize..=3, eps in 0.005f64..0.2) {
            let ens = random_ensemble(60, d, seed);
            let p = position_shells(&ens, 0, eps, 1.0).unwrap();
            let mut got: Vec<usize> = p.members().collect();
            got.sort_unstable();
            prop_assert_eq!(got, (1..60).collect::<Vec<_>>());
            let q = velocity_shells(&ens, 0, &p.remainder, eps, 0.7).unwrap();
            let mut sub: Vec<usize> = q.members().collect();
            sub.sort_unstable();
            let mut rem = p.remainder.clone();
            rem.sort_unstable();
            prop_assert_eq!(sub, rem);
            let (a, b) = q0_split(&q.remainder, &ens, 0, eps, 1.0, 0.3).unwrap();
            prop_assert_eq!(a.len() + b.len(), q.remainder.len());
        }
    }
}
