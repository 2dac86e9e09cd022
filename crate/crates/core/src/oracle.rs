//! Grid reference for the one-dimensional kinetic equation: a Strang-split
//! semi-Lagrangian solver, the continuum force, and particle-vs-grid metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{partner_maps, path_for};
use crate::ensemble::{InitialDensitySpec, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::field::ForceKernel;
use crate::integrator::Trajectory;
use crate::quadrature::tanh_sinh_split;

/// Mass fraction allowed in the outer tenth of the grid.
const OVERFLOW_TOL: f64 = 1e-6;

/// Uniform cell-centred grid on `[-lx, lx] x [-lv, lv]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub nv: usize,
    pub lx: f64,
    pub lv: f64,
}

impl GridSpec {
    pub fn new(nx: usize, nv: usize, lx: f64, lv: f64) -> Result<Self> {
        if nx < 8 || nv < 8 {
            return Err(Error::param(
                "grid",
                format!("need at least 8 cells per axis, got {nx} x {nv}"),
            ));
        }
        if !(lx > 0.0 && lv > 0.0 && lx.is_finite() && lv.is_finite()) {
            return Err(Error::param(
                "grid",
                format!("half-widths must be positive, got {lx}, {lv}"),
            ));
        }
        Ok(Self { nx, nv, lx, lv })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.lx / self.nx as f64
    }

    pub fn dv(&self) -> f64 {
        2.0 * self.lv / self.nv as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.lx + (i as f64 + 0.5) * self.dx()
    }

    pub fn v(&self, j: usize) -> f64 {
        -self.lv + (j as f64 + 0.5) * self.dv()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid: GridSpec,
    pub t: f64,
    /// `f[i * nv + j]` at `(x_i, v_j)`.
    pub values: Vec<f64>,
}

impl GridDensity {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nx * grid.nv {
            return Err(Error::param(
                "values",
                format!("expected {} entries", grid.nx * grid.nv),
            ));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::param("values", "density values must be finite and non-negative"));
        }
        Ok(Self { grid, t: 0.0, values })
    }

    /// Cell averages of the initial density (4 x 4 sub-samples per cell),
    /// normalized to unit mass. The support must leave a tenth of the grid free.
    pub fn from_spec(spec: &InitialDensitySpec, grid: GridSpec) -> Result<Self> {
        spec.validate()?;
        if spec.r0_x() > 0.9 * grid.lx || spec.r0_v() > 0.9 * grid.lv {
            return Err(Error::param(
                "grid",
                format!(
                    "support ({}, {}) exceeds 90% of the grid half-widths ({}, {})",
                    spec.r0_x(),
                    spec.r0_v(),
                    grid.lx,
                    grid.lv
                ),
            ));
        }
        let (dx, dv) = (grid.dx(), grid.dv());
        let sub = 4;
        let mut values = vec![0.0; grid.nx * grid.nv];
        for i in 0..grid.nx {
            for j in 0..grid.nv {
                let mut acc = 0.0;
                for a in 0..sub {
                    for b in 0..sub {
                        let x = grid.x(i) + ((a as f64 + 0.5) / sub as f64 - 0.5) * dx;
                        let v = grid.v(j) + ((b as f64 + 0.5) / sub as f64 - 0.5) * dv;
                        acc += spec.density(&[x], &[v]);
                    }
                }
                values[i * grid.nv + j] = acc / (sub * sub) as f64;
            }
        }
        let mut g = Self::new(grid, values)?;
        g.normalize();
        Ok(g)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx() * self.grid.dv()
    }

    fn normalize(&mut self) {
        let m = self.mass();
        if m > 0.0 {
            for v in &mut self.values {
                *v /= m;
            }
        }
    }

    /// Spatial density `rho_i = sum_j f_ij dv`.
    pub fn rho(&self) -> Vec<f64> {
        let dv = self.grid.dv();
        self.values
            .chunks_exact(self.grid.nv)
            .map(|row| row.iter().sum::<f64>() * dv)
            .collect()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.nv + j]
    }

    /// Mass in the outer tenth of either axis.
    pub fn edge_mass(&self) -> f64 {
        let g = &self.grid;
        let (bx, bv) = (g.nx.div_ceil(10), g.nv.div_ceil(10));
        let mut acc = 0.0;
        for i in 0..g.nx {
            for j in 0..g.nv {
                if i < bx || i >= g.nx - bx || j < bv || j >= g.nv - bv {
                    acc += self.at(i, j);
                }
            }
        }
        acc * g.dx() * g.dv()
    }

    /// `sum |f - g| dx dv` on a shared grid.
    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.dx()
            * self.grid.dv()
    }
}

fn check_kernel(kernel: &ForceKernel) -> Result<()> {
    if !kernel.is_off() && kernel.alpha >= 1.0 {
        return Err(Error::NonIntegrableKernel(kernel.alpha));
    }
    Ok(())
}

/// Antiderivative of `sign(u) |u|^{-alpha}`.
fn g(u: f64, alpha: f64) -> f64 {
    u.abs().powf(1.0 - alpha) / (1.0 - alpha)
}

/// `int_a^b sign(u) |u|^{-alpha} du` restricted to `|u| >= r`.
fn clipped_integral(a: f64, b: f64, alpha: f64, r: f64) -> f64 {
    let mut acc = 0.0;
    // (-inf, -r] and [r, inf) pieces
    let (lo, hi) = (a, b.min(-r));
    if hi > lo {
        acc += g(hi, alpha) - g(lo, alpha);
    }
    let (lo, hi) = (a.max(r), b);
    if hi > lo {
        acc += g(hi, alpha) - g(lo, alpha);
    }
    acc
}

/// Continuum force `F(x) = sign int (x - y) / |x - y|^{1 + alpha} rho(y) dy` at
/// arbitrary `x`, with `rho` piecewise constant on the grid cells and each cell
/// integrated exactly. Contributions from `|x - y| < r_min` are dropped.
fn continuum_force(rho: &[f64], grid: &GridSpec, kernel: &ForceKernel, x: f64, r_min: f64) -> f64 {
    if kernel.is_off() {
        return 0.0;
    }
    let (alpha, dx) = (kernel.alpha, grid.dx());
    let mut acc = 0.0;
    for (j, &r) in rho.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let u = x - grid.x(j);
        let w = if r_min > 0.0 {
            clipped_integral(u - 0.5 * dx, u + 0.5 * dx, alpha, r_min)
        } else {
            g(u + 0.5 * dx, alpha) - g(u - 0.5 * dx, alpha)
        };
        acc += r * w;
    }
    kernel.coupling.sign() * acc
}

/// Force at the grid nodes, exact per cell for piecewise-constant `rho`.
pub fn field_from_density(rho: &[f64], grid: &GridSpec, kernel: &ForceKernel) -> Result<Vec<f64>> {
    check_kernel(kernel)?;
    if rho.len() != grid.nx {
        return Err(Error::param("rho", format!("expected {} cells", grid.nx)));
    }
    if kernel.is_off() {
        return Ok(vec![0.0; grid.nx]);
    }
    let n = grid.nx;
    let (alpha, dx) = (kernel.alpha, grid.dx());
    // Toeplitz weights w[k] for x_i - y_j = k dx
    let w: Vec<f64> = (0..2 * n - 1)
        .map(|m| {
            let k = m as f64 - (n - 1) as f64;
            g((k + 0.5) * dx, alpha) - g((k - 0.5) * dx, alpha)
        })
        .collect();
    let s = kernel.coupling.sign();
    Ok((0..n)
        .map(|i| s * (0..n).map(|j| rho[j] * w[i + n - 1 - j]).sum::<f64>())
        .collect())
}

/// Force at an arbitrary point from the spatial density of `f`.
pub fn field_at_point(f: &GridDensity, kernel: &ForceKernel, x: f64) -> Result<f64> {
    check_kernel(kernel)?;
    Ok(continuum_force(&f.rho(), &f.grid, kernel, x, 0.0))
}

fn cubic_weights(t: f64) -> [f64; 4] {
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ]
}

/// Cubic Lagrange value of `line` (nodes `0..len`, zero outside) at index position `p`.
fn interp(line: &[f64], stride: usize, len: usize, p: f64) -> f64 {
    let k = p.floor();
    let t = p - k;
    let k = k as i64;
    let w = cubic_weights(t);
    let mut acc = 0.0;
    for (o, wo) in w.iter().enumerate() {
        let idx = k - 1 + o as i64;
        if idx >= 0 && (idx as usize) < len {
            acc += wo * line[idx as usize * stride];
        }
    }
    acc
}

/// `f(x, v) <- f(x - v h, v)`.
fn advect_x(f: &GridDensity, h: f64) -> Vec<f64> {
    let g = &f.grid;
    let (nx, nv, dx) = (g.nx, g.nv, g.dx());
    let cols: Vec<Vec<f64>> = (0..nv)
        .into_par_iter()
        .map(|j| {
            let shift = g.v(j) * h / dx;
            let col = &f.values[j..];
            (0..nx).map(|i| interp(col, nv, nx, i as f64 - shift)).collect()
        })
        .collect();
    let mut out = vec![0.0; nx * nv];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * nv + j] = *v;
        }
    }
    out
}

/// `f(x, v) <- f(x, v - E(x) h)`.
fn advect_v(f: &GridDensity, e: &[f64], h: f64) -> Vec<f64> {
    let g = &f.grid;
    let (nv, dv) = (g.nv, g.dv());
    f.values
        .par_chunks_exact(nv)
        .zip(e.par_iter())
        .flat_map_iter(|(row, &ei)| {
            let shift = ei * h / dv;
            (0..nv).map(move |j| interp(row, 1, nv, j as f64 - shift))
        })
        .collect()
}

/// Output of [`solve`]: spatial densities at every step, `f` at stored steps.
#[derive(Debug, Clone)]
pub struct OracleRun {
    pub grid: GridSpec,
    pub dt: f64,
    pub kernel: ForceKernel,
    pub times: Vec<f64>,
    rhos: Vec<Vec<f64>>,
    pub snapshots: Vec<GridDensity>,
    /// Relative mass change of each step before renormalization.
    pub raw_drift: Vec<f64>,
    /// `|mass - 1|` after each step.
    pub mass_error: Vec<f64>,
}

impl OracleRun {
    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn final_density(&self) -> &GridDensity {
        self.snapshots.last().unwrap()
    }

    /// Stored density closest to `t`, within a tenth of a step.
    pub fn density_at(&self, t: f64) -> Result<&GridDensity> {
        self.snapshots
            .iter()
            .find(|s| (s.t - t).abs() <= 0.1 * self.dt)
            .ok_or(Error::MisalignedTimes {
                time: t,
                start: 0.0,
                end: self.final_time(),
            })
    }

    pub fn rho(&self, k: usize) -> &[f64] {
        &self.rhos[k]
    }

    fn bracket(&self, t: f64) -> Result<(usize, f64)> {
        let end = self.final_time();
        if !(t >= -1e-9 * self.dt && t <= end + 1e-9 * self.dt.max(end)) {
            return Err(Error::MisalignedTimes {
                time: t,
                start: 0.0,
                end,
            });
        }
        let p = (t / self.dt).clamp(0.0, (self.times.len() - 1) as f64);
        let k = (p.floor() as usize).min(self.times.len().saturating_sub(2));
        Ok((k, p - k as f64))
    }

    /// Continuum force at `(t, x)`, linear in time between steps.
    pub fn field(&self, t: f64, x: f64) -> Result<f64> {
        self.field_clipped(t, x, 0.0)
    }

    /// As [`field`](Self::field) with the region `|x - y| < r_min` removed.
    pub fn field_clipped(&self, t: f64, x: f64, r_min: f64) -> Result<f64> {
        let (k, s) = self.bracket(t)?;
        let a = continuum_force(&self.rhos[k], &self.grid, &self.kernel, x, r_min);
        if self.times.len() == 1 || s == 0.0 {
            return Ok(a);
        }
        let b = continuum_force(&self.rhos[k + 1], &self.grid, &self.kernel, x, r_min);
        Ok(a + s * (b - a))
    }

    pub fn max_mass_error(&self) -> f64 {
        self.mass_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_raw_drift(&self) -> f64 {
        self.raw_drift.iter().copied().fold(0.0, f64::max)
    }
}

/// Strang splitting: half `x` step, force from `rho`, full `v` step, half `x`
/// step; negative values clipped and mass renormalized after each step. The
/// step is shortened so that `t_end` is a whole number of steps; `f` is stored
/// every `store_every` steps and at the end.
pub fn solve(f0: &GridDensity, t_end: f64, dt: f64, kernel: &ForceKernel, store_every: usize) -> Result<OracleRun> {
    check_kernel(kernel)?;
    if !(dt > 0.0 && t_end >= 0.0) {
        return Err(Error::param("dt", format!("need dt > 0 and T >= 0, got {dt}, {t_end}")));
    }
    let steps = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 { dt } else { t_end / steps as f64 };
    let grid = f0.grid;
    let mut f = f0.clone();
    f.t = 0.0;
    let every = store_every.max(1);
    let mut run = OracleRun {
        grid,
        dt: h,
        kernel: *kernel,
        times: vec![0.0],
        rhos: vec![f.rho()],
        snapshots: vec![f.clone()],
        raw_drift: Vec::new(),
        mass_error: Vec::new(),
    };
    for s in 1..=steps {
        let before = f.mass();
        f.values = advect_x(&f, 0.5 * h);
        let e = field_from_density(&f.rho(), &grid, kernel)?;
        f.values = advect_v(&f, &e, h);
        f.values = advect_x(&f, 0.5 * h);
        for v in &mut f.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        run.raw_drift.push((f.mass() - before).abs() / before);
        f.normalize();
        run.mass_error.push((f.mass() - 1.0).abs());
        f.t = s as f64 * h;
        let edge = f.edge_mass();
        if edge > OVERFLOW_TOL {
            return Err(Error::SupportOverflow {
                time: f.t,
                fraction: edge,
            });
        }
        run.times.push(f.t);
        run.rhos.push(f.rho());
        if s % every == 0 || s == steps {
            run.snapshots.push(f.clone());
        }
    }
    Ok(run)
}

/// Tensor Gaussians `sigma e^{1/2} exp(-|z - c|^2 / (2 sigma^2))`, each with
/// Lipschitz constant 1, at three widths on lattices of spacing `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDictionary {
    /// `(c_x, c_v, sigma)`.
    pub atoms: Vec<(f64, f64, f64)>,
}

impl TestDictionary {
    /// Widths `base`, `base / 2`, `base / 4` with centers covering
    /// `[-x_half, x_half] x [-v_half, v_half]`.
    pub fn new(x_half: f64, v_half: f64, base: f64) -> Result<Self> {
        if !(base > 0.0 && x_half > 0.0 && v_half > 0.0) {
            return Err(Error::param("dictionary", "extents and width must be positive"));
        }
        let mut atoms = Vec::new();
        for k in 0..3 {
            let s = base / 2f64.powi(k);
            let nx = (x_half / s).ceil() as i64;
            let nv = (v_half / s).ceil() as i64;
            for a in -nx..=nx {
                for b in -nv..=nv {
                    atoms.push((a as f64 * s, b as f64 * s, s));
                }
            }
        }
        Ok(Self { atoms })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

fn bump(u: f64, s: f64) -> f64 {
    (-(u * u) / (2.0 * s * s)).exp()
}

fn amplitude(s: f64) -> f64 {
    s * 0.5f64.exp()
}

/// `<mu, phi>` for every atom.
pub fn particle_moments(ens: &ParticleEnsemble, dict: &TestDictionary) -> Result<Vec<f64>> {
    if ens.dim() != 1 {
        return Err(Error::param("ensemble", "the grid reference is one-dimensional"));
    }
    let w = ens.weight();
    Ok(dict
        .atoms
        .par_iter()
        .map(|&(cx, cv, s)| {
            amplitude(s)
                * w
                * (0..ens.n())
                    .map(|i| bump(ens.x(i)[0] - cx, s) * bump(ens.v(i)[0] - cv, s))
                    .sum::<f64>()
        })
        .collect())
}

/// `<f, phi>` for every atom, midpoint rule on the cells.
pub fn grid_moments(f: &GridDensity, dict: &TestDictionary) -> Vec<f64> {
    let g = &f.grid;
    let cell = g.dx() * g.dv();
    dict.atoms
        .par_iter()
        .map(|&(cx, cv, s)| {
            let gv: Vec<f64> = (0..g.nv).map(|j| bump(g.v(j) - cv, s)).collect();
            let mut acc = 0.0;
            for i in 0..g.nx {
                let gx = bump(g.x(i) - cx, s);
                if gx < 1e-300 {
                    continue;
                }
                let row = &f.values[i * g.nv..(i + 1) * g.nv];
                acc += gx * row.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>();
            }
            amplitude(s) * acc * cell
        })
        .collect()
}

/// `max_phi |<mu_N, phi> - <f, phi>|` over the dictionary.
pub fn weak_distance(ens: &ParticleEnsemble, f: &GridDensity, dict: &TestDictionary) -> Result<f64> {
    let a = particle_moments(ens, dict)?;
    let b = grid_moments(f, dict);
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FconvSeries {
    /// Window end times (every step from `eps` on).
    pub times: Vec<f64>,
    /// `max_i (1/eps) int |F_N(X_i) - F(X_i)| ds` over the window ending at each time.
    pub values: Vec<f64>,
    pub sup: f64,
}

/// Windowed force discrepancy between particles and the grid reference. The
/// continuum force is evaluated exactly at every instant and interpolated
/// linearly within a step; steps with close pairs integrate the particle field
/// along the drift segment with the near terms exact, other steps use the
/// trapezoid rule.
pub fn force_convergence_stat(traj: &Trajectory, oracle: &OracleRun, eps: f64) -> Result<FconvSeries> {
    if traj.dim() != 1 {
        return Err(Error::param("traj", "the grid reference is one-dimensional"));
    }
    if !traj.has_field_vecs() {
        return Err(Error::MissingRecord("field vectors"));
    }
    let end = traj.final_time();
    if end > oracle.final_time() + 0.1 * oracle.dt {
        return Err(Error::MisalignedTimes {
            time: end,
            start: 0.0,
            end: oracle.final_time(),
        });
    }
    let dt = traj.dt();
    let w = (eps / dt).round() as usize;
    if w < 2 || ((w as f64) * dt - eps).abs() > 1e-6 * eps {
        return Err(Error::WindowTooCoarse { eps, dt });
    }
    let n = traj.n();
    let kernel = *traj.kernel();
    if kernel.is_off() && oracle.kernel.is_off() {
        let times: Vec<f64> = traj.times()[w..].to_vec();
        let values = vec![0.0; times.len()];
        return Ok(FconvSeries {
            times,
            values,
            sup: 0.0,
        });
    }
    // continuum force at every instant, linear in the step fraction in between
    let finf: Vec<Vec<f64>> = (0..traj.len())
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let t = traj.times()[k];
            let x = traj.snapshot(k).positions();
            (0..n).map(|i| oracle.field(t, x[i])).collect()
        })
        .collect::<Result<_>>()?;
    let gap = |k: usize, i: usize| (traj.field_vecs(k).unwrap()[i] - finf[k][i]).abs();
    let partners = partner_maps(traj);
    let per_step: Vec<Vec<f64>> = (0..traj.steps())
        .into_par_iter()
        .map(|s| {
            (0..n)
                .map(|i| {
                    if !partners[s].contains_key(&i) {
                        return 0.5 * dt * (gap(s, i) + gap(s + 1, i));
                    }
                    let path = path_for(traj, s, i, &partners[s]).unwrap();
                    let (a, b) = (finf[s][i], finf[s + 1][i]);
                    dt * tanh_sinh_split(
                        |tau: f64| (path.field(tau)[0] - (a + tau * (b - a))).abs(),
                        0.0,
                        1.0,
                        path.splits(),
                        1e-8,
                        6,
                    )
                })
                .collect()
        })
        .collect();
    let mut acc = vec![0.0; n];
    let mut times = Vec::new();
    let mut values = Vec::new();
    for s in 0..traj.steps() {
        for i in 0..n {
            acc[i] += per_step[s][i];
            if s >= w {
                acc[i] -= per_step[s - w][i];
            }
        }
        if s + 1 >= w {
            times.push(traj.times()[s + 1]);
            values.push(acc.iter().copied().fold(0.0, f64::max) / eps);
        }
    }
    let sup = values.iter().copied().fold(0.0, f64::max);
    Ok(FconvSeries { times, values, sup })
}

/// Near-field particle sum and far-field discrepancy at cutoff `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearFarSplit {
    pub r: f64,
    /// `max_i (1/N) sum_{0 < |X_i - X_j| < r} |X_i - X_j|^{-alpha}`.
    pub near: f64,
    /// `max_i |F_N^{>= r}(X_i) - F^{>= r}(X_i)|`.
    pub far: f64,
}

pub fn near_far_split(ens: &ParticleEnsemble, oracle: &OracleRun, t: f64, r: f64) -> Result<NearFarSplit> {
    if ens.dim() != 1 {
        return Err(Error::param("ensemble", "the grid reference is one-dimensional"));
    }
    if !(r > 0.0) {
        return Err(Error::param("r", format!("must be positive, got {r}")));
    }
    let kernel = oracle.kernel;
    let n = ens.n();
    let w = ens.weight();
    let x = ens.positions();
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut near = 0.0;
            let mut far = 0.0;
            for j in 0..n {
                let u = x[i] - x[j];
                let a = u.abs();
                if j == i || a == 0.0 || kernel.is_off() {
                    continue;
                }
                if a < r {
                    near += a.powf(-kernel.alpha);
                } else {
                    far += u.signum() * a.powf(-kernel.alpha);
                }
            }
            let cont = oracle.field_clipped(t, x[i], r)?;
            Ok((w * near, (kernel.coupling.sign() * w * far - cont).abs()))
        })
        .collect::<Result<_>>()?;
    Ok(NearFarSplit {
        r,
        near: rows.iter().map(|p| p.0).fold(0.0, f64::max),
        far: rows.iter().map(|p| p.1).fold(0.0, f64::max),
    })
}
