//! Phase-space state of the particle system and its initial sampling.
//!
//! An ensemble holds `N` identical particles in `R^d x R^d`, each carrying
//! mass `1/N`. Initial data are produced by a stratified ("quiet") start: one
//! particle per cell of a `k^{2d}` lattice whose cells carry equal mass under
//! the initial density, with a bounded seeded jitter inside each cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) fn check_dim(d: usize) -> Result<()> {
    if (1..=3).contains(&d) {
        Ok(())
    } else {
        Err(Error::InvalidDimension(d))
    }
}

/// Positions and velocities of `N` unit-mass/N particles in `d` dimensions.
///
/// Coordinates are stored flat: particle `i` occupies `[i*d, (i+1)*d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<f64>,
    velocities: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, positions: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        check_dim(dim)?;
        if positions.len() != velocities.len() || !positions.len().is_multiple_of(dim) {
            return Err(Error::param(
                "positions",
                format!(
                    "{} position and {} velocity coordinates do not form N particles in d = {dim}",
                    positions.len(),
                    velocities.len()
                ),
            ));
        }
        let n = positions.len() / dim;
        if n < 2 {
            return Err(Error::param("n", format!("need at least 2 particles, got {n}")));
        }
        if positions.iter().chain(&velocities).any(|c| !c.is_finite()) {
            return Err(Error::param("positions", "non-finite coordinate"));
        }
        Ok(Self {
            dim,
            positions,
            velocities,
        })
    }

    /// Build from per-particle `(x, v)` pairs.
    pub fn from_points(dim: usize, points: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut xs = Vec::with_capacity(points.len() * dim);
        let mut vs = Vec::with_capacity(points.len() * dim);
        for (x, v) in points {
            if x.len() != dim || v.len() != dim {
                return Err(Error::param("points", "coordinate length differs from d"));
            }
            xs.extend_from_slice(x);
            vs.extend_from_slice(v);
        }
        Self::new(dim, xs, vs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.positions.len() / self.dim
    }

    /// Mass carried by each particle, `1/N`.
    pub fn weight(&self) -> f64 {
        1.0 / self.n() as f64
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn v(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    pub(crate) fn from_parts_unchecked(dim: usize, positions: Vec<f64>, velocities: Vec<f64>) -> Self {
        debug_assert_eq!(positions.len(), velocities.len());
        Self {
            dim,
            positions,
            velocities,
        }
    }

    pub(crate) fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.positions, self.velocities)
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(&self.velocities).all(|c| c.is_finite())
    }

    /// Phase point `(x, v)` of particle `i` as one `2d` vector.
    pub fn phase_point(&self, i: usize) -> Vec<f64> {
        let mut p = self.x(i).to_vec();
        p.extend_from_slice(self.v(i));
        p
    }

    /// Multiply every phase coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            positions: self.positions.iter().map(|c| c * factor).collect(),
            velocities: self.velocities.iter().map(|c| c * factor).collect(),
        }
    }
}

/// The discrete scale `R0 / N^{1/(2d)}`.
pub fn epsilon_scale(r0: f64, n: usize, d: usize) -> Result<f64> {
    check_dim(d)?;
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(Error::param("r0", format!("must be positive, got {r0}")));
    }
    if n < 2 {
        return Err(Error::param("n", format!("need N >= 2, got {n}")));
    }
    Ok(r0 / (n as f64).powf(1.0 / (2.0 * d as f64)))
}

/// Initial density shapes, all product measures in `(x, v)` with compact support
/// `|x|_inf <= r0_x`, `|v|_inf <= r0_v` and unit mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensityKind {
    UniformBox {
        r0_x: f64,
        r0_v: f64,
    },
    /// Independent centered Gaussians truncated to the support box.
    ProductGaussianTruncated {
        sigma_x: f64,
        sigma_v: f64,
        r0_x: f64,
        r0_v: f64,
    },
    /// Uniform in space, velocities uniform on two blocks centered at `+-v_center`.
    TwoStream {
        r0_x: f64,
        v_center: f64,
        v_halfwidth: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDensitySpec {
    #[serde(flatten)]
    pub kind: DensityKind,
    /// Jitter amplitude as a fraction of the cell width, at most 0.1.
    #[serde(default)]
    pub jitter: f64,
}

/// One-dimensional marginal of a product density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    Uniform { half_width: f64 },
    TruncatedGaussian { sigma: f64, half_width: f64 },
    TwoBlocks { center: f64, half_width: f64 },
}

impl Marginal {
    pub fn support_radius(&self) -> f64 {
        match *self {
            Marginal::Uniform { half_width } | Marginal::TruncatedGaussian { half_width, .. } => half_width,
            Marginal::TwoBlocks { center, half_width } => center + half_width,
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Uniform { half_width } => {
                if x.abs() <= half_width {
                    0.5 / half_width
                } else {
                    0.0
                }
            }
            Marginal::TruncatedGaussian { sigma, half_width } => {
                if x.abs() > half_width {
                    return 0.0;
                }
                let z = gaussian_mass(half_width / sigma);
                (-0.5 * (x / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt() * z)
            }
            Marginal::TwoBlocks { center, half_width } => {
                if (x.abs() - center).abs() <= half_width {
                    0.25 / half_width
                } else {
                    0.0
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Uniform { half_width } => ((x + half_width) / (2.0 * half_width)).clamp(0.0, 1.0),
            Marginal::TruncatedGaussian { sigma, half_width } => {
                let xc = x.clamp(-half_width, half_width);
                let z = gaussian_mass(half_width / sigma);
                let phi = |t: f64| 0.5 * (1.0 + libm::erf(t / (sigma * std::f64::consts::SQRT_2)));
                ((phi(xc) - phi(-half_width)) / z).clamp(0.0, 1.0)
            }
            Marginal::TwoBlocks { center, half_width } => {
                let block = |lo: f64| ((x - lo) / (2.0 * half_width)).clamp(0.0, 1.0) * 0.5;
                block(-center - half_width) + block(center - half_width)
            }
        }
    }

    /// Left-continuous inverse of the CDF on `[0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match *self {
            Marginal::Uniform { half_width } => -half_width + 2.0 * half_width * u,
            Marginal::TwoBlocks { center, half_width } => {
                if u <= 0.5 {
                    -center - half_width + 2.0 * half_width * (2.0 * u)
                } else {
                    center - half_width + 2.0 * half_width * (2.0 * u - 1.0)
                }
            }
            Marginal::TruncatedGaussian { half_width, .. } => {
                let (mut lo, mut hi) = (-half_width, half_width);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        0.0
    }
}

/// Mass of a standard Gaussian on `[-a, a]`.
fn gaussian_mass(a: f64) -> f64 {
    libm::erf(a / std::f64::consts::SQRT_2)
}

impl InitialDensitySpec {
    pub fn new(kind: DensityKind) -> Self {
        Self { kind, jitter: 0.0 }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn uniform_box(r0_x: f64, r0_v: f64) -> Self {
        Self::new(DensityKind::UniformBox { r0_x, r0_v })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be positive, got {v}")))
            }
        };
        match self.kind {
            DensityKind::UniformBox { r0_x, r0_v } => {
                positive("r0_x", r0_x)?;
                positive("r0_v", r0_v)?;
            }
            DensityKind::ProductGaussianTruncated {
                sigma_x,
                sigma_v,
                r0_x,
                r0_v,
            } => {
                positive("sigma_x", sigma_x)?;
                positive("sigma_v", sigma_v)?;
                positive("r0_x", r0_x)?;
                positive("r0_v", r0_v)?;
            }
            DensityKind::TwoStream {
                r0_x,
                v_center,
                v_halfwidth,
            } => {
                positive("r0_x", r0_x)?;
                positive("v_halfwidth", v_halfwidth)?;
                if v_center < v_halfwidth {
                    return Err(Error::param(
                        "v_center",
                        "streams overlap: need v_center >= v_halfwidth",
                    ));
                }
            }
        }
        if !(0.0..=0.1).contains(&self.jitter) {
            return Err(Error::param(
                "jitter",
                format!("must lie in [0, 0.1], got {}", self.jitter),
            ));
        }
        Ok(())
    }

    pub fn x_marginal(&self) -> Marginal {
        match self.kind {
            DensityKind::UniformBox { r0_x, .. } | DensityKind::TwoStream { r0_x, .. } => {
                Marginal::Uniform { half_width: r0_x }
            }
            DensityKind::ProductGaussianTruncated { sigma_x, r0_x, .. } => Marginal::TruncatedGaussian {
                sigma: sigma_x,
                half_width: r0_x,
            },
        }
    }

    pub fn v_marginal(&self) -> Marginal {
        match self.kind {
            DensityKind::UniformBox { r0_v, .. } => Marginal::Uniform { half_width: r0_v },
            DensityKind::ProductGaussianTruncated { sigma_v, r0_v, .. } => Marginal::TruncatedGaussian {
                sigma: sigma_v,
                half_width: r0_v,
            },
            DensityKind::TwoStream {
                v_center, v_halfwidth, ..
            } => Marginal::TwoBlocks {
                center: v_center,
                half_width: v_halfwidth,
            },
        }
    }

    pub fn r0_x(&self) -> f64 {
        self.x_marginal().support_radius()
    }

    pub fn r0_v(&self) -> f64 {
        self.v_marginal().support_radius()
    }

    /// `R0` entering the discrete scale: the larger support half-width.
    pub fn support_radius(&self) -> f64 {
        self.r0_x().max(self.r0_v())
    }

    /// Density value `f0(x, v)`.
    pub fn density(&self, x: &[f64], v: &[f64]) -> f64 {
        let (mx, mv) = (self.x_marginal(), self.v_marginal());
        x.iter().map(|&c| mx.pdf(c)).product::<f64>() * v.iter().map(|&c| mv.pdf(c)).product::<f64>()
    }
}

/// Result of a quiet start: the ensemble plus the bookkeeping of the padding.
#[derive(Debug, Clone)]
pub struct QuietStart {
    pub ensemble: ParticleEnsemble,
    pub requested_n: usize,
    /// Points per phase-space axis; `N = k^{2d}`.
    pub per_axis: usize,
}

/// Largest `k` with `k^{2d} <= n`.
pub fn lattice_side(n: usize, d: usize) -> usize {
    let e = 2 * d as u32;
    let mut k = (n as f64).powf(1.0 / e as f64).floor() as usize;
    while (k + 1).checked_pow(e).is_some_and(|p| p <= n) {
        k += 1;
    }
    while k > 0 && k.pow(e) > n {
        k -= 1;
    }
    k
}

/// Stratified lattice start: one particle per equal-mass phase cell.
///
/// `N` is padded down to the largest `k^{2d}`; the ensemble's `n()` is the
/// count actually used.
pub fn quiet_start_init(spec: &InitialDensitySpec, n: usize, d: usize, seed: u64) -> Result<QuietStart> {
    check_dim(d)?;
    spec.validate()?;
    let k = lattice_side(n, d);
    if k < 2 {
        return Err(Error::param(
            "n",
            format!("N = {n} is below the smallest lattice 2^{} for d = {d}", 2 * d),
        ));
    }
    let x_marginal = spec.x_marginal();
    let v_marginal = spec.v_marginal();
    let nodes = |m: &Marginal| -> Vec<f64> { (0..k).map(|i| m.quantile((i as f64 + 0.5) / k as f64)).collect() };
    let x_axis = nodes(&x_marginal);
    let v_axis = nodes(&v_marginal);

    let total = k.pow(2 * d as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(total * d);
    let mut vs = Vec::with_capacity(total * d);
    let mut index = vec![0usize; 2 * d];
    for _ in 0..total {
        for (c, &i) in index.iter().enumerate() {
            let (marginal, axis) = if c < d {
                (&x_marginal, &x_axis)
            } else {
                (&v_marginal, &v_axis)
            };
            // jitter acts in probability space so the point stays inside its cell and the support
            let value = if spec.jitter > 0.0 {
                let u = (i as f64 + 0.5 + rng.random_range(-1.0..=1.0) * spec.jitter) / k as f64;
                marginal.quantile(u)
            } else {
                axis[i]
            };
            if c < d {
                xs.push(value);
            } else {
                vs.push(value);
            }
        }
        // mixed-radix increment, last axis fastest
        for slot in index.iter_mut().rev() {
            *slot += 1;
            if *slot < k {
                break;
            }
            *slot = 0;
        }
    }
    Ok(QuietStart {
        ensemble: ParticleEnsemble::new(d, xs, vs)?,
        requested_n: n,
        per_axis: k,
    })
}
