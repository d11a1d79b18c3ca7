//! Synthetic ground truth: potential-driven velocity fields and densities
//! transported by them under the continuity equation.
//!
//! The domain is periodic. Gaussian modes are evaluated with their nearest
//! periodic images so potentials, velocities and densities are all smooth
//! across the wrap, and the forward-time centred-space (FTCS) transport
//! conserves total mass exactly up to rounding.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldSequence, Frame, GridGeometry, ScalarField, VectorField};
use crate::scalar::Scalar;
use crate::seeds;

/// Number of Gaussian modes in sampled potentials and initial densities.
pub const MIXTURE_COMPONENTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMode {
    pub mean: (f64, f64),
    /// Diagonal covariance entries.
    pub var: (f64, f64),
    pub weight: f64,
    /// Shift of the mean per frame.
    pub displacement: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialMixture {
    modes: Vec<GaussianMode>,
}

impl PotentialMixture {
    pub fn new(modes: Vec<GaussianMode>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Config("mixture needs at least one mode".into()));
        }
        for (i, m) in modes.iter().enumerate() {
            if !(m.var.0 > 0.0 && m.var.1 > 0.0) {
                return Err(Error::Config(format!("mode {i} has non-positive variance {:?}", m.var)));
            }
            if !(m.weight >= 0.0 && m.weight.is_finite()) {
                return Err(Error::Config(format!("mode {i} has invalid weight {}", m.weight)));
            }
        }
        Ok(PotentialMixture { modes })
    }

    pub fn modes(&self) -> &[GaussianMode] {
        &self.modes
    }

    pub fn scale_weights(&mut self, factor: f64) {
        for m in &mut self.modes {
            m.weight *= factor;
        }
    }

    /// Draws a mixture from the configured ranges.
    pub fn sample<R: Rng>(rng: &mut R, ranges: &MixtureRanges, geometry: &GridGeometry, moving: bool) -> Self {
        let (lx, ly) = geometry.lower();
        let (wx, wy) = geometry.extent();
        let ux = Uniform::new(lx, lx + wx);
        let uy = Uniform::new(ly, ly + wy);
        let uv = Uniform::new_inclusive(ranges.var.0, ranges.var.1);
        let uw = Uniform::new_inclusive(ranges.weight.0, ranges.weight.1);
        let ua = Uniform::new(0.0, std::f64::consts::TAU);
        let um = Uniform::new_inclusive(0.0, ranges.max_displacement);
        let modes = (0..ranges.components)
            .map(|_| {
                let mean = (ux.sample(rng), uy.sample(rng));
                let var = (uv.sample(rng), uv.sample(rng));
                let weight = uw.sample(rng);
                let displacement = if moving {
                    let (a, r) = (ua.sample(rng), um.sample(rng));
                    (r * a.cos(), r * a.sin())
                } else {
                    (0.0, 0.0)
                };
                GaussianMode { mean, var, weight, displacement }
            })
            .collect();
        PotentialMixture { modes }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureRanges {
    pub components: usize,
    pub var: (f64, f64),
    pub weight: (f64, f64),
    /// Upper bound of the per-frame mode displacement magnitude.
    pub max_displacement: f64,
}

impl Default for MixtureRanges {
    fn default() -> Self {
        MixtureRanges { components: MIXTURE_COMPONENTS, var: (0.05, 0.5), weight: (0.5, 1.5), max_displacement: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub grid: usize,
    /// Side length of the square domain.
    pub extent: f64,
    pub frames: usize,
    pub dt_sim: f64,
    pub dt_sample: f64,
    /// Multiplier on the potential; sets the overall velocity scale.
    pub potential_scale: f64,
    pub potential: MixtureRanges,
    pub density: MixtureRanges,
    /// Total initial mass, `sum(rho) * dx * dy`.
    pub total_mass: f64,
    /// Weight halvings allowed when a simulation breaks CFL or drives the density non-positive.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            grid: 32,
            extent: 2.8,
            frames: 20,
            dt_sim: 0.001,
            dt_sample: 0.025,
            potential_scale: 0.1,
            potential: MixtureRanges::default(),
            density: MixtureRanges { max_displacement: 0.0, ..MixtureRanges::default() },
            total_mass: 1.0,
            max_retries: 10,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::square(self.grid, self.extent, self.dt_sample)
    }

    /// Solver steps per sampled frame.
    pub fn substeps(&self) -> Result<usize> {
        let ratio = self.dt_sample / self.dt_sim;
        let n = ratio.round();
        if !(self.dt_sim > 0.0) || n < 1.0 || (ratio - n).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "sample interval {} is not an integer multiple of the solver step {}",
                self.dt_sample, self.dt_sim
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.substeps()?;
        if self.frames < 2 {
            return Err(Error::Config("need at least 2 frames".into()));
        }
        for (name, r) in [("potential", &self.potential), ("density", &self.density)] {
            if r.components == 0 || !(r.var.0 > 0.0 && r.var.0 <= r.var.1) || !(r.weight.0 >= 0.0 && r.weight.0 <= r.weight.1) {
                return Err(Error::Config(format!("invalid {name} mixture ranges {r:?}")));
            }
        }
        if !(self.potential_scale > 0.0 && self.total_mass > 0.0) {
            return Err(Error::Config("potential scale and total mass must be positive".into()));
        }
        Ok(())
    }
}

/// Periodic Gaussian density at `(x, y)`: the mode plus its eight nearest images.
fn periodic_gaussian(x: f64, y: f64, mean: (f64, f64), var: (f64, f64), period: (f64, f64)) -> f64 {
    let norm = 1.0 / (std::f64::consts::TAU * (var.0 * var.1).sqrt());
    let wrap = |d: f64, p: f64| d - p * (d / p).round();
    let (dx0, dy0) = (wrap(x - mean.0, period.0), wrap(y - mean.1, period.1));
    let mut acc = 0.0;
    for ix in -1..=1 {
        let dx = dx0 + ix as f64 * period.0;
        let ex = dx * dx / (2.0 * var.0);
        for iy in -1..=1 {
            let dy = dy0 + iy as f64 * period.1;
            acc += (-(ex + dy * dy / (2.0 * var.1))).exp();
        }
    }
    norm * acc
}

/// `phi(t, x) = sum_i w_i N(x | mu_i + t delta_i, diag var_i)` at every cell center.
pub fn eval_potential<S: Scalar>(mix: &PotentialMixture, t: f64, geometry: &GridGeometry) -> Result<ScalarField<S>> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("frame index must be non-negative, got {t}")));
    }
    let period = geometry.extent();
    ScalarField::from_fn(*geometry, |k, l| {
        let (x, y) = geometry.center(k, l);
        let v: f64 = mix
            .modes
            .iter()
            .map(|m| {
                let mean = (m.mean.0 + t * m.displacement.0, m.mean.1 + t * m.displacement.1);
                m.weight * periodic_gaussian(x, y, mean, m.var, period)
            })
            .sum();
        S::lit(v)
    })
}

/// `v = -grad(phi)` by periodic centred differences.
pub fn velocity_from_potential<S: Scalar>(phi: &ScalarField<S>) -> Result<VectorField<S>> {
    let g = *phi.geometry();
    let (kk, ll) = (g.k, g.l);
    let (two_dx, two_dy) = (S::lit(2.0 * g.dx), S::lit(2.0 * g.dy));
    let mut vx = Vec::with_capacity(g.cells());
    let mut vy = Vec::with_capacity(g.cells());
    for k in 0..kk {
        for l in 0..ll {
            let (kp, km) = ((k + 1) % kk, (k + kk - 1) % kk);
            let (lp, lm) = ((l + 1) % ll, (l + ll - 1) % ll);
            vx.push(-(phi.at(kp, l) - phi.at(km, l)) / two_dx);
            vy.push(-(phi.at(k, lp) - phi.at(k, lm)) / two_dy);
        }
    }
    VectorField::new(g, vx, vy)
}

/// Courant sum `max|vx| dt / dx + max|vy| dt / dy`.
pub fn courant_number<S: Scalar>(v: &VectorField<S>, dt: f64) -> f64 {
    let g = v.geometry();
    let (mx, my) = v.max_abs();
    mx.to_f64_lossy() * dt / g.dx + my.to_f64_lossy() * dt / g.dy
}

/// Periodic centred divergence of `(jx, jy)`.
pub fn periodic_divergence<S: Scalar>(g: &GridGeometry, jx: &[S], jy: &[S]) -> Vec<S> {
    let (kk, ll) = (g.k, g.l);
    let (two_dx, two_dy) = (S::lit(2.0 * g.dx), S::lit(2.0 * g.dy));
    let mut out = Vec::with_capacity(g.cells());
    for k in 0..kk {
        let (kp, km) = ((k + 1) % kk, (k + kk - 1) % kk);
        for l in 0..ll {
            let (lp, lm) = ((l + 1) % ll, (l + ll - 1) % ll);
            let ddx = (jx[kp * ll + l] - jx[km * ll + l]) / two_dx;
            let ddy = (jy[k * ll + lp] - jy[k * ll + lm]) / two_dy;
            out.push(ddx + ddy);
        }
    }
    out
}

/// One FTCS step of `d rho / dt = -div(v rho)` with periodic wrap.
pub fn ftcs_step<S: Scalar>(rho: &ScalarField<S>, v: &VectorField<S>, dt_sim: f64) -> Result<ScalarField<S>> {
    let g = *rho.geometry();
    if !g.same_shape(v.geometry()) {
        return Err(Error::Shape("density and velocity grids differ".into()));
    }
    let courant = courant_number(v, dt_sim);
    if !(courant < 1.0) {
        let (mx, my) = v.max_abs();
        return Err(Error::Cfl { max_vx: mx.to_f64_lossy(), max_vy: my.to_f64_lossy(), courant });
    }
    let jx: Vec<S> = v.vx().iter().zip(rho.values()).map(|(a, b)| *a * *b).collect();
    let jy: Vec<S> = v.vy().iter().zip(rho.values()).map(|(a, b)| *a * *b).collect();
    let div = periodic_divergence(&g, &jx, &jy);
    let dt = S::lit(dt_sim);
    ScalarField::new(g, rho.values().iter().zip(&div).map(|(r, d)| *r - dt * *d).collect())
}

/// Ground truth for one sequence: velocities and (linear) densities.
#[derive(Clone, Debug)]
pub struct GeneratedSequence {
    pub fields: FieldSequence<f64>,
    pub potential: PotentialMixture,
    pub initial_density: PotentialMixture,
    /// Number of potential-weight halvings needed to satisfy CFL and keep the density positive.
    pub retries: usize,
}

fn simulate(cfg: &SimulationConfig, g: &GridGeometry, potential: &PotentialMixture, rho0: &ScalarField<f64>) -> Result<FieldSequence<f64>> {
    let substeps = cfg.substeps()?;
    let mut rho = rho0.clone();
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let phi = eval_potential::<f64>(potential, t as f64, g)?.map(|p| p * cfg.potential_scale)?;
        let v = velocity_from_potential(&phi)?;
        frames.push(Frame { velocity: v.clone(), scalar: rho.clone() });
        if t + 1 < cfg.frames {
            for _ in 0..substeps {
                rho = ftcs_step(&rho, &v, cfg.dt_sim)?;
            }
            if let Some((index, value)) = rho.values().iter().enumerate().find(|(_, r)| !(**r > 0.0)) {
                return Err(Error::NonPositiveDensity { index, value: *value });
            }
        }
    }
    FieldSequence::new(frames)
}

/// Simulates one sequence: frame `t` holds `v(t)` and the density after
/// `t * substeps` FTCS steps, each run with the velocity of the frame it
/// starts from. A run that breaks CFL or leaves a non-positive density at a
/// frame is repeated with all potential weights halved.
pub fn generate_sequence(cfg: &SimulationConfig) -> Result<GeneratedSequence> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let mut rng = seeds::rng(cfg.seed, seeds::stream::FIELDS, 0);
    let mut potential = PotentialMixture::sample(&mut rng, &cfg.potential, &g, true);
    let density_mix = PotentialMixture::sample(&mut rng, &cfg.density, &g, false);
    let raw = eval_potential::<f64>(&density_mix, 0.0, &g)?;
    let mass = raw.sum() * g.dx * g.dy;
    let rho0 = raw.map(|r| r * cfg.total_mass / mass)?;

    let mut retries = 0;
    loop {
        match simulate(cfg, &g, &potential, &rho0) {
            Ok(fields) => return Ok(GeneratedSequence { fields, potential, initial_density: density_mix, retries }),
            Err(e @ (Error::Cfl { .. } | Error::NonPositiveDensity { .. })) if retries < cfg.max_retries => {
                log::debug!("seed {}: {e}; halving potential weights", cfg.seed);
                potential.scale_weights(0.5);
                retries += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Ground truth for `n` sequences with per-sequence seeds derived from `master_seed`.
pub fn generate_many(cfg: &SimulationConfig, master_seed: u64, offset: u64, n: usize) -> Result<Vec<GeneratedSequence>> {
    (0..n as u64)
        .map(|i| {
            let c = SimulationConfig { seed: seeds::derive(master_seed, seeds::stream::FIELDS, offset + i), ..cfg.clone() };
            generate_sequence(&c)
        })
        .collect()
}
