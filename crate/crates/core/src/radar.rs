//! Radar measurement operator: per-radar beam directions, range masks,
//! radial velocities and masked log-densities.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarField, VectorField};
use crate::scalar::Scalar;

/// Measurement range of a radar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RadarRange {
    Finite(f64),
    Unlimited,
}

impl RadarRange {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "unlimited" => Ok(RadarRange::Unlimited),
            other => {
                let d: f64 = other.parse().map_err(|_| Error::Config(format!("invalid radar range `{s}`")))?;
                if d.is_infinite() && d > 0.0 {
                    Ok(RadarRange::Unlimited)
                } else if d > 0.0 && d.is_finite() {
                    Ok(RadarRange::Finite(d))
                } else {
                    Err(Error::Config(format!("radar range must be positive, got {d}")))
                }
            }
        }
    }

    /// Effective cutoff distance; unlimited ranges exceed the domain diagonal.
    pub fn cutoff(&self, geometry: &GridGeometry) -> f64 {
        match self {
            RadarRange::Finite(d) => *d,
            RadarRange::Unlimited => 2.0 * geometry.diagonal(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            RadarRange::Finite(d) => format!("{d}"),
            RadarRange::Unlimited => "inf".into(),
        }
    }
}

impl std::fmt::Display for RadarRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for RadarRange {
    fn serialize<Se: Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        match self {
            RadarRange::Finite(d) => s.serialize_f64(*d),
            RadarRange::Unlimited => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for RadarRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => RadarRange::parse(&v.to_string()),
            Raw::Text(s) => RadarRange::parse(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    pub position: (f64, f64),
    pub range: RadarRange,
}

/// Radars with their per-cell beam directions and coverage masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarSet<S> {
    geometry: GridGeometry,
    radars: Vec<RadarConfig>,
    /// Per radar `[ax, ay]` planes, each `K * L`, zero outside the mask.
    projections: Vec<(Vec<S>, Vec<S>)>,
    masks: Vec<Vec<bool>>,
}

/// One radar frame: radial velocities and log-densities for every radar,
/// stored `[N, K, L]`, exact zeros outside each radar's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<S> {
    pub radial: Vec<S>,
    pub log_density: Vec<S>,
    pub frame: usize,
}

/// Beam unit vectors and masks for every radar at every cell center.
pub fn build_projections<S: Scalar>(radars: &[RadarConfig], geometry: &GridGeometry) -> Result<RadarSet<S>> {
    let (lx, ly) = geometry.lower();
    let (wx, wy) = geometry.extent();
    let mut projections = Vec::with_capacity(radars.len());
    let mut masks = Vec::with_capacity(radars.len());
    for (n, r) in radars.iter().enumerate() {
        let (px, py) = r.position;
        if !(px >= lx && px <= lx + wx && py >= ly && py <= ly + wy) {
            return Err(Error::Config(format!("radar {n} at {:?} lies outside the domain", r.position)));
        }
        let cutoff = r.range.cutoff(geometry);
        let mut ax = vec![S::zero(); geometry.cells()];
        let mut ay = vec![S::zero(); geometry.cells()];
        let mut mask = vec![false; geometry.cells()];
        for k in 0..geometry.k {
            for l in 0..geometry.l {
                let (x, y) = geometry.center(k, l);
                let (dx, dy) = (x - px, y - py);
                let dist = dx.hypot(dy);
                // The radial direction is undefined at zero range.
                if dist > 0.0 && dist <= cutoff {
                    let i = geometry.index(k, l);
                    ax[i] = S::lit(dx / dist);
                    ay[i] = S::lit(dy / dist);
                    mask[i] = true;
                }
            }
        }
        projections.push((ax, ay));
        masks.push(mask);
    }
    Ok(RadarSet { geometry: *geometry, radars: radars.to_vec(), projections, masks })
}

impl<S: Scalar> RadarSet<S> {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn radars(&self) -> &[RadarConfig] {
        &self.radars
    }

    pub fn len(&self) -> usize {
        self.radars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radars.is_empty()
    }

    pub fn projection(&self, n: usize) -> (&[S], &[S]) {
        (&self.projections[n].0, &self.projections[n].1)
    }

    pub fn mask(&self, n: usize) -> &[bool] {
        &self.masks[n]
    }

    /// Mask as `0/1` scalars, `[N, K, L]`.
    pub fn mask_values(&self) -> Vec<S> {
        self.masks.iter().flatten().map(|m| if *m { S::one() } else { S::zero() }).collect()
    }

    /// Fraction of cells seen by at least one radar.
    pub fn coverage(&self) -> f64 {
        let covered = (0..self.geometry.cells()).filter(|i| self.masks.iter().any(|m| m[*i])).count();
        covered as f64 / self.geometry.cells() as f64
    }

    pub fn cast<T: Scalar>(&self) -> RadarSet<T> {
        let c = |xs: &[S]| xs.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect();
        RadarSet {
            geometry: self.geometry,
            radars: self.radars.clone(),
            projections: self.projections.iter().map(|(a, b)| (c(a), c(b))).collect(),
            masks: self.masks.clone(),
        }
    }
}

/// Noise-free measurement: `r_n = mask_n * (a_n . v)` and `q_n = mask_n * q`.
pub fn forward<S: Scalar>(v: &VectorField<S>, q: &ScalarField<S>, rs: &RadarSet<S>, frame: usize) -> Result<Observation<S>> {
    if !rs.geometry.same_shape(v.geometry()) || !rs.geometry.same_shape(q.geometry()) {
        return Err(Error::Shape("fields and radar set use different grids".into()));
    }
    let cells = rs.geometry.cells();
    let mut radial = vec![S::zero(); rs.len() * cells];
    let mut log_density = vec![S::zero(); rs.len() * cells];
    for n in 0..rs.len() {
        let (ax, ay) = rs.projection(n);
        let mask = rs.mask(n);
        for i in 0..cells {
            if mask[i] {
                radial[n * cells + i] = ax[i] * v.vx()[i] + ay[i] * v.vy()[i];
                log_density[n * cells + i] = q.values()[i];
            }
        }
    }
    Ok(Observation { radial, log_density, frame })
}

/// Adds i.i.d. `N(0, sigma^2)` noise to in-mask entries only.
pub fn add_noise<S: Scalar, R: Rng>(obs: &Observation<S>, rs: &RadarSet<S>, sigma: f64, rng: &mut R) -> Result<Observation<S>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise level must be non-negative, got {sigma}")));
    }
    let mut out = obs.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let cells = rs.geometry.cells();
    for n in 0..rs.len() {
        let mask = rs.mask(n);
        for i in 0..cells {
            if mask[i] {
                out.radial[n * cells + i] += S::lit(normal.sample(rng));
                out.log_density[n * cells + i] += S::lit(normal.sample(rng));
            }
        }
    }
    Ok(out)
}

/// Relative margin kept free at each domain edge when placing radars.
pub const RADAR_MARGIN: f64 = 0.05;

/// Uniform radar positions over the domain minus a 5% margin on each side.
pub fn sample_radars<R: Rng>(n: usize, range: RadarRange, rng: &mut R, geometry: &GridGeometry) -> Result<Vec<RadarConfig>> {
    if n == 0 {
        return Err(Error::Config("need at least one radar".into()));
    }
    let (lx, ly) = geometry.lower();
    let (wx, wy) = geometry.extent();
    let ux = Uniform::new_inclusive(lx + RADAR_MARGIN * wx, lx + (1.0 - RADAR_MARGIN) * wx);
    let uy = Uniform::new_inclusive(ly + RADAR_MARGIN * wy, ly + (1.0 - RADAR_MARGIN) * wy);
    Ok((0..n).map(|_| RadarConfig { position: (ux.sample(rng), uy.sample(rng)), range }).collect())
}
