//! Gridded physical fields, grid geometry and the affine rescaling used to
//! feed them to the networks.
//!
//! Arrays are stored row-major with the x index outermost: cell `(k, l)`
//! (zero-based) lives at `values[k * L + l]` and its center is at
//! `(x0 + k * dx, y0 + l * dy)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smallest density admitted before taking a logarithm.
pub const DENSITY_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub k: usize,
    pub l: usize,
    pub dx: f64,
    pub dy: f64,
    /// Domain coordinates of the center of cell (0, 0).
    pub origin: (f64, f64),
    /// Time between consecutive frames.
    pub dt: f64,
}

impl GridGeometry {
    pub fn new(k: usize, l: usize, dx: f64, dy: f64, origin: (f64, f64), dt: f64) -> Result<Self> {
        let g = GridGeometry { k, l, dx, dy, origin, dt };
        g.validate()?;
        Ok(g)
    }

    /// Square domain `[0, extent]^2` split into `n x n` cells.
    pub fn square(n: usize, extent: f64, dt: f64) -> Result<Self> {
        let h = extent / n as f64;
        Self::new(n, n, h, h, (0.5 * h, 0.5 * h), dt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 || self.l < 3 {
            return Err(Error::Geometry(format!("need at least 3x3 cells, got {}x{}", self.k, self.l)));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.dx) || !positive(self.dy) || !positive(self.dt) {
            return Err(Error::Geometry(format!("dx, dy, dt must be positive (got {}, {}, {})", self.dx, self.dy, self.dt)));
        }
        if !self.origin.0.is_finite() || !self.origin.1.is_finite() {
            return Err(Error::Geometry("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.k * self.l
    }

    pub fn index(&self, k: usize, l: usize) -> usize {
        k * self.l + l
    }

    pub fn center(&self, k: usize, l: usize) -> (f64, f64) {
        (self.origin.0 + k as f64 * self.dx, self.origin.1 + l as f64 * self.dy)
    }

    /// Lower-left corner of the domain (cell edges, not centers).
    pub fn lower(&self) -> (f64, f64) {
        (self.origin.0 - 0.5 * self.dx, self.origin.1 - 0.5 * self.dy)
    }

    /// Domain side lengths.
    pub fn extent(&self) -> (f64, f64) {
        (self.k as f64 * self.dx, self.l as f64 * self.dy)
    }

    pub fn diagonal(&self) -> f64 {
        let (w, h) = self.extent();
        w.hypot(h)
    }

    pub fn same_shape(&self, other: &GridGeometry) -> bool {
        self.k == other.k && self.l == other.l
    }
}

fn check_finite<S: Scalar>(what: &'static str, values: &[S]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<S> {
    geometry: GridGeometry,
    values: Vec<S>,
}

impl<S: Scalar> ScalarField<S> {
    pub fn new(geometry: GridGeometry, values: Vec<S>) -> Result<Self> {
        if values.len() != geometry.cells() {
            return Err(Error::Shape(format!("scalar field has {} values for a {}x{} grid", values.len(), geometry.k, geometry.l)));
        }
        check_finite("scalar field", &values)?;
        Ok(ScalarField { geometry, values })
    }

    pub fn filled(geometry: GridGeometry, value: S) -> Result<Self> {
        Self::new(geometry, vec![value; geometry.cells()])
    }

    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(usize, usize) -> S) -> Result<Self> {
        let mut values = Vec::with_capacity(geometry.cells());
        for k in 0..geometry.k {
            for l in 0..geometry.l {
                values.push(f(k, l));
            }
        }
        Self::new(geometry, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn at(&self, k: usize, l: usize) -> S {
        self.values[self.geometry.index(k, l)]
    }

    /// Checks the density invariant (non-negative everywhere).
    pub fn check_density(&self) -> Result<()> {
        match self.values.iter().position(|v| *v < S::zero()) {
            Some(index) => Err(Error::NonPositiveDensity { index, value: self.values[index].to_f64_lossy() }),
            None => Ok(()),
        }
    }

    pub fn sum(&self) -> S {
        self.values.iter().copied().sum()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Result<Self> {
        Self::new(self.geometry, self.values.iter().map(|v| f(*v)).collect())
    }

    pub fn cast<T: Scalar>(&self) -> ScalarField<T> {
        ScalarField { geometry: self.geometry, values: self.values.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<S> {
    geometry: GridGeometry,
    vx: Vec<S>,
    vy: Vec<S>,
}

impl<S: Scalar> VectorField<S> {
    pub fn new(geometry: GridGeometry, vx: Vec<S>, vy: Vec<S>) -> Result<Self> {
        if vx.len() != geometry.cells() || vy.len() != geometry.cells() {
            return Err(Error::Shape(format!(
                "vector field components have {} and {} values for a {}x{} grid",
                vx.len(),
                vy.len(),
                geometry.k,
                geometry.l
            )));
        }
        check_finite("vector field x component", &vx)?;
        check_finite("vector field y component", &vy)?;
        Ok(VectorField { geometry, vx, vy })
    }

    pub fn uniform(geometry: GridGeometry, v: (S, S)) -> Result<Self> {
        Self::new(geometry, vec![v.0; geometry.cells()], vec![v.1; geometry.cells()])
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn vx(&self) -> &[S] {
        &self.vx
    }

    pub fn vy(&self) -> &[S] {
        &self.vy
    }

    pub fn at(&self, k: usize, l: usize) -> (S, S) {
        let i = self.geometry.index(k, l);
        (self.vx[i], self.vy[i])
    }

    pub fn max_abs(&self) -> (S, S) {
        let m = |xs: &[S]| xs.iter().fold(S::zero(), |acc, v| acc.max(v.abs()));
        (m(&self.vx), m(&self.vy))
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Result<Self> {
        Self::new(self.geometry, self.vx.iter().map(|v| f(*v)).collect(), self.vy.iter().map(|v| f(*v)).collect())
    }

    pub fn cast<T: Scalar>(&self) -> VectorField<T> {
        let c = |xs: &[S]| xs.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect();
        VectorField { geometry: self.geometry, vx: c(&self.vx), vy: c(&self.vy) }
    }
}

/// One frame of a sequence: a velocity field and a scalar field that is
/// either a density or a log-density depending on context.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<S> {
    pub velocity: VectorField<S>,
    pub scalar: ScalarField<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSequence<S> {
    geometry: GridGeometry,
    frames: Vec<Frame<S>>,
}

impl<S: Scalar> FieldSequence<S> {
    pub fn new(frames: Vec<Frame<S>>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Shape(format!("a sequence needs at least 2 frames, got {}", frames.len())));
        }
        let geometry = *frames[0].velocity.geometry();
        for (t, f) in frames.iter().enumerate() {
            if f.velocity.geometry() != &geometry || f.scalar.geometry() != &geometry {
                return Err(Error::Shape(format!("frame {t} does not share the sequence geometry")));
            }
        }
        Ok(FieldSequence { geometry, frames })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn frames(&self) -> &[Frame<S>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn map_frames(&self, f: impl Fn(&Frame<S>) -> Result<Frame<S>>) -> Result<Self> {
        Self::new(self.frames.iter().map(f).collect::<Result<Vec<_>>>()?)
    }

    pub fn cast<T: Scalar>(&self) -> FieldSequence<T> {
        FieldSequence {
            geometry: self.geometry,
            frames: self.frames.iter().map(|f| Frame { velocity: f.velocity.cast(), scalar: f.scalar.cast() }).collect(),
        }
    }
}

/// Closed interval mapped affinely onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn new(quantity: &'static str, min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::DegenerateBounds { quantity, min, max });
        }
        Ok(Bounds { min, max })
    }

    pub fn to_unit<S: Scalar>(&self, x: S) -> S {
        let (lo, hi) = (S::lit(self.min), S::lit(self.max));
        S::lit(2.0) * (x - lo) / (hi - lo) - S::one()
    }

    pub fn from_unit<S: Scalar>(&self, y: S) -> S {
        let (lo, hi) = (S::lit(self.min), S::lit(self.max));
        (y + S::one()) * (hi - lo) / S::lit(2.0) + lo
    }

    /// Derivative of `from_unit`.
    pub fn half_width(&self) -> f64 {
        0.5 * (self.max - self.min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToNormalized,
    ToPhysical,
}

/// Rescaling constants for velocities (both components share one interval)
/// and log-densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub velocity: Bounds,
    pub log_density: Bounds,
}

impl NormalizationSpec {
    pub fn new(v_min: f64, v_max: f64, q_min: f64, q_max: f64) -> Result<Self> {
        Ok(NormalizationSpec { velocity: Bounds::new("velocity", v_min, v_max)?, log_density: Bounds::new("log-density", q_min, q_max)? })
    }

    pub fn validate(&self) -> Result<()> {
        Bounds::new("velocity", self.velocity.min, self.velocity.max)?;
        Bounds::new("log-density", self.log_density.min, self.log_density.max)?;
        Ok(())
    }

    /// Global extrema over a collection of (velocity, log-density) sequences.
    pub fn fit<'a, S: Scalar>(sequences: impl IntoIterator<Item = &'a FieldSequence<S>>) -> Result<Self> {
        let (mut vmin, mut vmax, mut qmin, mut qmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for seq in sequences {
            for f in seq.frames() {
                for v in f.velocity.vx().iter().chain(f.velocity.vy()) {
                    let v = v.to_f64_lossy();
                    vmin = vmin.min(v);
                    vmax = vmax.max(v);
                }
                for q in f.scalar.values() {
                    let q = q.to_f64_lossy();
                    qmin = qmin.min(q);
                    qmax = qmax.max(q);
                }
            }
        }
        Self::new(vmin, vmax, qmin, qmax)
    }
}

/// Fields that the normalization can be applied to.
pub trait Rescale: Sized {
    fn rescale(&self, spec: &NormalizationSpec, direction: Direction) -> Result<Self>;
}

impl<S: Scalar> Rescale for ScalarField<S> {
    fn rescale(&self, spec: &NormalizationSpec, direction: Direction) -> Result<Self> {
        spec.validate()?;
        check_finite("scalar field", &self.values)?;
        let b = spec.log_density;
        match direction {
            Direction::ToNormalized => self.map(|x| b.to_unit(x)),
            Direction::ToPhysical => self.map(|y| b.from_unit(y)),
        }
    }
}

impl<S: Scalar> Rescale for VectorField<S> {
    fn rescale(&self, spec: &NormalizationSpec, direction: Direction) -> Result<Self> {
        spec.validate()?;
        let b = spec.velocity;
        match direction {
            Direction::ToNormalized => self.map(|x| b.to_unit(x)),
            Direction::ToPhysical => self.map(|y| b.from_unit(y)),
        }
    }
}

impl<S: Scalar> Rescale for FieldSequence<S> {
    fn rescale(&self, spec: &NormalizationSpec, direction: Direction) -> Result<Self> {
        self.map_frames(|f| Ok(Frame { velocity: f.velocity.rescale(spec, direction)?, scalar: f.scalar.rescale(spec, direction)? }))
    }
}

/// Affine map of a field onto the normalized range, `x -> 2 (x - min) / (max - min) - 1`.
pub fn normalize<F: Rescale>(field: &F, spec: &NormalizationSpec) -> Result<F> {
    field.rescale(spec, Direction::ToNormalized)
}

pub fn denormalize<F: Rescale>(field: &F, spec: &NormalizationSpec) -> Result<F> {
    field.rescale(spec, Direction::ToPhysical)
}

/// Elementwise natural log. With `floor = Some(eps)` densities below `eps`
/// are clamped to it first; without a floor non-positive values are an error.
pub fn log_transform<S: Scalar>(rho: &ScalarField<S>, floor: Option<S>) -> Result<ScalarField<S>> {
    let mut out = Vec::with_capacity(rho.values.len());
    for (index, &v) in rho.values.iter().enumerate() {
        let v = match floor {
            Some(eps) => v.max(eps),
            None if v <= S::zero() => return Err(Error::NonPositiveDensity { index, value: v.to_f64_lossy() }),
            None => v,
        };
        out.push(v.ln());
    }
    ScalarField::new(rho.geometry, out)
}

pub fn exp_transform<S: Scalar>(q: &ScalarField<S>) -> Result<ScalarField<S>> {
    q.map(|v| v.exp())
}

/// Log-transform a density sequence with the default floor.
pub fn log_sequence<S: Scalar>(seq: &FieldSequence<S>) -> Result<FieldSequence<S>> {
    let floor = Some(S::lit(DENSITY_FLOOR));
    seq.map_frames(|f| Ok(Frame { velocity: f.velocity.clone(), scalar: log_transform(&f.scalar, floor)? }))
}
