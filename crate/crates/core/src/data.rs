//! Synthetic datasets: ground truth, radar placements and noisy
//! observations for a train/test split, stored in single precision.
//!
//! Ground truth and radar positions do not depend on the radar range, and
//! observations are kept for the whole domain; a range is applied when a
//! sequence is turned into a [`Sample`]. One dataset therefore serves every
//! range with identical truth and noise.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    log_sequence, normalize, FieldSequence, Frame, GridGeometry, NormalizationSpec, ScalarField, VectorField, DENSITY_FLOOR,
};
use crate::neural::sequence_input;
use crate::radar::{add_noise, build_projections, forward, sample_radars, Observation, RadarConfig, RadarRange, RadarSet};
use crate::scalar::Scalar;
use crate::seeds::{self, stream};
use crate::synth::{generate_sequence, SimulationConfig};
use crate::tensor::Tensor;

/// Seed index of the first test sequence, so the test set does not depend
/// on the number of training sequences.
pub const TEST_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub simulation: SimulationConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub radars: usize,
    /// Observation noise standard deviation in normalized units.
    pub noise_std: f64,
    pub ranges: Vec<RadarRange>,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            simulation: SimulationConfig::default(),
            n_train: 1000,
            n_test: 50,
            radars: 3,
            noise_std: 0.001,
            ranges: vec![RadarRange::Finite(1.0), RadarRange::Finite(2.0), RadarRange::Unlimited],
            master_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("need at least one training and one test sequence".into()));
        }
        if self.radars == 0 {
            return Err(Error::Config("need at least one radar".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("invalid noise level {}", self.noise_std)));
        }
        if self.ranges.is_empty() {
            return Err(Error::Config("need at least one radar range".into()));
        }
        Ok(())
    }

    pub fn seed_index(&self, i: usize) -> u64 {
        if i < self.n_train {
            i as u64
        } else {
            TEST_OFFSET + (i - self.n_train) as u64
        }
    }
}

/// One stored sequence. Arrays are row-major:
/// `velocity [T, 2, K, L]`, `density [T, K, L]`, `masks [R, N, K, L]` (one
/// block per configured range, 0/1), `projections [N, 2, K, L]` and
/// `observations [T, 2, N, K, L]` (radial then log-density, unmasked).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub radars: Vec<(f64, f64)>,
    pub velocity: Vec<f32>,
    pub density: Vec<f32>,
    pub masks: Vec<f32>,
    pub projections: Vec<f32>,
    pub observations: Vec<f32>,
}

/// Array lengths of one [`SequenceRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordShape {
    pub frames: usize,
    pub radars: usize,
    pub ranges: usize,
    pub cells: usize,
}

impl RecordShape {
    pub fn sections(&self) -> [(&'static str, usize); 5] {
        let (t, n, r, c) = (self.frames, self.radars, self.ranges, self.cells);
        [("velocity", t * 2 * c), ("density", t * c), ("masks", r * n * c), ("projections", n * 2 * c), ("observations", t * 2 * n * c)]
    }

    pub fn total(&self) -> usize {
        self.sections().iter().map(|s| s.1).sum()
    }
}

impl SequenceRecord {
    pub fn check(&self, shape: &RecordShape) -> Result<()> {
        let got = [self.velocity.len(), self.density.len(), self.masks.len(), self.projections.len(), self.observations.len()];
        for ((name, want), have) in shape.sections().iter().zip(got) {
            if *want != have {
                return Err(Error::Shape(format!("section {name} holds {have} values, expected {want}")));
            }
        }
        if self.radars.len() != shape.radars {
            return Err(Error::Shape(format!("{} radar positions, expected {}", self.radars.len(), shape.radars)));
        }
        Ok(())
    }
}

/// A generated dataset: the first `n_train` sequences are for training, the rest for testing.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub geometry: GridGeometry,
    pub normalization: NormalizationSpec,
    pub sequences: Vec<SequenceRecord>,
}

/// A sequence prepared for one radar range, in normalized units.
#[derive(Clone, Debug)]
pub struct Sample<S> {
    pub id: usize,
    pub truth: FieldSequence<S>,
    pub radars: RadarSet<S>,
    pub observations: Vec<Observation<S>>,
    /// Encoder input `[T, 4N, K, L]`.
    pub input: Tensor<S>,
}

fn to_f32(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|x| *x as f32).collect()
}

impl Dataset {
    /// Simulates all sequences, fits the normalization on the training
    /// log-sequences, then places radars and draws observations.
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let geometry = config.simulation.geometry()?;
        let total = config.n_train + config.n_test;
        let mut truth = Vec::with_capacity(total);
        for i in 0..total {
            let idx = config.seed_index(i);
            let sim = SimulationConfig { seed: seeds::derive(config.master_seed, stream::FIELDS, idx), ..config.simulation.clone() };
            let generated = generate_sequence(&sim)?;
            if generated.retries > 0 {
                log::debug!("sequence {i}: {} simulation retries", generated.retries);
            }
            truth.push(generated.fields);
        }
        let logs = truth[..config.n_train].iter().map(log_sequence).collect::<Result<Vec<_>>>()?;
        let normalization = NormalizationSpec::fit(&logs)?;
        drop(logs);

        let cells = geometry.cells();
        let mut sequences = Vec::with_capacity(total);
        for (i, fields) in truth.into_iter().enumerate() {
            let idx = config.seed_index(i);
            let mut rng = seeds::rng(config.master_seed, stream::RADARS, idx);
            let placed = sample_radars(config.radars, RadarRange::Unlimited, &mut rng, &geometry)?;
            let full = build_projections::<f64>(&placed, &geometry)?;
            let normalized = normalize(&log_sequence(&fields)?, &normalization)?;
            let mut noise = seeds::rng(config.master_seed, stream::NOISE, idx);
            let mut observations = Vec::with_capacity(2 * fields.len() * config.radars * cells);
            for (t, f) in normalized.frames().iter().enumerate() {
                let clean = forward(&f.velocity, &f.scalar, &full, t)?;
                let noisy = add_noise(&clean, &full, config.noise_std, &mut noise)?;
                observations.extend(to_f32(&noisy.radial));
                observations.extend(to_f32(&noisy.log_density));
            }
            let mut masks = Vec::with_capacity(config.ranges.len() * config.radars * cells);
            for range in &config.ranges {
                let with_range: Vec<_> = placed.iter().map(|r| RadarConfig { range: *range, ..*r }).collect();
                let rs = build_projections::<f64>(&with_range, &geometry)?;
                for n in 0..rs.len() {
                    masks.extend(rs.mask(n).iter().map(|m| if *m { 1.0f32 } else { 0.0 }));
                }
            }
            let mut projections = Vec::with_capacity(2 * config.radars * cells);
            for n in 0..full.len() {
                let (ax, ay) = full.projection(n);
                projections.extend(to_f32(ax));
                projections.extend(to_f32(ay));
            }
            let mut velocity = Vec::with_capacity(2 * fields.len() * cells);
            let mut density = Vec::with_capacity(fields.len() * cells);
            for f in fields.frames() {
                velocity.extend(to_f32(f.velocity.vx()));
                velocity.extend(to_f32(f.velocity.vy()));
                density.extend(to_f32(f.scalar.values()));
            }
            sequences.push(SequenceRecord {
                radars: placed.iter().map(|r| r.position).collect(),
                velocity,
                density,
                masks,
                projections,
                observations,
            });
        }
        Ok(Dataset { config, geometry, normalization, sequences })
    }

    pub fn shape(&self) -> RecordShape {
        RecordShape {
            frames: self.config.simulation.frames,
            radars: self.config.radars,
            ranges: self.config.ranges.len(),
            cells: self.geometry.cells(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.normalization.validate()?;
        if self.geometry != self.config.simulation.geometry()? {
            return Err(Error::Format("geometry does not match the simulation settings".into()));
        }
        if self.sequences.len() != self.config.n_train + self.config.n_test {
            return Err(Error::Format(format!(
                "{} sequences stored, expected {}",
                self.sequences.len(),
                self.config.n_train + self.config.n_test
            )));
        }
        let shape = self.shape();
        for (i, s) in self.sequences.iter().enumerate() {
            s.check(&shape).map_err(|e| Error::Format(format!("sequence {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.config.n_train
    }

    pub fn n_test(&self) -> usize {
        self.config.n_test
    }

    pub fn train_ids(&self) -> std::ops::Range<usize> {
        0..self.config.n_train
    }

    pub fn test_ids(&self) -> std::ops::Range<usize> {
        self.config.n_train..self.sequences.len()
    }

    /// Keeps the first `n_train` training sequences and all test sequences.
    /// The normalization is left unchanged.
    pub fn subset(&self, n_train: usize) -> Result<Dataset> {
        if n_train == 0 || n_train > self.config.n_train {
            return Err(Error::Config(format!("cannot take {n_train} of {} training sequences", self.config.n_train)));
        }
        let mut sequences = self.sequences[..n_train].to_vec();
        sequences.extend_from_slice(&self.sequences[self.config.n_train..]);
        // Test sequences keep their seed indices because those are offset.
        Ok(Dataset {
            config: DatasetConfig { n_train, ..self.config.clone() },
            geometry: self.geometry,
            normalization: self.normalization,
            sequences,
        })
    }

    fn range_index(&self, range: RadarRange) -> Result<usize> {
        self.config
            .ranges
            .iter()
            .position(|r| *r == range)
            .ok_or_else(|| Error::Config(format!("range {range} is not part of this dataset")))
    }

    /// Radar set of sequence `id` for one of the configured ranges.
    pub fn radar_set<S: Scalar>(&self, id: usize, range: RadarRange) -> Result<RadarSet<S>> {
        let r = self.range_index(range)?;
        let rec = &self.sequences[id];
        let radars: Vec<_> = rec.radars.iter().map(|p| RadarConfig { position: *p, range }).collect();
        let rs = build_projections::<f64>(&radars, &self.geometry)?;
        let cells = self.geometry.cells();
        let n = radars.len();
        for k in 0..n {
            let stored = &rec.masks[(r * n + k) * cells..(r * n + k + 1) * cells];
            if stored.iter().zip(rs.mask(k)).any(|(s, m)| (*s == 1.0) != *m) {
                return Err(Error::Format(format!("sequence {id}: stored mask of radar {k} does not match its position")));
            }
        }
        Ok(rs.cast())
    }

    /// Normalized ground truth `(v, log rho)` of sequence `id`.
    pub fn truth<S: Scalar>(&self, id: usize) -> Result<FieldSequence<S>> {
        let rec = &self.sequences[id];
        let cells = self.geometry.cells();
        let frames = (0..self.config.simulation.frames)
            .map(|t| {
                let v = |c: usize| rec.velocity[(2 * t + c) * cells..(2 * t + c + 1) * cells].iter().map(|x| *x as f64).collect();
                let rho = rec.density[t * cells..(t + 1) * cells].iter().map(|x| (*x as f64).max(DENSITY_FLOOR).ln()).collect();
                Ok(Frame { velocity: VectorField::new(self.geometry, v(0), v(1))?, scalar: ScalarField::new(self.geometry, rho)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(normalize(&FieldSequence::new(frames)?, &self.normalization)?.cast())
    }

    /// Physical ground truth `(v, rho)` of sequence `id`.
    pub fn physical<S: Scalar>(&self, id: usize) -> Result<FieldSequence<S>> {
        let rec = &self.sequences[id];
        let cells = self.geometry.cells();
        let frames = (0..self.config.simulation.frames)
            .map(|t| {
                let f = |xs: &[f32]| xs.iter().map(|x| S::lit(*x as f64)).collect();
                Ok(Frame {
                    velocity: VectorField::new(
                        self.geometry,
                        f(&rec.velocity[2 * t * cells..(2 * t + 1) * cells]),
                        f(&rec.velocity[(2 * t + 1) * cells..(2 * t + 2) * cells]),
                    )?,
                    scalar: ScalarField::new(self.geometry, f(&rec.density[t * cells..(t + 1) * cells]))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FieldSequence::new(frames)
    }

    /// Sequence `id` under one radar range: observations outside each
    /// radar's range are set to exact zeros.
    pub fn sample<S: Scalar>(&self, id: usize, range: RadarRange) -> Result<Sample<S>> {
        if id >= self.sequences.len() {
            return Err(Error::Config(format!("sequence {id} out of range")));
        }
        let radars = self.radar_set::<S>(id, range)?;
        let rec = &self.sequences[id];
        let cells = self.geometry.cells();
        let n = radars.len();
        let observations = (0..self.config.simulation.frames)
            .map(|t| {
                let block = &rec.observations[t * 2 * n * cells..(t + 1) * 2 * n * cells];
                let masked = |part: &[f32]| -> Vec<S> {
                    (0..n * cells).map(|j| if radars.mask(j / cells)[j % cells] { S::lit(part[j] as f64) } else { S::zero() }).collect()
                };
                Observation { radial: masked(&block[..n * cells]), log_density: masked(&block[n * cells..]), frame: t }
            })
            .collect::<Vec<_>>();
        let input = sequence_input(&observations, &radars)?;
        Ok(Sample { id, truth: self.truth(id)?, radars, observations, input })
    }

    pub fn samples<S: Scalar>(&self, ids: impl IntoIterator<Item = usize>, range: RadarRange) -> Result<Vec<Sample<S>>> {
        ids.into_iter().map(|i| self.sample(i, range)).collect()
    }

    /// Deterministic split of the training sequences into training and
    /// validation ids; at least one sequence stays on each side when possible.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!("validation fraction {validation_fraction} outside [0, 1)")));
        }
        let n = self.config.n_train;
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut seeds::rng(seed, stream::SPLIT, 0));
        let mut n_val = (validation_fraction * n as f64).round() as usize;
        if validation_fraction > 0.0 && n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        }
        let mut val = ids.split_off(n - n_val);
        ids.sort_unstable();
        val.sort_unstable();
        Ok((ids, val))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            simulation: SimulationConfig { grid: 16, frames: 4, ..SimulationConfig::default() },
            n_train: 4,
            n_test: 2,
            master_seed: 11,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn masks_nest_and_observations_are_zero_outside() {
        let ds = Dataset::generate(small()).unwrap();
        ds.validate().unwrap();
        let near = ds.sample::<f64>(0, RadarRange::Finite(1.0)).unwrap();
        let far = ds.sample::<f64>(0, RadarRange::Unlimited).unwrap();
        let cells = ds.geometry.cells();
        for n in 0..3 {
            for i in 0..cells {
                assert!(!near.radars.mask(n)[i] || far.radars.mask(n)[i]);
                if near.radars.mask(n)[i] {
                    assert_eq!(near.observations[2].radial[n * cells + i], far.observations[2].radial[n * cells + i]);
                } else {
                    assert_eq!(near.observations[2].radial[n * cells + i], 0.0);
                    assert_eq!(near.observations[2].log_density[n * cells + i], 0.0);
                }
            }
        }
        assert!(ds.sample::<f64>(0, RadarRange::Finite(1.5)).is_err());
    }

    #[test]
    fn test_set_does_not_depend_on_training_size() {
        let a = Dataset::generate(small()).unwrap();
        let b = Dataset::generate(DatasetConfig { n_train: 2, ..small() }).unwrap();
        assert_eq!(
            a.sequences[a.test_ids()].iter().map(|s| &s.velocity).collect::<Vec<_>>(),
            b.sequences[b.test_ids()].iter().map(|s| &s.velocity).collect::<Vec<_>>()
        );
        let (x, y) = (&a.sequences[1], &b.sequences[1]);
        assert_eq!((&x.radars, &x.density, &x.masks), (&y.radars, &y.density, &y.masks));
        let sub = a.subset(2).unwrap();
        assert_eq!(sub.sequences.len(), 4);
        assert_eq!(sub.sequences[3], a.sequences[5]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = Dataset::generate(DatasetConfig { n_train: 20, n_test: 1, ..small() }).unwrap();
        let (tr, va) = ds.split(0.1, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (18, 2));
        assert!(va.iter().all(|v| !tr.contains(v)));
        assert_eq!(ds.split(0.1, 3).unwrap(), (tr, va));
    }

    #[test]
    fn truth_is_normalized_against_the_training_range() {
        let ds = Dataset::generate(small()).unwrap();
        for id in ds.train_ids() {
            for f in ds.truth::<f64>(id).unwrap().frames() {
                assert!(f.velocity.vx().iter().chain(f.scalar.values()).all(|x| (-1.0 - 1e-6..=1.0 + 1e-6).contains(x)));
            }
        }
    }
}
