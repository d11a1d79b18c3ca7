//! Complete runs: train (or reuse) one model per (method, range, training
//! size, seed), evaluate it on the test set, and persist what it produced.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{vvp_reconstruct, Vae, VaeConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::{
    evaluate_model, evaluate_vae, evaluate_vvp, init_model, init_vae, run_id, train_model, train_vae, uncertainty_curves, EvalSummary,
    Method, MetricsRow, TrainConfig, UncertaintyCurves,
};
use crate::io::{dataset_hash, load_checkpoint, save_checkpoint, Checkpoint, ModelKind, ReconstructionHeader, Reconstructions, RunInfo};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::radar::RadarRange;
use crate::scalar::Scalar;

/// Floating-point type used for training. Evaluation always runs in double
/// precision on the stored parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`, expected f32 or f64"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSpec {
    pub method: Method,
    pub range: RadarRange,
    pub n_train: usize,
    pub seed: u64,
}

impl RunSpec {
    pub fn id(&self) -> String {
        run_id(self.method, self.range, self.n_train, self.seed)
    }
}

/// Settings shared by every run of an experiment. The seed and range of the
/// two training configurations are replaced by those of each run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vae: VaeConfig,
    pub vae_train: TrainConfig,
    pub precision: Precision,
}

impl ExperimentConfig {
    /// Model settings matching the grid and radar count of a dataset.
    pub fn for_dataset(ds: &Dataset, latent: usize) -> Self {
        let mut model = ModelConfig::default();
        model.network.k = ds.geometry.k;
        model.network.l = ds.geometry.l;
        model.network.radars = ds.config.radars;
        model.network.latent = latent;
        let model = ModelConfig::for_network(model.network);
        ExperimentConfig {
            model,
            train: TrainConfig::default(),
            vae: VaeConfig { network: model.network, ..VaeConfig::default() },
            vae_train: TrainConfig::default(),
            precision: Precision::F32,
        }
    }

    pub fn train_for(&self, spec: &RunSpec) -> TrainConfig {
        let base = if spec.method == Method::Vae { &self.vae_train } else { &self.train };
        TrainConfig { seed: spec.seed, range: spec.range, ..base.clone() }
    }

    fn model_kind(&self, method: Method) -> Result<ModelKind> {
        match method {
            Method::Ours => Ok(ModelKind::Ours { config: self.model }),
            Method::Vae => Ok(ModelKind::Vae { config: self.vae }),
            Method::Vvp => Err(Error::Config("VVP has no trainable model".into())),
        }
    }
}

/// A dataset together with its content hash, which every checkpoint records.
pub struct Experiment<'a> {
    pub dataset: &'a Dataset,
    pub hash: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub summary: EvalSummary,
    /// `None` for training-free methods.
    pub checkpoint: Option<Checkpoint>,
    /// Per-batch training rows; empty when the run was reused or needs no training.
    pub rows: Vec<MetricsRow>,
    pub reused: bool,
}

impl RunResult {
    /// Summary row in the metrics schema; `epoch` is the kept epoch.
    pub fn row(&self) -> MetricsRow {
        let epoch = self.checkpoint.as_ref().map_or(0, |c| c.info.epoch);
        crate::harness::summary_row(self.spec.method, self.spec.range, self.spec.n_train, self.spec.seed, epoch, &self.summary)
    }
}

/// A restored network with double-precision parameters.
pub enum Restored {
    Ours(Model, ParamStore<f64>),
    Vae(Vae, ParamStore<f64>),
}

pub fn restore(ckpt: &Checkpoint) -> Result<Restored> {
    let named: Vec<(String, _)> = ckpt.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    match &ckpt.model {
        ModelKind::Ours { config } => {
            let (model, mut store) = init_model::<f64>(*config, 0)?;
            store.load(&named)?;
            Ok(Restored::Ours(model, store))
        }
        ModelKind::Vae { config } => {
            let (vae, mut store) = init_vae::<f64>(*config, 0)?;
            store.load(&named)?;
            Ok(Restored::Vae(vae, store))
        }
    }
}

fn check_compatible(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ckpt.info.normalization != ds.normalization {
        return Err(Error::Config(format!("checkpoint {} was trained with a different normalization than this dataset", ckpt.info.run_id)));
    }
    Ok(())
}

/// Test-set summary of a checkpoint under `range`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &Dataset, range: RadarRange) -> Result<EvalSummary> {
    check_compatible(ckpt, ds)?;
    let test = ds.samples::<f64>(ds.test_ids(), range)?;
    match restore(ckpt)? {
        Restored::Ours(m, p) => evaluate_model(&m, &p, &test, &ds.normalization),
        Restored::Vae(v, p) => evaluate_vae(&v, &p, &test, &ds.normalization),
    }
}

/// Posterior-mean reconstructions of every test sequence.
pub fn reconstruct_checkpoint(ckpt: &Checkpoint, ds: &Dataset, range: RadarRange) -> Result<Reconstructions> {
    check_compatible(ckpt, ds)?;
    let restored = restore(ckpt)?;
    let mut data = Vec::new();
    for id in ds.test_ids() {
        let s = ds.sample::<f64>(id, range)?;
        let out = match &restored {
            Restored::Ours(m, p) => m.reconstruct(p, &s.input)?,
            Restored::Vae(v, p) => v.reconstruct(p, &s.input)?,
        };
        data.push(out.data().iter().map(|x| *x as f32).collect());
    }
    let method = match ckpt.model {
        ModelKind::Ours { .. } => Method::Ours,
        ModelKind::Vae { .. } => Method::Vae,
    };
    Ok(Reconstructions { header: header(ds, method, range, 3), data })
}

/// VVP velocity reconstructions (two channels) of every test sequence.
pub fn vvp_reconstructions(ds: &Dataset, range: RadarRange) -> Result<Reconstructions> {
    let mut data = Vec::new();
    for id in ds.test_ids() {
        let s = ds.sample::<f64>(id, range)?;
        let mut seq = Vec::new();
        for v in vvp_reconstruct(&s.observations, &s.radars)? {
            seq.extend(v.vx().iter().map(|x| *x as f32));
            seq.extend(v.vy().iter().map(|x| *x as f32));
        }
        data.push(seq);
    }
    Ok(Reconstructions { header: header(ds, Method::Vvp, range, 2), data })
}

fn header(ds: &Dataset, method: Method, range: RadarRange, channels: usize) -> ReconstructionHeader {
    ReconstructionHeader {
        method: method.name().into(),
        range,
        geometry: ds.geometry,
        frames: ds.config.simulation.frames,
        channels,
        sequences: ds.test_ids().collect(),
    }
}

/// Per-time posterior uncertainty of a checkpoint of the main model over the
/// first `n_sequences` test sequences.
pub fn checkpoint_uncertainty(
    ckpt: &Checkpoint,
    ds: &Dataset,
    range: RadarRange,
    n_sequences: usize,
    n_samples: usize,
    seed: u64,
) -> Result<UncertaintyCurves> {
    check_compatible(ckpt, ds)?;
    let Restored::Ours(model, store) = restore(ckpt)? else {
        return Err(Error::Config("uncertainty curves need a checkpoint of the state-space model".into()));
    };
    let test = ds.samples::<f64>(ds.test_ids().take(n_sequences), range)?;
    uncertainty_curves(&model, &store, &test, n_samples, seed)
}

impl<'a> Experiment<'a> {
    pub fn new(dataset: &'a Dataset, config: ExperimentConfig) -> Result<Self> {
        config.model.validate()?;
        config.vae.network.validate()?;
        config.train.validate()?;
        config.vae_train.validate()?;
        Ok(Experiment { dataset, hash: dataset_hash(dataset)?, config })
    }

    fn training_set(&self, n_train: usize) -> Result<Dataset> {
        if n_train == self.dataset.n_train() {
            Ok(self.dataset.clone())
        } else {
            self.dataset.subset(n_train)
        }
    }

    /// Trains one run from scratch.
    pub fn train(&self, spec: &RunSpec) -> Result<(Checkpoint, Vec<MetricsRow>)> {
        let ds = self.training_set(spec.n_train)?;
        let cfg = self.config.train_for(spec);
        match self.config.precision {
            Precision::F32 => self.train_in::<f32>(spec, &ds, &cfg),
            Precision::F64 => self.train_in::<f64>(spec, &ds, &cfg),
        }
    }

    fn train_in<S: Scalar>(&self, spec: &RunSpec, ds: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<MetricsRow>)> {
        let kind = self.config.model_kind(spec.method)?;
        let outcome = match &kind {
            ModelKind::Ours { config } => {
                let (model, store) = init_model::<S>(*config, spec.seed)?;
                train_model(&model, store, ds, cfg)?
            }
            ModelKind::Vae { config } => {
                let (vae, store) = init_vae::<S>(*config, spec.seed)?;
                train_vae(&vae, store, ds, cfg)?
            }
        };
        let info = RunInfo {
            run_id: spec.id(),
            range: spec.range,
            n_train: spec.n_train,
            seed: spec.seed,
            epoch: outcome.best_epoch,
            validation_loss: outcome.best_validation.is_finite().then_some(outcome.best_validation),
            normalization: self.dataset.normalization,
            dataset_hash: self.hash.clone(),
            train: cfg.clone(),
        };
        Ok((Checkpoint { model: kind, info, params: outcome.params.cast() }, outcome.rows))
    }

    /// Whether a stored checkpoint was produced by exactly this run.
    pub fn matches(&self, spec: &RunSpec, ckpt: &Checkpoint) -> bool {
        self.config.model_kind(spec.method).is_ok_and(|k| k == ckpt.model)
            && ckpt.info.run_id == spec.id()
            && ckpt.info.dataset_hash == self.hash
            && ckpt.info.train == self.config.train_for(spec)
            && ckpt.info.normalization == self.dataset.normalization
    }

    pub fn checkpoint_path(dir: &Path, spec: &RunSpec) -> PathBuf {
        dir.join(format!("{}.ckpt", spec.id()))
    }

    /// Runs and evaluates one setting. Newly trained checkpoints are saved in
    /// `checkpoints` when given; with `reuse`, a checkpoint stored there by
    /// the identical run is evaluated instead of retraining.
    pub fn run(&self, spec: &RunSpec, checkpoints: Option<&Path>, reuse: bool) -> Result<RunResult> {
        if spec.method == Method::Vvp {
            let test = self.dataset.samples::<f64>(self.dataset.test_ids(), spec.range)?;
            let summary = evaluate_vvp(&test)?;
            return Ok(RunResult { spec: *spec, summary, checkpoint: None, rows: Vec::new(), reused: false });
        }
        let path = checkpoints.map(|d| Self::checkpoint_path(d, spec));
        if let Some(p) = path.as_deref().filter(|p| reuse && p.exists()) {
            match load_checkpoint(p) {
                Ok(ckpt) if self.matches(spec, &ckpt) => {
                    log::info!("{}: reusing {}", spec.id(), p.display());
                    let summary = evaluate_checkpoint(&ckpt, self.dataset, spec.range)?;
                    return Ok(RunResult { spec: *spec, summary, checkpoint: Some(ckpt), rows: Vec::new(), reused: true });
                }
                Ok(_) => log::info!("{}: stored checkpoint belongs to a different run, retraining", spec.id()),
                Err(e) => log::warn!("{}: ignoring unreadable checkpoint: {e}", spec.id()),
            }
        }
        let (ckpt, rows) = self.train(spec)?;
        if let Some(p) = &path {
            save_checkpoint(&ckpt, p)?;
        }
        let summary = evaluate_checkpoint(&ckpt, self.dataset, spec.range)?;
        Ok(RunResult { spec: *spec, summary, checkpoint: Some(ckpt), rows, reused: false })
    }
}
