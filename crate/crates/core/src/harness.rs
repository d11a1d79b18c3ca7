//! Training, evaluation and experiment drivers.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::baselines::{batch_forward_sse, vvp_reconstruct, FrameRef, Vae, VaeConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::grid::{FieldSequence, Frame};
use crate::lgssm::sample_posterior;
use crate::model::{Model, ModelConfig};
use crate::objective::{decoded_frame, decoded_sequence};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::radar::RadarRange;
use crate::scalar::Scalar;
use crate::seeds::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per step for the main model, frames per step for the VAE.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub validation_fraction: f64,
    pub seed: u64,
    pub range: RadarRange,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: Some(20),
            validation_fraction: 0.1,
            seed: 1,
            range: RadarRange::Finite(2.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least one epoch".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Vvp,
    Vae,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Vvp => "vvp",
            Method::Vae => "vae",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn run_id(method: Method, range: RadarRange, n_train: usize, seed: u64) -> String {
    format!("{method}-d{range}-n{n_train}-s{seed}")
}

/// One row of a metrics CSV. Training writes one row per batch; evaluation
/// one row per (method, setting, seed). Missing quantities are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: Method,
    pub d: String,
    pub n_train: usize,
    pub seed: u64,
    pub epoch: usize,
    #[serde(rename = "L_recons")]
    pub l_recons: Option<f64>,
    #[serde(rename = "L_physics")]
    pub l_physics: Option<f64>,
    #[serde(rename = "RMSE_v")]
    pub rmse_v: f64,
    #[serde(rename = "RMSE_q")]
    pub rmse_q: Option<f64>,
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: std::io::Read>(input: R) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Velocity and log-density RMSE of one sequence. Velocity pools both
/// components before the square root.
pub fn rmse<S: Scalar>(recon: &FieldSequence<S>, truth: &FieldSequence<S>) -> Result<(f64, f64)> {
    if !recon.geometry().same_shape(truth.geometry()) {
        return Err(Error::Shape("reconstruction and truth differ in shape".into()));
    }
    rmse_frames(recon.frames(), truth.frames())
}

/// Pooled velocity and log-density RMSE over matching frames.
pub fn rmse_frames<S: Scalar>(recon: &[Frame<S>], truth: &[Frame<S>]) -> Result<(f64, f64)> {
    if recon.len() != truth.len() || recon.is_empty() {
        return Err(Error::Shape(format!("{} reconstructed frames for {} truth frames", recon.len(), truth.len())));
    }
    let (mut sv, mut sq, mut nv, mut nq) = (0.0, 0.0, 0usize, 0usize);
    for (a, b) in recon.iter().zip(truth) {
        if !a.velocity.geometry().same_shape(b.velocity.geometry()) || a.scalar.values().len() != b.scalar.values().len() {
            return Err(Error::Shape("reconstruction and truth differ in shape".into()));
        }
        for (x, y) in a.velocity.vx().iter().zip(b.velocity.vx()).chain(a.velocity.vy().iter().zip(b.velocity.vy())) {
            let d = (*x - *y).to_f64_lossy();
            sv += d * d;
            nv += 1;
        }
        for (x, y) in a.scalar.values().iter().zip(b.scalar.values()) {
            let d = (*x - *y).to_f64_lossy();
            sq += d * d;
            nq += 1;
        }
    }
    Ok(((sv / nv as f64).sqrt(), (sq / nq as f64).sqrt()))
}

/// Velocity-only RMSE against a truth sequence.
pub fn rmse_velocity<S: Scalar>(recon: &[crate::grid::VectorField<f64>], truth: &FieldSequence<S>) -> Result<f64> {
    if recon.len() != truth.len() {
        return Err(Error::Shape(format!("{} frames reconstructed for {} true frames", recon.len(), truth.len())));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in recon.iter().zip(truth.frames()) {
        if !a.geometry().same_shape(b.velocity.geometry()) {
            return Err(Error::Shape("reconstruction and truth differ in shape".into()));
        }
        for (x, y) in a.vx().iter().zip(b.velocity.vx()).chain(a.vy().iter().zip(b.velocity.vy())) {
            let d = x - y.to_f64_lossy();
            s += d * d;
            n += 1;
        }
    }
    Ok((s / n as f64).sqrt())
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Parameters at the best validation loss (the initial ones if no epoch ran).
    pub params: ParamStore<S>,
    pub rows: Vec<MetricsRow>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_validation: f64,
    pub epochs_run: usize,
    /// Mean validation loss after each epoch.
    pub validation: Vec<f64>,
}

struct RunTracker<S> {
    best: Option<(usize, f64, ParamStore<S>)>,
    validation: Vec<f64>,
    patience: Option<usize>,
}

impl<S: Scalar> RunTracker<S> {
    fn new(patience: Option<usize>) -> Self {
        RunTracker { best: None, validation: Vec::new(), patience }
    }

    /// Records a validation loss; returns `true` when training should stop.
    fn record(&mut self, epoch: usize, loss: f64, store: &ParamStore<S>) -> bool {
        self.validation.push(loss);
        if self.best.as_ref().is_none_or(|b| loss < b.1) {
            self.best = Some((epoch, loss, store.clone()));
        }
        let best_epoch = self.best.as_ref().map_or(0, |b| b.0);
        self.patience.is_some_and(|p| epoch - best_epoch >= p)
    }

    fn finish(self, initial: ParamStore<S>, rows: Vec<MetricsRow>) -> TrainOutcome<S> {
        let epochs_run = self.validation.len();
        let (best_epoch, best_validation, params) = self.best.unwrap_or((0, f64::NAN, initial));
        TrainOutcome { params, rows, best_epoch, best_validation, epochs_run, validation: self.validation }
    }
}

fn shuffled<T: Clone>(items: &[T], seed: u64, epoch: usize) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut seeds::rng(seed, stream::SHUFFLE, epoch as u64));
    v
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Trains the main model with Adam on mini-batches of sequences; the
/// gradient of a batch is the mean over its sequences.
pub fn train_model<S: Scalar>(model: &Model, store: ParamStore<S>, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let (train_ids, val_ids) = ds.split(cfg.validation_fraction, cfg.seed)?;
    let train: Vec<Sample<S>> = ds.samples(train_ids.iter().copied(), cfg.range)?;
    let val: Vec<Sample<S>> = ds.samples(val_ids.iter().copied(), cfg.range)?;
    let spec = ds.normalization;
    let id = run_id(Method::Ours, cfg.range, ds.n_train(), cfg.seed);
    let initial = store.clone();
    let mut store = store;
    let mut adam = Adam::new(cfg.adam, &store)?;
    let mut rows = Vec::new();
    let mut tracker = RunTracker::new(cfg.patience);
    let positions: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(&positions, cfg.seed, epoch);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = store.zeros_like();
            let scale = S::lit(1.0 / batch.len() as f64);
            let (mut rec, mut phy, mut rv, mut rq) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &i in batch {
                let s = &train[i];
                let mut g = Graph::new();
                let p = store.bind(&mut g);
                let out = model.forward(&mut g, &p, &s.input, &s.radars, &s.observations, &spec)?;
                let loss = out.objective.breakdown(&g);
                if !loss.total.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                let (v, q) = rmse(&decoded_sequence(g.value(out.decoded), s.radars.geometry())?, &s.truth)?;
                rec.push(loss.recons);
                phy.push(loss.physics);
                rv.push(v);
                rq.push(q);
                let grads = g.backward(out.objective.total);
                store.accumulate(&p, &grads, scale, &mut acc);
            }
            if acc.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam.update(&mut store, &acc)?;
            rows.push(MetricsRow {
                run_id: id.clone(),
                method: Method::Ours,
                d: cfg.range.label(),
                n_train: ds.n_train(),
                seed: cfg.seed,
                epoch,
                l_recons: Some(mean(&rec)),
                l_physics: Some(mean(&phy)),
                rmse_v: mean(&rv),
                rmse_q: Some(mean(&rq)),
            });
        }
        let val_loss = if val.is_empty() {
            rows.last().map_or(f64::NAN, |r| r.l_recons.unwrap_or(f64::NAN))
        } else {
            mean(&val.iter().map(|s| model_loss(model, &store, s, &spec).map(|l| l.total)).collect::<Result<Vec<_>>>()?)
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: order.len().div_ceil(cfg.batch_size) });
        }
        log::info!("{id} epoch {epoch}: validation loss {val_loss:.6e}");
        if tracker.record(epoch, val_loss, &store) {
            log::info!("{id}: no improvement for {} epochs, stopping", cfg.patience.unwrap_or(0));
            break;
        }
    }
    Ok(tracker.finish(initial, rows))
}

/// Objective of one sequence without gradients.
pub fn model_loss<S: Scalar>(
    model: &Model,
    store: &ParamStore<S>,
    s: &Sample<S>,
    spec: &crate::grid::NormalizationSpec,
) -> Result<crate::objective::LossBreakdown> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = model.forward(&mut g, &p, &s.input, &s.radars, &s.observations, spec)?;
    Ok(out.objective.breakdown(&g))
}

fn frame_input<S: Scalar>(s: &Sample<S>, t: usize) -> &[S] {
    let per = s.input.len() / s.observations.len();
    &s.input.data()[t * per..(t + 1) * per]
}

/// Trains the VAE on individual frames shuffled across sequences.
pub fn train_vae<S: Scalar>(vae: &Vae, store: ParamStore<S>, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let (train_ids, val_ids) = ds.split(cfg.validation_fraction, cfg.seed)?;
    let train: Vec<Sample<S>> = ds.samples(train_ids.iter().copied(), cfg.range)?;
    let val: Vec<Sample<S>> = ds.samples(val_ids.iter().copied(), cfg.range)?;
    let frames_of = |set: &[Sample<S>]| -> Vec<(usize, usize)> {
        set.iter().enumerate().flat_map(|(i, s)| (0..s.observations.len()).map(move |t| (i, t))).collect()
    };
    let train_frames = frames_of(&train);
    let val_frames = frames_of(&val);
    let id = run_id(Method::Vae, cfg.range, ds.n_train(), cfg.seed);
    let initial = store.clone();
    let mut store = store;
    let mut adam = Adam::new(cfg.adam, &store)?;
    let mut rows = Vec::new();
    let mut tracker = RunTracker::new(cfg.patience);
    let cells_per_frame = (ds.config.radars * ds.geometry.cells()) as f64;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(&train_frames, cfg.seed, epoch);
        let mut noise = seeds::rng(cfg.seed, stream::SAMPLING, epoch as u64);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<FrameRef<'_, S>> = batch
                .iter()
                .map(|&(i, t)| FrameRef {
                    input: frame_input(&train[i], t),
                    radars: &train[i].radars,
                    observation: &train[i].observations[t],
                })
                .collect();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let out = vae.loss(&mut g, &p, &refs, &mut noise)?;
            let total = g.value(out.total).item().to_f64_lossy();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let grads = g.backward(out.total);
            let mut acc = store.zeros_like();
            store.accumulate(&p, &grads, S::one(), &mut acc);
            if acc.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam.update(&mut store, &acc)?;
            let decoded = g.value(out.decoded);
            let per = decoded.len() / batch.len();
            let (mut rv, mut rq) = (Vec::new(), Vec::new());
            for (j, &(i, t)) in batch.iter().enumerate() {
                let rec = decoded_frame(&decoded.data()[j * per..(j + 1) * per], &ds.geometry)?;
                let (v, q) = rmse_frames(std::slice::from_ref(&rec), &train[i].truth.frames()[t..t + 1])?;
                rv.push(v);
                rq.push(q);
            }
            rows.push(MetricsRow {
                run_id: id.clone(),
                method: Method::Vae,
                d: cfg.range.label(),
                n_train: ds.n_train(),
                seed: cfg.seed,
                epoch,
                l_recons: Some(g.value(out.recons).item().to_f64_lossy() / cells_per_frame),
                l_physics: None,
                rmse_v: mean(&rv),
                rmse_q: Some(mean(&rq)),
            });
        }
        let val_loss = if val_frames.is_empty() {
            f64::NAN
        } else {
            let mut noise = seeds::rng(cfg.seed, stream::SAMPLING, 0);
            let mut losses = Vec::new();
            for batch in val_frames.chunks(cfg.batch_size) {
                let refs: Vec<FrameRef<'_, S>> = batch
                    .iter()
                    .map(|&(i, t)| FrameRef {
                        input: frame_input(&val[i], t),
                        radars: &val[i].radars,
                        observation: &val[i].observations[t],
                    })
                    .collect();
                let mut g = Graph::new();
                let p = store.bind(&mut g);
                let out = vae.loss(&mut g, &p, &refs, &mut noise)?;
                losses.push(g.value(out.total).item().to_f64_lossy() * batch.len() as f64);
            }
            losses.iter().sum::<f64>() / val_frames.len() as f64
        };
        log::info!("{id} epoch {epoch}: validation loss {val_loss:.6e}");
        if !val_loss.is_finite() && !val_frames.is_empty() {
            return Err(Error::Diverged { epoch, batch: order.len().div_ceil(cfg.batch_size) });
        }
        if tracker.record(epoch, val_loss, &store) {
            break;
        }
    }
    Ok(tracker.finish(initial, rows))
}

/// Mean per-sequence RMSE and losses of one method over a test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rmse_v: f64,
    pub rmse_q: Option<f64>,
    pub l_recons: Option<f64>,
    pub l_physics: Option<f64>,
}

pub fn evaluate_model<S: Scalar>(
    model: &Model,
    store: &ParamStore<S>,
    test: &[Sample<S>],
    spec: &crate::grid::NormalizationSpec,
) -> Result<EvalSummary> {
    let (mut rv, mut rq, mut rec, mut phy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in test {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = model.forward(&mut g, &p, &s.input, &s.radars, &s.observations, spec)?;
        let l = out.objective.breakdown(&g);
        let (v, q) = rmse(&decoded_sequence(g.value(out.decoded), s.radars.geometry())?, &s.truth)?;
        rv.push(v);
        rq.push(q);
        rec.push(l.recons);
        phy.push(l.physics);
    }
    Ok(EvalSummary { rmse_v: mean(&rv), rmse_q: Some(mean(&rq)), l_recons: Some(mean(&rec)), l_physics: Some(mean(&phy)) })
}

pub fn evaluate_vvp<S: Scalar>(test: &[Sample<S>]) -> Result<EvalSummary> {
    let rv = test.iter().map(|s| rmse_velocity(&vvp_reconstruct(&s.observations, &s.radars)?, &s.truth)).collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary { rmse_v: mean(&rv), rmse_q: None, l_recons: None, l_physics: None })
}

pub fn evaluate_vae<S: Scalar>(
    vae: &Vae,
    store: &ParamStore<S>,
    test: &[Sample<S>],
    spec: &crate::grid::NormalizationSpec,
) -> Result<EvalSummary> {
    let (mut rv, mut rq, mut rec, mut phy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in test {
        let out = vae.reconstruct(store, &s.input)?;
        let seq = decoded_sequence(&out, s.radars.geometry())?;
        let (v, q) = rmse(&seq, &s.truth)?;
        rv.push(v);
        rq.push(q);
        rec.push(crate::objective::reconstruction_loss(&seq, &s.radars, &s.observations)?);
        phy.push(crate::objective::physics_loss(&seq, spec)?);
    }
    Ok(EvalSummary { rmse_v: mean(&rv), rmse_q: Some(mean(&rq)), l_recons: Some(mean(&rec)), l_physics: Some(mean(&phy)) })
}

/// Batched frame loss of the VAE's posterior-mean reconstruction, per cell.
pub fn vae_frame_error<S: Scalar>(vae: &Vae, store: &ParamStore<S>, s: &Sample<S>) -> Result<f64> {
    let out = vae.reconstruct(store, &s.input)?;
    let mut g = Graph::new();
    let d = g.constant(out);
    let refs: Vec<_> = (0..s.observations.len())
        .map(|t| FrameRef { input: frame_input(s, t), radars: &s.radars, observation: &s.observations[t] })
        .collect();
    let sse = batch_forward_sse(&mut g, d, &refs)?;
    Ok(g.value(sse).item().to_f64_lossy() / (refs.len() * s.radars.len() * s.radars.geometry().cells()) as f64)
}

pub fn summary_row(method: Method, range: RadarRange, n_train: usize, seed: u64, epoch: usize, s: &EvalSummary) -> MetricsRow {
    MetricsRow {
        run_id: run_id(method, range, n_train, seed),
        method,
        d: range.label(),
        n_train,
        seed,
        epoch,
        l_recons: s.l_recons,
        l_physics: s.l_physics,
        rmse_v: s.rmse_v,
        rmse_q: s.rmse_q,
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let m = mean(xs);
        let sd = if xs.len() > 1 { (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt() } else { 0.0 };
        Some(Stat { mean: m, sd, n: xs.len() })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

/// One aggregated cell group of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub method: Method,
    pub d: String,
    pub n_train: usize,
    pub rmse_v: Option<Stat>,
    pub rmse_q: Option<Stat>,
}

/// Groups evaluation rows by (method, range, n_train) and aggregates over seeds.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<TableEntry> {
    type Key = (Method, String, usize);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = groups.entry((r.method, r.d.clone(), r.n_train)).or_default();
        e.0.push(r.rmse_v);
        if let Some(q) = r.rmse_q {
            e.1.push(q);
        }
    }
    groups
        .into_iter()
        .map(|((method, d, n_train), (v, q))| TableEntry { method, d, n_train, rmse_v: Stat::of(&v), rmse_q: Stat::of(&q) })
        .collect()
}

/// Renders a Table-1 style grid: one row per (method, range), `--` for
/// quantities a method does not produce and `missing` for absent runs.
pub fn format_table(entries: &[TableEntry], methods: &[Method], ranges: &[RadarRange]) -> String {
    let mut out = String::from("method  d      n_train  RMSE_v              RMSE_q\n");
    for m in methods {
        for r in ranges {
            let found: Vec<_> = entries.iter().filter(|e| e.method == *m && e.d == r.label()).collect();
            if found.is_empty() {
                out.push_str(&format!("{:<7} {:<6} {:<8} missing\n", m.name(), r.label(), "-"));
            }
            for e in found {
                let v = e.rmse_v.map_or("missing".into(), |s| s.to_string());
                let q = match (m, e.rmse_q) {
                    (Method::Vvp, _) => "--".to_string(),
                    (_, Some(s)) => s.to_string(),
                    (_, None) => "missing".into(),
                };
                out.push_str(&format!("{:<7} {:<6} {:<8} {:<19} {}\n", m.name(), e.d, e.n_train, v, q));
            }
        }
    }
    out
}

/// Per-time curves averaged over test sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyCurves {
    pub std_v: Vec<f64>,
    pub std_q: Vec<f64>,
    pub rmse_v: Vec<f64>,
    pub rmse_q: Vec<f64>,
    pub sequences: usize,
    pub samples: usize,
}

/// Decodes `n_samples` draws from each smoothed latent marginal and reports
/// the per-cell sample standard deviation averaged over cells and sequences,
/// next to the per-time RMSE of the posterior-mean reconstruction.
/// Inference runs in double precision.
pub fn uncertainty_curves<S: Scalar>(
    model: &Model,
    store: &ParamStore<S>,
    test: &[Sample<S>],
    n_samples: usize,
    seed: u64,
) -> Result<UncertaintyCurves> {
    if test.is_empty() || n_samples < 2 {
        return Err(Error::Config("need at least one sequence and two samples".into()));
    }
    let store64: ParamStore<f64> = store.cast();
    let t_len = test[0].observations.len();
    let mut curves = UncertaintyCurves {
        std_v: vec![0.0; t_len],
        std_q: vec![0.0; t_len],
        rmse_v: vec![0.0; t_len],
        rmse_q: vec![0.0; t_len],
        sequences: test.len(),
        samples: n_samples,
    };
    for s in test {
        if s.observations.len() != t_len {
            return Err(Error::Shape("test sequences differ in length".into()));
        }
        let input: Tensor<f64> = s.input.cast();
        let res = model.infer(&store64, &input)?;
        let mut rng = seeds::rng(seed, stream::SAMPLING, s.id as u64);
        let mut latents = Vec::with_capacity(t_len * n_samples);
        for t in 0..t_len {
            latents.extend(sample_posterior(&res, t, n_samples, &mut rng)?);
        }
        let draws = model.decode(&store64, &latents)?;
        let mean_rec = decoded_sequence(&model.decode(&store64, &res.smoothed_means())?, s.radars.geometry())?;
        let truth = s.truth.cast::<f64>();
        let cells = s.radars.geometry().cells();
        let d = draws.data();
        for t in 0..t_len {
            let mut acc = [0.0f64; 3];
            for c in 0..3 {
                for i in 0..cells {
                    let vals = (0..n_samples).map(|k| d[((t * n_samples + k) * 3 + c) * cells + i]);
                    let m = vals.clone().sum::<f64>() / n_samples as f64;
                    let var = vals.map(|x| (x - m) * (x - m)).sum::<f64>() / (n_samples - 1) as f64;
                    acc[c] += var.sqrt();
                }
            }
            curves.std_v[t] += (acc[0] + acc[1]) / (2 * cells) as f64;
            curves.std_q[t] += acc[2] / cells as f64;
            let (v, q) = rmse_frames(&mean_rec.frames()[t..t + 1], &truth.frames()[t..t + 1])?;
            curves.rmse_v[t] += v;
            curves.rmse_q[t] += q;
        }
    }
    let n = test.len() as f64;
    for c in [&mut curves.std_v, &mut curves.std_q, &mut curves.rmse_v, &mut curves.rmse_q] {
        c.iter_mut().for_each(|x| *x /= n);
    }
    Ok(curves)
}

/// Fresh main model and parameters for a seed.
pub fn init_model<S: Scalar>(cfg: ModelConfig, seed: u64) -> Result<(Model, ParamStore<S>)> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg, &mut seeds::rng(seed, stream::INIT, 0))?;
    Ok((model, store))
}

/// Fresh VAE and parameters for a seed.
pub fn init_vae<S: Scalar>(cfg: VaeConfig, seed: u64) -> Result<(Vae, ParamStore<S>)> {
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, cfg, &mut seeds::rng(seed, stream::INIT, 1))?;
    Ok((vae, store))
}
