//! The full reconstruction model: per-frame encoder, locally-linear latent
//! dynamics with exact smoothing, and a decoder back to physical fields.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grid::NormalizationSpec;
use crate::lgssm::{Lgssm, LgssmConfig, SmootherResult, TapeInference};
use crate::neural::{Decoder, Encoder, NetworkConfig};
use crate::objective::{total_objective_tape, ObjectiveConfig, TapeObjective};
use crate::params::{Bound, ParamStore};
use crate::radar::{Observation, RadarSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub network: NetworkConfig,
    pub process_var: f64,
    pub prior_var: f64,
    pub noise_init: f64,
    pub basis_std: f64,
    pub learn_prior: bool,
    pub objective: ObjectiveConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_network(NetworkConfig::default())
    }
}

impl ModelConfig {
    /// Default state-space settings for a given network shape.
    pub fn for_network(network: NetworkConfig) -> Self {
        let l = LgssmConfig::default();
        ModelConfig {
            network,
            process_var: l.process_var,
            prior_var: l.prior_var,
            noise_init: l.noise_init,
            basis_std: 0.05 / (network.latent as f64).sqrt(),
            learn_prior: false,
            objective: ObjectiveConfig::default(),
        }
    }

    pub fn lgssm(&self) -> LgssmConfig {
        LgssmConfig {
            latent: self.network.latent,
            bases: self.network.bases,
            coeff_hidden: self.network.coeff_hidden,
            process_var: self.process_var,
            prior_var: self.prior_var,
            noise_init: self.noise_init,
            basis_std: self.basis_std,
            learn_prior: self.learn_prior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.lgssm().validate()?;
        if !(self.objective.lambda_physics >= 0.0 && self.objective.lambda_physics.is_finite()) {
            return Err(Error::Config("lambda_physics must be a non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    lgssm: Lgssm,
    decoder: Decoder,
}

/// Graph handles produced by one forward pass over a sequence.
#[derive(Clone, Debug)]
pub struct SequenceGraph {
    pub latent_measurements: Var,
    pub inference: TapeInference,
    /// Decoder output `[T, 3, K, L]` at the smoothed means.
    pub decoded: Var,
    pub objective: TapeObjective,
}

impl Model {
    /// Registers all parameters under the `encoder`, `lgssm` and `decoder` prefixes.
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, "encoder", &cfg.network, cfg.network.latent, rng)?;
        let lgssm = Lgssm::new(store, "lgssm", cfg.lgssm(), rng)?;
        let decoder = Decoder::new(store, "decoder", &cfg.network, rng)?;
        Ok(Model { cfg, encoder, lgssm, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn lgssm(&self) -> &Lgssm {
        &self.lgssm
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Encodes `[T, 4N, K, L]` into `T` latent measurements and smooths them.
    pub fn infer_tape<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, input: &Tensor<S>) -> Result<(Var, TapeInference)> {
        let x = g.constant(input.clone());
        let w = self.encoder.forward(g, p, x)?;
        let t = g.shape(w)[0];
        let ws: Vec<Var> = (0..t).map(|i| g.select(w, i)).collect();
        let inf = self.lgssm.run(g, p, &ws)?;
        Ok((w, inf))
    }

    /// Full forward pass and objective for one sequence.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        input: &Tensor<S>,
        rs: &RadarSet<S>,
        obs: &[Observation<S>],
        spec: &NormalizationSpec,
    ) -> Result<SequenceGraph> {
        let (w, inference) = self.infer_tape(g, p, input)?;
        let z = inference.smoothed_means(g);
        let decoded = self.decoder.forward(g, p, z)?;
        let objective = total_objective_tape(g, decoded, rs, obs, spec, &self.cfg.objective)?;
        Ok(SequenceGraph { latent_measurements: w, inference, decoded, objective })
    }

    /// Value-only smoothing of a sequence.
    pub fn infer<S: Scalar>(&self, store: &ParamStore<S>, input: &Tensor<S>) -> Result<SmootherResult<S>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (_, inf) = self.infer_tape(&mut g, &p, input)?;
        Ok(inf.read(&g))
    }

    /// Decodes latent states (each of length `D`) into `[n, 3, K, L]`.
    pub fn decode<S: Scalar>(&self, store: &ParamStore<S>, z: &[Vec<S>]) -> Result<Tensor<S>> {
        let d = self.cfg.network.latent;
        if z.is_empty() || z.iter().any(|v| v.len() != d) {
            return Err(Error::Shape(format!("latent states must be non-empty vectors of length {d}")));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zt = g.constant(Tensor::new(&[z.len(), d], z.concat()));
        let out = self.decoder.forward(&mut g, &p, zt)?;
        Ok(g.value(out).clone())
    }

    /// Decoder output `[T, 3, K, L]` at the smoothed means.
    pub fn reconstruct<S: Scalar>(&self, store: &ParamStore<S>, input: &Tensor<S>) -> Result<Tensor<S>> {
        let res = self.infer(store, input)?;
        self.decode(store, &res.smoothed_means())
    }
}
