//! Convolutional encoder and decoder, and the small MLP that produces the
//! transition mixing coefficients.
//!
//! Encoder: three blocks of (3x3 same conv, ReLU, 2x2 max-pool) with
//! 32/64/128 channels, then a linear layer to the latent measurement.
//! Decoder: linear layer to a `K/8 x L/8 x 128` seed map, then three blocks
//! of (nearest x2 upsample, 3x3 same conv) with ReLU on all but the last,
//! ending in the three physical channels `(vx, vy, q)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{he_uniform, lecun_uniform, Bound, ParamId, ParamStore};
use crate::radar::{Observation, RadarSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input channels contributed by each radar: radial velocity, log-density, `a_x`, `a_y`.
pub const CHANNELS_PER_RADAR: usize = 4;
/// Output channels of the decoder: `vx`, `vy`, `q`.
pub const PHYSICAL_CHANNELS: usize = 3;
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub k: usize,
    pub l: usize,
    pub radars: usize,
    /// Latent state and latent measurement dimension (`D = M`).
    pub latent: usize,
    pub channels: [usize; 3],
    /// Number of transition bases `C`.
    pub bases: usize,
    pub coeff_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { k: 32, l: 32, radars: 3, latent: 128, channels: [32, 64, 128], bases: 8, coeff_hidden: 32 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.k.is_multiple_of(8) || !self.l.is_multiple_of(8) || self.k == 0 || self.l == 0 {
            return Err(Error::Config(format!("grid {}x{} must be a positive multiple of 8", self.k, self.l)));
        }
        if self.radars == 0 || self.latent == 0 || self.bases == 0 || self.coeff_hidden == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        CHANNELS_PER_RADAR * self.radars
    }

    /// Spatial size after three poolings.
    pub fn seed_map(&self) -> (usize, usize) {
        (self.k / 8, self.l / 8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    convs: Vec<(ParamId, ParamId)>,
    fc: (ParamId, ParamId),
    in_ch: usize,
    k: usize,
    l: usize,
    out_dim: usize,
}

impl Encoder {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &NetworkConfig,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut c_in = cfg.in_channels();
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let fan_in = c_in * KERNEL * KERNEL;
            let w = store.add(format!("{prefix}.conv{i}.weight"), he_uniform(&[c_out, c_in, KERNEL, KERNEL], fan_in, rng));
            let b = store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[c_out]));
            convs.push((w, b));
            c_in = c_out;
        }
        let (sk, sl) = cfg.seed_map();
        let flat = c_in * sk * sl;
        let w = store.add(format!("{prefix}.fc.weight"), lecun_uniform(&[out_dim, flat], flat, rng));
        let b = store.add(format!("{prefix}.fc.bias"), Tensor::zeros(&[out_dim]));
        Ok(Encoder { convs, fc: (w, b), in_ch: cfg.in_channels(), k: cfg.k, l: cfg.l, out_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `[B, 4N, K, L] -> [B, out_dim]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_ch || s[2] != self.k || s[3] != self.l {
            return Err(Error::Shape(format!("encoder expects [B, {}, {}, {}], got {:?}", self.in_ch, self.k, self.l, s)));
        }
        let mut h = x;
        for (w, b) in &self.convs {
            let c = g.conv2d(h, p.var(*w), p.var(*b));
            let r = g.relu(c);
            h = g.maxpool2(r);
        }
        let hs = g.shape(h).to_vec();
        let flat = g.reshape(h, &[hs[0], hs[1] * hs[2] * hs[3]]);
        Ok(g.linear(flat, p.var(self.fc.0), p.var(self.fc.1)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    fc: (ParamId, ParamId),
    convs: Vec<(ParamId, ParamId)>,
    latent: usize,
    seed: (usize, usize, usize),
}

impl Decoder {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, prefix: &str, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (sk, sl) = cfg.seed_map();
        let seed_ch = cfg.channels[2];
        let flat = seed_ch * sk * sl;
        let w = store.add(format!("{prefix}.fc.weight"), lecun_uniform(&[flat, cfg.latent], cfg.latent, rng));
        let b = store.add(format!("{prefix}.fc.bias"), Tensor::zeros(&[flat]));
        let outs = [cfg.channels[1], cfg.channels[0], PHYSICAL_CHANNELS];
        let mut convs = Vec::new();
        let mut c_in = seed_ch;
        for (i, &c_out) in outs.iter().enumerate() {
            let fan_in = c_in * KERNEL * KERNEL;
            let init = if i + 1 < outs.len() {
                he_uniform(&[c_out, c_in, KERNEL, KERNEL], fan_in, rng)
            } else {
                lecun_uniform(&[c_out, c_in, KERNEL, KERNEL], fan_in, rng)
            };
            let w = store.add(format!("{prefix}.conv{i}.weight"), init);
            let b = store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[c_out]));
            convs.push((w, b));
            c_in = c_out;
        }
        Ok(Decoder { fc: (w, b), convs, latent: cfg.latent, seed: (seed_ch, sk, sl) })
    }

    /// `[B, D] -> [B, 3, K, L]` in normalized units.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.latent {
            return Err(Error::Shape(format!("decoder expects [B, {}], got {:?}", self.latent, s)));
        }
        let h = g.linear(z, p.var(self.fc.0), p.var(self.fc.1));
        let (c, sk, sl) = self.seed;
        let mut h = g.reshape(h, &[s[0], c, sk, sl]);
        let last = self.convs.len() - 1;
        for (i, (w, b)) in self.convs.iter().enumerate() {
            let u = g.upsample2(h);
            let c = g.conv2d(u, p.var(*w), p.var(*b));
            h = if i < last { g.relu(c) } else { c };
        }
        Ok(h)
    }
}

/// Two-layer MLP `z -> softmax(W2 relu(W1 z + b1) + b2)` giving `C` mixing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffNet {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    latent: usize,
}

impl CoeffNet {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, prefix: &str, cfg: &NetworkConfig, rng: &mut R) -> Self {
        let (d, h, c) = (cfg.latent, cfg.coeff_hidden, cfg.bases);
        let w1 = store.add(format!("{prefix}.fc1.weight"), he_uniform(&[h, d], d, rng));
        let b1 = store.add(format!("{prefix}.fc1.bias"), Tensor::zeros(&[h]));
        let w2 = store.add(format!("{prefix}.fc2.weight"), lecun_uniform(&[c, h], h, rng));
        let b2 = store.add(format!("{prefix}.fc2.bias"), Tensor::zeros(&[c]));
        CoeffNet { fc1: (w1, b1), fc2: (w2, b2), latent: d }
    }

    /// Mixing weights for a latent state given as `[D]` or `[D, 1]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, z: Var) -> Result<Var> {
        if g.value(z).len() != self.latent {
            return Err(Error::Shape(format!("coefficient net expects {} inputs", self.latent)));
        }
        let row = g.reshape(z, &[1, self.latent]);
        let h = g.linear(row, p.var(self.fc1.0), p.var(self.fc1.1));
        let h = g.relu(h);
        let logits = g.linear(h, p.var(self.fc2.0), p.var(self.fc2.1));
        let c = g.value(logits).len();
        let logits = g.reshape(logits, &[c]);
        Ok(g.softmax(logits))
    }
}

/// Per-radar channels `[r, q, a_x, a_y]` stacked to `[4N, K, L]`; every channel
/// is zero outside its radar's mask.
pub fn encoder_input<S: Scalar>(obs: &Observation<S>, rs: &RadarSet<S>) -> Result<Tensor<S>> {
    let g = rs.geometry();
    let cells = g.cells();
    let n = rs.len();
    if obs.radial.len() != n * cells || obs.log_density.len() != n * cells {
        return Err(Error::Shape("observation does not match the radar set".into()));
    }
    let mut data = Vec::with_capacity(CHANNELS_PER_RADAR * n * cells);
    for r in 0..n {
        let (ax, ay) = rs.projection(r);
        data.extend_from_slice(&obs.radial[r * cells..(r + 1) * cells]);
        data.extend_from_slice(&obs.log_density[r * cells..(r + 1) * cells]);
        data.extend_from_slice(ax);
        data.extend_from_slice(ay);
    }
    Ok(Tensor::new(&[CHANNELS_PER_RADAR * n, g.k, g.l], data))
}

/// Stacks the encoder inputs of a whole sequence into `[T, 4N, K, L]`.
pub fn sequence_input<S: Scalar>(obs: &[Observation<S>], rs: &RadarSet<S>) -> Result<Tensor<S>> {
    let frames = obs.iter().map(|o| encoder_input(o, rs)).collect::<Result<Vec<_>>>()?;
    let inner = frames.first().map(|f| f.shape().to_vec()).unwrap_or_default();
    let mut data = Vec::with_capacity(frames.len() * frames.first().map_or(0, |f| f.len()));
    for f in frames.iter() {
        data.extend_from_slice(f.data());
    }
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(&inner);
    Ok(Tensor::new(&shape, data))
}
