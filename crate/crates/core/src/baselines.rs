//! Comparison methods: velocity volume profiling (one uniform velocity per
//! radar, interpolated in space) and a per-frame convolutional VAE.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, VectorField};
use crate::neural::{Decoder, Encoder, NetworkConfig};
use crate::params::{Bound, ParamStore};
use crate::radar::{Observation, RadarSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Condition number of the normal equations above which a fit is degenerate.
pub const VVP_MAX_CONDITION: f64 = 1e8;

/// Relative eigenvalue below which radar positions count as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

/// One radar's uniform-velocity fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VvpEstimate {
    pub velocity: (f64, f64),
    pub degenerate: bool,
}

/// Eigen-decomposition of a symmetric 2x2 matrix `[[a, b], [b, c]]`,
/// eigenvalues descending, eigenvectors as unit columns.
fn sym_eigen2(a: f64, b: f64, c: f64) -> ([f64; 2], [(f64, f64); 2]) {
    let mean = 0.5 * (a + c);
    let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mean + radius, mean - radius);
    let u1 = if b.abs() > 0.0 {
        let (x, y) = (l1 - c, b);
        let n = x.hypot(y);
        (x / n, y / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    ([l1, l2], [u1, (-u1.1, u1.0)])
}

/// Least-squares uniform velocity `argmin_v sum_mask (r - a.v)^2` for one
/// radar, via the 2x2 normal equations. When they are ill-conditioned the
/// minimal-norm pseudo-inverse solution is returned and the estimate is
/// flagged degenerate.
pub fn vvp_fit<S: Scalar>(radial: &[S], ax: &[S], ay: &[S], mask: &[bool]) -> Result<VvpEstimate> {
    let n = mask.len();
    if radial.len() != n || ax.len() != n || ay.len() != n {
        return Err(Error::Shape("radial, projection and mask planes differ in size".into()));
    }
    let (mut sxx, mut sxy, mut syy, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut count = 0usize;
    for i in (0..n).filter(|i| mask[*i]) {
        let (x, y, r) = (ax[i].to_f64_lossy(), ay[i].to_f64_lossy(), radial[i].to_f64_lossy());
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        bx += x * r;
        by += y * r;
        count += 1;
    }
    if count < 2 {
        return Err(Error::Config(format!("velocity profiling needs at least 2 cells in range, got {count}")));
    }
    let ([l1, l2], [u1, _]) = sym_eigen2(sxx, sxy, syy);
    if !(l1 > 0.0) {
        return Ok(VvpEstimate { velocity: (0.0, 0.0), degenerate: true });
    }
    if l2 > 0.0 && l1 / l2 <= VVP_MAX_CONDITION {
        let det = sxx * syy - sxy * sxy;
        let v = ((syy * bx - sxy * by) / det, (sxx * by - sxy * bx) / det);
        return Ok(VvpEstimate { velocity: v, degenerate: false });
    }
    // Pseudo-inverse: keep only the well-determined eigen-direction.
    let coef = (u1.0 * bx + u1.1 * by) / l1;
    Ok(VvpEstimate { velocity: (coef * u1.0, coef * u1.1), degenerate: true })
}

/// Fits every radar of one frame.
pub fn vvp_frame<S: Scalar>(obs: &Observation<S>, rs: &RadarSet<S>) -> Result<Vec<VvpEstimate>> {
    let cells = rs.geometry().cells();
    if obs.radial.len() != rs.len() * cells {
        return Err(Error::Shape("observation size does not match the radar set".into()));
    }
    (0..rs.len())
        .map(|n| {
            let (ax, ay) = rs.projection(n);
            vvp_fit(&obs.radial[n * cells..(n + 1) * cells], ax, ay, rs.mask(n))
        })
        .collect()
}

/// Per-component affine least-squares fit `c0 + c1 x + c2 y` of the values
/// through the given positions, evaluated at every cell center. Directions
/// in which the positions do not spread (a single radar, or collinear
/// radars) are dropped, so the field is constant across them.
pub fn affine_interpolate(values: &[(f64, f64)], positions: &[(f64, f64)], geometry: &GridGeometry) -> Result<VectorField<f64>> {
    if values.is_empty() || values.len() != positions.len() {
        return Err(Error::Shape(format!("{} estimates for {} positions", values.len(), positions.len())));
    }
    let n = values.len() as f64;
    let centroid = positions.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    // Shifted by the first value so identical estimates give their value exactly.
    let v0 = values[0];
    let shift = values.iter().fold((0.0, 0.0), |a, v| (a.0 + (v.0 - v0.0) / n, a.1 + (v.1 - v0.1) / n));
    let mean = (v0.0 + shift.0, v0.1 + shift.1);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in positions {
        let (x, y) = (p.0 - centroid.0, p.1 - centroid.1);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    let (lambda, dirs) = sym_eigen2(sxx, sxy, syy);
    let scale = lambda[0].max(0.0);
    // Centered coordinates along orthogonal eigen-directions decouple the
    // normal equations into independent one-dimensional slopes.
    let mut slopes: Vec<((f64, f64), (f64, f64))> = Vec::new();
    for (l, u) in lambda.iter().zip(dirs) {
        if scale > 0.0 && *l > COLLINEAR_TOL * scale {
            let (mut cx, mut cy) = (0.0, 0.0);
            for (p, v) in positions.iter().zip(values) {
                let s = u.0 * (p.0 - centroid.0) + u.1 * (p.1 - centroid.1);
                cx += s * (v.0 - mean.0);
                cy += s * (v.1 - mean.1);
            }
            slopes.push((u, (cx / l, cy / l)));
        }
    }
    let cells = geometry.cells();
    let (mut vx, mut vy) = (Vec::with_capacity(cells), Vec::with_capacity(cells));
    for k in 0..geometry.k {
        for l in 0..geometry.l {
            let (x, y) = geometry.center(k, l);
            let (mut fx, mut fy) = mean;
            for (u, c) in &slopes {
                let s = u.0 * (x - centroid.0) + u.1 * (y - centroid.1);
                fx += c.0 * s;
                fy += c.1 * s;
            }
            vx.push(fx);
            vy.push(fy);
        }
    }
    VectorField::new(*geometry, vx, vy)
}

/// VVP reconstruction of one frame: fit every radar and interpolate the
/// non-degenerate estimates. If every fit is degenerate the minimal-norm
/// estimates are used instead.
pub fn vvp_reconstruct_frame<S: Scalar>(obs: &Observation<S>, rs: &RadarSet<S>) -> Result<(Vec<VvpEstimate>, VectorField<f64>)> {
    let cells = rs.geometry().cells();
    let mut estimates = Vec::with_capacity(rs.len());
    let mut usable = Vec::new();
    for n in 0..rs.len() {
        let (ax, ay) = rs.projection(n);
        match vvp_fit(&obs.radial[n * cells..(n + 1) * cells], ax, ay, rs.mask(n)) {
            Ok(e) => {
                estimates.push(e);
                usable.push((e, rs.radars()[n].position));
            }
            Err(Error::Config(msg)) => log::debug!("radar {n} skipped: {msg}"),
            Err(e) => return Err(e),
        }
    }
    let good: Vec<_> = usable.iter().filter(|(e, _)| !e.degenerate).copied().collect();
    let chosen = if good.is_empty() { usable } else { good };
    if chosen.is_empty() {
        return Err(Error::Config("no radar has enough cells in range for velocity profiling".into()));
    }
    let values: Vec<_> = chosen.iter().map(|(e, _)| e.velocity).collect();
    let positions: Vec<_> = chosen.iter().map(|(_, p)| *p).collect();
    Ok((estimates, affine_interpolate(&values, &positions, rs.geometry())?))
}

/// VVP reconstruction of a whole sequence, one interpolated field per frame.
pub fn vvp_reconstruct<S: Scalar>(obs: &[Observation<S>], rs: &RadarSet<S>) -> Result<Vec<VectorField<f64>>> {
    obs.iter().map(|o| vvp_reconstruct_frame(o, rs).map(|(_, f)| f)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub network: NetworkConfig,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { network: NetworkConfig::default(), kl_weight: 1.0 }
    }
}

/// One training frame: encoder input `[4N, K, L]` with its radars and observation.
#[derive(Clone, Copy, Debug)]
pub struct FrameRef<'a, S> {
    pub input: &'a [S],
    pub radars: &'a RadarSet<S>,
    pub observation: &'a Observation<S>,
}

/// Graph handles of one VAE batch. Losses are summed per frame and averaged
/// over the batch.
#[derive(Clone, Copy, Debug)]
pub struct VaeGraph {
    pub recons: Var,
    pub kl: Var,
    pub total: Var,
    /// Decoder output `[B, 3, K, L]` at the sampled latents.
    pub decoded: Var,
}

/// Convolutional VAE with the same encoder/decoder shapes as the main model,
/// a diagonal Gaussian posterior and a standard normal prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    cfg: VaeConfig,
    encoder: Encoder,
    decoder: Decoder,
}

impl Vae {
    /// Registers parameters under `vae.encoder` and `vae.decoder`.
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, cfg: VaeConfig, rng: &mut R) -> Result<Self> {
        cfg.network.validate()?;
        if !(cfg.kl_weight >= 0.0 && cfg.kl_weight.is_finite()) {
            return Err(Error::Config("KL weight must be a non-negative number".into()));
        }
        let encoder = Encoder::new(store, "vae.encoder", &cfg.network, 2 * cfg.network.latent, rng)?;
        let decoder = Decoder::new(store, "vae.decoder", &cfg.network, rng)?;
        Ok(Vae { cfg, encoder, decoder })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    /// Posterior means and log-variances, each `[B, D]`.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let d = self.cfg.network.latent;
        let h = self.encoder.forward(g, p, x)?;
        let b = g.shape(h)[0];
        let mu = g.slice(h, &[0, 0], &[b, d]);
        let logvar = g.slice(h, &[0, d], &[b, 2 * d]);
        Ok((mu, logvar))
    }

    /// Negative ELBO of a batch of frames with reparameterized samples drawn from `rng`.
    pub fn loss<S: Scalar, R: Rng>(&self, g: &mut Graph<S>, p: &Bound, frames: &[FrameRef<'_, S>], rng: &mut R) -> Result<VaeGraph> {
        if frames.is_empty() {
            return Err(Error::Shape("empty VAE batch".into()));
        }
        let net = &self.cfg.network;
        let per = net.in_channels() * net.k * net.l;
        let mut data = Vec::with_capacity(frames.len() * per);
        for f in frames {
            if f.input.len() != per {
                return Err(Error::Shape(format!("frame input has {} values, expected {per}", f.input.len())));
            }
            data.extend_from_slice(f.input);
        }
        let b = frames.len();
        let x = g.constant(Tensor::new(&[b, net.in_channels(), net.k, net.l], data));
        let (mu, logvar) = self.encode(g, p, x)?;
        let d = net.latent;
        let eps = Tensor::from_fn(&[b, d], |_| S::lit(rng.sample::<f64, _>(StandardNormal)));
        let half = g.scale(logvar, S::lit(0.5));
        let std = g.exp(half);
        let noise = g.mul_const(std, eps);
        let z = g.add(mu, noise);
        let decoded = self.decoder.forward(g, p, z)?;
        let sse = batch_forward_sse(g, decoded, frames)?;
        let kl = kl_standard_normal(g, mu, logvar);
        let inv_b = S::lit(1.0 / b as f64);
        let recons = g.scale(sse, inv_b);
        let kl = g.scale(kl, inv_b);
        let weighted = g.scale(kl, S::lit(self.cfg.kl_weight));
        let total = g.add(recons, weighted);
        Ok(VaeGraph { recons, kl, total, decoded })
    }

    /// Decodes the posterior mean of every frame of `[T, 4N, K, L]` into `[T, 3, K, L]`.
    pub fn reconstruct<S: Scalar>(&self, store: &ParamStore<S>, input: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input.clone());
        let (mu, _) = self.encode(&mut g, &p, x)?;
        let out = self.decoder.forward(&mut g, &p, mu)?;
        Ok(g.value(out).clone())
    }
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` summed over batch and latent dimensions.
pub fn kl_standard_normal<S: Scalar>(g: &mut Graph<S>, mu: Var, logvar: Var) -> Var {
    let count = g.value(mu).len() as f64;
    let m2 = g.square(mu);
    let m2 = g.sum(m2);
    let var = g.exp(logvar);
    let var = g.sum(var);
    let lv = g.sum(logvar);
    let a = g.add(m2, var);
    let a = g.sub(a, lv);
    let a = g.offset(a, S::lit(-count));
    g.scale(a, S::lit(0.5))
}

/// Squared error between the radar measurements of a decoded batch
/// `[B, 3, K, L]` and each frame's observation, summed over frames, radars,
/// cells and both channels. Every frame may carry its own radar set.
pub fn batch_forward_sse<S: Scalar>(g: &mut Graph<S>, decoded: Var, frames: &[FrameRef<'_, S>]) -> Result<Var> {
    let s = g.shape(decoded).to_vec();
    let b = frames.len();
    let radars = frames[0].radars.len();
    if s.len() != 4 || s[0] != b || s[1] != 3 {
        return Err(Error::Shape(format!("decoded batch {s:?} does not hold {b} frames of 3 channels")));
    }
    let geometry = *frames[0].radars.geometry();
    let cells = geometry.cells();
    if s[2] != geometry.k || s[3] != geometry.l {
        return Err(Error::Shape("decoded batch does not match the radar grid".into()));
    }
    for f in frames {
        if f.radars.len() != radars || f.radars.geometry() != &geometry {
            return Err(Error::Shape("frames in a batch must share grid and radar count".into()));
        }
        if f.observation.radial.len() != radars * cells || f.observation.log_density.len() != radars * cells {
            return Err(Error::Shape("observation size does not match the radar set".into()));
        }
    }
    let shape = [b, geometry.k, geometry.l];
    let channel = |g: &mut Graph<S>, c: usize| {
        let x = g.slice(decoded, &[0, c, 0, 0], &[b, c + 1, s[2], s[3]]);
        g.reshape(x, &shape)
    };
    let vx = channel(g, 0);
    let vy = channel(g, 1);
    let q = channel(g, 2);
    let plane = |pick: &dyn Fn(&FrameRef<'_, S>, usize) -> S| Tensor::from_fn(&shape, |i| pick(&frames[i / cells], i % cells));
    let mut terms = Vec::with_capacity(2 * radars);
    for n in 0..radars {
        let ax = plane(&|f, i| f.radars.projection(n).0[i]);
        let ay = plane(&|f, i| f.radars.projection(n).1[i]);
        let mask = plane(&|f, i| if f.radars.mask(n)[i] { S::one() } else { S::zero() });
        let or = plane(&|f, i| f.observation.radial[n * cells + i]);
        let oq = plane(&|f, i| f.observation.log_density[n * cells + i]);
        let px = g.mul_const(vx, ax);
        let py = g.mul_const(vy, ay);
        let radial = g.add(px, py);
        let or = g.constant(or);
        let dr = g.sub(radial, or);
        terms.push(g.square(dr));
        let pq = g.mul_const(q, mask);
        let oq = g.constant(oq);
        let dq = g.sub(pq, oq);
        terms.push(g.square(dq));
    }
    let all = g.stack(&terms);
    Ok(g.sum(all))
}
