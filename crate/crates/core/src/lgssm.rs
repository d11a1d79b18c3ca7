//! Linear Gaussian state-space inference: Kalman filter, Rauch-Tung-Striebel
//! smoother and locally-linear transition mixing.
//!
//! Inference runs on the autodiff [`Graph`] so that losses on the smoothed
//! means can be differentiated with respect to the encoder outputs, the
//! transition bases, the coefficient net and the measurement noise. The
//! value-only API ([`LgssmParams::infer`], [`Lgssm::infer`]) builds a
//! throwaway graph and reads the results back.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, softplus_inverse, Graph, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::neural::{CoeffNet, NetworkConfig};
use crate::params::{normal, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Symmetry tolerance for materialized covariances.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Most negative eigenvalue tolerated when factoring a covariance.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief<S> {
    pub mean: Vec<S>,
    pub cov: Tensor<S>,
}

impl<S: Scalar> GaussianBelief<S> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks symmetry and positive semi-definiteness within tolerance.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.shape() != [d, d] {
            return Err(Error::Shape(format!("covariance {:?} for mean of length {d}", self.cov.shape())));
        }
        let scale = self.cov.data().iter().fold(1.0f64, |m, v| m.max(v.to_f64_lossy().abs()));
        if linalg::asymmetry(&self.cov).to_f64_lossy() > SYMMETRY_TOL * scale {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
        }
        linalg::psd_factor(&self.cov, PSD_TOL).map(|_| ())
    }
}

/// Filtered, predicted and smoothed beliefs for every step, with the
/// transition used to predict each step (`None` at the first step, where the
/// prior is used directly).
#[derive(Clone, Debug, PartialEq)]
pub struct SmootherResult<S> {
    pub filtered: Vec<GaussianBelief<S>>,
    pub predicted: Vec<GaussianBelief<S>>,
    pub smoothed: Vec<GaussianBelief<S>>,
    pub transitions: Vec<Option<Tensor<S>>>,
    /// `log p(w_1, .., w_T)` accumulated from the innovations.
    pub log_likelihood: f64,
}

impl<S: Scalar> SmootherResult<S> {
    pub fn len(&self) -> usize {
        self.smoothed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smoothed.is_empty()
    }

    pub fn smoothed_means(&self) -> Vec<Vec<S>> {
        self.smoothed.iter().map(|b| b.mean.clone()).collect()
    }
}

/// Measurement noise on the graph.
#[derive(Clone, Copy, Debug)]
pub enum NoiseVar {
    /// Variances `[M]` on the diagonal of `R`.
    Diagonal(Var),
    Full(Var),
}

/// Model quantities placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct TapeModel {
    /// `None` means `H = I`.
    pub observation: Option<Var>,
    pub process: Var,
    pub noise: NoiseVar,
    /// `[D, 1]`.
    pub prior_mean: Var,
    pub prior_cov: Var,
}

pub enum Transition<'a> {
    /// `F_t = sum_k alpha_k(z) F^(k)` with `bases: [C, D, D]`.
    Mixed {
        bases: Var,
        net: &'a CoeffNet,
        params: &'a Bound,
    },
    Constant(Var),
    /// `F_t` for `t = 1 .. T-1` (zero-based), one per prediction.
    PerStep(Vec<Var>),
}

#[derive(Clone, Copy, Debug)]
pub struct TapeBelief {
    /// `[D, 1]`.
    pub mean: Var,
    pub cov: Var,
}

#[derive(Clone, Debug)]
pub struct TapeInference {
    pub filtered: Vec<TapeBelief>,
    pub predicted: Vec<TapeBelief>,
    pub smoothed: Vec<TapeBelief>,
    pub transitions: Vec<Option<Var>>,
    pub log_likelihood: f64,
}

impl TapeInference {
    /// Smoothed means stacked into `[T, D]`.
    pub fn smoothed_means<S: Scalar>(&self, g: &mut Graph<S>) -> Var {
        let rows: Vec<Var> = self
            .smoothed
            .iter()
            .map(|b| {
                let d = g.value(b.mean).len();
                g.reshape(b.mean, &[d])
            })
            .collect();
        g.stack(&rows)
    }

    pub fn read<S: Scalar>(&self, g: &Graph<S>) -> SmootherResult<S> {
        let belief = |b: &TapeBelief| GaussianBelief { mean: g.value(b.mean).data().to_vec(), cov: g.value(b.cov).clone() };
        SmootherResult {
            filtered: self.filtered.iter().map(belief).collect(),
            predicted: self.predicted.iter().map(belief).collect(),
            smoothed: self.smoothed.iter().map(belief).collect(),
            transitions: self.transitions.iter().map(|f| f.map(|v| g.value(v).clone())).collect(),
            log_likelihood: self.log_likelihood,
        }
    }
}

fn transition_at<S: Scalar>(g: &mut Graph<S>, tr: &Transition<'_>, t: usize, prev_mean: Var) -> Result<Var> {
    match tr {
        Transition::Mixed { bases, net, params } => {
            let alpha = net.forward(g, params, prev_mean)?;
            Ok(g.weighted_sum(alpha, *bases))
        }
        Transition::Constant(f) => Ok(*f),
        Transition::PerStep(fs) => fs.get(t - 1).copied().ok_or_else(|| Error::Shape(format!("no transition supplied for step {t}"))),
    }
}

fn jittered<S: Scalar>(g: &mut Graph<S>, a: Var) -> Var {
    let n = g.shape(a)[0];
    let mut j = Tensor::zeros(&[n, n]);
    linalg::add_diagonal(&mut j, S::lit(S::COV_JITTER));
    let j = g.constant(j);
    let s = g.symmetrize(a);
    g.add(s, j)
}

fn gaussian_log_density<S: Scalar>(innovation: &Tensor<S>, inv: &Tensor<S>, logdet: S) -> f64 {
    let m = innovation.len();
    let y = innovation.data();
    let sy = linalg::mat_vec(inv, y);
    let quad: f64 = y.iter().zip(&sy).map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy()).sum();
    -0.5 * (quad + logdet.to_f64_lossy() + m as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Kalman filter over measurements `w_t` (each `[M]` or `[M, 1]`), with
/// Joseph-form covariance updates.
pub fn filter<S: Scalar>(g: &mut Graph<S>, model: &TapeModel, tr: &Transition<'_>, w: &[Var]) -> Result<TapeInference> {
    if w.is_empty() {
        return Err(Error::Shape("filtering needs at least one measurement".into()));
    }
    let d = g.value(model.prior_mean).len();
    let eye = g.constant(Tensor::identity(d));
    let mut filtered = Vec::with_capacity(w.len());
    let mut predicted = Vec::with_capacity(w.len());
    let mut transitions = Vec::with_capacity(w.len());
    let mut log_likelihood = 0.0;
    for (t, wt) in w.iter().enumerate() {
        let m_len = g.value(*wt).len();
        let wt = g.reshape(*wt, &[m_len, 1]);
        let pred = if t == 0 {
            transitions.push(None);
            TapeBelief { mean: model.prior_mean, cov: model.prior_cov }
        } else {
            let prev: TapeBelief = filtered[t - 1];
            let f = transition_at(g, tr, t, prev.mean)?;
            transitions.push(Some(f));
            let mean = g.matmul(f, prev.mean);
            let fs = g.matmul(f, prev.cov);
            let fsf = g.matmul_nt(fs, f);
            let c = g.add(fsf, model.process);
            TapeBelief { mean, cov: g.symmetrize(c) }
        };
        predicted.push(pred);

        let (hm, hs) = match model.observation {
            None => (pred.mean, pred.cov),
            Some(h) => (g.matmul(h, pred.mean), g.matmul(h, pred.cov)),
        };
        let innovation = g.sub(wt, hm);
        // S = H Sigma H^T + R, and the cross term Sigma H^T.
        let (hsh, sht) = match model.observation {
            None => (pred.cov, pred.cov),
            Some(h) => (g.matmul_nt(hs, h), g.matmul_nt(pred.cov, h)),
        };
        let r_mat = match model.noise {
            NoiseVar::Diagonal(r) => g.diag(r),
            NoiseVar::Full(r) => r,
        };
        let s_raw = g.add(hsh, r_mat);
        let s = jittered(g, s_raw);
        let (s_inv, logdet) = g.inverse_spd_logdet(s)?;
        log_likelihood += gaussian_log_density(g.value(innovation), g.value(s_inv), logdet);
        let gain = g.matmul(sht, s_inv);
        let correction = g.matmul(gain, innovation);
        let mean = g.add(pred.mean, correction);

        let kh = match model.observation {
            None => gain,
            Some(h) => g.matmul(gain, h),
        };
        let a = g.sub(eye, kh);
        let asig = g.matmul(a, pred.cov);
        let joseph = g.matmul_nt(asig, a);
        let kr = match model.noise {
            NoiseVar::Diagonal(r) => g.scale_cols(gain, r),
            NoiseVar::Full(r) => g.matmul(gain, r),
        };
        let krk = g.matmul_nt(kr, gain);
        let cov = g.add(joseph, krk);
        filtered.push(TapeBelief { mean, cov: g.symmetrize(cov) });
    }
    Ok(TapeInference { smoothed: Vec::new(), filtered, predicted, transitions, log_likelihood })
}

/// Rauch-Tung-Striebel backward pass, reusing the transitions recorded by the filter.
pub fn smooth<S: Scalar>(g: &mut Graph<S>, mut inf: TapeInference) -> Result<TapeInference> {
    let n = inf.filtered.len();
    if n == 0 {
        return Err(Error::Shape("smoothing needs a filtered sequence".into()));
    }
    let mut smoothed = vec![inf.filtered[n - 1]; n];
    for t in (0..n - 1).rev() {
        let f = inf.transitions[t + 1].ok_or_else(|| Error::Shape(format!("missing transition at step {}", t + 1)))?;
        let filt = inf.filtered[t];
        let pred = inf.predicted[t + 1];
        let next = smoothed[t + 1];
        let pj = jittered(g, pred.cov);
        let p_inv = g.inverse_spd(pj)?;
        let sf = g.matmul_nt(filt.cov, f);
        let gain = g.matmul(sf, p_inv);
        let dm = g.sub(next.mean, pred.mean);
        let corr = g.matmul(gain, dm);
        let mean = g.add(filt.mean, corr);
        let dc = g.sub(next.cov, pred.cov);
        let jd = g.matmul(gain, dc);
        let jdj = g.matmul_nt(jd, gain);
        let cov = g.add(filt.cov, jdj);
        smoothed[t] = TapeBelief { mean, cov: g.symmetrize(cov) };
    }
    inf.smoothed = smoothed;
    Ok(inf)
}

/// Measurement noise given as values.
#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementNoise<S> {
    Diagonal(Vec<S>),
    Full(Tensor<S>),
}

/// A fully specified linear Gaussian model with explicit matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LgssmParams<S> {
    /// `None` means `H = I`.
    pub observation: Option<Tensor<S>>,
    pub process: Tensor<S>,
    pub noise: MeasurementNoise<S>,
    pub prior_mean: Vec<S>,
    pub prior_cov: Tensor<S>,
}

impl<S: Scalar> LgssmParams<S> {
    pub fn state_dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn measurement_dim(&self) -> usize {
        match &self.observation {
            Some(h) => h.shape()[0],
            None => self.state_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        let m = self.measurement_dim();
        if let Some(h) = &self.observation {
            if h.shape() != [m, d] {
                return Err(Error::Shape(format!("observation matrix {:?}, state dim {d}", h.shape())));
            }
        }
        for (name, c, n) in [("process", &self.process, d), ("prior", &self.prior_cov, d)] {
            if c.shape() != [n, n] {
                return Err(Error::Shape(format!("{name} covariance {:?}, expected {n}x{n}", c.shape())));
            }
        }
        match &self.noise {
            MeasurementNoise::Diagonal(r) => {
                if r.len() != m {
                    return Err(Error::Shape(format!("{} noise variances for {m} measurements", r.len())));
                }
                if r.iter().any(|v| *v <= S::zero() || !v.is_finite()) {
                    return Err(Error::NotPositiveDefinite("measurement noise variances must be positive".into()));
                }
            }
            MeasurementNoise::Full(r) => {
                if r.shape() != [m, m] {
                    return Err(Error::Shape(format!("noise covariance {:?}, expected {m}x{m}", r.shape())));
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<S>) -> TapeModel {
        let d = self.state_dim();
        TapeModel {
            observation: self.observation.as_ref().map(|h| g.constant(h.clone())),
            process: g.constant(self.process.clone()),
            noise: match &self.noise {
                MeasurementNoise::Diagonal(r) => NoiseVar::Diagonal(g.constant(Tensor::vector(r.clone()))),
                MeasurementNoise::Full(r) => NoiseVar::Full(g.constant(r.clone())),
            },
            prior_mean: g.constant(Tensor::new(&[d, 1], self.prior_mean.clone())),
            prior_cov: g.constant(self.prior_cov.clone()),
        }
    }

    /// Filter and smooth with one transition matrix per prediction step
    /// (`transitions.len() >= T - 1`, or exactly one matrix reused everywhere).
    pub fn infer(&self, transitions: &[Tensor<S>], w: &[Vec<S>]) -> Result<SmootherResult<S>> {
        self.validate()?;
        let d = self.state_dim();
        if transitions.iter().any(|f| f.shape() != [d, d]) {
            return Err(Error::Shape(format!("transitions must be {d}x{d}")));
        }
        if w.iter().any(|x| x.len() != self.measurement_dim()) {
            return Err(Error::Shape(format!("measurements must have length {}", self.measurement_dim())));
        }
        let mut g = Graph::new();
        let model = self.bind(&mut g);
        let vars: Vec<Var> = transitions.iter().map(|f| g.constant(f.clone())).collect();
        let tr = if vars.len() == 1 { Transition::Constant(vars[0]) } else { Transition::PerStep(vars) };
        let ws: Vec<Var> = w.iter().map(|x| g.constant(Tensor::vector(x.clone()))).collect();
        let filt = filter(&mut g, &model, &tr, &ws)?;
        let inf = smooth(&mut g, filt)?;
        Ok(inf.read(&g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgssmConfig {
    /// `D`; the measurement dimension equals it because `H = I`.
    pub latent: usize,
    pub bases: usize,
    pub coeff_hidden: usize,
    pub process_var: f64,
    pub prior_var: f64,
    /// Initial value of every measurement noise variance.
    pub noise_init: f64,
    /// Standard deviation of the perturbation added to the identity when
    /// initializing each transition basis.
    pub basis_std: f64,
    /// Learn the prior mean and a diagonal prior covariance instead of
    /// keeping `N(0, prior_var I)` fixed.
    pub learn_prior: bool,
}

impl Default for LgssmConfig {
    fn default() -> Self {
        LgssmConfig {
            latent: 128,
            bases: 8,
            coeff_hidden: 32,
            process_var: 0.1,
            prior_var: 10.0,
            noise_init: 0.1,
            basis_std: 0.05 / (128f64).sqrt(),
            learn_prior: false,
        }
    }
}

impl LgssmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.bases == 0 || self.coeff_hidden == 0 {
            return Err(Error::Config("latent size, basis count and hidden size must be positive".into()));
        }
        for (name, v) in [("process_var", self.process_var), ("prior_var", self.prior_var), ("noise_init", self.noise_init)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.basis_std >= 0.0 && self.basis_std.is_finite()) {
            return Err(Error::Config(format!("basis_std must be non-negative, got {}", self.basis_std)));
        }
        Ok(())
    }

    fn network(&self) -> NetworkConfig {
        NetworkConfig { latent: self.latent, bases: self.bases, coeff_hidden: self.coeff_hidden, ..NetworkConfig::default() }
    }
}

/// The learned locally-linear model: transition bases, coefficient net and
/// measurement noise (and optionally the prior), with identity observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Lgssm {
    cfg: LgssmConfig,
    bases: ParamId,
    noise_raw: ParamId,
    prior: Option<(ParamId, ParamId)>,
    coeff: CoeffNet,
}

impl Lgssm {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, prefix: &str, cfg: LgssmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent;
        let mut bases: Tensor<S> = normal(&[cfg.bases, d, d], cfg.basis_std, rng);
        for k in 0..cfg.bases {
            for i in 0..d {
                bases.data_mut()[k * d * d + i * d + i] += S::one();
            }
        }
        let bases = store.add(format!("{prefix}.transition_bases"), bases);
        let raw = softplus_inverse(S::lit(cfg.noise_init));
        let noise_raw = store.add(format!("{prefix}.noise_raw"), Tensor::full(&[d], raw));
        let prior = if cfg.learn_prior {
            let mean = store.add(format!("{prefix}.prior_mean"), Tensor::zeros(&[d]));
            let var = store.add(format!("{prefix}.prior_var_raw"), Tensor::full(&[d], softplus_inverse(S::lit(cfg.prior_var))));
            Some((mean, var))
        } else {
            None
        };
        let coeff = CoeffNet::new(store, &format!("{prefix}.coeff"), &cfg.network(), rng);
        Ok(Lgssm { cfg, bases, noise_raw, prior, coeff })
    }

    pub fn config(&self) -> &LgssmConfig {
        &self.cfg
    }

    pub fn coeff_net(&self) -> &CoeffNet {
        &self.coeff
    }

    pub fn bases_id(&self) -> ParamId {
        self.bases
    }

    /// Current measurement noise variances `softplus(raw)`.
    pub fn noise_variances<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<S> {
        store.get(self.noise_raw).data().iter().map(|v| softplus(*v)).collect()
    }

    pub fn tape_model<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound) -> TapeModel {
        let d = self.cfg.latent;
        let mut process = Tensor::zeros(&[d, d]);
        linalg::add_diagonal(&mut process, S::lit(self.cfg.process_var));
        let process = g.constant(process);
        let r = g.softplus(p.var(self.noise_raw));
        let (prior_mean, prior_cov) = match self.prior {
            Some((m, v)) => {
                let mean = g.reshape(p.var(m), &[d, 1]);
                let var = g.softplus(p.var(v));
                (mean, g.diag(var))
            }
            None => {
                let mut cov = Tensor::zeros(&[d, d]);
                linalg::add_diagonal(&mut cov, S::lit(self.cfg.prior_var));
                (g.constant(Tensor::zeros(&[d, 1])), g.constant(cov))
            }
        };
        TapeModel { observation: None, process, noise: NoiseVar::Diagonal(r), prior_mean, prior_cov }
    }

    pub fn transition<'a>(&'a self, p: &'a Bound) -> Transition<'a> {
        Transition::Mixed { bases: p.var(self.bases), net: &self.coeff, params: p }
    }

    /// Filter and smooth latent measurements on an existing graph.
    pub fn run<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, w: &[Var]) -> Result<TapeInference> {
        let model = self.tape_model(g, p);
        let tr = self.transition(p);
        let filt = filter(g, &model, &tr, w)?;
        smooth(g, filt)
    }

    /// Value-only inference.
    pub fn infer<S: Scalar>(&self, store: &ParamStore<S>, w: &[Vec<S>]) -> Result<SmootherResult<S>> {
        if w.iter().any(|x| x.len() != self.cfg.latent) {
            return Err(Error::Shape(format!("latent measurements must have length {}", self.cfg.latent)));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let ws: Vec<Var> = w.iter().map(|x| g.constant(Tensor::vector(x.clone()))).collect();
        let inf = self.run(&mut g, &p, &ws)?;
        Ok(inf.read(&g))
    }

    /// Mixing weights and the mixed transition for a latent state.
    pub fn mix_transition<S: Scalar>(&self, store: &ParamStore<S>, z: &[S]) -> Result<(Vec<S>, Tensor<S>)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zv = g.constant(Tensor::vector(z.to_vec()));
        let alpha = self.coeff.forward(&mut g, &p, zv)?;
        let f = g.weighted_sum(alpha, p.var(self.bases));
        Ok((g.value(alpha).data().to_vec(), g.value(f).clone()))
    }
}

/// Independent draws from the smoothed marginal at step `t`.
pub fn sample_posterior<S: Scalar, R: Rng>(result: &SmootherResult<S>, t: usize, n_samples: usize, rng: &mut R) -> Result<Vec<Vec<S>>> {
    if n_samples == 0 {
        return Err(Error::Config("at least one posterior sample is required".into()));
    }
    let belief = result.smoothed.get(t).ok_or_else(|| Error::Shape(format!("step {t} out of range for {} steps", result.len())))?;
    belief.validate()?;
    let l = linalg::psd_factor(&belief.cov, PSD_TOL)?;
    let d = belief.dim();
    Ok((0..n_samples)
        .map(|_| {
            let eps: Vec<S> = (0..d).map(|_| S::lit(StandardNormal.sample(rng))).collect();
            linalg::mat_vec(&l, &eps).iter().zip(&belief.mean).map(|(a, m)| *a + *m).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(p: f64, prior_var: f64, r: f64) -> LgssmParams<f64> {
        LgssmParams {
            observation: None,
            process: Tensor::new(&[1, 1], vec![p]),
            noise: MeasurementNoise::Diagonal(vec![r]),
            prior_mean: vec![0.0],
            prior_cov: Tensor::new(&[1, 1], vec![prior_var]),
        }
    }

    #[test]
    fn conjugate_update() {
        let m = scalar_model(0.0, 1.0, 1.0);
        let res = m.infer(&[Tensor::new(&[1, 1], vec![1.0])], &[vec![1.0]]).unwrap();
        assert!((res.filtered[0].mean[0] - 0.5).abs() < 1e-9);
        assert!((res.filtered[0].cov.item() - 0.5).abs() < 1e-9);
        assert_eq!(res.smoothed, res.filtered);
        assert_eq!(res.predicted[0].mean, vec![0.0]);
        assert!(res.transitions[0].is_none());
    }

    #[test]
    fn huge_noise_keeps_prediction() {
        let m = scalar_model(0.1, 1.0, 1e12);
        let f = Tensor::new(&[1, 1], vec![0.9]);
        let res = m.infer(&[f], &[vec![3.0], vec![-2.0], vec![5.0]]).unwrap();
        for t in 0..3 {
            let p = res.predicted[t].mean[0];
            let f = res.filtered[t].mean[0];
            assert!((f - p).abs() <= 1e-4 * p.abs().max(1e-4), "t={t}: {f} vs {p}");
        }
    }

    #[test]
    fn final_step_is_filtered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, fs, w) = random_problem(&mut rng, 3, 2, 5);
        let res = m.infer(&fs, &w).unwrap();
        assert_eq!(res.smoothed[4], res.filtered[4]);
        for b in res.smoothed.iter().chain(&res.filtered).chain(&res.predicted) {
            b.validate().unwrap();
        }
    }

    #[test]
    fn deterministic_dynamics_back_substitute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut m = scalar_model(0.0, 1.0, 1.0);
        m.process = Tensor::zeros(&[d, d]);
        linalg::add_diagonal(&mut m.process, 1e-10);
        m.prior_mean = vec![0.0; d];
        m.prior_cov = Tensor::identity(d);
        m.noise = MeasurementNoise::Diagonal(vec![0.5; d]);
        let fs: Vec<Tensor<f64>> = (0..4)
            .map(|_| {
                let mut f: Tensor<f64> = normal(&[d, d], 0.2, &mut rng);
                linalg::add_diagonal(&mut f, 1.0);
                f
            })
            .collect();
        let w: Vec<Vec<f64>> = (0..5).map(|_| normal::<f64, _>(&[d], 1.0, &mut rng).into_data()).collect();
        let res = m.infer(&fs, &w).unwrap();
        for t in 0..4 {
            let next = res.smoothed[t + 1].mean.clone();
            let pushed = linalg::mat_vec(&fs[t], &res.smoothed[t].mean);
            for i in 0..d {
                assert!((pushed[i] - next[i]).abs() < 1e-6, "t={t} i={i}: {} vs {}", pushed[i], next[i]);
            }
        }
    }

    pub(super) fn random_problem(
        rng: &mut ChaCha8Rng,
        d: usize,
        m: usize,
        t: usize,
    ) -> (LgssmParams<f64>, Vec<Tensor<f64>>, Vec<Vec<f64>>) {
        let spd = |rng: &mut ChaCha8Rng, n: usize, s: f64| {
            let a: Tensor<f64> = normal(&[n, n], s, rng);
            let mut c = a.matmul(&a.transpose2());
            linalg::add_diagonal(&mut c, 0.2);
            c
        };
        let params = LgssmParams {
            observation: Some(normal(&[m, d], 1.0, rng)),
            process: spd(rng, d, 0.5),
            noise: MeasurementNoise::Full(spd(rng, m, 0.5)),
            prior_mean: normal::<f64, _>(&[d], 1.0, rng).into_data(),
            prior_cov: spd(rng, d, 1.0),
        };
        let fs = (0..t.saturating_sub(1)).map(|_| normal(&[d, d], 0.6, rng)).collect();
        let w = (0..t).map(|_| normal::<f64, _>(&[m], 1.0, rng).into_data()).collect();
        (params, fs, w)
    }

    #[test]
    fn mixing_weights_are_convex() {
        let cfg = LgssmConfig { latent: 6, bases: 8, coeff_hidden: 5, basis_std: 0.3, ..LgssmConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Lgssm::new(&mut store, "lgssm", cfg, &mut rng).unwrap();
        let z = normal::<f64, _>(&[6], 2.0, &mut rng).into_data();
        let (alpha, f) = model.mix_transition(&store, &z).unwrap();
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let bases = store.get(model.bases_id());
        for i in 0..36 {
            let vals: Vec<f64> = (0..8).map(|k| bases.data()[k * 36 + i]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expect: f64 = (0..8).map(|k| alpha[k] * vals[k]).sum();
            assert!((f.data()[i] - expect).abs() < 1e-12);
            assert!(f.data()[i] >= lo - 1e-12 && f.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn single_basis_ignores_state() {
        let cfg = LgssmConfig { latent: 4, bases: 1, coeff_hidden: 3, basis_std: 0.3, ..LgssmConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = Lgssm::new(&mut store, "lgssm", cfg, &mut rng).unwrap();
        let (a, f) = model.mix_transition(&store, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(&f, &store.get(model.bases_id()).clone().reshape(&[4, 4]));
    }

    #[test]
    fn learned_model_initial_noise_and_inference() {
        let cfg = LgssmConfig { latent: 5, bases: 3, coeff_hidden: 4, ..LgssmConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Lgssm::new(&mut store, "lgssm", cfg, &mut rng).unwrap();
        for v in model.noise_variances(&store) {
            assert!((v - 0.1).abs() < 1e-12);
        }
        let w: Vec<Vec<f64>> = (0..4).map(|_| normal::<f64, _>(&[5], 1.0, &mut rng).into_data()).collect();
        let res = model.infer(&store, &w).unwrap();
        assert_eq!(res.len(), 4);
        for t in 1..4 {
            let (_, f) = model.mix_transition(&store, &res.filtered[t - 1].mean).unwrap();
            let rec = res.transitions[t].as_ref().unwrap();
            for (a, b) in f.data().iter().zip(rec.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(model.infer(&store, &[vec![0.0; 4]]).is_err());
    }

    #[test]
    fn sampling_degenerate_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let belief = GaussianBelief { mean: vec![1.0, -2.0], cov: Tensor::zeros(&[2, 2]) };
        let mut res = SmootherResult {
            filtered: vec![belief.clone()],
            predicted: vec![belief.clone()],
            smoothed: vec![belief],
            transitions: vec![None],
            log_likelihood: 0.0,
        };
        let s = sample_posterior(&res, 0, 10, &mut rng).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|x| x == &vec![1.0, -2.0]));
        assert!(sample_posterior(&res, 1, 1, &mut rng).is_err());
        assert!(sample_posterior(&res, 0, 0, &mut rng).is_err());

        res.smoothed[0].cov = Tensor::new(&[2, 2], vec![0.5, 0.2, 0.2, 0.3]);
        let n = 100_000;
        let s = sample_posterior(&res, 0, n, &mut rng).unwrap();
        for (i, var) in [(0, 0.5f64), (1, 0.3)] {
            let mean = s.iter().map(|x| x[i]).sum::<f64>() / n as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - res.smoothed[0].mean[i]).abs() < 5.0 * se);
        }
        res.smoothed[0].cov = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, -1.0]);
        assert!(sample_posterior(&res, 0, 1, &mut rng).is_err());
    }
}
