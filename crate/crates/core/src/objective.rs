//! Training losses: the masked reconstruction loss in measurement space and
//! the discretized continuity-equation residual on decoded fields.
//!
//! Every loss exists twice: as a value function on fields, and as a graph
//! function on the decoder output `[T, 3, K, L]` so it can be differentiated.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grid::{FieldSequence, Frame, GridGeometry, NormalizationSpec, ScalarField, VectorField};
use crate::radar::{self, Observation, RadarSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recons: f64,
    pub physics: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub physics: bool,
    pub lambda_physics: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { physics: true, lambda_physics: 1.0 }
    }
}

impl ObjectiveConfig {
    pub fn reconstruction_only() -> Self {
        ObjectiveConfig { physics: false, lambda_physics: 0.0 }
    }

    pub fn weight(&self) -> f64 {
        if self.physics {
            self.lambda_physics
        } else {
            0.0
        }
    }

    pub fn combine(&self, recons: f64, physics: f64) -> LossBreakdown {
        LossBreakdown { recons, physics, total: recons + self.weight() * physics }
    }
}

/// Fluxes `j = v rho` at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct FluxField<S> {
    pub jx: Vec<S>,
    pub jy: Vec<S>,
}

pub fn flux<S: Scalar>(rho: &ScalarField<S>, v: &VectorField<S>) -> Result<FluxField<S>> {
    if !rho.geometry().same_shape(v.geometry()) {
        return Err(Error::Shape("density and velocity grids differ".into()));
    }
    let r = rho.values();
    Ok(FluxField { jx: v.vx().iter().zip(r).map(|(a, b)| *a * *b).collect(), jy: v.vy().iter().zip(r).map(|(a, b)| *a * *b).collect() })
}

/// Interior residual `rho_{t+1} - rho_t + dt div(j_t)` with centred
/// differences, laid out `(K - 2) x (L - 2)`.
pub fn physics_residual<S: Scalar>(
    rho: &ScalarField<S>,
    rho_next: &ScalarField<S>,
    v: &VectorField<S>,
    geometry: &GridGeometry,
) -> Result<Vec<S>> {
    if !geometry.same_shape(rho.geometry()) || !geometry.same_shape(rho_next.geometry()) {
        return Err(Error::Shape("densities do not match the geometry".into()));
    }
    let j = flux(rho, v)?;
    let (kk, ll) = (geometry.k, geometry.l);
    let cx = S::lit(geometry.dt / (2.0 * geometry.dx));
    let cy = S::lit(geometry.dt / (2.0 * geometry.dy));
    let (r0, r1) = (rho.values(), rho_next.values());
    let mut out = Vec::with_capacity((kk - 2) * (ll - 2));
    for k in 1..kk - 1 {
        for l in 1..ll - 1 {
            let i = k * ll + l;
            let div = cx * (j.jx[i + ll] - j.jx[i - ll]) + cy * (j.jy[i + 1] - j.jy[i - 1]);
            out.push(r1[i] - r0[i] + div);
        }
    }
    Ok(out)
}

/// Mean squared interior residual over `t = 1 .. T-1` of a sequence holding
/// physical velocities and linear densities.
pub fn physics_loss_physical<S: Scalar>(seq: &FieldSequence<S>) -> Result<f64> {
    let g = *seq.geometry();
    let frames = seq.frames();
    let mut acc = 0.0;
    let mut count = 0usize;
    for w in frames.windows(2) {
        for r in physics_residual(&w[0].scalar, &w[1].scalar, &w[0].velocity, &g)? {
            let r = r.to_f64_lossy();
            acc += r * r;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Converts a normalized (velocity, log-density) sequence to physical
/// velocities and densities, clamping log-densities to the normalization
/// range before exponentiating.
pub fn to_physical<S: Scalar>(seq: &FieldSequence<S>, spec: &NormalizationSpec) -> Result<FieldSequence<S>> {
    spec.validate()?;
    let (vb, qb) = (spec.velocity, spec.log_density);
    let (lo, hi) = (S::lit(qb.min), S::lit(qb.max));
    seq.map_frames(|f| {
        Ok(Frame { velocity: f.velocity.map(|y| vb.from_unit(y))?, scalar: f.scalar.map(|y| qb.from_unit(y).max(lo).min(hi).exp())? })
    })
}

/// Physics loss of a decoded normalized sequence.
pub fn physics_loss<S: Scalar>(decoded: &FieldSequence<S>, spec: &NormalizationSpec) -> Result<f64> {
    physics_loss_physical(&to_physical(decoded, spec)?)
}

/// `(1/T) sum_t ||o_t - H(v_t, q_t)||^2`, with the squared norm averaged over
/// the `N K L` cells (each cell contributes its radial and log-density
/// channel). All fields in normalized units.
pub fn reconstruction_loss<S: Scalar>(decoded: &FieldSequence<S>, rs: &RadarSet<S>, obs: &[Observation<S>]) -> Result<f64> {
    if decoded.len() != obs.len() {
        return Err(Error::Shape(format!("{} decoded frames for {} observations", decoded.len(), obs.len())));
    }
    let per_frame = (rs.len() * rs.geometry().cells()) as f64;
    let mut acc = 0.0;
    for (f, o) in decoded.frames().iter().zip(obs) {
        let pred = radar::forward(&f.velocity, &f.scalar, rs, o.frame)?;
        if pred.radial.len() != o.radial.len() || pred.log_density.len() != o.log_density.len() {
            return Err(Error::Shape("observation size does not match the radar set".into()));
        }
        let mut s = 0.0;
        for (a, b) in pred.radial.iter().zip(&o.radial).chain(pred.log_density.iter().zip(&o.log_density)) {
            let d = (*a - *b).to_f64_lossy();
            s += d * d;
        }
        acc += s / per_frame;
    }
    Ok(acc / obs.len() as f64)
}

/// Splits a decoder output `[T, 3, K, L]` into a normalized sequence.
pub fn decoded_sequence<S: Scalar>(out: &Tensor<S>, geometry: &GridGeometry) -> Result<FieldSequence<S>> {
    let s = out.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != geometry.k || s[3] != geometry.l {
        return Err(Error::Shape(format!("decoder output {:?} does not match a {}x{} grid", s, geometry.k, geometry.l)));
    }
    let per = 3 * geometry.cells();
    let frames = out.data().chunks(per).map(|d| decoded_frame(d, geometry)).collect::<Result<Vec<_>>>()?;
    FieldSequence::new(frames)
}

/// Splits one decoded frame `[3, K, L]` into velocity and log-density.
pub fn decoded_frame<S: Scalar>(d: &[S], geometry: &GridGeometry) -> Result<Frame<S>> {
    let cells = geometry.cells();
    if d.len() != 3 * cells {
        return Err(Error::Shape(format!("{} values for a 3x{}x{} frame", d.len(), geometry.k, geometry.l)));
    }
    let ch = |c: usize| d[c * cells..(c + 1) * cells].to_vec();
    Ok(Frame { velocity: VectorField::new(*geometry, ch(0), ch(1))?, scalar: ScalarField::new(*geometry, ch(2))? })
}

fn channel<S: Scalar>(g: &mut Graph<S>, decoded: Var, c: usize) -> Var {
    let s = g.shape(decoded).to_vec();
    let x = g.slice(decoded, &[0, c, 0, 0], &[s[0], c + 1, s[2], s[3]]);
    g.reshape(x, &[s[0], s[2], s[3]])
}

fn check_decoded<S: Scalar>(g: &Graph<S>, decoded: Var, geometry: &GridGeometry) -> Result<usize> {
    let s = g.shape(decoded);
    if s.len() != 4 || s[1] != 3 || s[2] != geometry.k || s[3] != geometry.l {
        return Err(Error::Shape(format!("decoder output {:?} does not match a {}x{} grid", s, geometry.k, geometry.l)));
    }
    Ok(s[0])
}

/// Graph version of [`reconstruction_loss`] on a decoder output `[T, 3, K, L]`.
pub fn reconstruction_loss_tape<S: Scalar>(g: &mut Graph<S>, decoded: Var, rs: &RadarSet<S>, obs: &[Observation<S>]) -> Result<Var> {
    let geometry = *rs.geometry();
    let t = check_decoded(g, decoded, &geometry)?;
    if t != obs.len() {
        return Err(Error::Shape(format!("{t} decoded frames for {} observations", obs.len())));
    }
    let cells = geometry.cells();
    if obs.iter().any(|o| o.radial.len() != rs.len() * cells || o.log_density.len() != rs.len() * cells) {
        return Err(Error::Shape("observation size does not match the radar set".into()));
    }
    let shape = [t, geometry.k, geometry.l];
    let vx = channel(g, decoded, 0);
    let vy = channel(g, decoded, 1);
    let q = channel(g, decoded, 2);
    let tiled = |plane: &[S]| Tensor::from_fn(&shape, |i| plane[i % cells]);
    let mut terms = Vec::with_capacity(2 * rs.len());
    for n in 0..rs.len() {
        let (ax, ay) = rs.projection(n);
        let mask: Vec<S> = rs.mask(n).iter().map(|m| if *m { S::one() } else { S::zero() }).collect();
        let px = g.mul_const(vx, tiled(ax));
        let py = g.mul_const(vy, tiled(ay));
        let radial = g.add(px, py);
        let or = g.constant(Tensor::from_fn(&shape, |i| obs[i / cells].radial[n * cells + i % cells]));
        let dr = g.sub(radial, or);
        terms.push(g.square(dr));
        let pq = g.mul_const(q, tiled(&mask));
        let oq = g.constant(Tensor::from_fn(&shape, |i| obs[i / cells].log_density[n * cells + i % cells]));
        let dq = g.sub(pq, oq);
        terms.push(g.square(dq));
    }
    let all = g.stack(&terms);
    let total = g.sum(all);
    Ok(g.scale(total, S::lit(1.0 / (t * rs.len() * cells) as f64)))
}

/// Graph version of [`physics_loss`] on a decoder output `[T, 3, K, L]`.
pub fn physics_loss_tape<S: Scalar>(g: &mut Graph<S>, decoded: Var, spec: &NormalizationSpec, geometry: &GridGeometry) -> Result<Var> {
    spec.validate()?;
    let t = check_decoded(g, decoded, geometry)?;
    if t < 2 {
        return Err(Error::Shape("the physics loss needs at least two frames".into()));
    }
    let (kk, ll) = (geometry.k, geometry.l);
    let (vb, qb) = (spec.velocity, spec.log_density);
    let physical = |g: &mut Graph<S>, x: Var, b: crate::grid::Bounds| {
        let s = g.scale(x, S::lit(b.half_width()));
        g.offset(s, S::lit(0.5 * (b.min + b.max)))
    };
    let vx = channel(g, decoded, 0);
    let vx = physical(g, vx, vb);
    let vy = channel(g, decoded, 1);
    let vy = physical(g, vy, vb);
    let q = channel(g, decoded, 2);
    let q = physical(g, q, qb);
    let q = g.clamp(q, S::lit(qb.min), S::lit(qb.max));
    let rho = g.exp(q);
    let jx = g.mul(vx, rho);
    let jy = g.mul(vy, rho);

    let next = g.slice(rho, &[1, 1, 1], &[t, kk - 1, ll - 1]);
    let prev = g.slice(rho, &[0, 1, 1], &[t - 1, kk - 1, ll - 1]);
    let drho = g.sub(next, prev);
    let xp = g.slice(jx, &[0, 2, 1], &[t - 1, kk, ll - 1]);
    let xm = g.slice(jx, &[0, 0, 1], &[t - 1, kk - 2, ll - 1]);
    let dx = g.sub(xp, xm);
    let dx = g.scale(dx, S::lit(geometry.dt / (2.0 * geometry.dx)));
    let yp = g.slice(jy, &[0, 1, 2], &[t - 1, kk - 1, ll]);
    let ym = g.slice(jy, &[0, 1, 0], &[t - 1, kk - 1, ll - 2]);
    let dy = g.sub(yp, ym);
    let dy = g.scale(dy, S::lit(geometry.dt / (2.0 * geometry.dy)));
    let r = g.add(drho, dx);
    let r = g.add(r, dy);
    let sq = g.square(r);
    Ok(g.mean(sq))
}

/// Handles to the pieces of the combined objective on a graph.
#[derive(Clone, Copy, Debug)]
pub struct TapeObjective {
    pub recons: Var,
    pub physics: Option<Var>,
    pub total: Var,
}

impl TapeObjective {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        LossBreakdown {
            recons: g.value(self.recons).item().to_f64_lossy(),
            physics: self.physics.map_or(0.0, |p| g.value(p).item().to_f64_lossy()),
            total: g.value(self.total).item().to_f64_lossy(),
        }
    }
}

/// `L_recons + lambda L_physics` on a decoder output. The physics term is
/// still evaluated (for reporting) when disabled, but does not enter the total.
pub fn total_objective_tape<S: Scalar>(
    g: &mut Graph<S>,
    decoded: Var,
    rs: &RadarSet<S>,
    obs: &[Observation<S>],
    spec: &NormalizationSpec,
    cfg: &ObjectiveConfig,
) -> Result<TapeObjective> {
    let geometry = *rs.geometry();
    let recons = reconstruction_loss_tape(g, decoded, rs, obs)?;
    let physics = if obs.len() >= 2 { Some(physics_loss_tape(g, decoded, spec, &geometry)?) } else { None };
    let total = match physics {
        Some(p) if cfg.weight() != 0.0 => {
            let w = g.scale(p, S::lit(cfg.weight()));
            g.add(recons, w)
        }
        _ => recons,
    };
    Ok(TapeObjective { recons, physics, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::{build_projections, RadarConfig, RadarRange};
    use crate::synth::{generate_sequence, SimulationConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(n: usize) -> GridGeometry {
        GridGeometry::square(n, 2.8, 0.025).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, g: GridGeometry, t: usize, amp: f64) -> FieldSequence<f64> {
        let frames = (0..t)
            .map(|_| {
                let c = g.cells();
                let r = |rng: &mut ChaCha8Rng| (0..c).map(|_| rng.gen_range(-amp..amp)).collect::<Vec<f64>>();
                Frame { velocity: VectorField::new(g, r(rng), r(rng)).unwrap(), scalar: ScalarField::new(g, r(rng)).unwrap() }
            })
            .collect();
        FieldSequence::new(frames).unwrap()
    }

    fn to_tensor(seq: &FieldSequence<f64>) -> Tensor<f64> {
        let g = seq.geometry();
        let mut data = Vec::new();
        for f in seq.frames() {
            data.extend_from_slice(f.velocity.vx());
            data.extend_from_slice(f.velocity.vy());
            data.extend_from_slice(f.scalar.values());
        }
        Tensor::new(&[seq.len(), 3, g.k, g.l], data)
    }

    fn spec() -> NormalizationSpec {
        NormalizationSpec::new(-0.4, 0.5, -3.0, 1.5).unwrap()
    }

    #[test]
    fn residual_vanishes_on_static_and_uniform_fields() {
        let g = geom(6);
        let rho = ScalarField::filled(g, 0.7f64).unwrap();
        let still = VectorField::uniform(g, (0.0, 0.0)).unwrap();
        assert!(physics_residual(&rho, &rho, &still, &g).unwrap().iter().all(|r| *r == 0.0));
        let moving = VectorField::uniform(g, (0.3, -0.2)).unwrap();
        assert!(physics_residual(&rho, &rho, &moving, &g).unwrap().iter().all(|r| r.abs() < 1e-15));
        assert_eq!(physics_residual(&rho, &rho, &moving, &g).unwrap().len(), 16);
    }

    #[test]
    fn residual_scales_with_density_and_ignores_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = geom(6);
        let seq = random_seq(&mut rng, g, 2, 1.0);
        let rho0 = seq.frames()[0].scalar.map(|x| x.exp()).unwrap();
        let rho1 = seq.frames()[1].scalar.map(|x| x.exp()).unwrap();
        let v = &seq.frames()[0].velocity;
        let r = physics_residual(&rho0, &rho1, v, &g).unwrap();
        let r3 = physics_residual(&rho0.map(|x| 3.0 * x).unwrap(), &rho1.map(|x| 3.0 * x).unwrap(), v, &g).unwrap();
        for (a, b) in r.iter().zip(&r3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        let mut edited = rho1.values().to_vec();
        for k in 0..6 {
            edited[k * 6] = 99.0;
            edited[k * 6 + 5] = 99.0;
            edited[k] = 99.0;
            edited[30 + k] = 99.0;
        }
        let rho1b = ScalarField::new(g, edited).unwrap();
        let vb = VectorField::new(g, v.vx().iter().map(|_| 0.0).collect(), v.vy().iter().map(|_| 0.0).collect()).unwrap();
        let a = physics_residual(&rho0, &rho1, &vb, &g).unwrap();
        let b = physics_residual(&rho0, &rho1b, &vb, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tape_and_value_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = geom(8);
        let seq = random_seq(&mut rng, g, 3, 1.3);
        let rs = build_projections::<f64>(
            &[
                RadarConfig { position: (0.5, 0.7), range: RadarRange::Finite(1.0) },
                RadarConfig { position: (2.2, 2.0), range: RadarRange::Unlimited },
            ],
            &g,
        )
        .unwrap();
        let truth = random_seq(&mut rng, g, 3, 1.0);
        let obs: Vec<_> = truth.frames().iter().enumerate().map(|(t, f)| radar::forward(&f.velocity, &f.scalar, &rs, t).unwrap()).collect();
        let mut gr = Graph::new();
        let x = gr.constant(to_tensor(&seq));
        let rec = reconstruction_loss_tape(&mut gr, x, &rs, &obs).unwrap();
        let phys = physics_loss_tape(&mut gr, x, &spec(), &g).unwrap();
        let rv = reconstruction_loss(&seq, &rs, &obs).unwrap();
        let pv = physics_loss(&seq, &spec()).unwrap();
        assert!((gr.value(rec).item() - rv).abs() < 1e-12 * rv.max(1.0));
        assert!((gr.value(phys).item() - pv).abs() < 1e-12 * pv.max(1.0));
        assert!(rv > 0.0 && pv > 0.0);
        let back = decoded_sequence(&to_tensor(&seq), &g).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn reconstruction_loss_hand_value_and_masking() {
        let g = GridGeometry::new(3, 3, 1.0, 1.0, (0.0, 0.0), 0.1).unwrap();
        let rs = build_projections::<f64>(&[RadarConfig { position: (0.0, 0.0), range: RadarRange::Finite(1.05) }], &g).unwrap();
        let mask = rs.mask(0).to_vec();
        let on: Vec<usize> = (0..9).filter(|i| mask[*i]).collect();
        assert!(!on.is_empty() && on.len() < 9);
        let frame = Frame { velocity: VectorField::uniform(g, (0.0, 0.0)).unwrap(), scalar: ScalarField::filled(g, 0.0).unwrap() };
        let seq = FieldSequence::new(vec![frame.clone(), frame]).unwrap();
        let mut o = radar::forward(&seq.frames()[0].velocity, &seq.frames()[0].scalar, &rs, 0).unwrap();
        assert_eq!(reconstruction_loss(&seq, &rs, &[o.clone(), o.clone()]).unwrap(), 0.0);
        o.log_density[on[0]] = 0.2;
        let l = reconstruction_loss(&seq, &rs, &[o.clone(), o.clone()]).unwrap();
        assert!((l - 0.04 / 9.0).abs() < 1e-15);

        let mut edited = seq.clone().frames().to_vec();
        let off: Vec<usize> = (0..9).filter(|i| !mask[*i]).collect();
        let mut q = edited[0].scalar.values().to_vec();
        let mut vx = edited[0].velocity.vx().to_vec();
        for i in &off {
            q[*i] = 5.0;
            vx[*i] = -3.0;
        }
        edited[0].scalar = ScalarField::new(g, q).unwrap();
        edited[0].velocity = VectorField::new(g, vx, vec![0.0; 9]).unwrap();
        let edited = FieldSequence::new(edited).unwrap();
        assert_eq!(reconstruction_loss(&edited, &rs, &[o.clone(), o]).unwrap(), l);
    }

    #[test]
    fn doubling_residuals_quadruples_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = geom(6);
        let seq = random_seq(&mut rng, g, 4, 1.0);
        let phys = to_physical(&seq, &spec()).unwrap();
        let l1 = physics_loss_physical(&phys).unwrap();
        let doubled = phys.map_frames(|f| Ok(Frame { velocity: f.velocity.clone(), scalar: f.scalar.map(|x| 2.0 * x)? })).unwrap();
        let l2 = physics_loss_physical(&doubled).unwrap();
        assert!(l1 > 0.0);
        assert!((l2 / l1 - 4.0).abs() < 1e-9, "{}", l2 / l1);
    }

    #[test]
    fn generator_sequences_satisfy_the_physics() {
        let cfg = SimulationConfig { seed: 5, ..SimulationConfig::default() };
        let s = generate_sequence(&cfg).unwrap();
        let l = physics_loss_physical(&s.fields).unwrap();
        assert!(l < 1e-5, "{l}");
        let mut mean_abs = 0.0;
        let mut n = 0.0;
        let g = *s.fields.geometry();
        for w in s.fields.frames().windows(2) {
            for r in physics_residual(&w[0].scalar, &w[1].scalar, &w[0].velocity, &g).unwrap() {
                mean_abs += r.abs();
                n += 1.0;
            }
        }
        assert!(mean_abs / n < 1e-3);
    }

    #[test]
    fn disabled_physics_leaves_reconstruction() {
        let c = ObjectiveConfig::reconstruction_only();
        assert_eq!(c.combine(0.3, 7.0).total, 0.3);
        assert_eq!(ObjectiveConfig::default().combine(0.0, 0.0).total, 0.0);
        assert_eq!(ObjectiveConfig::default().combine(0.25, 0.5).total, 0.75);
    }
}
