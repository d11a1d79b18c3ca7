//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 6-8 train 8 networks at full scale and take hours on one CPU
//! core. Checkpoints are kept under the cargo target directory; a later run
//! evaluates a stored checkpoint instead of retraining only when it was
//! produced by the identical run (same dataset hash and settings). Set
//! `RADARFLOW_ACCEPTANCE_FRESH=1` to retrain everything.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radarflow::autodiff::Graph;
use radarflow::baselines::{affine_interpolate, vvp_fit};
use radarflow::data::{Dataset, DatasetConfig};
use radarflow::experiment::{checkpoint_uncertainty, Experiment, ExperimentConfig, RunResult, RunSpec};
use radarflow::grid::{Frame, GridGeometry, NormalizationSpec, ScalarField, VectorField};
use radarflow::harness::{Method, Stat};
use radarflow::lgssm::{LgssmParams, MeasurementNoise};
use radarflow::model::{Model, ModelConfig};
use radarflow::neural::{sequence_input, NetworkConfig};
use radarflow::objective::physics_loss_physical;
use radarflow::params::{normal, ParamId, ParamStore};
use radarflow::radar::{build_projections, forward, Observation, RadarConfig, RadarRange, RadarSet};
use radarflow::synth::{ftcs_step, generate_many, SimulationConfig};
use radarflow::tensor::Tensor;

type Check = Result<(bool, String), String>;

fn run(number: usize, title: &str, f: &dyn Fn() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {number} [{}] {title}: {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    pass
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|x| x.to_string())
}

// ---------------------------------------------------------------- criterion 1

fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let a: Tensor<f64> = normal(&[n, n], 0.7, rng);
    let mut c = a.matmul(&a.transpose2());
    for i in 0..n {
        c.data_mut()[i * n + i] += 0.05;
    }
    c
}

/// Smoothed marginals by conditioning the joint Gaussian of all states and
/// measurements on the measurements.
fn dense_marginals(p: &LgssmParams<f64>, fs: &[Tensor<f64>], w: &[Vec<f64>]) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let d = p.prior_mean.len();
    let h = to_na(p.observation.as_ref().expect("explicit observation matrix"));
    let m = h.nrows();
    let t = w.len();
    let q = to_na(&p.process);
    let r = match &p.noise {
        MeasurementNoise::Full(r) => to_na(r),
        MeasurementNoise::Diagonal(r) => DMatrix::from_diagonal(&DVector::from_vec(r.clone())),
    };
    // z = L [z_1; e_2; ...; e_T] with z_s = F_{s-1} z_{s-1} + e_s.
    let mut lift = DMatrix::zeros(d * t, d * t);
    for s in 0..t {
        lift.view_mut((d * s, d * s), (d, d)).fill_with_identity();
    }
    for s in 1..t {
        for u in 0..s {
            let prev = lift.view((d * (s - 1), d * u), (d, d)).clone_owned();
            lift.view_mut((d * s, d * u), (d, d)).copy_from(&(to_na(&fs[s - 1]) * prev));
        }
    }
    let mut base_mu = DVector::zeros(d * t);
    base_mu.rows_mut(0, d).copy_from(&DVector::from_vec(p.prior_mean.clone()));
    let mut base_cov = DMatrix::zeros(d * t, d * t);
    base_cov.view_mut((0, 0), (d, d)).copy_from(&to_na(&p.prior_cov));
    for s in 1..t {
        base_cov.view_mut((d * s, d * s), (d, d)).copy_from(&q);
    }
    let mu = &lift * base_mu;
    let cov = &lift * base_cov * lift.transpose();
    let mut hb = DMatrix::zeros(m * t, d * t);
    let mut rb = DMatrix::zeros(m * t, m * t);
    for s in 0..t {
        hb.view_mut((m * s, d * s), (m, d)).copy_from(&h);
        rb.view_mut((m * s, m * s), (m, m)).copy_from(&r);
    }
    let wv = DVector::from_iterator(m * t, w.iter().flatten().copied());
    let s_ww = &hb * &cov * hb.transpose() + rb;
    let s_zw = &cov * hb.transpose();
    let chol = s_ww.cholesky().expect("joint measurement covariance is positive definite");
    let post_mu = &mu + &s_zw * chol.solve(&(wv - &hb * &mu));
    let post_cov = &cov - &s_zw * chol.solve(&s_zw.transpose());
    let means = (0..t).map(|s| post_mu.rows(d * s, d).clone_owned()).collect();
    let covs = (0..t).map(|s| post_cov.view((d * s, d * s), (d, d)).clone_owned()).collect();
    (means, covs)
}

fn smoother_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20240101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=4);
        let t = rng.gen_range(2..=6);
        let params = LgssmParams {
            observation: Some(normal(&[m, d], 1.0, &mut rng)),
            process: random_psd(&mut rng, d),
            noise: MeasurementNoise::Full(random_psd(&mut rng, m)),
            prior_mean: normal::<f64, _>(&[d], 1.0, &mut rng).into_data(),
            prior_cov: random_psd(&mut rng, d),
        };
        let fs: Vec<Tensor<f64>> = (0..t - 1).map(|_| normal(&[d, d], 0.6, &mut rng)).collect();
        let w: Vec<Vec<f64>> = (0..t).map(|_| normal::<f64, _>(&[m], 1.0, &mut rng).into_data()).collect();
        let res = e(params.infer(&fs, &w))?;
        let (means, covs) = dense_marginals(&params, &fs, &w);
        for s in 0..t {
            let b = &res.smoothed[s];
            for i in 0..d {
                worst = worst.max((b.mean[i] - means[s][i]).abs());
                for j in 0..d {
                    worst = worst.max((b.cov.data()[i * d + j] - covs[s][(i, j)]).abs());
                }
            }
        }
    }
    Ok((worst <= 1e-8, format!("100 random models, max abs deviation {worst:.2e} (tolerance 1e-8)")))
}

// ---------------------------------------------------------------- criterion 2

struct Tiny {
    model: Model,
    store: ParamStore<f64>,
    input: Tensor<f64>,
    rs: RadarSet<f64>,
    obs: Vec<Observation<f64>>,
    spec: NormalizationSpec,
}

fn tiny() -> Result<Tiny, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let geom = e(GridGeometry::square(8, 2.8, 0.025))?;
    let network = NetworkConfig { k: 8, l: 8, radars: 1, latent: 8, channels: [4, 6, 8], bases: 2, coeff_hidden: 5 };
    let mut cfg = ModelConfig::for_network(network);
    cfg.basis_std = 0.2;
    let mut store = ParamStore::new();
    let model = e(Model::new(&mut store, cfg, &mut rng))?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("bias") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let rs = e(build_projections(&[RadarConfig { position: (1.1, 1.6), range: RadarRange::Finite(1.2) }], &geom))?;
    let mut obs = Vec::new();
    for t in 0..3 {
        let c = geom.cells();
        let mut r = |s: f64| (0..c).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
        let v = e(VectorField::new(geom, r(0.5), r(0.5)))?;
        let q = e(ScalarField::new(geom, r(0.8)))?;
        obs.push(e(forward(&v, &q, &rs, t))?);
    }
    let input = e(sequence_input(&obs, &rs))?;
    let spec = e(NormalizationSpec::new(-0.6, 0.7, -4.0, 1.0))?;
    Ok(Tiny { model, store, input, rs, obs, spec })
}

fn tiny_loss(t: &Tiny, store: &ParamStore<f64>) -> Result<f64, String> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = e(t.model.forward(&mut g, &p, &t.input, &t.rs, &t.obs, &t.spec))?;
    Ok(g.value(out.objective.total).item())
}

fn gradient_check() -> Check {
    let t = tiny()?;
    let mut g = Graph::new();
    let p = t.store.bind(&mut g);
    let out = e(t.model.forward(&mut g, &p, &t.input, &t.rs, &t.obs, &t.spec))?;
    let grads = g.backward(out.objective.total);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    for (prefix, n) in [("encoder", 5), ("decoder", 5), ("lgssm.transition_bases", 4), ("lgssm.coeff", 4), ("lgssm.noise_raw", 2)] {
        let ids: Vec<ParamId> = t.store.ids().filter(|id| t.store.name(*id).starts_with(prefix)).collect();
        if ids.is_empty() {
            return Err(format!("no parameters under {prefix}"));
        }
        for _ in 0..n {
            let id = ids[rng.gen_range(0..ids.len())];
            picks.push((id, rng.gen_range(0..t.store.get(id).len())));
        }
    }
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, j) in &picks {
        let analytic = grads.get(p.var(*id)).map_or(0.0, |gt| gt.data()[*j]);
        let mut plus = t.store.clone();
        plus.get_mut(*id).data_mut()[*j] += h;
        let mut minus = t.store.clone();
        minus.get_mut(*id).data_mut()[*j] -= h;
        let numeric = (tiny_loss(&t, &plus)? - tiny_loss(&t, &minus)?) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    Ok((worst <= 1e-4, format!("{} parameters, max relative error {worst:.2e} (tolerance 1e-4)", picks.len())))
}

// ---------------------------------------------------------------- criterion 3

fn mass_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = e(GridGeometry::square(32, 2.8, 0.025))?;
    let c = g.cells();
    let mut rho: ScalarField<f64> = e(ScalarField::new(g, (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()))?;
    let v = e(VectorField::new(g, (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(), (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()))?;
    let m0 = rho.sum();
    for _ in 0..500 {
        rho = e(ftcs_step(&rho, &v, 0.001))?;
    }
    let rel = ((rho.sum() - m0) / m0).abs();
    Ok((rel <= 1e-9, format!("500 FTCS steps, relative mass change {rel:.2e} (tolerance 1e-9)")))
}

// ---------------------------------------------------------------- criterion 4

fn forward_and_vvp() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = e(GridGeometry::square(32, 2.8, 0.025))?;
    let c = g.cells();
    let radars: Vec<RadarConfig> = (0..3)
        .map(|_| RadarConfig { position: (rng.gen_range(0.2..2.6), rng.gen_range(0.2..2.6)), range: RadarRange::Finite(1.0) })
        .collect();
    let rs = e(build_projections::<f64>(&radars, &g))?;
    let v = e(VectorField::new(g, (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(), (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()))?;
    let q = e(ScalarField::new(g, (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()))?;
    let obs = e(forward(&v, &q, &rs, 0))?;
    let mut mismatches = 0;
    let mut measured = 0;
    for (n, r) in radars.iter().enumerate() {
        for k in 0..g.k {
            for l in 0..g.l {
                let i = k * g.l + l;
                let (x, y) = (g.origin.0 + k as f64 * g.dx, g.origin.1 + l as f64 * g.dy);
                let (dx, dy) = (x - r.position.0, y - r.position.1);
                let dist = dx.hypot(dy);
                let inside = dist > 0.0 && dist <= 1.0;
                let (er, eq) = if inside { (dx / dist * v.vx()[i] + dy / dist * v.vy()[i], q.values()[i]) } else { (0.0, 0.0) };
                measured += inside as usize;
                if obs.radial[n * c + i].to_bits() != er.to_bits() || obs.log_density[n * c + i].to_bits() != eq.to_bits() {
                    mismatches += 1;
                }
            }
        }
    }

    let uniform = (0.37, -0.21);
    let far: Vec<RadarConfig> = radars.iter().map(|r| RadarConfig { range: RadarRange::Unlimited, ..*r }).collect();
    let rs_far = e(build_projections::<f64>(&far, &g))?;
    let field = e(VectorField::uniform(g, uniform))?;
    let o = e(forward(&field, &q, &rs_far, 0))?;
    let mut vvp_err: f64 = 0.0;
    for n in 0..far.len() {
        let (ax, ay) = rs_far.projection(n);
        let est = e(vvp_fit(&o.radial[n * c..(n + 1) * c], ax, ay, rs_far.mask(n)))?;
        vvp_err = vvp_err.max((est.velocity.0 - uniform.0).abs()).max((est.velocity.1 - uniform.1).abs());
    }

    let same = vec![uniform; 3];
    let positions: Vec<(f64, f64)> = radars.iter().map(|r| r.position).collect();
    let interp = e(affine_interpolate(&same, &positions, &g))?;
    let exact =
        interp.vx().iter().all(|x| x.to_bits() == uniform.0.to_bits()) && interp.vy().iter().all(|y| y.to_bits() == uniform.1.to_bits());

    let pass = mismatches == 0 && measured > 0 && vvp_err <= 1e-10 && exact;
    Ok((
        pass,
        format!(
            "forward: {mismatches} of {} cells differ from the brute-force oracle ({measured} in range); VVP uniform-field error {vvp_err:.1e} (tolerance 1e-10); interpolation of identical estimates exact: {exact}",
            3 * c
        ),
    ))
}

// ---------------------------------------------------------------- criterion 5

fn physics_consistency() -> Check {
    let seqs = e(generate_many(&SimulationConfig::default(), 7, 0, 10))?;
    let mut worst_truth: f64 = 0.0;
    let mut worst_ratio = f64::INFINITY;
    for s in &seqs {
        let truth = e(physics_loss_physical(&s.fields))?;
        let negated = e(s.fields.map_frames(|f| Ok(Frame { velocity: f.velocity.map(|x| -x)?, scalar: f.scalar.clone() })))?;
        let neg = e(physics_loss_physical(&negated))?;
        worst_truth = worst_truth.max(truth);
        worst_ratio = worst_ratio.min(neg / truth);
    }
    Ok((
        worst_truth < 1e-5 && worst_ratio >= 100.0,
        format!("10 sequences, max L_physics {worst_truth:.2e} (< 1e-5), min negated/true ratio {worst_ratio:.0} (>= 100)"),
    ))
}

// ------------------------------------------------------------ criteria 6 to 8

struct Trained {
    ours: Vec<RunResult>,
    vae: Vec<RunResult>,
    vvp: RunResult,
    dataset: Dataset,
}

const SEEDS: [u64; 2] = [1, 2];
const RANGES: [RadarRange; 3] = [RadarRange::Finite(1.0), RadarRange::Finite(2.0), RadarRange::Unlimited];

fn acceptance_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn train_all() -> Result<Trained, String> {
    let config = DatasetConfig { n_train: 200, n_test: 50, master_seed: 7, ..DatasetConfig::default() };
    let dataset = e(Dataset::generate(config))?;
    let exp = e(Experiment::new(&dataset, ExperimentConfig::for_dataset(&dataset, 128)))?;
    let dir = acceptance_dir().join("checkpoints");
    e(std::fs::create_dir_all(&dir))?;
    let reuse = std::env::var("RADARFLOW_ACCEPTANCE_FRESH").map_or(true, |v| v.is_empty() || v == "0");
    let go = |method: Method, range: RadarRange, seed: u64| -> Result<RunResult, String> {
        let spec = RunSpec { method, range, n_train: 200, seed };
        let start = Instant::now();
        let r = e(exp.run(&spec, Some(&dir), reuse))?;
        let q = r.summary.rmse_q.map_or("--".into(), |q| format!("{q:.4}"));
        println!(
            "    {:<18} RMSE_v {:.4}  RMSE_q {q:<7} epoch {:>3}  {}",
            spec.id(),
            r.summary.rmse_v,
            r.checkpoint.as_ref().map_or(0, |c| c.info.epoch),
            if r.reused { "reused checkpoint".to_string() } else { format!("{:.0}s", start.elapsed().as_secs_f64()) }
        );
        Ok(r)
    };
    let vvp = go(Method::Vvp, RadarRange::Finite(2.0), 1)?;
    let mut ours = Vec::new();
    for range in RANGES {
        for seed in SEEDS {
            ours.push(go(Method::Ours, range, seed)?);
        }
    }
    let mut vae = Vec::new();
    for seed in SEEDS {
        vae.push(go(Method::Vae, RadarRange::Finite(2.0), seed)?);
    }
    Ok(Trained { ours, vae, vvp, dataset })
}

fn stat(xs: &[f64]) -> Stat {
    Stat::of(xs).unwrap_or(Stat { mean: f64::NAN, sd: f64::NAN, n: 0 })
}

fn ours_at(t: &Trained, range: RadarRange) -> Vec<&RunResult> {
    t.ours.iter().filter(|r| r.spec.range == range).collect()
}

fn table_ordering(t: &Trained) -> Check {
    let d2 = ours_at(t, RadarRange::Finite(2.0));
    let ov = stat(&d2.iter().map(|r| r.summary.rmse_v).collect::<Vec<_>>());
    let oq = stat(&d2.iter().map(|r| r.summary.rmse_q.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let av = stat(&t.vae.iter().map(|r| r.summary.rmse_v).collect::<Vec<_>>());
    let aq = stat(&t.vae.iter().map(|r| r.summary.rmse_q.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let vv = t.vvp.summary.rmse_v;
    let pass = ov.mean < vv && ov.mean < av.mean && oq.mean < aq.mean;
    Ok((pass, format!("d=2, n_train=200: RMSE_v ours {ov} vs VVP {vv:.4} vs VAE {av}; RMSE_q ours {oq} vs VAE {aq}")))
}

fn range_monotonicity(t: &Trained) -> Check {
    let per = |range: RadarRange, f: fn(&RunResult) -> f64| stat(&ours_at(t, range).iter().map(|r| f(r)).collect::<Vec<_>>());
    let fv: fn(&RunResult) -> f64 = |r| r.summary.rmse_v;
    let fq: fn(&RunResult) -> f64 = |r| r.summary.rmse_q.unwrap_or(f64::NAN);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f) in [("RMSE_v", fv), ("RMSE_q", fq)] {
        let s: Vec<Stat> = RANGES.iter().map(|r| per(*r, f)).collect();
        let pooled = (s.iter().map(|x| x.sd * x.sd).sum::<f64>() / s.len() as f64).sqrt();
        let ok = s[1].mean <= s[0].mean + pooled && s[2].mean <= s[1].mean + pooled;
        pass &= ok;
        parts.push(format!("{name} d=1 {} / d=2 {} / d=inf {} (slack {pooled:.4})", s[0], s[1], s[2]));
    }
    Ok((pass, parts.join("; ")))
}

fn uncertainty_shape(t: &Trained) -> Check {
    let d2 = ours_at(t, RadarRange::Finite(2.0));
    let n_seq = 20;
    let mut std_v = Vec::new();
    let mut std_q = Vec::new();
    for r in &d2 {
        let ckpt = r.checkpoint.as_ref().ok_or("missing checkpoint")?;
        let c = e(checkpoint_uncertainty(ckpt, &t.dataset, RadarRange::Finite(2.0), n_seq, 10, 1))?;
        if c.sequences < 20 {
            return Err(format!("only {} test sequences", c.sequences));
        }
        std_v.push(c.std_v);
        std_q.push(c.std_q);
    }
    let avg = |curves: &[Vec<f64>]| -> Vec<f64> {
        (0..curves[0].len()).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect()
    };
    let (sv, sq) = (avg(&std_v), avg(&std_q));
    let len = sv.len();
    let mid = len / 4..len - len / 4;
    let min_mid = |c: &[f64]| c[mid.clone()].iter().cloned().fold(f64::INFINITY, f64::min);
    let (mv, mq) = (min_mid(&sv), min_mid(&sq));
    let pass = sv[0] > mv && sq[len - 1] > mq;
    Ok((
        pass,
        format!(
            "{n_seq} test sequences x {} models, 10 samples: velocity std t=1 {:.4} vs mid minimum {mv:.4}; log-density std t=T {:.4} vs mid minimum {mq:.4} (mid = t {}..{})",
            d2.len(),
            sv[0],
            sq[len - 1],
            mid.start + 1,
            mid.end
        ),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn cli_pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let bin = env!("CARGO_BIN_EXE_radarflow");
    let _ = std::fs::remove_dir_all(dir);
    let data = dir.join("dataset");
    let steps: Vec<Vec<String>> = vec![
        vec!["generate", "--n-train", "8", "--n-test", "3", "--grid", "16", "--frames", "5", "--seed", "11", "--out"]
            .into_iter()
            .map(String::from)
            .chain([data.display().to_string()])
            .collect(),
        ["train", "--d", "2", "--seed", "3", "--epochs", "2", "--batch-size", "3", "--latent", "8", "--data"]
            .into_iter()
            .map(String::from)
            .chain([data.display().to_string()])
            .collect(),
        vec![
            "evaluate".into(),
            "--checkpoint".into(),
            dir.join("ours-d2-n8-s3.ckpt").display().to_string(),
            "--test-set".into(),
            data.display().to_string(),
        ],
    ];
    for args in steps {
        let out = e(Command::new(bin).args(&args).env("RADARFLOW_OUT_DIR", dir).output())?;
        if !out.status.success() {
            return Err(format!("`radarflow {}` failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    let metrics = e(std::fs::read(dir.join("ours-d2-n8-s3.metrics.csv")))?;
    let report = e(std::fs::read(dir.join("ours-d2-n8-s3.report.csv")))?;
    Ok((metrics, report))
}

fn determinism() -> Check {
    let base = acceptance_dir().join("determinism");
    let a = cli_pipeline(&base.join("a"))?;
    let b = cli_pipeline(&base.join("b"))?;
    let rows = a.0.iter().filter(|c| **c == b'\n').count().saturating_sub(1);
    Ok((
        a == b && rows > 0,
        format!(
            "generate -> train -> evaluate twice: training CSV ({rows} rows) identical: {}, report CSV identical: {}",
            a.0 == b.0,
            a.1 == b.1
        ),
    ))
}

/// Criteria selected through `RADARFLOW_ACCEPTANCE_CRITERIA` (e.g. `1,2,9`); all by default.
fn selected() -> Vec<usize> {
    match std::env::var("RADARFLOW_ACCEPTANCE_CRITERIA") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // Cargo passes libtest flags (e.g. `--list` during discovery); nothing to list here.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let want = selected();
    let mut results = Vec::new();
    let mut check = |n: usize, title: &str, f: &dyn Fn() -> Check| {
        if want.contains(&n) {
            results.push(run(n, title, f));
        }
    };
    check(1, "smoother matches dense Gaussian conditioning", &smoother_oracle);
    check(2, "end-to-end gradient check", &gradient_check);
    check(3, "discrete mass conservation", &mass_conservation);
    check(4, "forward model and VVP exactness", &forward_and_vvp);
    check(5, "physics-loss consistency", &physics_consistency);
    let heavy = [(6, "method ordering at d = 2"), (7, "range monotonicity"), (8, "uncertainty shape")];
    if heavy.iter().any(|(n, _)| want.contains(n)) {
        println!("training runs for criteria 6-8 (n_train = 200, up to 100 epochs each):");
        match catch_unwind(AssertUnwindSafe(train_all)).unwrap_or_else(|_| Err("training panicked".into())) {
            Ok(t) => {
                check(6, heavy[0].1, &|| table_ordering(&t));
                check(7, heavy[1].1, &|| range_monotonicity(&t));
                check(8, heavy[2].1, &|| uncertainty_shape(&t));
            }
            Err(msg) => {
                for (n, title) in heavy {
                    check(n, title, &|| Err(msg.clone()));
                }
            }
        }
    }
    check(9, "determinism of the CLI pipeline", &determinism);
    let skipped: Vec<usize> = (1..=9).filter(|n| !want.contains(n)).collect();
    let passed = results.iter().filter(|p| **p).count();
    if !skipped.is_empty() {
        println!("criteria not selected: {skipped:?}");
    }
    println!("acceptance: {passed} of {} criteria passed in {:.0}s", results.len(), start.elapsed().as_secs_f64());
    if passed != results.len() {
        std::process::exit(1);
    }
}
