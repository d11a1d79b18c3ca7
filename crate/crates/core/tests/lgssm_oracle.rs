use nalgebra::{DMatrix, DVector};
use radarflow::lgssm::{LgssmParams, MeasurementNoise};
use radarflow::params::normal;
use radarflow::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

fn spd(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Tensor<f64> {
    let a: Tensor<f64> = normal(&[n, n], s, rng);
    let mut c = a.matmul(&a.transpose2());
    for i in 0..n {
        c.data_mut()[i * n + i] += 0.2;
    }
    c
}

struct Problem {
    params: LgssmParams<f64>,
    transitions: Vec<Tensor<f64>>,
    w: Vec<Vec<f64>>,
}

fn problem(seed: u64, d: usize, m: usize, t: usize, full_noise: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if full_noise {
        MeasurementNoise::Full(spd(&mut rng, m, 0.5))
    } else {
        MeasurementNoise::Diagonal((0..m).map(|i| 0.3 + 0.1 * i as f64).collect())
    };
    let params = LgssmParams {
        observation: Some(normal(&[m, d], 1.0, &mut rng)),
        process: spd(&mut rng, d, 0.5),
        noise,
        prior_mean: normal::<f64, _>(&[d], 1.0, &mut rng).into_data(),
        prior_cov: spd(&mut rng, d, 1.0),
    };
    let transitions = (0..t - 1).map(|_| normal(&[d, d], 0.6, &mut rng)).collect();
    let w = (0..t).map(|_| normal::<f64, _>(&[m], 1.0, &mut rng).into_data()).collect();
    Problem { params, transitions, w }
}

/// Conditions the joint Gaussian over (z_1..z_T, w_1..w_T) on the observed w.
/// Returns per-step marginal means/covariances and the log-density of w.
fn dense_oracle(p: &Problem) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, f64) {
    let d = p.params.prior_mean.len();
    let h = to_na(p.params.observation.as_ref().unwrap());
    let m = h.nrows();
    let t = p.w.len();
    let q = to_na(&p.params.process);
    let r = match &p.params.noise {
        MeasurementNoise::Full(r) => to_na(r),
        MeasurementNoise::Diagonal(r) => DMatrix::from_diagonal(&DVector::from_vec(r.clone())),
    };
    let fs: Vec<DMatrix<f64>> = p.transitions.iter().map(to_na).collect();

    // Linear map from (z_1, e_2..e_T) to z: z_t = F_t z_{t-1} + e_t.
    let mut mu = DVector::zeros(d * t);
    let mut big = DMatrix::zeros(d * t, d * t);
    mu.rows_mut(0, d).copy_from(&DVector::from_vec(p.params.prior_mean.clone()));
    big.view_mut((0, 0), (d, d)).copy_from(&to_na(&p.params.prior_cov));
    for s in 1..t {
        let prev_mu = mu.rows(d * (s - 1), d).clone_owned();
        mu.rows_mut(d * s, d).copy_from(&(&fs[s - 1] * prev_mu));
    }
    // Covariance of z: Cov(z_s, z_u) assembled by pushing covariance forward.
    for s in 1..t {
        let f = &fs[s - 1];
        let prev_block = big.view((d * (s - 1), 0), (d, d * s)).clone_owned();
        let row = f * prev_block;
        big.view_mut((d * s, 0), (d, d * s)).copy_from(&row);
        big.view_mut((0, d * s), (d * s, d)).copy_from(&row.transpose());
        let prev_diag = big.view((d * (s - 1), d * (s - 1)), (d, d)).clone_owned();
        let diag = f * prev_diag * f.transpose() + &q;
        big.view_mut((d * s, d * s), (d, d)).copy_from(&diag);
    }
    let mut hb = DMatrix::zeros(m * t, d * t);
    let mut rb = DMatrix::zeros(m * t, m * t);
    for s in 0..t {
        hb.view_mut((m * s, d * s), (m, d)).copy_from(&h);
        rb.view_mut((m * s, m * s), (m, m)).copy_from(&r);
    }
    let w = DVector::from_iterator(m * t, p.w.iter().flatten().copied());
    let mu_w = &hb * &mu;
    let s_ww = &hb * &big * hb.transpose() + rb;
    let s_zw = &big * hb.transpose();
    let chol = s_ww.clone().cholesky().unwrap();
    let innov = &w - &mu_w;
    let post_mu = &mu + &s_zw * chol.solve(&innov);
    let post_cov = &big - &s_zw * chol.solve(&s_zw.transpose());

    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = innov.dot(&chol.solve(&innov));
    let loglik = -0.5 * (quad + logdet + (m * t) as f64 * (2.0 * std::f64::consts::PI).ln());

    let means = (0..t).map(|s| post_mu.rows(d * s, d).clone_owned()).collect();
    let covs = (0..t).map(|s| post_cov.view((d * s, d * s), (d, d)).clone_owned()).collect();
    (means, covs, loglik)
}

#[test]
fn smoother_matches_dense_conditioning() {
    let cases = [(1, 1, 1, 1), (2, 2, 1, 3), (3, 4, 3, 6), (4, 3, 4, 5), (5, 4, 2, 6), (6, 1, 2, 4), (7, 2, 4, 2)];
    for (seed, d, m, t) in cases {
        for full in [false, true] {
            let p = problem(seed, d, m, t, full);
            let res = p.params.infer(&p.transitions, &p.w).unwrap();
            let (means, covs, loglik) = dense_oracle(&p);
            for s in 0..t {
                let b = &res.smoothed[s];
                for i in 0..d {
                    assert!((b.mean[i] - means[s][i]).abs() < 1e-8, "seed {seed} t={s} mean[{i}]");
                    for j in 0..d {
                        let got = b.cov.data()[i * d + j];
                        assert!((got - covs[s][(i, j)]).abs() < 1e-8, "seed {seed} t={s} cov[{i},{j}]");
                    }
                }
            }
            assert!((res.log_likelihood - loglik).abs() < 1e-6, "seed {seed}: {} vs {loglik}", res.log_likelihood);
        }
    }
}

#[test]
fn identity_observation_matches_explicit_identity() {
    let mut p = problem(21, 3, 3, 4, false);
    p.params.observation = Some(Tensor::identity(3));
    let a = p.params.infer(&p.transitions, &p.w).unwrap();
    p.params.observation = None;
    let b = p.params.infer(&p.transitions, &p.w).unwrap();
    for (x, y) in a.smoothed.iter().zip(&b.smoothed) {
        for (u, v) in x.mean.iter().zip(&y.mean) {
            assert!((u - v).abs() < 1e-12);
        }
        for (u, v) in x.cov.data().iter().zip(y.cov.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
