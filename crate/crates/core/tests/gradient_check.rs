use radarflow::autodiff::Graph;
use radarflow::grid::{GridGeometry, NormalizationSpec, ScalarField, VectorField};
use radarflow::model::{Model, ModelConfig};
use radarflow::neural::{sequence_input, NetworkConfig};
use radarflow::params::{ParamId, ParamStore};
use radarflow::radar::{build_projections, forward, Observation, RadarConfig, RadarRange, RadarSet};
use radarflow::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Tiny {
    model: Model,
    store: ParamStore<f64>,
    input: Tensor<f64>,
    rs: RadarSet<f64>,
    obs: Vec<Observation<f64>>,
    spec: NormalizationSpec,
}

fn tiny(seed: u64) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = GridGeometry::square(8, 2.8, 0.025).unwrap();
    let network = NetworkConfig { k: 8, l: 8, radars: 1, latent: 8, channels: [4, 6, 8], bases: 2, coeff_hidden: 5 };
    let mut cfg = ModelConfig::for_network(network);
    cfg.basis_std = 0.2;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg, &mut rng).unwrap();
    // Non-zero biases so that every parameter influences the loss.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("bias") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let rs = build_projections(&[RadarConfig { position: (1.1, 1.6), range: RadarRange::Finite(1.2) }], &geom).unwrap();
    let obs: Vec<_> = (0..3)
        .map(|t| {
            let c = geom.cells();
            let mut r = |s: f64| (0..c).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
            let v = VectorField::new(geom, r(0.5), r(0.5)).unwrap();
            let q = ScalarField::new(geom, r(0.8)).unwrap();
            forward(&v, &q, &rs, t).unwrap()
        })
        .collect();
    let input = sequence_input(&obs, &rs).unwrap();
    let spec = NormalizationSpec::new(-0.6, 0.7, -4.0, 1.0).unwrap();
    Tiny { model, store, input, rs, obs, spec }
}

fn loss(t: &Tiny, store: &ParamStore<f64>) -> f64 {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = t.model.forward(&mut g, &p, &t.input, &t.rs, &t.obs, &t.spec).unwrap();
    g.value(out.objective.total).item()
}

fn pick(store: &ParamStore<f64>, prefix: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().filter(|id| store.name(*id).starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    (0..n)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..store.get(id).len()))
        })
        .collect()
}

#[test]
fn full_pipeline_matches_central_differences() {
    let t = tiny(3);
    let mut g = Graph::new();
    let p = t.store.bind(&mut g);
    let out = t.model.forward(&mut g, &p, &t.input, &t.rs, &t.obs, &t.spec).unwrap();
    let b = out.objective.breakdown(&g);
    assert!(b.recons > 0.0 && b.physics > 0.0);
    assert!((b.total - b.recons - b.physics).abs() < 1e-12);
    let grads = g.backward(out.objective.total);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut picks = Vec::new();
    for (prefix, n) in [("encoder", 5), ("decoder", 5), ("lgssm.transition_bases", 4), ("lgssm.coeff", 4), ("lgssm.noise_raw", 2)] {
        picks.extend(pick(&t.store, prefix, n, &mut rng));
    }
    assert_eq!(picks.len(), 20);
    let h = 1e-5;
    for (id, j) in picks {
        let analytic = grads.get(p.var(id)).map_or(0.0, |gt| gt.data()[j]);
        let mut plus = t.store.clone();
        plus.get_mut(id).data_mut()[j] += h;
        let mut minus = t.store.clone();
        minus.get_mut(id).data_mut()[j] -= h;
        let numeric = (loss(&t, &plus) - loss(&t, &minus)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!((analytic - numeric).abs() <= 1e-4 * scale, "{}[{j}]: analytic {analytic:e} numeric {numeric:e}", t.store.name(id));
    }
}

#[test]
fn constant_loss_has_zero_gradients() {
    let t = tiny(4);
    let mut g = Graph::new();
    let p = t.store.bind(&mut g);
    let out = t.model.forward(&mut g, &p, &t.input, &t.rs, &t.obs, &t.spec).unwrap();
    let zero = g.scale(out.objective.total, 0.0);
    let grads = g.backward(zero);
    for id in t.store.ids() {
        if let Some(gt) = grads.get(p.var(id)) {
            assert!(gt.data().iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn quadratic_head_on_encoder_matches_hand_gradient() {
    let t = tiny(5);
    let mut g = Graph::new();
    let p = t.store.bind(&mut g);
    let x = g.constant(t.input.clone());
    let w = t.model.encoder().forward(&mut g, &p, x).unwrap();
    let sq = g.square(w);
    let l = g.sum(sq);
    let grads = g.backward(l);
    // d/db sum_t ||W h_t + b||^2 = 2 sum_t w_t for the final bias.
    let bias = t.store.find("encoder.fc.bias").unwrap();
    let wv = g.value(w);
    let (rows, cols) = wv.dims2();
    let got = grads.get(p.var(bias)).unwrap();
    for c in 0..cols {
        let expect: f64 = (0..rows).map(|r| 2.0 * wv.data()[r * cols + c]).sum();
        assert!((got.data()[c] - expect).abs() < 1e-10);
    }
}
