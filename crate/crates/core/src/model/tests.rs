use super::*;
use crate::Grid2D;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(conditioning: Conditioning) -> ModelConfig {
    ModelConfig {
        channels: 4,
        layers: 1,
        modes_v: 2,
        modes_h: 2,
        groups: 2,
        conditioning,
        activation: Activation::Gelu,
        lift_width: 4,
        seed: 3,
    }
}

fn grid8() -> Grid2D {
    Grid2D::square(8, 25e-9).unwrap()
}

fn random_item<F: Real>(hw: usize, lambda: f64, seed: u64) -> TrainItem<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps_norm = Array2::from_shape_fn((1, hw), |_| F::of(rng.random_range(0.0..1.0)));
    let target = Array2::from_shape_fn((2, hw), |_| F::of(rng.random_range(-1.0..1.0)));
    let mut norm_sq = F::zero();
    for v in target.iter() {
        norm_sq = norm_sq + *v * *v;
    }
    TrainItem {
        lambda,
        eps_norm,
        target,
        target_norm_sq: norm_sq,
    }
}

#[test]
fn param_count_matches_shape_enumeration() {
    for conditioning in [Conditioning::Wime, Conditioning::Concat] {
        for (c, l, mv, mh, g) in [(4, 1, 2, 2, 2), (8, 2, 4, 4, 2), (12, 3, 5, 3, 4), (16, 2, 6, 8, 1)] {
            let cfg = ModelConfig {
                channels: c,
                layers: l,
                modes_v: mv,
                modes_h: mh,
                groups: g,
                conditioning,
                activation: Activation::Gelu,
                lift_width: c,
                seed: 0,
            };
            let zeros = Parameters::<f64>::zeros(&cfg);
            assert_eq!(cfg.param_count(), zeros.len(), "cfg {cfg:?}");
            assert_eq!(cfg.param_count(), zeros.flatten().len());
        }
    }
}

#[test]
fn spectral_count_matches_compressed_formula_at_g4() {
    // (C/G)^2 (Mv+Mh) == C^2 (Mv+Mh) / (4 G) exactly when G = 4.
    for (c, mv, mh) in [(32, 8, 8), (16, 4, 6), (64, 12, 10)] {
        let cfg = ModelConfig {
            channels: c,
            layers: 1,
            modes_v: mv,
            modes_h: mh,
            groups: 4,
            conditioning: Conditioning::Wime,
            activation: Activation::Gelu,
            lift_width: c,
            seed: 0,
        };
        let direct = cfg.spectral_complex_per_layer();
        assert_eq!(direct, c * c * (mv + mh) / (4 * 4));
    }
    // G = 1 degenerates to the unshared factorized count C^2 (Mv+Mh).
    let cfg = ModelConfig {
        channels: 8,
        layers: 1,
        modes_v: 3,
        modes_h: 5,
        groups: 1,
        conditioning: Conditioning::Wime,
        activation: Activation::Gelu,
        lift_width: 8,
        seed: 0,
    };
    assert_eq!(cfg.spectral_complex_per_layer(), 8 * 8 * (3 + 5));
}

#[test]
fn init_is_seeded_and_bounded() {
    let cfg = tiny_cfg(Conditioning::Wime);
    let a: Parameters<f64> = init_params(&cfg).unwrap();
    let b: Parameters<f64> = init_params(&cfg).unwrap();
    assert_eq!(a.flatten(), b.flatten());
    let mut cfg2 = cfg;
    cfg2.seed = 4;
    let c: Parameters<f64> = init_params(&cfg2).unwrap();
    assert_ne!(a.flatten(), c.flatten());

    // No parameter exceeds its init bound: 1/sqrt(fan_in) per 1x1 tensor.
    assert!(a.lift_eps.iter().all(|v| v.abs() <= 1.0)); // fan-in 1
    assert!(a.lift_prior.as_ref().unwrap().iter().all(|v| v.abs() <= 0.5));
    let c_bound = 1.0 / (cfg.channels as f64).sqrt();
    for l in &a.layers {
        assert!(l.pointwise_w.iter().all(|v| v.abs() <= c_bound));
        assert!(l.prior_proj.as_ref().unwrap().iter().all(|v| v.abs() <= c_bound));
    }
    assert!(a.head.iter().all(|v| v.abs() <= c_bound));
    // Spectral entries stay within their own scale.
    let s = 1.0 / (cfg.channels as f64 * cfg.modes_v.max(cfg.modes_h) as f64);
    for l in &a.layers {
        for v in l.spectral_v.iter().chain(l.spectral_h.iter()) {
            assert!(v.re.abs() <= s && v.im.abs() <= s);
        }
    }
    // Biases start at zero.
    for l in &a.layers {
        assert!(l.pointwise_b.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_shape_and_determinism() {
    for conditioning in [Conditioning::Wime, Conditioning::Concat] {
        let model: Model<f64> = Model::new(tiny_cfg(conditioning), grid8(), 4.0).unwrap();
        let item = random_item::<f64>(64, 500e-9, 9);
        let prior = model.prior_channels(500e-9).unwrap();
        let (a, _) = model.forward_cached(&item.eps_norm, &prior);
        let (b, _) = model.forward_cached(&item.eps_norm, &prior);
        assert_eq!(a.dim(), (2, 64));
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn different_wavelengths_change_the_output() {
    let model: Model<f64> = Model::new(tiny_cfg(Conditioning::Wime), grid8(), 4.0).unwrap();
    let item = random_item::<f64>(64, 500e-9, 10);
    let p1 = model.prior_channels(500e-9).unwrap();
    let p2 = model.prior_channels(430e-9).unwrap();
    let (a, _) = model.forward_cached(&item.eps_norm, &p1);
    let (b, _) = model.forward_cached(&item.eps_norm, &p2);
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-12, "outputs identical across wavelengths");
}

#[test]
fn zeroed_layers_reduce_to_lift_and_head() {
    let cfg = tiny_cfg(Conditioning::Wime);
    let mut params: Parameters<f64> = init_params(&cfg).unwrap();
    for l in &mut params.layers {
        l.spectral_v.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        l.spectral_h.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        l.pointwise_w.iter_mut().for_each(|v| *v = 0.0);
        l.pointwise_b.iter_mut().for_each(|v| *v = 0.0);
        if let Some(p) = &mut l.prior_proj {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let model = Model::with_params(cfg, grid8(), 4.0, params).unwrap();
    let item = random_item::<f64>(64, 500e-9, 11);
    let prior = model.prior_channels(500e-9).unwrap();
    let (pred, _) = model.forward_cached(&item.eps_norm, &prior);
    let x0 = Model::<f64>::matmul(&model.params.lift_eps, &item.eps_norm);
    let direct = Model::<f64>::matmul(&model.params.head, &x0);
    for (a, b) in pred.iter().zip(direct.iter()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn layer_with_unit_projection_is_plain_spectral_layer() {
    // Craft zwp channel 0 == 1 and prior_proj picking it: q == 1, so the
    // layer reduces to residual + GELU(pointwise(spectral)).
    let cfg = tiny_cfg(Conditioning::Wime);
    let mut params: Parameters<f64> = init_params(&cfg).unwrap();
    let c = cfg.channels;
    {
        let proj = params.layers[0].prior_proj.as_mut().unwrap();
        proj.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..c {
            proj[[ch, 0]] = 1.0;
        }
    }
    let model = Model::with_params(cfg, grid8(), 4.0, params).unwrap();
    let hw = 64;
    let x = Array2::from_shape_fn((c, hw), |(a, b)| ((a * 7 + b) as f64 * 0.01).sin());
    let mut zwp = Array2::zeros((c, hw));
    zwp.row_mut(0).fill(1.0);
    let with_unit_q = model.wime_layer(0, &x, Some(&zwp));

    // Reference: same computation with the multiplicative path removed.
    let cfg2 = tiny_cfg(Conditioning::Concat);
    let mut params2: Parameters<f64> = Parameters::zeros(&cfg2);
    params2.layers[0].spectral_v = model.params.layers[0].spectral_v.clone();
    params2.layers[0].spectral_h = model.params.layers[0].spectral_h.clone();
    params2.layers[0].pointwise_w = model.params.layers[0].pointwise_w.clone();
    params2.layers[0].pointwise_b = model.params.layers[0].pointwise_b.clone();
    let model2 = Model::with_params(cfg2, grid8(), 4.0, params2).unwrap();
    let plain = model2.wime_layer(0, &x, None);
    for (a, b) in with_unit_q.iter().zip(plain.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn layer_with_zero_projection_passes_input_through() {
    let cfg = tiny_cfg(Conditioning::Wime);
    let model: Model<f64> = Model::new(cfg, grid8(), 4.0).unwrap();
    let c = cfg.channels;
    let x = Array2::from_shape_fn((c, 64), |(a, b)| ((a + b) as f64 * 0.1).cos());
    let zwp = Array2::zeros((c, 64)); // projection of zero prior is zero
    let y = model.wime_layer(0, &x, Some(&zwp));
    for (a, b) in y.iter().zip(x.iter()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn prior_perturbation_is_spatially_local_within_a_layer() {
    let cfg = tiny_cfg(Conditioning::Wime);
    let model: Model<f64> = Model::new(cfg, grid8(), 4.0).unwrap();
    let c = cfg.channels;
    let hw = 64;
    let x = Array2::from_shape_fn((c, hw), |(a, b)| ((a * 3 + b) as f64 * 0.05).sin());
    let zwp = Array2::from_shape_fn((c, hw), |(a, b)| ((a + 2 * b) as f64 * 0.07).cos());
    let y0 = model.wime_layer(0, &x, Some(&zwp));
    let mut zwp2 = zwp.clone();
    let pixel = 27;
    for ch in 0..c {
        zwp2[[ch, pixel]] += 0.5;
    }
    let y1 = model.wime_layer(0, &x, Some(&zwp2));
    for p in 0..hw {
        let changed = (0..c).any(|ch| (y0[[ch, p]] - y1[[ch, p]]).abs() > 1e-14);
        assert_eq!(changed, p == pixel, "pixel {p}");
    }
}

#[test]
fn wavelength_gradient_reaches_the_output() {
    // Finite difference across two nearby wavelengths must be nonzero for
    // a random wime model.
    let model: Model<f64> = Model::new(tiny_cfg(Conditioning::Wime), grid8(), 4.0).unwrap();
    let item = random_item::<f64>(64, 500e-9, 21);
    let pa = model.prior_channels(500e-9).unwrap();
    let pb = model.prior_channels(500.5e-9).unwrap();
    let (a, _) = model.forward_cached(&item.eps_norm, &pa);
    let (b, _) = model.forward_cached(&item.eps_norm, &pb);
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 0.0);
}

fn finite_difference_check<FN: Fn(&ModelConfig) -> ModelConfig>(tweak: FN) {
    let cfg = tweak(&tiny_cfg(Conditioning::Wime));
    let grid = grid8();
    let mut model: Model<f64> = Model::new(cfg, grid, 4.0).unwrap();
    let items = [
        random_item::<f64>(64, 500e-9, 31),
        random_item::<f64>(64, 430e-9, 32),
    ];
    let refs: Vec<&TrainItem<f64>> = items.iter().collect();
    let priors = PriorSet::build(&model, &[500e-9, 430e-9]).unwrap();
    let (_, grad) = model.loss_and_grad(&refs, &priors).unwrap();
    let ga = grad.flatten();
    let mut flat = model.params.flatten();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        model.params.assign_from_flat(&flat).unwrap();
        let lp = model.batch_nmse(&refs, &priors).unwrap();
        flat[i] = orig - h;
        model.params.assign_from_flat(&flat).unwrap();
        let lm = model.batch_nmse(&refs, &priors).unwrap();
        flat[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - ga[i]).abs() / fd.abs().max(ga[i].abs()).max(1e-7);
        worst = worst.max(rel);
        assert!(rel < 1e-4, "param {i}: analytic {} vs fd {} (rel {rel})", ga[i], fd);
    }
    model.params.assign_from_flat(&flat).unwrap();
    assert!(worst < 1e-4);
}

#[test]
fn gradients_match_finite_differences_wime() {
    finite_difference_check(|c| *c);
}

#[test]
fn gradients_match_finite_differences_concat() {
    finite_difference_check(|c| {
        let mut c = *c;
        c.conditioning = Conditioning::Concat;
        c
    });
}

#[test]
fn batch_gradient_is_mean_of_per_sample_gradients() {
    let model: Model<f64> = Model::new(tiny_cfg(Conditioning::Wime), grid8(), 4.0).unwrap();
    let items = [
        random_item::<f64>(64, 500e-9, 41),
        random_item::<f64>(64, 430e-9, 42),
        random_item::<f64>(64, 670e-9, 43),
    ];
    let refs: Vec<&TrainItem<f64>> = items.iter().collect();
    let priors = PriorSet::build(&model, &[500e-9, 430e-9, 670e-9]).unwrap();
    let (_, batch_grad) = model.loss_and_grad(&refs, &priors).unwrap();
    let mut acc = Parameters::<f64>::zeros(&model.cfg);
    for item in &items {
        let (_, g) = model.loss_and_grad(&[item], &priors).unwrap();
        acc.add_assign(&g);
    }
    acc.scale(1.0 / items.len() as f64);
    for (a, b) in batch_grad.flatten().iter().zip(acc.flatten().iter()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn zero_residual_batch_has_zero_gradient_numerator() {
    // When the target equals the prediction the loss gradient vanishes.
    let model: Model<f64> = Model::new(tiny_cfg(Conditioning::Wime), grid8(), 4.0).unwrap();
    let mut item = random_item::<f64>(64, 500e-9, 51);
    let priors = PriorSet::build(&model, &[500e-9]).unwrap();
    let (pred, _) = model.forward_cached(&item.eps_norm, priors.get(500e-9).unwrap());
    item.target = pred.clone();
    item.target_norm_sq = pred.iter().map(|v| v * v).sum();
    let (loss, grad) = model.loss_and_grad(&[&item], &priors).unwrap();
    assert!(loss.abs() < 1e-28);
    assert!(grad.max_abs() < 1e-13);
}

#[test]
fn loss_is_deterministic_across_calls() {
    let model: Model<f32> = Model::new(tiny_cfg(Conditioning::Wime), grid8(), 4.0).unwrap();
    let items: Vec<TrainItem<f32>> = (0..10)
        .map(|i| random_item::<f32>(64, 500e-9, 60 + i))
        .collect();
    let refs: Vec<&TrainItem<f32>> = items.iter().collect();
    let priors = PriorSet::build(&model, &[500e-9]).unwrap();
    let (l1, g1) = model.loss_and_grad(&refs, &priors).unwrap();
    let (l2, g2) = model.loss_and_grad(&refs, &priors).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    for (a, b) in g1.flatten().iter().zip(g2.flatten().iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn mode_bounds_checked_at_bind_time() {
    let mut cfg = tiny_cfg(Conditioning::Wime);
    cfg.modes_v = 6; // nz/2+1 = 5 on an 8-cell grid
    assert!(Model::<f64>::new(cfg, grid8(), 4.0).is_err());
}
