use cmsc_core::model::{depth, model_from_bytes, model_to_bytes, MscModule, ParamKind, Subnetwork};
use cmsc_core::numerics::merge_and_run_map;
use cmsc_core::{CmscModel, Mode, ModelConfig, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(stages: usize, modules: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        stages,
        modules_per_stage: modules,
        channels,
        ..ModelConfig::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn zeroed_model_passes_input_through_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for stages in 1..=4 {
        let model = CmscModel::new(small(stages, 2, 3)).unwrap();
        let x = random_tensor(&mut rng, Shape::new(2, 1, 7, 9), -0.3, 1.3);
        for mode in [Mode::Eval, Mode::Train] {
            let fwd = model.forward(&x, mode).unwrap();
            assert_eq!(fwd.output, x, "S={stages} {mode:?}");
            assert!(fwd.intermediates.iter().all(|t| *t == x));
        }
    }
}

#[test]
fn zeroed_subnetwork_with_residual_features_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sub = Subnetwork::zeros(4, 3, 3, 5).unwrap();
    let d = random_tensor(&mut rng, Shape::new(2, 4, 6, 5), -2.0, 2.0);
    for mode in [Mode::Eval, Mode::Train] {
        let (out, _) = sub.forward(&d, 0.2, mode, true).unwrap();
        assert_eq!(out, d);
        // without the skip the zeroed stage collapses to nothing
        let (out, _) = sub.forward(&d, 0.2, mode, false).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn merge_and_run_is_idempotent_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let s = Shape::new(1, 2, 4, 3);
        let (a, b) = (random_tensor(&mut rng, s, -5.0, 5.0), random_tensor(&mut rng, s, -5.0, 5.0));
        let (m1, m2) = merge_and_run_map(&a, &b).unwrap();
        let (n1, n2) = merge_and_run_map(&m1, &m2).unwrap();
        assert_eq!(m1, m2);
        assert_eq!((n1, n2), (m1.clone(), m2));
    }
}

#[test]
fn zeroed_module_chain_reduces_to_one_merge() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = Shape::new(1, 3, 5, 5);
    let (a, b) = (random_tensor(&mut rng, s, 0.0, 2.0), random_tensor(&mut rng, s, 0.0, 2.0));
    let (expected, _) = merge_and_run_map(&a, &b).unwrap();
    let chain: Vec<MscModule> = (0..4).map(|_| MscModule::zeros(3, 3, 5).unwrap()).collect();
    let (mut x1, mut x2) = (a, b);
    for m in &chain {
        let (y1, y2, _) = m.forward(&x1, &x2, 0.2, Mode::Eval).unwrap();
        x1 = y1;
        x2 = y2;
    }
    assert_eq!(x1, expected);
    assert_eq!(x2, expected);
}

#[test]
fn output_is_weighted_sum_of_stage_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for seed in 0..4 {
        let mut model = CmscModel::initialized(small(3, 1, 3), seed).unwrap();
        for w in &mut model.ensemble_weights {
            *w = rng.random_range(-1.0..1.0);
        }
        let x = random_tensor(&mut rng, Shape::new(2, 1, 6, 6), 0.0, 1.0);
        for mode in [Mode::Eval, Mode::Train] {
            let fwd = model.forward(&x, mode).unwrap();
            let mut sum = Tensor::zeros(x.shape());
            for (w, y) in model.ensemble_weights.iter().zip(&fwd.intermediates) {
                sum.axpy(*w, y).unwrap();
            }
            let err = fwd.output.sub(&sum).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-12, "seed {seed}: {err}");
        }
    }
}

#[test]
fn depth_formula() {
    assert_eq!(depth(&ModelConfig::default()), 35);
    assert_eq!(depth(&small(1, 1, 1)), 5);
    assert_eq!(depth(&small(1, 4, 1)), 11);
}

#[test]
fn he_init_statistics() {
    let cfg = small(1, 1, 64);
    let model = CmscModel::initialized(cfg, 7).unwrap();
    let w = model.subnetworks[0].entry.conv.weight.data();
    assert_eq!(w.len(), 64 * 64 * 9);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let target = 2.0 / 576.0;
    assert!((var / target - 1.0).abs() < 0.1, "variance {var} vs {target}");
    assert!(mean.abs() < 3.0 * (target / w.len() as f64).sqrt());
    for p in model.params() {
        match p.kind {
            ParamKind::ConvBias | ParamKind::BnBeta | ParamKind::BnRunningMean => {
                assert!(p.values.iter().all(|&v| v == 0.0), "{}", p.name)
            }
            ParamKind::BnGamma | ParamKind::BnRunningVar => assert!(p.values.iter().all(|&v| v == 1.0), "{}", p.name),
            _ => {}
        }
    }
}

#[test]
fn init_is_reproducible_and_ensemble_uniform() {
    let a = CmscModel::initialized(small(3, 1, 4), 42).unwrap();
    let b = CmscModel::initialized(small(3, 1, 4), 42).unwrap();
    let c = CmscModel::initialized(small(3, 1, 4), 43).unwrap();
    assert_eq!(model_to_bytes(&a), model_to_bytes(&b));
    assert_ne!(a, c);
    assert_eq!(a.ensemble_weights, vec![1.0 / 3.0; 3]);
}

#[test]
fn parameter_counts() {
    let conv = cmsc_core::numerics::Conv2dParams::zeros(1, 64, 3).unwrap();
    assert_eq!(conv.weight.len() + conv.bias.len(), 640);

    // conv weights, conv biases and batch-norm affine scalars of one module
    let module = 2 * (64 * 64 * 9 + 64) + 2 * (64 * 64 * 25 + 64) + 4 * (2 * 64);
    assert_eq!(module, 279_296);
    let one = CmscModel::new(small(1, 1, 64)).unwrap().param_count();
    let two = CmscModel::new(small(1, 2, 64)).unwrap().param_count();
    assert_eq!(two - one, module);
}

#[test]
fn shared_reconstruction_adds_only_stage_and_weight() {
    let cfg = |s| ModelConfig {
        share_reconstruction: true,
        ..small(s, 2, 4)
    };
    let one = CmscModel::new(cfg(1)).unwrap();
    let two = CmscModel::new(cfg(2)).unwrap();
    let sub: usize = {
        let s = &one.subnetworks[0];
        let unit = |u: &cmsc_core::model::ConvBnUnit| u.conv.weight.len() + u.conv.bias.len() + 2 * u.bn.gamma.len();
        unit(&s.entry)
            + s.modules
                .iter()
                .map(|m| m.branch1.iter().chain(&m.branch2).map(unit).sum::<usize>())
                .sum::<usize>()
    };
    assert_eq!(two.param_count() - one.param_count(), sub + 1);
    assert_eq!(two.reconstructions.len(), 1);
}

#[test]
fn default_header_reloads_with_paper_depth() {
    let model = CmscModel::new(ModelConfig::default()).unwrap();
    let back = model_from_bytes(&model_to_bytes(&model)).unwrap();
    assert_eq!(back.depth(), 35);
    assert_eq!(back, model);
}

fn random_model(rng: &mut ChaCha8Rng) -> CmscModel {
    let cfg = ModelConfig {
        stages: rng.random_range(1..=3),
        modules_per_stage: rng.random_range(1..=3),
        channels: rng.random_range(1..=4),
        k1: [1, 3, 5][rng.random_range(0..3)],
        k2: [1, 3, 5, 7][rng.random_range(0..4)],
        leaky_slope: rng.random_range(0.01..0.99),
        use_rfl: rng.random_bool(0.5),
        use_cascaded_supervision: rng.random_bool(0.5),
        share_reconstruction: rng.random_bool(0.5),
    };
    let mut model = CmscModel::initialized(cfg, rng.random()).unwrap();
    for p in model.params_mut() {
        for v in p.values.iter_mut() {
            // raw bit patterns exercise every exponent, subnormals included
            *v = f64::from_bits(rng.random::<u64>() & !(0x7ff << 52) | (rng.random_range(0..0x7ffu64) << 52));
        }
    }
    model
}

#[test]
fn save_load_fuzz_is_lossless() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cmsc");
    for _ in 0..100 {
        let model = random_model(&mut rng);
        cmsc_core::save_model(&model, &path).unwrap();
        let back = cmsc_core::load_model(&path).unwrap();
        let a: Vec<u64> = model.params().iter().flat_map(|p| p.values.iter().map(|v| v.to_bits())).collect();
        let b: Vec<u64> = back.params().iter().flat_map(|p| p.values.iter().map(|v| v.to_bits())).collect();
        assert_eq!(a, b);
        assert_eq!(back.config, model.config);
        assert_eq!(model_to_bytes(&back), std::fs::read(&path).unwrap());
    }
}

#[test]
fn truncated_and_corrupt_files_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..20 {
        let bytes = model_to_bytes(&random_model(&mut rng));
        for _ in 0..25 {
            let cut = rng.random_range(0..bytes.len());
            assert!(model_from_bytes(&bytes[..cut]).is_err(), "accepted {cut} of {} bytes", bytes.len());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
    }
    let good = model_to_bytes(&CmscModel::new(small(1, 1, 1)).unwrap());
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(model_from_bytes(&bad_magic).unwrap_err().to_string().contains("magic"));
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(model_from_bytes(&bad_version).unwrap_err().to_string().contains("version"));
}

#[test]
fn train_mode_statistics_are_committed_separately() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut model = CmscModel::initialized(small(2, 1, 3), 1).unwrap();
    let x = random_tensor(&mut rng, Shape::new(2, 1, 6, 6), 0.0, 1.0);
    let before = model.clone();
    let fwd = model.forward(&x, Mode::Train).unwrap();
    assert_eq!(model, before, "forward must not touch running statistics");
    model.commit_running_stats(fwd.cache.as_ref().unwrap());
    assert_ne!(model.feature_extract.bn.running_mean, before.feature_extract.bn.running_mean);
    assert_eq!(model.feature_extract.conv, before.feature_extract.conv);
}
