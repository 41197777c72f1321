use cmsc_core::imaging::{bicubic_resize, ColorSpace, ImagePlane};
use cmsc_core::metrics::{psnr, ssim};
use cmsc_core::numerics::{
    batchnorm_forward, conv2d, leaky_relu, merge_and_run_map, BatchNormParams, Conv2dParams,
};
use cmsc_core::trainer::{cascaded_loss, clip_gradients, extract_patches, lr_at, sgd_step, OptimizerState};
use cmsc_core::{CmscModel, Mode, ModelConfig, Shape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, shape.len()).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

fn image(w: usize, h: usize) -> impl Strategy<Value = ImagePlane> {
    prop::collection::vec(0.0f64..=1.0, w * h).prop_map(move |v| ImagePlane::new(w, h, v, ColorSpace::Y).unwrap())
}

fn sized_image(max: usize) -> impl Strategy<Value = ImagePlane> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| image(w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_and_run_projects(a in tensor(Shape::new(1, 2, 3, 3)), b in tensor(Shape::new(1, 2, 3, 3))) {
        let (m1, m2) = merge_and_run_map(&a, &b).unwrap();
        let again = merge_and_run_map(&m1, &m2).unwrap();
        prop_assert_eq!(&m1, &m2);
        prop_assert_eq!(again, (m1.clone(), m2));
    }

    #[test]
    fn conv_is_additive(
        x in tensor(Shape::new(1, 2, 5, 4)),
        y in tensor(Shape::new(1, 2, 5, 4)),
        w in tensor(Shape::new(3, 2, 3, 3)),
    ) {
        let p = Conv2dParams { weight: w, bias: vec![0.0; 3] };
        let lhs = conv2d(&x.add(&y).unwrap(), &p).unwrap();
        let rhs = conv2d(&x, &p).unwrap().add(&conv2d(&y, &p).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn batchnorm_train_output_is_centred_on_beta(
        x in tensor(Shape::new(3, 2, 3, 3)),
        beta in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let mut p = BatchNormParams::identity(2);
        p.beta = beta.clone();
        let (y, _) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        for (c, b) in beta.iter().enumerate() {
            let mean = (0..3).map(|n| y.plane(n, c).iter().sum::<f64>()).sum::<f64>() / 27.0;
            prop_assert!((mean - b).abs() < 1e-9);
        }
    }

    #[test]
    fn leaky_relu_is_positively_homogeneous(x in tensor(Shape::new(1, 1, 4, 4)), k in 0.0f64..10.0) {
        let lhs = leaky_relu(&x.scale(k), 0.2);
        let rhs = leaky_relu(&x, 0.2).scale(k);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotations_and_flips_compose_to_identity(img in sized_image(9)) {
        prop_assert_eq!(img.rotate90().rotate90().rotate90().rotate90(), img.clone());
        prop_assert_eq!(img.rotate90().rotate270(), img.clone());
        prop_assert_eq!(img.rotate180().rotate180(), img.clone());
        prop_assert_eq!(img.flip_horizontal().flip_horizontal(), img.clone());
        prop_assert_eq!(img.rotate90().width(), img.height());
    }

    #[test]
    fn resize_keeps_constants_and_target_size(
        v in 0.0f64..=1.0,
        (w, h) in (1usize..20, 1usize..20),
        (ow, oh) in (1usize..30, 1usize..30),
        antialias in any::<bool>(),
    ) {
        let flat = ImagePlane::filled(w, h, v, ColorSpace::Y);
        let out = bicubic_resize(&flat, ow, oh, antialias).unwrap();
        prop_assert_eq!((out.width(), out.height()), (ow, oh));
        prop_assert!(out.values().iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn quantize_is_idempotent(img in sized_image(8)) {
        let q = img.quantized();
        prop_assert_eq!(q.quantized(), q.clone());
        prop_assert!(q.values().iter().all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
    }

    #[test]
    fn metrics_are_symmetric(a in image(12, 13), b in image(12, 13)) {
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn patch_count_is_floor_grid(w in 1usize..60, h in 1usize..60, p in 1usize..20) {
        let img = ImagePlane::filled(w, h, 0.3, ColorSpace::Y);
        prop_assert_eq!(extract_patches(&img, &img, p).unwrap().len(), (w / p) * (h / p));
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_target(
        y in tensor(Shape::new(2, 1, 2, 2)),
        f in tensor(Shape::new(2, 1, 2, 2)),
        s1 in tensor(Shape::new(2, 1, 2, 2)),
        alpha in 0.01f64..0.99,
    ) {
        let l = cascaded_loss(&f, &[s1.clone(), f.clone()], &y, alpha).unwrap();
        prop_assert!(l.total >= 0.0);
        let exact = cascaded_loss(&y, &[y.clone(), y.clone()], &y, alpha).unwrap();
        prop_assert_eq!(exact.total, 0.0);
        if f != y {
            prop_assert!(l.total > 0.0);
        }
        // with alpha = 1 only the ensembled term survives
        let only = cascaded_loss(&f, &[s1], &y, 1.0).unwrap();
        prop_assert_eq!(only.total, only.final_term);
    }

    #[test]
    fn schedule_never_increases(e in 0usize..200, every in 1usize..30) {
        prop_assert!(lr_at(e + 1, 0.1, every, 10.0) <= lr_at(e, 0.1, every, 10.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// A clipped step moves each parameter by at most
    /// `lr·(momentum·|v_prev| + eta + wd·|param|)`.
    #[test]
    fn clipped_step_is_bounded(seed in any::<u64>(), lr in 0.001f64..0.2, eta in 0.01f64..1.0) {
        let cfg = ModelConfig { stages: 2, modules_per_stage: 1, channels: 2, ..ModelConfig::default() };
        let mut model = CmscModel::initialized(cfg, seed).unwrap();
        let mut state = OptimizerState::new(&model);
        let x = Tensor::from_vec(
            Shape::new(2, 1, 5, 5),
            (0..50).map(|i| ((i as u64 ^ seed) % 17) as f64 / 17.0).collect(),
        ).unwrap();
        let (mu, wd) = (0.9, 1e-4);
        for _ in 0..3 {
            let fwd = model.forward(&x, Mode::Train).unwrap();
            let l = cascaded_loss(&fwd.output, &fwd.intermediates, &x.scale(0.5), 0.5).unwrap();
            let mut g = model.backward(fwd.cache.as_ref().unwrap(), &l.grad_final, &l.grad_intermediates).unwrap();
            clip_gradients(&mut g, eta);
            let before = model.clone();
            let v_prev = state.velocity.clone();
            sgd_step(&mut model, &g, &mut state, lr, mu, wd);
            let old = before.params();
            let new = model.params();
            let learn = old.iter().zip(&new).filter(|(p, _)| p.kind.is_learnable());
            for ((p0, p1), v) in learn.zip(&v_prev) {
                for ((a, b), vp) in p0.values.iter().zip(p1.values).zip(v) {
                    let bound = lr * (mu * vp.abs() + eta + wd * a.abs());
                    prop_assert!((b - a).abs() <= bound * (1.0 + 1e-12), "{}: {} > {}", p0.name, (b - a).abs(), bound);
                }
            }
        }
    }
}
