//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check reduces a primitive's output to a scalar through a random
//! projection, perturbs inputs and parameters by `±STEP`, and compares the
//! numerical gradient with the analytic one using
//! `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{CmscModel, ModelConfig};
use crate::numerics::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, leaky_relu, leaky_relu_backward,
    merge_and_run_backward, merge_and_run_map, BatchNormParams, Conv2dParams, Mode, Shape, Tensor,
};
use crate::trainer::cascaded_loss;

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;
pub const DEFAULT_SEEDS: usize = 20;

/// Worst relative error of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel: f64,
    pub tol: f64,
    pub seeds: usize,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<14} {} max_rel={:.3e} tol={:.0e} seeds={}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel,
            self.tol,
            self.seeds
        )
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    let data = (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Central difference of `f` at every coordinate of `x`.
fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let plus = f(x)?;
        x[i] = orig - STEP;
        let minus = f(x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * STEP));
    }
    Ok(out)
}

fn with_data(shape: Shape, data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).expect("length matches shape")
}

fn conv_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let xs = Shape::new(rng.random_range(1..=2), cin, rng.random_range(3..=6), rng.random_range(3..=6));
    let x = randn(&mut rng, xs);
    let mut params = Conv2dParams::zeros(cin, cout, k)?;
    params.weight = randn(&mut rng, params.weight.shape());
    params.bias = randv(&mut rng, cout);
    let proj = randn(&mut rng, xs.with_channels(cout));

    let g = conv2d_backward(&x, &params, &proj)?;
    let mut analytic = g.input.into_vec();
    analytic.extend(g.weight.into_vec());
    analytic.extend(g.bias);

    let ws = params.weight.shape();
    let mut flat = x.data().to_vec();
    flat.extend_from_slice(params.weight.data());
    flat.extend_from_slice(&params.bias);
    let numeric = numeric_grad(&mut flat, |v| {
        let (xv, rest) = v.split_at(xs.len());
        let (wv, bv) = rest.split_at(ws.len());
        let p = Conv2dParams {
            weight: with_data(ws, wv),
            bias: bv.to_vec(),
        };
        conv2d(&with_data(xs, xv), &p)?.dot(&proj)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

fn batchnorm_case(seed: u64, mode: Mode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=3);
    let xs = Shape::new(rng.random_range(2..=3), c, rng.random_range(2..=4), rng.random_range(2..=4));
    let x = randn(&mut rng, xs);
    let mut params = BatchNormParams::identity(c);
    params.gamma = randv(&mut rng, c);
    params.beta = randv(&mut rng, c);
    params.running_mean = randv(&mut rng, c);
    params.running_var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    let proj = randn(&mut rng, xs);

    let (_, cache) = batchnorm_forward(&x, &params, mode)?;
    let g = batchnorm_backward(&cache, &proj)?;
    let mut analytic = g.input.into_vec();
    analytic.extend(g.gamma);
    analytic.extend(g.beta);

    let mut flat = x.data().to_vec();
    flat.extend_from_slice(&params.gamma);
    flat.extend_from_slice(&params.beta);
    let numeric = numeric_grad(&mut flat, |v| {
        let (xv, rest) = v.split_at(xs.len());
        let (gv, bv) = rest.split_at(c);
        let mut p = params.clone();
        p.gamma = gv.to_vec();
        p.beta = bv.to_vec();
        batchnorm_forward(&with_data(xs, xv), &p, mode)?.0.dot(&proj)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

fn leaky_relu_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = Shape::new(2, 2, 4, 4);
    // keep samples clear of the kink, where the derivative does not exist
    let mut x = randn(&mut rng, xs);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v += 1e-2;
        }
    }
    let slope = rng.random_range(0.01..0.5);
    let proj = randn(&mut rng, xs);
    let analytic = leaky_relu_backward(&x, slope, &proj)?.into_vec();
    let mut flat = x.data().to_vec();
    let numeric = numeric_grad(&mut flat, |v| leaky_relu(&with_data(xs, v), slope).dot(&proj))?;
    Ok(relative_error(&analytic, &numeric))
}

fn merge_and_run_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = Shape::new(1, 2, 3, 5);
    let (a, b) = (randn(&mut rng, xs), randn(&mut rng, xs));
    let (p1, p2) = (randn(&mut rng, xs), randn(&mut rng, xs));
    let (ga, gb) = merge_and_run_backward(&p1, &p2)?;
    let mut analytic = ga.into_vec();
    analytic.extend(gb.into_vec());
    let mut flat = a.data().to_vec();
    flat.extend_from_slice(b.data());
    let numeric = numeric_grad(&mut flat, |v| {
        let (av, bv) = v.split_at(xs.len());
        let (m1, m2) = merge_and_run_map(&with_data(xs, av), &with_data(xs, bv))?;
        Ok(m1.dot(&p1)? + m2.dot(&p2)?)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

fn loss_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = rng.random_range(1..=4);
    let xs = Shape::new(rng.random_range(1..=3), 1, 3, 3);
    let alpha = rng.random_range(0.05..0.95);
    let target = randn(&mut rng, xs);
    let fin = randn(&mut rng, xs);
    let inter: Vec<Tensor> = (0..stages).map(|_| randn(&mut rng, xs)).collect();

    let l = cascaded_loss(&fin, &inter, &target, alpha)?;
    let mut analytic = l.grad_final.into_vec();
    for g in l.grad_intermediates {
        analytic.extend(g.into_vec());
    }
    let mut flat = fin.data().to_vec();
    for t in &inter {
        flat.extend_from_slice(t.data());
    }
    let numeric = numeric_grad(&mut flat, |v| {
        let mut chunks = v.chunks(xs.len()).map(|c| with_data(xs, c));
        let f = chunks.next().expect("final output slot");
        let rest: Vec<Tensor> = chunks.collect();
        Ok(cascaded_loss(&f, &rest, &target, alpha)?.total)
    })?;
    Ok(relative_error(&analytic, &numeric))
}

/// Configuration of the full-model check.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        stages: 2,
        modules_per_stage: 2,
        channels: 4,
        ..ModelConfig::default()
    }
}

/// Number of parameter coordinates probed per seed in the full-model check.
pub const MODEL_COORDS: usize = 400;

/// Full network plus cascaded loss on a `1×1×12×12` input, with a random
/// subset of parameter coordinates probed (ensemble weights always).
fn model_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CmscModel::initialized(model_check_config(), seed)?;
    // move batch norm and the ensemble away from their identity values
    for p in model.params_mut() {
        use crate::model::ParamKind::*;
        match p.kind {
            BnGamma => p.values.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5)),
            BnBeta | ConvBias => p.values.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2)),
            Ensemble => p.values.iter_mut().for_each(|v| *v = rng.random_range(0.2..0.8)),
            _ => {}
        }
    }
    let xs = Shape::new(1, 1, 12, 12);
    let x = randn(&mut rng, xs).map(|v| 0.5 + 0.2 * v);
    let target = randn(&mut rng, xs).map(|v| 0.5 + 0.2 * v);
    let alpha = crate::trainer::default_alpha(model.config.stages);

    let loss_of = |m: &CmscModel| -> Result<f64> {
        let f = m.forward(&x, Mode::Train)?;
        Ok(cascaded_loss(&f.output, &f.intermediates, &target, alpha)?.total)
    };

    let fwd = model.forward(&x, Mode::Train)?;
    let l = cascaded_loss(&fwd.output, &fwd.intermediates, &target, alpha)?;
    let cache = fwd.cache.expect("train-mode cache");
    let grads = model.backward(&cache, &l.grad_final, &l.grad_intermediates)?;
    let analytic_all: Vec<f64> = grads.learnable().iter().flat_map(|p| p.values.iter().copied()).collect();

    // (param slot, offset) of every learnable coordinate, in the same order
    let slots: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind.is_learnable())
        .flat_map(|(i, p)| (0..p.values.len()).map(move |o| (i, o)))
        .collect();
    let ensemble_start = slots.len() - model.config.stages;
    let mut picked: Vec<usize> = sample(&mut rng, ensemble_start, MODEL_COORDS.min(ensemble_start)).into_vec();
    picked.extend(ensemble_start..slots.len());

    let mut analytic = Vec::with_capacity(picked.len());
    let mut numeric = Vec::with_capacity(picked.len());
    for &j in &picked {
        let (slot, off) = slots[j];
        let orig = model.params()[slot].values[off];
        model.params_mut()[slot].values[off] = orig + STEP;
        let plus = loss_of(&model)?;
        model.params_mut()[slot].values[off] = orig - STEP;
        let minus = loss_of(&model)?;
        model.params_mut()[slot].values[off] = orig;
        analytic.push(analytic_all[j]);
        numeric.push((plus - minus) / (2.0 * STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

fn run(name: &'static str, tol: f64, seeds: &[u64], case: impl Fn(u64) -> Result<f64> + Sync) -> Result<CheckResult> {
    use rayon::prelude::*;
    let errors = seeds.par_iter().map(|&s| case(s)).collect::<Result<Vec<f64>>>()?;
    let max_rel = errors.iter().copied().fold(0.0, f64::max);
    Ok(CheckResult {
        name,
        max_rel,
        tol,
        seeds: seeds.len(),
        passed: max_rel <= tol && errors.iter().all(|e| e.is_finite()),
    })
}

/// Every primitive check followed by the full-model check, each over
/// `seeds` consecutive seeds starting at `base_seed`.
pub fn run_suite(base_seed: u64, seeds: usize) -> Result<Vec<CheckResult>> {
    let seeds: Vec<u64> = (0..seeds as u64).map(|i| base_seed.wrapping_add(i)).collect();
    Ok(vec![
        run("conv2d", PRIMITIVE_TOL, &seeds, conv_case)?,
        run("batchnorm", PRIMITIVE_TOL, &seeds, |s| batchnorm_case(s, Mode::Train))?,
        run("batchnorm_eval", PRIMITIVE_TOL, &seeds, |s| batchnorm_case(s, Mode::Eval))?,
        run("leaky_relu", PRIMITIVE_TOL, &seeds, leaky_relu_case)?,
        run("merge_and_run", PRIMITIVE_TOL, &seeds, merge_and_run_case)?,
        run("cascaded_loss", PRIMITIVE_TOL, &seeds, loss_case)?,
        run("full_model", MODEL_TOL, &seeds, model_case)?,
    ])
}
