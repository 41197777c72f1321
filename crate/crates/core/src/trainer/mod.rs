mod config;
mod data;
mod loss;
mod optim;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{apply_setting, parse_config_text, parse_scales, render_config, TrainConfig};
pub use data::{augment, build_pool, extract_patches, Augment, Sample, DOWNSCALE_FACTORS};
pub use loss::{cascaded_loss, default_alpha, LossOutput};
pub use optim::{clip_gradients, decays, lr_at, sgd_step, OptimizerState};

use crate::error::{Error, Result};
use crate::imaging::{list_pngs, load_png, ImagePlane};
use crate::model::CmscModel;
use crate::numerics::{Mode, Shape, Tensor};

/// Per-epoch means over all minibatches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_final: f64,
    pub loss_stages: Vec<f64>,
    pub seconds: f64,
}

pub fn log_to_csv(records: &[TrainLogRecord]) -> String {
    let stages = records.first().map_or(0, |r| r.loss_stages.len());
    let mut s = String::from("epoch,lr,loss_total,loss_final");
    for q in 0..stages {
        let _ = write!(s, ",loss_stage{}", q + 1);
    }
    s.push_str(",seconds\n");
    for r in records {
        let _ = write!(s, "{},{:e},{:.8},{:.8}", r.epoch, r.lr, r.loss_total, r.loss_final);
        for v in &r.loss_stages {
            let _ = write!(s, ",{v:.8}");
        }
        let _ = writeln!(s, ",{:.3}", r.seconds);
    }
    s
}

/// Quantized luma of every PNG in `dir`, in sorted file order.
pub fn load_corpus(dir: &Path) -> Result<Vec<ImagePlane>> {
    list_pngs(dir)?
        .iter()
        .map(|p| load_png(p).map(|img| img.luma().quantized()))
        .collect()
}

fn batch_tensors(pool: &[Sample], indices: &[usize], patch: usize) -> Result<(Tensor, Tensor)> {
    let shape = Shape::new(indices.len(), 1, patch, patch);
    let mut lr = Vec::with_capacity(shape.len());
    let mut hr = Vec::with_capacity(shape.len());
    for &i in indices {
        lr.extend_from_slice(&pool[i].lr);
        hr.extend_from_slice(&pool[i].hr);
    }
    Ok((Tensor::from_vec(shape, lr)?, Tensor::from_vec(shape, hr)?))
}

/// One optimization step on a minibatch. Returns the loss of the forward pass
/// taken before the update.
pub fn train_step(
    model: &mut CmscModel,
    state: &mut OptimizerState,
    lr_batch: &Tensor,
    hr_batch: &Tensor,
    config: &TrainConfig,
    lr: f64,
) -> Result<LossOutput> {
    let alpha = config.effective_alpha(&model.config);
    let fwd = model.forward(lr_batch, Mode::Train)?;
    let loss = cascaded_loss(&fwd.output, &fwd.intermediates, hr_batch, alpha)?;
    if !loss.total.is_finite() {
        return Err(Error::invalid(format!("loss became non-finite ({})", loss.total)));
    }
    let cache = fwd.cache.expect("train-mode forward keeps a cache");
    let mut grads = model.backward(&cache, &loss.grad_final, &loss.grad_intermediates)?;
    clip_gradients(&mut grads, config.clip_eta);
    sgd_step(model, &grads, state, lr, config.momentum, config.weight_decay);
    model.commit_running_stats(&cache);
    Ok(loss)
}

/// Trains on pre-loaded luma planes, calling `on_epoch` after every epoch.
pub fn train_on_images(
    model: &mut CmscModel,
    images: &[ImagePlane],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainLogRecord),
) -> Result<Vec<TrainLogRecord>> {
    config.validate(&model.config)?;
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    let pool = build_pool(images, &config.scales, config.patch_size, config.augment)?;
    if pool.is_empty() {
        return Err(Error::Dataset(format!(
            "no training patches: every image is smaller than {0}x{0}",
            config.patch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(model);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let stages = model.config.stages;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, config.lr0, config.lr_decay_every, config.lr_decay_factor);
        order.shuffle(&mut rng);
        let (mut total, mut fin, mut per_stage, mut batches) = (0.0, 0.0, vec![0.0; stages], 0usize);
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = batch_tensors(&pool, chunk, config.patch_size)?;
            // batch norm needs at least two values per channel
            if x.shape().n * x.shape().plane() < 2 {
                continue;
            }
            let loss = train_step(model, &mut state, &x, &y, config, lr)?;
            total += loss.total;
            fin += loss.final_term;
            for (acc, v) in per_stage.iter_mut().zip(&loss.stage_terms) {
                *acc += v;
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let record = TrainLogRecord {
            epoch,
            lr,
            loss_total: total / n,
            loss_final: fin / n,
            loss_stages: per_stage.iter().map(|v| v / n).collect(),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

/// Loads every PNG under `corpus_dir` and trains `model` in place.
pub fn train(model: &mut CmscModel, corpus_dir: &Path, config: &TrainConfig) -> Result<Vec<TrainLogRecord>> {
    train_with(model, corpus_dir, config, |_| {})
}

pub fn train_with(
    model: &mut CmscModel,
    corpus_dir: &Path,
    config: &TrainConfig,
    on_epoch: impl FnMut(&TrainLogRecord),
) -> Result<Vec<TrainLogRecord>> {
    config.validate(&model.config)?;
    let images = load_corpus(corpus_dir)?;
    train_on_images(model, &images, config, on_epoch)
}
