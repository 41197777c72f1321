//! The cascaded multi-scale cross network.
//!
//! ```text
//! x ──F──▶ D0 ──ξ1──▶ D1 ──ξ2──▶ … ──ξS──▶ DS
//!                      │           │           │
//!                      R1          R2          RS
//!                      ▼           ▼           ▼
//!                   ŷ1 = ·+x    ŷ2 = ·+x    ŷS = ·+x   ──▶  ŷ = Σ w_q ŷ_q
//! ```
//!
//! Each stage `ξ` is an entry conv unit whose output feeds both branches of a
//! chain of MSC modules; the last module fuses its branches into one map and
//! the stage input is added back (residual-features learning).

mod file;
mod msc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, check_same, conv2d, conv2d_backward, leaky_relu,
    leaky_relu_backward, BatchNormParams, BnCache, Conv2dParams, Mode, Tensor,
};

pub use file::{load_model, write_atomic, model_from_bytes, model_to_bytes, save_model, FORMAT_VERSION, MAGIC};
pub use msc::{MscCache, MscLastCache, MscModule};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: usize,
    pub modules_per_stage: usize,
    pub channels: usize,
    pub k1: usize,
    pub k2: usize,
    pub leaky_slope: f64,
    pub use_rfl: bool,
    pub use_cascaded_supervision: bool,
    /// Every stage reconstructs through a single shared layer.
    pub share_reconstruction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 3,
            modules_per_stage: 5,
            channels: 64,
            k1: 3,
            k2: 5,
            leaky_slope: 0.2,
            use_rfl: true,
            use_cascaded_supervision: true,
            share_reconstruction: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.modules_per_stage == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "stages, modules and channels must be positive (got S={}, M={}, C={})",
                self.stages, self.modules_per_stage, self.channels
            )));
        }
        for k in [self.k1, self.k2] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel sizes must be odd, got {k}")));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Longest input-to-output path in convolution layers.
pub fn depth(config: &ModelConfig) -> usize {
    (config.modules_per_stage * 2 + 1) * config.stages + 2
}

/// A convolution followed by batch normalization. Any activation is applied
/// by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnUnit {
    pub conv: Conv2dParams,
    pub bn: BatchNormParams,
}

#[derive(Clone, Debug)]
pub struct UnitCache {
    input: Tensor,
    bn: BnCache,
}

impl ConvBnUnit {
    pub fn zeros(in_c: usize, out_c: usize, k: usize) -> Result<Self> {
        Ok(ConvBnUnit {
            conv: Conv2dParams::zeros(in_c, out_c, k)?,
            bn: BatchNormParams::identity(out_c),
        })
    }

    /// Caches are only kept in train mode.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<UnitCache>)> {
        let z = conv2d(x, &self.conv)?;
        match mode {
            Mode::Train => {
                let (y, bn) = batchnorm_forward(&z, &self.bn, mode)?;
                Ok((y, Some(UnitCache { input: x.clone(), bn })))
            }
            Mode::Eval => Ok((batchnorm_infer(&z, &self.bn)?, None)),
        }
    }

    /// Accumulates parameter gradients into `acc` and returns the input gradient.
    pub fn backward(&self, cache: &UnitCache, grad: &Tensor, acc: &mut ConvBnUnit) -> Result<Tensor> {
        let bn = batchnorm_backward(&cache.bn, grad)?;
        add_into(&mut acc.bn.gamma, &bn.gamma);
        add_into(&mut acc.bn.beta, &bn.beta);
        let conv = conv2d_backward(&cache.input, &self.conv, &bn.input)?;
        acc.conv.weight.add_assign(&conv.weight)?;
        add_into(&mut acc.conv.bias, &conv.bias);
        Ok(conv.input)
    }

    fn commit(&mut self, cache: &UnitCache) {
        if let Some(stats) = cache.bn.stats() {
            self.bn.apply_stats(stats);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// One cascade stage: an entry unit and `M` MSC modules.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnetwork {
    pub entry: ConvBnUnit,
    pub modules: Vec<MscModule>,
}

#[derive(Clone, Debug)]
pub struct SubnetworkCache {
    entry: UnitCache,
    entry_pre: Tensor,
    modules: Vec<MscCache>,
    last: MscLastCache,
}

impl Subnetwork {
    pub fn zeros(channels: usize, modules: usize, k1: usize, k2: usize) -> Result<Self> {
        Ok(Subnetwork {
            entry: ConvBnUnit::zeros(channels, channels, 3)?,
            modules: (0..modules)
                .map(|_| MscModule::zeros(channels, k1, k2))
                .collect::<Result<_>>()?,
        })
    }

    pub fn width(&self) -> usize {
        self.entry.conv.out_channels()
    }

    pub fn forward(
        &self,
        d_prev: &Tensor,
        slope: f64,
        mode: Mode,
        use_rfl: bool,
    ) -> Result<(Tensor, Option<SubnetworkCache>)> {
        let (last, body) = self
            .modules
            .split_last()
            .ok_or_else(|| Error::invalid("subnetwork has no MSC modules"))?;
        if d_prev.shape().c != self.entry.conv.in_channels() {
            return Err(Error::invalid(format!(
                "subnetwork expects {} channels, input is {}",
                self.entry.conv.in_channels(),
                d_prev.shape()
            )));
        }
        let (entry_pre, entry) = self.entry.forward(d_prev, mode)?;
        let t = leaky_relu(&entry_pre, slope);

        let mut caches = Vec::with_capacity(body.len());
        let (mut x1, mut x2) = (t.clone(), t);
        for module in body {
            let (y1, y2, cache) = module.forward(&x1, &x2, slope, mode)?;
            x1 = y1;
            x2 = y2;
            caches.extend(cache);
        }
        let (mut out, last_cache) = last.last_forward(&x1, &x2, slope, mode)?;
        if use_rfl {
            out.add_assign(d_prev)?;
        }

        let cache = match (entry, last_cache) {
            (Some(entry), Some(last)) => Some(SubnetworkCache {
                entry,
                entry_pre,
                modules: caches,
                last,
            }),
            _ => None,
        };
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        cache: &SubnetworkCache,
        grad: &Tensor,
        slope: f64,
        use_rfl: bool,
        acc: &mut Subnetwork,
    ) -> Result<Tensor> {
        let m = self.modules.len();
        if cache.modules.len() + 1 != m || acc.modules.len() != m {
            return Err(Error::invalid("subnetwork cache does not match module count"));
        }
        let (mut g1, mut g2) = self.modules[m - 1].last_backward(&cache.last, grad, slope, &mut acc.modules[m - 1])?;
        for i in (0..m - 1).rev() {
            let (a, b) = self.modules[i].backward(&cache.modules[i], &g1, &g2, slope, &mut acc.modules[i])?;
            g1 = a;
            g2 = b;
        }
        g1.add_assign(&g2)?;
        let g_pre = leaky_relu_backward(&cache.entry_pre, slope, &g1)?;
        let mut g_prev = self.entry.backward(&cache.entry, &g_pre, &mut acc.entry)?;
        if use_rfl {
            g_prev.add_assign(grad)?;
        }
        Ok(g_prev)
    }

    fn commit(&mut self, cache: &SubnetworkCache) {
        self.entry.commit(&cache.entry);
        let m = self.modules.len();
        for (module, c) in self.modules.iter_mut().zip(&cache.modules) {
            module.commit(c);
        }
        self.modules[m - 1].commit_last(&cache.last);
    }
}

/// Kind of a named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    Ensemble,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Debug)]
pub struct Param<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub values: &'a [f64],
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub values: &'a mut [f64],
}

fn push_conv<'a>(out: &mut Vec<Param<'a>>, prefix: &str, conv: &'a Conv2dParams) {
    out.push(Param {
        name: format!("{prefix}.weight"),
        kind: ParamKind::ConvWeight,
        dims: conv.weight.shape().dims().to_vec(),
        values: conv.weight.data(),
    });
    out.push(Param {
        name: format!("{prefix}.bias"),
        kind: ParamKind::ConvBias,
        dims: vec![conv.bias.len()],
        values: &conv.bias,
    });
}

fn push_unit<'a>(out: &mut Vec<Param<'a>>, prefix: &str, unit: &'a ConvBnUnit) {
    push_conv(out, &format!("{prefix}.conv"), &unit.conv);
    let bn = &unit.bn;
    for (suffix, kind, values) in [
        ("gamma", ParamKind::BnGamma, &bn.gamma),
        ("beta", ParamKind::BnBeta, &bn.beta),
        ("running_mean", ParamKind::BnRunningMean, &bn.running_mean),
        ("running_var", ParamKind::BnRunningVar, &bn.running_var),
    ] {
        out.push(Param {
            name: format!("{prefix}.bn.{suffix}"),
            kind,
            dims: vec![values.len()],
            values,
        });
    }
}

fn push_conv_mut<'a>(out: &mut Vec<ParamMut<'a>>, prefix: &str, conv: &'a mut Conv2dParams) {
    let dims = conv.weight.shape().dims().to_vec();
    let nb = conv.bias.len();
    out.push(ParamMut {
        name: format!("{prefix}.weight"),
        kind: ParamKind::ConvWeight,
        dims,
        values: conv.weight.data_mut(),
    });
    out.push(ParamMut {
        name: format!("{prefix}.bias"),
        kind: ParamKind::ConvBias,
        dims: vec![nb],
        values: &mut conv.bias,
    });
}

fn push_unit_mut<'a>(out: &mut Vec<ParamMut<'a>>, prefix: &str, unit: &'a mut ConvBnUnit) {
    push_conv_mut(out, &format!("{prefix}.conv"), &mut unit.conv);
    let bn = &mut unit.bn;
    for (suffix, kind, values) in [
        ("gamma", ParamKind::BnGamma, &mut bn.gamma),
        ("beta", ParamKind::BnBeta, &mut bn.beta),
        ("running_mean", ParamKind::BnRunningMean, &mut bn.running_mean),
        ("running_var", ParamKind::BnRunningVar, &mut bn.running_var),
    ] {
        out.push(ParamMut {
            name: format!("{prefix}.bn.{suffix}"),
            kind,
            dims: vec![values.len()],
            values,
        });
    }
}

fn unit_prefix(q: usize, m: usize, branch: usize, unit: usize) -> String {
    format!("stage{q}.msc{m}.b{branch}.u{}", unit + 1)
}

/// The full network.
#[derive(Clone, Debug, PartialEq)]
pub struct CmscModel {
    pub config: ModelConfig,
    pub feature_extract: ConvBnUnit,
    pub subnetworks: Vec<Subnetwork>,
    /// One layer per stage, or a single layer when reconstruction is shared.
    pub reconstructions: Vec<Conv2dParams>,
    pub ensemble_weights: Vec<f64>,
}

/// Everything backward needs from a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct ModelCache {
    input_shape: crate::numerics::Shape,
    feature: UnitCache,
    feature_pre: Tensor,
    stages: Vec<SubnetworkCache>,
    features: Vec<Tensor>,
    intermediates: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Weighted ensemble of the stage predictions.
    pub output: Tensor,
    /// Per-stage predictions `R_q(D_q) + x`.
    pub intermediates: Vec<Tensor>,
    /// Present for train-mode passes only.
    pub cache: Option<ModelCache>,
}

impl CmscModel {
    /// Zero convolutions, identity batch norm and uniform ensemble weights.
    /// With this parameterization every prediction equals the input.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let recon_count = if config.share_reconstruction { 1 } else { config.stages };
        Ok(CmscModel {
            feature_extract: ConvBnUnit::zeros(1, c, 3)?,
            subnetworks: (0..config.stages)
                .map(|_| Subnetwork::zeros(c, config.modules_per_stage, config.k1, config.k2))
                .collect::<Result<_>>()?,
            reconstructions: (0..recon_count)
                .map(|_| Conv2dParams::zeros(c, 1, 3))
                .collect::<Result<_>>()?,
            ensemble_weights: vec![1.0 / config.stages as f64; config.stages],
            config,
        })
    }

    /// He-normal initialized model.
    pub fn initialized(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = CmscModel::new(config)?;
        model.init_weights(seed);
        Ok(model)
    }

    /// Redraws every convolution weight from `N(0, 2 / fan_in)` and resets
    /// biases, batch norm and ensemble weights.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.config.stages as f64;
        for p in self.params_mut() {
            match p.kind {
                ParamKind::ConvWeight => {
                    let fan_in = p.dims[1] * p.dims[2] * p.dims[3];
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in p.values.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = z * std;
                    }
                }
                ParamKind::ConvBias | ParamKind::BnBeta | ParamKind::BnRunningMean => p.values.fill(0.0),
                ParamKind::BnGamma | ParamKind::BnRunningVar => p.values.fill(1.0),
                ParamKind::Ensemble => p.values.fill(1.0 / s),
            }
        }
    }

    pub fn share_reconstruction(&self) -> bool {
        self.config.share_reconstruction
    }

    fn reconstruction(&self, stage: usize) -> &Conv2dParams {
        &self.reconstructions[if self.config.share_reconstruction { 0 } else { stage }]
    }

    /// Every tensor of the model, learnable or not, in a fixed order.
    pub fn params(&self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        push_unit(&mut out, "fe", &self.feature_extract);
        for (q, sub) in self.subnetworks.iter().enumerate() {
            push_unit(&mut out, &format!("stage{q}.entry"), &sub.entry);
            for (m, module) in sub.modules.iter().enumerate() {
                for (b, branch) in [(1, &module.branch1), (2, &module.branch2)] {
                    for (u, unit) in branch.iter().enumerate() {
                        push_unit(&mut out, &unit_prefix(q, m, b, u), unit);
                    }
                }
            }
        }
        for (q, conv) in self.reconstructions.iter().enumerate() {
            push_conv(&mut out, &format!("recon{q}"), conv);
        }
        out.push(Param {
            name: "ensemble".into(),
            kind: ParamKind::Ensemble,
            dims: vec![self.ensemble_weights.len()],
            values: &self.ensemble_weights,
        });
        out
    }

    /// Mutable counterpart of [`CmscModel::params`], same order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        push_unit_mut(&mut out, "fe", &mut self.feature_extract);
        for (q, sub) in self.subnetworks.iter_mut().enumerate() {
            push_unit_mut(&mut out, &format!("stage{q}.entry"), &mut sub.entry);
            for (m, module) in sub.modules.iter_mut().enumerate() {
                for (b, branch) in [(1, &mut module.branch1), (2, &mut module.branch2)] {
                    for (u, unit) in branch.iter_mut().enumerate() {
                        push_unit_mut(&mut out, &unit_prefix(q, m, b, u), unit);
                    }
                }
            }
        }
        for (q, conv) in self.reconstructions.iter_mut().enumerate() {
            push_conv_mut(&mut out, &format!("recon{q}"), conv);
        }
        let s = self.ensemble_weights.len();
        out.push(ParamMut {
            name: "ensemble".into(),
            kind: ParamKind::Ensemble,
            dims: vec![s],
            values: &mut self.ensemble_weights,
        });
        out
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind.is_learnable())
            .map(|p| p.values.len())
            .sum()
    }

    pub fn depth(&self) -> usize {
        depth(&self.config)
    }

    /// Runs the network on a one-channel batch.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Forward> {
        let shape = x.shape();
        if shape.c != 1 {
            return Err(Error::invalid(format!(
                "network input must have one channel, got {shape}"
            )));
        }
        let slope = self.config.leaky_slope;
        let train = mode == Mode::Train;

        let (feature_pre, feature) = self.feature_extract.forward(x, mode)?;
        let mut d = leaky_relu(&feature_pre, slope);

        let s = self.config.stages;
        let mut stages = Vec::with_capacity(if train { s } else { 0 });
        let mut features = Vec::with_capacity(if train { s } else { 0 });
        let mut residuals = Vec::with_capacity(s);
        for (q, sub) in self.subnetworks.iter().enumerate() {
            let (next, cache) = sub.forward(&d, slope, mode, self.config.use_rfl)?;
            d = next;
            residuals.push(conv2d(&d, self.reconstruction(q))?);
            stages.extend(cache);
            if train {
                features.push(d.clone());
            }
        }

        // Σ w_q (r_q + x) arranged as (Σ w_q)·x + Σ w_q r_q: when the
        // weights sum to one and residuals vanish the input passes through
        // bit-exactly.
        let w_sum: f64 = self.ensemble_weights.iter().sum();
        let mut output = x.scale(w_sum);
        for (w, r) in self.ensemble_weights.iter().zip(&residuals) {
            output.axpy(*w, r)?;
        }
        let intermediates = residuals
            .into_iter()
            .map(|r| r.add(x))
            .collect::<Result<Vec<_>>>()?;

        let cache = match feature {
            Some(feature) if train => Some(ModelCache {
                input_shape: shape,
                feature,
                feature_pre,
                stages,
                features,
                intermediates: intermediates.clone(),
            }),
            _ => None,
        };
        Ok(Forward {
            output,
            intermediates,
            cache,
        })
    }

    /// Eval-mode forward returning only the ensembled prediction.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.output)
    }

    /// Gradients of a scalar loss with respect to every learnable parameter,
    /// given the loss gradients at the ensembled output and at each stage
    /// prediction.
    pub fn backward(&self, cache: &ModelCache, grad_output: &Tensor, grad_intermediates: &[Tensor]) -> Result<Gradients> {
        let s = self.config.stages;
        if grad_intermediates.len() != s || cache.stages.len() != s {
            return Err(Error::invalid(format!(
                "expected {s} stage gradients, got {}",
                grad_intermediates.len()
            )));
        }
        check_same(grad_output.shape(), cache.input_shape, "cmsc_backward")?;
        for g in grad_intermediates {
            check_same(g.shape(), cache.input_shape, "cmsc_backward")?;
        }

        let slope = self.config.leaky_slope;
        let mut acc = self.zeros_like();
        let mut grad_features = Vec::with_capacity(s);
        for q in 0..s {
            acc.ensemble_weights[q] = grad_output.dot(&cache.intermediates[q])?;
            let mut g = grad_intermediates[q].clone();
            g.axpy(self.ensemble_weights[q], grad_output)?;
            let conv = conv2d_backward(&cache.features[q], self.reconstruction(q), &g)?;
            let r = if self.config.share_reconstruction { 0 } else { q };
            acc.reconstructions[r].weight.add_assign(&conv.weight)?;
            add_into(&mut acc.reconstructions[r].bias, &conv.bias);
            grad_features.push(conv.input);
        }

        let mut grad_d: Option<Tensor> = None;
        for q in (0..s).rev() {
            let mut g = grad_features.pop().expect("one gradient per stage");
            if let Some(later) = &grad_d {
                g.add_assign(later)?;
            }
            grad_d = Some(self.subnetworks[q].backward(
                &cache.stages[q],
                &g,
                slope,
                self.config.use_rfl,
                &mut acc.subnetworks[q],
            )?);
        }
        let grad_d = grad_d.expect("at least one stage");
        let g_pre = leaky_relu_backward(&cache.feature_pre, slope, &grad_d)?;
        self.feature_extract
            .backward(&cache.feature, &g_pre, &mut acc.feature_extract)?;
        Ok(Gradients { inner: acc })
    }

    /// Writes the batch statistics gathered during a train-mode pass into
    /// the running statistics.
    pub fn commit_running_stats(&mut self, cache: &ModelCache) {
        self.feature_extract.commit(&cache.feature);
        for (sub, c) in self.subnetworks.iter_mut().zip(&cache.stages) {
            sub.commit(c);
        }
    }

    fn zeros_like(&self) -> CmscModel {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.values.fill(0.0);
        }
        z
    }
}

/// Parameter gradients, laid out exactly like the model they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    inner: CmscModel,
}

impl Gradients {
    /// Learnable slots in [`CmscModel::params`] order.
    pub fn learnable(&self) -> Vec<Param<'_>> {
        self.inner.params().into_iter().filter(|p| p.kind.is_learnable()).collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.inner.params_mut().into_iter().filter(|p| p.kind.is_learnable()).collect()
    }

    pub fn ensemble(&self) -> &[f64] {
        &self.inner.ensemble_weights
    }

    pub fn as_model(&self) -> &CmscModel {
        &self.inner
    }

    pub fn is_zero(&self) -> bool {
        self.learnable().iter().all(|p| p.values.iter().all(|&v| v == 0.0))
    }
}
