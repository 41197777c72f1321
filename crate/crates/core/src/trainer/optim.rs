use crate::model::{CmscModel, Gradients, ParamKind};

/// Momentum buffers, one per learnable tensor in [`CmscModel::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &CmscModel) -> Self {
        OptimizerState {
            velocity: model
                .params()
                .iter()
                .filter(|p| p.kind.is_learnable())
                .map(|p| vec![0.0; p.values.len()])
                .collect(),
        }
    }
}

/// Clamps every gradient scalar into `[-eta, eta]`.
pub fn clip_gradients(grads: &mut Gradients, eta: f64) {
    for p in grads.learnable_mut() {
        for g in p.values.iter_mut() {
            *g = g.clamp(-eta, eta);
        }
    }
}

/// Batch-norm shifts and ensemble weights are not decayed.
pub fn decays(kind: ParamKind) -> bool {
    !matches!(kind, ParamKind::BnBeta | ParamKind::Ensemble)
}

/// Heavy-ball SGD: `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    model: &mut CmscModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let grads = grads.learnable();
    let params = model.params_mut().into_iter().filter(|p| p.kind.is_learnable());
    for ((p, g), v) in params.zip(&grads).zip(state.velocity.iter_mut()) {
        debug_assert_eq!(p.name, g.name);
        let wd = if decays(p.kind) { weight_decay } else { 0.0 };
        for ((theta, &grad), vel) in p.values.iter_mut().zip(g.values).zip(v.iter_mut()) {
            *vel = momentum * *vel + (grad + wd * *theta);
            *theta -= lr * *vel;
        }
    }
}

/// Step decay: `lr0 / factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, lr0: f64, decay_every: usize, decay_factor: f64) -> f64 {
    let steps = if decay_every == 0 { 0 } else { epoch / decay_every };
    lr0 / decay_factor.powi(steps as i32)
}
