use crate::error::{Error, Result};
use crate::numerics::{check_same, Tensor};

/// Loss value, its unweighted parts, and gradients with respect to the
/// ensembled output and every stage prediction.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: f64,
    /// `(1/2K) Σ_k ‖y − ŷ‖²`
    pub final_term: f64,
    /// `(1/2K) Σ_k ‖y − ŷ_q‖²` per stage.
    pub stage_terms: Vec<f64>,
    pub grad_final: Tensor,
    pub grad_intermediates: Vec<Tensor>,
}

/// Weight of the ensembled-output term: `2 / (S + 2)`.
pub fn default_alpha(stages: usize) -> f64 {
    2.0 / (stages as f64 + 2.0)
}

/// `α·(1/2K)Σ‖y − ŷ‖² + (1 − α)·(1/2SK)Σ_q Σ_k ‖y − ŷ_q‖²` where `K` is the
/// batch size and `ŷ = Σ w_q ŷ_q` is passed in as `final_output`.
pub fn cascaded_loss(final_output: &Tensor, intermediates: &[Tensor], target: &Tensor, alpha: f64) -> Result<LossOutput> {
    let s = intermediates.len();
    if s == 0 {
        return Err(Error::invalid("cascaded loss needs at least one stage prediction"));
    }
    check_same(final_output.shape(), target.shape(), "cascaded_loss")?;
    for t in intermediates {
        check_same(t.shape(), target.shape(), "cascaded_loss")?;
    }
    let k = target.shape().n;
    if k == 0 {
        return Err(Error::invalid("cascaded loss needs a non-empty batch"));
    }
    let k = k as f64;

    let diff = final_output.sub(target)?;
    let final_term = diff.sum_sq() / (2.0 * k);
    let grad_final = diff.scale(alpha / k);

    let stage_scale = (1.0 - alpha) / (s as f64 * k);
    let mut stage_terms = Vec::with_capacity(s);
    let mut grad_intermediates = Vec::with_capacity(s);
    for t in intermediates {
        let d = t.sub(target)?;
        stage_terms.push(d.sum_sq() / (2.0 * k));
        grad_intermediates.push(d.scale(stage_scale));
    }
    let stage_mean = stage_terms.iter().sum::<f64>() / s as f64;
    Ok(LossOutput {
        total: alpha * final_term + (1.0 - alpha) * stage_mean,
        final_term,
        stage_terms,
        grad_final,
        grad_intermediates,
    })
}
