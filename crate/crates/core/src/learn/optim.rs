use super::model::EmbeddingModel;
use crate::error::{Error, Result};

/// Multi-step schedule: `lr0 * factor^(epoch / step)`.
pub fn lr_at_epoch(lr0: f64, decay_factor: f64, step: usize, epoch: usize) -> f64 {
    let decays = epoch.checked_div(step).unwrap_or(0);
    lr0 * decay_factor.powi(decays as i32)
}

/// SGD with momentum and L2 weight decay on weights (not biases):
/// `v = momentum * v + g + wd * p; p -= lr * v`.
pub fn sgd_step(
    model: &mut EmbeddingModel,
    grads: &EmbeddingModel,
    velocity: &mut EmbeddingModel,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !model.same_shape(grads) || !model.same_shape(velocity) {
        return Err(Error::Dimension("gradient or velocity shape differs from model".into()));
    }
    let g = grads.params();
    let v = velocity.params_mut();
    for (k, ((p, g), v)) in model.params_mut().into_iter().zip(g).zip(v).enumerate() {
        // even slots are weight matrices, odd slots biases
        let wd = if k % 2 == 0 { weight_decay } else { 0.0 };
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}
