use crate::autodiff::{Buffer, Element, Tensor};
use crate::error::{Error, Result};

/// Momentum buffers, one per parameter in the order passed to [`sgd_step`].
#[derive(Clone, Debug, Default)]
pub struct SgdState<T: Element> {
    velocity: Vec<Buffer<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new() -> Self {
        SgdState {
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Buffer<T>] {
        &self.velocity
    }
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// v <- momentum * v + (grad + weight_decay * param)
/// param <- param - lr * v
/// ```
///
/// Gradients are cleared afterwards. Nothing is modified if any parameter
/// lacks a gradient.
pub fn sgd_step<T: Element>(
    params: &[Tensor<T>],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::State(format!(
            "sgd_step: parameter {i} has no gradient"
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Buffer::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len()
        || state
            .velocity
            .iter()
            .zip(params)
            .any(|(v, p)| v.shape() != p.shape())
    {
        return Err(Error::State(
            "sgd_step: optimizer state does not match parameters".into(),
        ));
    }
    let (lr, mom, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for (p, v) in params.iter().zip(&mut state.velocity) {
        let g = p.take_grad().expect("checked above");
        let mut value = p.value_mut();
        for ((x, vel), &gi) in value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = mom * *vel + gi + wd * *x;
            *x = *x - lr * *vel;
        }
    }
    Ok(())
}

/// `base_lr * gamma^floor(epoch / step_size)`.
pub fn step_lr(epoch: usize, base_lr: f64, step_size: usize, gamma: f64) -> f64 {
    base_lr * gamma.powi((epoch / step_size.max(1)) as i32)
}
