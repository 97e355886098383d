//! Decoupled-weight-decay Adam with a cosine warm-restart schedule.
//! The backbone and aggregator each keep their own moment state and base
//! learning rate.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-tensor first/second moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_shapes(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
        }
    }
}

/// One AdamW step over a parameter group. Returns false (and applies
/// nothing) when any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr_factor: f64,
) -> bool {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.all_finite()) {
        return false;
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = T::from_f64(cfg.lr * lr_factor);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_m_b1 = T::ONE - b1;
    let one_m_b2 = T::ONE - b2;
    let eps = T::from_f64(cfg.eps);
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let decay = T::ONE - lr * T::from_f64(cfg.weight_decay);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        debug_assert_eq!(p.shape(), g.shape());
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = b1 * *mv + one_m_b1 * gv;
            *vv = b2 * *vv + one_m_b2 * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv = *pv * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    true
}

/// Cosine annealing with warm restarts: the factor starts at 1, reaches 0 at
/// the end of each period, and periods grow by t_mult at each restart.
#[derive(Clone, Copy, Debug)]
pub struct CosineWarmRestarts {
    pub t0: u32,
    pub t_mult: u32,
}

impl CosineWarmRestarts {
    pub fn factor(&self, epoch: u32) -> f64 {
        let mut t = epoch as u64;
        let mut ti = self.t0.max(1) as u64;
        loop {
            if t < ti {
                break;
            }
            t -= ti;
            ti *= self.t_mult.max(1) as u64;
        }
        0.5 * (1.0 + (std::f64::consts::PI * t as f64 / ti as f64).cos())
    }
}
