//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
#[allow(unused_imports)]
use num_traits::Float;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        AdamState { step: 0, m, v }
    }
}

/// One Adam update of every tensor in `params` from its accumulated gradient.
/// Tensors without a gradient accumulator are left alone.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[state.m.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let (ob1, ob2) = (T::from_f64(1.0 - BETA1), T::from_f64(1.0 - BETA2));
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(EPSILON);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != p.len() {
            return Err(Error::shape("adam_step", p.dims(), &[m.len()]));
        }
        let Some(g) = p.grad().map(|g| g.to_vec()) else {
            continue;
        };
        for (((w, mi), vi), gi) in p
            .values_mut()
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(g)
        {
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            let v_hat = *vi * inv_bc2;
            *w -= step_size * *mi / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
