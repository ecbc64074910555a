//! Slice-by-slice baseline: the 2D U-net applied to every `b x c` slice
//! along `a`, trained with plain dice loss.
//!
//! A training step takes one volume's slices as its minibatch: each slice
//! goes through the U-net on its own and the dice loss is taken over the
//! restacked volume. Per-slice dice collapses here: with the 1e-7
//! smoothing an empty slice scores loss 0 only for a near-zero
//! prediction, and most phantom slices are empty.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::train::{Learner, RunState, Sample};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::Volume;
use crate::metrics::dice_loss;
use crate::optim::{adam_step, AdamState};
use crate::par;
use crate::tensor::Scalar;
use crate::unet::UNetModel;

/// Segments each slice along `a` independently and restacks.
pub fn slice_by_slice_segment<T: Scalar>(model: &UNetModel<T>, x: &Volume<T>) -> Result<Volume<T>> {
    let idx: Vec<usize> = (0..x.dims()[0]).collect();
    let slices: Result<Vec<_>> = par::map(&idx, |&i| model.predict(&x.slice_a(i)))
        .into_iter()
        .collect();
    Volume::from_slices(&slices?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceLearner {
    pub unet: UNetModel<f32>,
    pub adam: AdamState<f32>,
}

impl SliceLearner {
    pub fn new(unet: UNetModel<f32>) -> Self {
        let adam = AdamState::new(unet.params().iter().map(|p| p.len()));
        SliceLearner { unet, adam }
    }

    fn step(&mut self, sample: &Sample, lr: f64) -> Result<f32> {
        let [a, b, c] = sample.scan.dims();
        let mut g = Graph::new();
        let params = self.unet.bind(&mut g, true);
        let mut outs = Vec::with_capacity(a);
        for i in 0..a {
            let img = sample.scan.slice_a(i);
            let x = g.constant(img.dims(), img.into_data())?;
            let y = self.unet.forward(&mut g, &params, x)?;
            outs.push(g.reshape(y, &[1, b, c])?);
        }
        // Pairwise concatenation keeps the copying at O(n log n).
        while outs.len() > 1 {
            let mut next = Vec::with_capacity(outs.len().div_ceil(2));
            for pair in outs.chunks(2) {
                next.push(match *pair {
                    [l, r] => g.concat_channels(l, r)?,
                    [l] => l,
                    _ => unreachable!(),
                });
            }
            outs = next;
        }
        let loss = g.dice_loss(sample.mask.data(), outs[0])?;
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = g.backward(loss)?;
        for (p, &v) in self.unet.params_mut().iter_mut().zip(&params) {
            p.zero_grad();
            grads.accumulate_into(v, p);
        }
        let mut ps: Vec<_> = self.unet.params_mut().iter_mut().collect();
        adam_step(&mut ps, &mut self.adam, lr)?;
        self.unet
            .params_mut()
            .iter_mut()
            .for_each(|p| p.zero_grad());
        Ok(value)
    }
}

impl Learner for SliceLearner {
    type Snapshot = UNetModel<f32>;

    fn train_epoch(&mut self, data: &[Sample], state: &mut RunState) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut state.rng);
        let (mut total, mut n) = (0.0, 0usize);
        for s in order {
            let loss = self.step(&data[s], state.lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: state.epoch + 1,
                    sample: s,
                    value: loss as f64,
                });
            }
            total += loss as f64;
            n += 1;
        }
        Ok(total / n as f64)
    }

    fn validation_loss(&self, data: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in data {
            total += dice_loss(&s.mask, &self.predict(&s.scan)?)?;
        }
        Ok(total / data.len() as f64)
    }

    fn predict(&self, scan: &Volume) -> Result<Volume> {
        slice_by_slice_segment(&self.unet, scan)
    }

    fn snapshot(&self) -> UNetModel<f32> {
        self.unet.clone()
    }

    fn restore(&mut self, snapshot: &UNetModel<f32>) {
        self.unet = snapshot.clone();
    }
}
