//! The random 2.5D network: a shared 2D U-net applied to projections, two
//! filtered-backprojection paths, and the training protocol around them.
//!
//! Path 1 segments `p` projections drawn per epoch (one per block of
//! `180/p` degrees) and trains everything it touches. Path 2 segments the
//! full grid of `m` directions; its U-net outputs sit behind a stop-gradient
//! so only its own filters and head learn from it.

mod cv;
mod slices;
mod train;

pub use cv::{
    cross_validate, evaluate_model, fold_assignment, fold_seed, summarize, train_val_split,
    CrossValidation, FoldReport, ModelKind, TrainedModel,
};
pub use slices::{slice_by_slice_segment, SliceLearner};
pub use train::{EpochDecision, EpochRecord, Learner, Random25DLearner, RunState, Sample, Trainer};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, AngleSet, FiltrationBank, Image, ProjectionStack, Volume};
use crate::par;
use crate::tensor::{Scalar, Tensor};
use crate::unet::{UNetConfig, UNetModel};

/// Run configuration. Field names double as keys of the text config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Path-1 direction count; `180 / p` must be an integer.
    pub p: usize,
    /// Path-2 grid size.
    pub m: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub minibatch: usize,
    pub folds: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub unet_depth: usize,
    pub unet_base: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 12,
            m: 60,
            lr: 0.001,
            plateau_patience: 3,
            early_stop_patience: 5,
            minibatch: 1,
            folds: 7,
            seed: 0,
            max_epochs: 100,
            unet_depth: 3,
            unet_base: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.p == 0 || 180 % self.p != 0 {
            return bad(format!("p = {} must divide 180", self.p));
        }
        if self.p > self.m {
            return bad(format!("p = {} exceeds m = {}", self.p, self.m));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.minibatch != 1 {
            return bad(format!(
                "only minibatch = 1 is supported, got {}",
                self.minibatch
            ));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        self.unet_config().map(|_| ())
    }

    pub fn unet_config(&self) -> Result<UNetConfig> {
        UNetConfig::new(self.unet_depth, self.unet_base)
    }
}

pub fn make_angle_grid(m: usize) -> Result<AngleSet> {
    AngleSet::grid(m)
}

/// Grid indices `k` with `k * 180 / m` inside block `b` of `p`, i.e.
/// `b * m <= k * p < (b + 1) * m`. Integer arithmetic keeps the block edges exact.
fn block_members(p: usize, m: usize, b: usize) -> core::ops::Range<usize> {
    let lo = (b * m).div_ceil(p);
    let hi = ((b + 1) * m).div_ceil(p);
    lo..hi.min(m)
}

/// One grid angle drawn uniformly from each block `[k*180/p, (k+1)*180/p)`,
/// returned in block (hence ascending) order.
pub fn sample_path1_angles<R: Rng + ?Sized>(p: usize, m: usize, rng: &mut R) -> Result<Vec<f64>> {
    if p == 0 || 180 % p != 0 {
        return Err(Error::Config(format!("p = {p} must divide 180")));
    }
    let grid = make_angle_grid(m)?;
    (0..p)
        .map(|b| {
            let r = block_members(p, m, b);
            if r.is_empty() {
                return Err(Error::Config(format!(
                    "block {b} of {p} holds no angle of the {m}-direction grid"
                )));
            }
            Ok(grid.angles()[rng.gen_range(r)])
        })
        .collect()
}

/// Learned scalar gain and shift of a fine-tuning head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T = f32> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new(gain: f64, shift: f64) -> Self {
        Head {
            gain: Tensor::scalar(T::from_f64(gain)).requiring_grad(),
            shift: Tensor::scalar(T::from_f64(shift)).requiring_grad(),
        }
    }

    pub fn values(&self) -> (T, T) {
        (self.gain.values()[0], self.shift.values()[0])
    }
}

/// Shared U-net, both filtration banks and both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model25D<T = f32> {
    pub unet: UNetModel<T>,
    /// `p` filters indexed by block.
    pub bank_p: FiltrationBank<T>,
    /// `m` filters over the full grid.
    pub bank_m: FiltrationBank<T>,
    pub head1: Head<T>,
    pub head2: Head<T>,
}

/// Graph nodes of every model parameter, in [`Model25D::params_mut`] order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub unet: Vec<Var>,
    pub bank_p: Vec<Var>,
    pub bank_m: Vec<Var>,
    pub head1: (Var, Var),
    pub head2: (Var, Var),
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.unet.clone();
        v.extend(&self.bank_p);
        v.extend(&self.bank_m);
        v.extend([self.head1.0, self.head1.1, self.head2.0, self.head2.1]);
        v
    }
}

impl<T: Scalar> Model25D<T> {
    /// Identity filters, `head1 = (1, -p/2)`, `head2 = (1, -m/2)`.
    pub fn new(unet: UNetModel<T>, p: usize, m: usize) -> Result<Self> {
        if p == 0 || 180 % p != 0 || p > m {
            return Err(Error::Config(format!(
                "invalid direction counts p = {p}, m = {m}"
            )));
        }
        let starts: Vec<f64> = (0..p).map(|k| (k * 180 / p) as f64).collect();
        Ok(Model25D {
            unet,
            bank_p: FiltrationBank::identity(&starts),
            bank_m: FiltrationBank::identity(make_angle_grid(m)?.angles()),
            head1: Head::new(1.0, -(p as f64) / 2.0),
            head2: Head::new(1.0, -(m as f64) / 2.0),
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(UNetModel::new(cfg.unet_config()?, cfg.seed)?, cfg.p, cfg.m)
    }

    pub fn p(&self) -> usize {
        self.bank_p.len()
    }

    pub fn m(&self) -> usize {
        self.bank_m.len()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .unet
            .names()
            .iter()
            .map(|n| format!("unet.{n}"))
            .collect();
        names.extend((0..self.p()).map(|k| format!("bank_p.{k}")));
        names.extend((0..self.m()).map(|k| format!("bank_m.{k}")));
        for h in ["head1", "head2"] {
            names.push(format!("{h}.gain"));
            names.push(format!("{h}.shift"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.unet.params().iter().collect();
        v.extend(self.bank_p.filters());
        v.extend(self.bank_m.filters());
        v.extend([
            &self.head1.gain,
            &self.head1.shift,
            &self.head2.gain,
            &self.head2.shift,
        ]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.unet.params_mut().iter_mut().collect();
        v.extend(self.bank_p.filters_mut());
        v.extend(self.bank_m.filters_mut());
        v.extend([
            &mut self.head1.gain,
            &mut self.head1.shift,
            &mut self.head2.gain,
            &mut self.head2.shift,
        ]);
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        BoundModel {
            unet: self.unet.bind(g, true),
            bank_p: self.bank_p.filters().iter().map(|f| g.param(f)).collect(),
            bank_m: self.bank_m.filters().iter().map(|f| g.param(f)).collect(),
            head1: (g.param(&self.head1.gain), g.param(&self.head1.shift)),
            head2: (g.param(&self.head2.gain), g.param(&self.head2.shift)),
        }
    }

    /// Adds the gradients of the bound leaves into the parameter accumulators.
    pub fn accumulate(&mut self, bound: &BoundModel, grads: &Gradients<T>) {
        for (p, v) in self.params_mut().into_iter().zip(bound.vars()) {
            grads.accumulate_into(v, p);
        }
    }

    /// U-net segmentation of the projection of `x` along each angle.
    pub fn segment_projections(&self, x: &Volume<T>, angles: &[f64]) -> Result<Vec<Image<T>>> {
        par::map(angles, |&a| self.unet.predict(&geometry::mip_project(x, a)))
            .into_iter()
            .collect()
    }

    /// Path-2 pre-sigmoid volume, outside of any graph.
    pub fn path2_logits(&self, x: &Volume<T>) -> Result<Volume<T>> {
        let angles = self.bank_m.angles();
        let stack = ProjectionStack::new(angles.to_vec(), self.segment_projections(x, angles)?)?;
        self.reconstruct_logits(&stack, &self.bank_m, &self.head2, x.dims())
    }

    /// Filters, backprojects and applies `head` (without the sigmoid).
    pub fn reconstruct_logits(
        &self,
        stack: &ProjectionStack<T>,
        bank: &FiltrationBank<T>,
        head: &Head<T>,
        dims: [usize; 3],
    ) -> Result<Volume<T>> {
        let filtered = geometry::filtrate(stack, bank)?;
        let vol = geometry::backproject(&filtered, dims)?;
        let (gain, shift) = head.values();
        Ok(geometry::head_logits(&vol, gain, shift))
    }

    /// Final output `y_hat`: path 2 over the full grid.
    pub fn predict(&self, x: &Volume<T>) -> Result<Volume<T>> {
        Ok(self.path2_logits(x)?.map(crate::autodiff::sigmoid))
    }
}

/// Path-1 output and the U-net nodes it produced, keyed by angle.
#[derive(Debug, Clone)]
pub struct Path1 {
    pub y_aux: Var,
    pub unet_outputs: Vec<(f64, Var)>,
}

/// `T(R_p(F_p([U(M_a(x)) for a in angles])))` on the graph. Gradients reach
/// the U-net, `bank_p` and `head1` (and `x` if it tracks gradients).
pub fn forward_path1<T: Scalar>(
    model: &Model25D<T>,
    g: &mut Graph<T>,
    bound: &BoundModel,
    x: Var,
    angles: &[f64],
) -> Result<Path1> {
    if angles.len() != bound.bank_p.len() {
        return Err(Error::shape(
            "forward_path1",
            &[angles.len()],
            &[bound.bank_p.len()],
        ));
    }
    let dims = vol_dims(g, x, "forward_path1")?;
    let mut filtered = Vec::with_capacity(angles.len());
    let mut unet_outputs = Vec::with_capacity(angles.len());
    for (&a, &f) in angles.iter().zip(&bound.bank_p) {
        let proj = g.mip_project(x, a)?;
        let seg = model.unet.forward(g, &bound.unet, proj)?;
        unet_outputs.push((a, seg));
        filtered.push(g.filter1x2(seg, f)?);
    }
    let vol = g.backproject(&filtered, angles, dims)?;
    let y_aux = g.finetune_head(vol, bound.head1.0, bound.head1.1)?;
    Ok(Path1 {
        y_aux,
        unet_outputs,
    })
}

/// `T~(R_m(F~_m([U(M_t(x)) for t in theta])))` on the graph. Each U-net
/// output enters behind a stop-gradient: angles already segmented in path 1
/// reuse those nodes, the rest are segmented outside the graph.
pub fn forward_path2<T: Scalar>(
    model: &Model25D<T>,
    g: &mut Graph<T>,
    bound: &BoundModel,
    x: Var,
    theta: &AngleSet,
    reuse: &[(f64, Var)],
) -> Result<Var> {
    if theta.len() != bound.bank_m.len() {
        return Err(Error::shape(
            "forward_path2",
            &[theta.len()],
            &[bound.bank_m.len()],
        ));
    }
    let dims = vol_dims(g, x, "forward_path2")?;
    let missing: Vec<f64> = theta
        .angles()
        .iter()
        .copied()
        .filter(|a| !reuse.iter().any(|(r, _)| r == a))
        .collect();
    let xv = Volume::new(dims, g.value(x).to_vec())?;
    let mut fresh = model.segment_projections(&xv, &missing)?.into_iter();
    let mut filtered = Vec::with_capacity(theta.len());
    for (&a, &f) in theta.angles().iter().zip(&bound.bank_m) {
        let seg = match reuse.iter().find(|(r, _)| *r == a) {
            Some(&(_, v)) => g.stop_gradient(v),
            None => {
                let img = fresh.next().expect("one segmentation per missing angle");
                g.constant(img.dims(), img.into_data())?
            }
        };
        filtered.push(g.filter1x2(seg, f)?);
    }
    let vol = g.backproject(&filtered, theta.angles(), dims)?;
    g.finetune_head(vol, bound.head2.0, bound.head2.1)
}

fn vol_dims<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<[usize; 3]> {
    match *g.shape(x) {
        [a, b, c] => Ok([a, b, c]),
        ref other => Err(Error::invalid(op, other, "expected a volume [a,b,c]")),
    }
}
