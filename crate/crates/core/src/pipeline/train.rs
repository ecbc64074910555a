//! Epoch loop, plateau learning-rate halving, early stopping and
//! best-epoch restore, shared by every trainable model.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    forward_path1, forward_path2, make_angle_grid, sample_path1_angles, Model25D, TrainConfig,
};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::{AngleSet, Volume};
use crate::metrics::{dice_loss, joint_loss_graph, BalanceSchedule};
use crate::optim::{adam_step, AdamState};
use crate::tensor::Scalar;

/// A scan and its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub scan: Volume<T>,
    pub mask: Volume<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(scan: Volume<T>, mask: Volume<T>) -> Result<Self> {
        if scan.dims() != mask.dims() {
            return Err(Error::shape("sample", &scan.dims(), &mask.dims()));
        }
        Ok(Sample { scan, mask })
    }
}

/// Mutable bookkeeping of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub balance: BalanceSchedule,
    pub best_val: f64,
    /// Epoch (1-based) whose weights are held as best; 0 before any.
    pub best_epoch: usize,
    pub since_plateau: usize,
    pub since_best: usize,
    pub stopped: bool,
    pub rng: ChaCha8Rng,
}

/// Stream of the run RNG; the U-net initialisation uses stream 0 of the same seed.
const RUN_STREAM: u64 = 1;

impl RunState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(RUN_STREAM);
        RunState {
            epoch: 0,
            lr: cfg.lr,
            balance: BalanceSchedule::default(),
            best_val: f64::INFINITY,
            best_epoch: 0,
            since_plateau: 0,
            since_best: 0,
            stopped: false,
            rng,
        }
    }

    /// Applies the plateau and early-stop rules to one validation loss and
    /// closes the epoch.
    pub fn record_validation(&mut self, val_loss: f64, cfg: &TrainConfig) -> Result<EpochDecision> {
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteValidation {
                epoch: self.epoch + 1,
                value: val_loss,
            });
        }
        self.epoch += 1;
        self.balance = self.balance.advance();
        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best_epoch = self.epoch;
            self.since_plateau = 0;
            self.since_best = 0;
            return Ok(EpochDecision::Improved);
        }
        self.since_plateau += 1;
        self.since_best += 1;
        let lr_halved = self.since_plateau >= cfg.plateau_patience;
        if lr_halved {
            self.lr /= 2.0;
            self.since_plateau = 0;
        }
        if self.since_best >= cfg.early_stop_patience {
            self.stopped = true;
        }
        Ok(EpochDecision::Stagnant {
            lr_halved,
            stop: self.stopped,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochDecision {
    Improved,
    Stagnant { lr_halved: bool, stop: bool },
}

/// One line of the training log; `c` and `lr` are the values used during the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub c: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// A model together with its optimizer state.
pub trait Learner {
    type Snapshot: Clone;

    /// One pass over `data`, returning the mean training loss.
    fn train_epoch(&mut self, data: &[Sample], state: &mut RunState) -> Result<f64>;
    fn validation_loss(&self, data: &[Sample]) -> Result<f64>;
    fn predict(&self, scan: &Volume) -> Result<Volume>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: &Self::Snapshot);
}

pub struct Trainer<L: Learner> {
    pub cfg: TrainConfig,
    pub learner: L,
    pub state: RunState,
    pub best: L::Snapshot,
    pub log: Vec<EpochRecord>,
}

impl<L: Learner> Trainer<L> {
    pub fn new(learner: L, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let best = learner.snapshot();
        let state = RunState::new(&cfg);
        Ok(Trainer {
            cfg,
            learner,
            state,
            best,
            log: Vec::new(),
        })
    }

    /// Resumes from saved parts.
    pub fn from_parts(learner: L, cfg: TrainConfig, state: RunState, best: L::Snapshot) -> Self {
        Trainer {
            cfg,
            learner,
            state,
            best,
            log: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.cfg.max_epochs
    }

    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(
                "training and validation sets must be non-empty".into(),
            ));
        }
        let (c, lr) = (self.state.balance.c, self.state.lr);
        let train_loss = self.learner.train_epoch(train, &mut self.state)?;
        let val_loss = self.learner.validation_loss(val)?;
        self.end_epoch(c, lr, train_loss, val_loss)
    }

    /// Records the validation loss, snapshots on improvement and logs.
    pub fn end_epoch(
        &mut self,
        c: f64,
        lr: f64,
        train_loss: f64,
        val_loss: f64,
    ) -> Result<EpochRecord> {
        if self.state.record_validation(val_loss, &self.cfg)? == EpochDecision::Improved {
            self.best = self.learner.snapshot();
        }
        let rec = EpochRecord {
            epoch: self.state.epoch,
            c,
            lr,
            train_loss,
            val_loss,
        };
        self.log.push(rec);
        Ok(rec)
    }

    /// Runs epochs until early stop or `max_epochs`.
    pub fn run(&mut self, train: &[Sample], val: &[Sample]) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    /// Restores the best epoch's weights and hands the learner back.
    pub fn finish(mut self) -> (L, RunState, Vec<EpochRecord>) {
        if self.state.best_epoch > 0 {
            self.learner.restore(&self.best);
        }
        (self.learner, self.state, self.log)
    }
}

/// The two-path random 2.5D model with one Adam instance over all of its
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Random25DLearner {
    pub model: Model25D<f32>,
    pub adam: AdamState<f32>,
    theta: AngleSet,
}

impl Random25DLearner {
    pub fn new(model: Model25D<f32>) -> Result<Self> {
        let adam = AdamState::new(model.params().iter().map(|p| p.len()));
        Self::with_state(model, adam)
    }

    pub fn with_state(model: Model25D<f32>, adam: AdamState<f32>) -> Result<Self> {
        let theta = make_angle_grid(model.m())?;
        Ok(Random25DLearner { model, adam, theta })
    }

    /// Forward both paths on one sample, backward the joint loss and take
    /// an Adam step. Returns the loss.
    pub fn step(&mut self, sample: &Sample, angles: &[f64], c: f64, lr: f64) -> Result<f32> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let x = g.constant(sample.scan.dims(), sample.scan.data().to_vec())?;
        let p1 = forward_path1(&self.model, &mut g, &bound, x, angles)?;
        let y_hat = forward_path2(
            &self.model,
            &mut g,
            &bound,
            x,
            &self.theta,
            &p1.unet_outputs,
        )?;
        let loss = joint_loss_graph(&mut g, sample.mask.data(), y_hat, p1.y_aux, c)?;
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = g.backward(loss)?;
        self.model.zero_grad();
        self.model.accumulate(&bound, &grads);
        adam_step(&mut self.model.params_mut(), &mut self.adam, lr)?;
        // Gradients are per-step scratch, not model state.
        self.model.zero_grad();
        Ok(value)
    }
}

impl Learner for Random25DLearner {
    type Snapshot = Model25D<f32>;

    fn train_epoch(&mut self, data: &[Sample], state: &mut RunState) -> Result<f64> {
        let angles = sample_path1_angles(self.model.p(), self.model.m(), &mut state.rng)?;
        self.model.bank_p.set_angles(&angles)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut state.rng);
        let mut total = 0.0;
        for i in order {
            let loss = self.step(&data[i], &angles, state.balance.c, state.lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: state.epoch + 1,
                    sample: i,
                    value: loss as f64,
                });
            }
            total += loss as f64;
        }
        Ok(total / data.len() as f64)
    }

    fn validation_loss(&self, data: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in data {
            total += dice_loss(&s.mask, &self.model.predict(&s.scan)?)?;
        }
        Ok(total / data.len() as f64)
    }

    fn predict(&self, scan: &Volume) -> Result<Volume> {
        self.model.predict(scan)
    }

    fn snapshot(&self) -> Model25D<f32> {
        self.model.clone()
    }

    fn restore(&mut self, snapshot: &Model25D<f32>) {
        self.model = snapshot.clone();
    }
}
