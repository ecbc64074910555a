//! Seeded k-fold cross-validation over both model kinds.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::slices::SliceLearner;
use super::train::{EpochRecord, Learner, Random25DLearner, RunState, Sample, Trainer};
use super::{Model25D, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::Volume;
use crate::metrics::{
    dice_loss, evaluate, mean_std, threshold_mask, ConfusionCounts, MetricsReport, MetricsSummary,
};
use crate::par;
use crate::unet::UNetModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Random25D,
    SliceBySlice,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Random25D => "random-2.5D",
            ModelKind::SliceBySlice => "slice-by-slice",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Random25D(Box<Model25D<f32>>),
    SliceBySlice(UNetModel<f32>),
}

impl TrainedModel {
    /// Trains a fresh model of `kind` on `train`, validating on `val`, and
    /// returns the best epoch's weights.
    pub fn train(
        kind: ModelKind,
        train: &[Sample],
        val: &[Sample],
        cfg: &TrainConfig,
    ) -> Result<(TrainedModel, RunState, Vec<EpochRecord>)> {
        match kind {
            ModelKind::Random25D => {
                let learner = Random25DLearner::new(Model25D::from_config(cfg)?)?;
                let (l, s, log) = run(learner, train, val, cfg)?;
                Ok((TrainedModel::Random25D(Box::new(l.model)), s, log))
            }
            ModelKind::SliceBySlice => {
                let learner = SliceLearner::new(UNetModel::new(cfg.unet_config()?, cfg.seed)?);
                let (l, s, log) = run(learner, train, val, cfg)?;
                Ok((TrainedModel::SliceBySlice(l.unet), s, log))
            }
        }
    }

    pub fn predict(&self, scan: &Volume) -> Result<Volume> {
        match self {
            TrainedModel::Random25D(m) => m.predict(scan),
            TrainedModel::SliceBySlice(u) => super::slice_by_slice_segment(u, scan),
        }
    }
}

fn run<L: Learner>(
    learner: L,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(L, RunState, Vec<EpochRecord>)> {
    let mut t = Trainer::new(learner, cfg.clone())?;
    t.run(train, val)?;
    Ok(t.finish())
}

/// Seed of fold `fold`'s run, distinct per fold.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Held-out index sets: a seeded shuffle of `0..n` dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config(alloc::format!(
            "folds must be at least 2, got {folds}"
        )));
    }
    if n < folds {
        return Err(Error::Config(alloc::format!(
            "{n} samples cannot fill {folds} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = alloc::vec![Vec::new(); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    Ok(out)
}

/// Splits the non-held-out indices into training and validation; the last
/// fifth (at least one) validates.
pub fn train_val_split(rest: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if rest.len() < 2 {
        return Err(Error::Config(
            "need at least two samples outside the held-out fold".into(),
        ));
    }
    let n_val = (rest.len() / 5).max(1);
    let cut = rest.len() - n_val;
    Ok((rest[..cut].to_vec(), rest[cut..].to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub test: Vec<usize>,
    /// Metrics from the confusion counts pooled over the held-out samples.
    pub report: MetricsReport,
    /// Mean dice loss of the probability output over the held-out samples.
    pub dice_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub kind: ModelKind,
    pub folds: Vec<FoldReport>,
    pub summary: MetricsSummary,
}

pub fn summarize(folds: &[FoldReport]) -> MetricsSummary {
    MetricsSummary {
        dice_loss: mean_std(folds.iter().map(|f| f.dice_loss)),
        ma: mean_std(folds.iter().map(|f| f.report.ma)),
        iu: mean_std(folds.iter().map(|f| f.report.iu)),
        dc: mean_std(folds.iter().map(|f| f.report.dc)),
    }
}

/// Evaluates a trained model on `samples`: pooled thresholded metrics and
/// mean dice loss.
pub fn evaluate_model(model: &TrainedModel, samples: &[&Sample]) -> Result<(MetricsReport, f64)> {
    let mut counts = ConfusionCounts::default();
    let mut loss = 0.0;
    for s in samples {
        let prob = model.predict(&s.scan)?;
        loss += dice_loss(&s.mask, &prob)?;
        counts += evaluate(&s.mask, &threshold_mask(&prob))?.counts;
    }
    Ok((
        MetricsReport::from_counts(counts),
        loss / samples.len() as f64,
    ))
}

/// k-fold cross-validation with `cfg.folds` folds. Fold `f` trains with
/// seed [`fold_seed`]`(cfg.seed, f)`; folds are independent and may run in
/// parallel.
pub fn cross_validate(
    dataset: &[Sample],
    cfg: &TrainConfig,
    kind: ModelKind,
) -> Result<CrossValidation> {
    cfg.validate()?;
    let assignment = fold_assignment(dataset.len(), cfg.folds, cfg.seed)?;
    let folds: Vec<usize> = (0..cfg.folds).collect();
    let reports = par::map(&folds, |&f| -> Result<FoldReport> {
        let test = &assignment[f];
        let rest: Vec<usize> = assignment
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let (tr, va) = train_val_split(&rest)?;
        let pick = |ix: &[usize]| ix.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
        let fold_cfg = TrainConfig {
            seed: fold_seed(cfg.seed, f),
            ..cfg.clone()
        };
        let (model, state, _) = TrainedModel::train(kind, &pick(&tr), &pick(&va), &fold_cfg)?;
        let held: Vec<&Sample> = test.iter().map(|&i| &dataset[i]).collect();
        let (report, dice_loss) = evaluate_model(&model, &held)?;
        Ok(FoldReport {
            fold: f,
            test: test.clone(),
            report,
            dice_loss,
            epochs: state.epoch,
        })
    });
    let folds = reports.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CrossValidation {
        kind,
        summary: summarize(&folds),
        folds,
    })
}
