//! Dice loss, the two-output joint loss with its balance schedule,
//! thresholding, and confusion-count metrics.

use alloc::format;
use alloc::string::String;

use crate::autodiff::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::Volume;
use crate::tensor::Scalar;
#[allow(unused_imports)]
use num_traits::Float;

/// Foreground decision boundary; a voxel is foreground iff `p >= THRESHOLD`.
pub const THRESHOLD: f64 = 0.5;

fn same_dims<T: Scalar>(op: &'static str, a: &Volume<T>, b: &Volume<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, &a.dims(), &b.dims()));
    }
    Ok(())
}

/// `1 - (2 sum(y*p) + eps) / (sum(p) + sum(y) + eps)` with `eps = 1e-7`.
pub fn dice_loss<T: Scalar>(y: &Volume<T>, y_hat: &Volume<T>) -> Result<f64> {
    same_dims("dice_loss", y, y_hat)?;
    Ok(autodiff::dice_value(y.data(), y_hat.data()).as_f64())
}

/// `c * dice(y, y_hat_aux) + (1 - c) * dice(y, y_hat)`.
pub fn joint_loss<T: Scalar>(
    y: &Volume<T>,
    y_hat: &Volume<T>,
    y_hat_aux: &Volume<T>,
    c: f64,
) -> Result<f64> {
    check_balance(c)?;
    Ok(c * dice_loss(y, y_hat_aux)? + (1.0 - c) * dice_loss(y, y_hat)?)
}

fn check_balance(c: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Config(format!(
            "balance c must lie in [0, 1], got {c}"
        )));
    }
    Ok(())
}

/// Differentiable joint loss on graph nodes.
pub fn joint_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    y: &[T],
    y_hat: Var,
    y_hat_aux: Var,
    c: f64,
) -> Result<Var> {
    check_balance(c)?;
    let aux = g.dice_loss(y, y_hat_aux)?;
    let fin = g.dice_loss(y, y_hat)?;
    let a = g.scale(aux, T::from_f64(c));
    let b = g.scale(fin, T::from_f64(1.0 - c));
    g.add(a, b)
}

/// Balance between the auxiliary and the final output,
/// `c(n + 1) = c(n) * 0.99^n` from `c(1) = 0.99`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceSchedule {
    pub c: f64,
    /// 1-based epoch the current `c` applies to.
    pub epoch: usize,
}

impl Default for BalanceSchedule {
    fn default() -> Self {
        BalanceSchedule { c: 0.99, epoch: 1 }
    }
}

impl BalanceSchedule {
    pub fn advance(self) -> Self {
        BalanceSchedule {
            c: self.c * 0.99f64.powi(self.epoch as i32),
            epoch: self.epoch + 1,
        }
    }
}

pub fn advance_balance(s: BalanceSchedule) -> BalanceSchedule {
    s.advance()
}

/// Binary mask, 1 where `y_hat >= 0.5`.
pub fn threshold_mask<T: Scalar>(y_hat: &Volume<T>) -> Volume<T> {
    let t = T::from_f64(THRESHOLD);
    y_hat.map(|v| if v >= t { T::one() } else { T::zero() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl core::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    /// Mean accuracy.
    pub ma: f64,
    /// Mean intersection over union.
    pub iu: f64,
    /// Dice coefficient.
    pub dc: f64,
}

/// `num / den`, or 1 when the class is absent and was not predicted.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let ConfusionCounts { tp, tn, fp, fn_ } = counts;
        MetricsReport {
            counts,
            ma: 0.5 * (ratio(tn, tn + fp) + ratio(tp, tp + fn_)),
            iu: 0.5 * (ratio(tn, tn + fp + fn_) + ratio(tp, tp + fn_ + fp)),
            dc: ratio(2 * tp, 2 * tp + fn_ + fp),
        }
    }

    /// Flat `name=value` record, one metric per line, six decimals.
    pub fn to_record(&self) -> String {
        let c = &self.counts;
        format!(
            "tp={}\ntn={}\nfp={}\nfn={}\nma={:.6}\niu={:.6}\ndc={:.6}\n",
            c.tp, c.tn, c.fp, c.fn_, self.ma, self.iu, self.dc
        )
    }
}

/// Confusion counts of `mask` against the ground truth `y`, both binary.
pub fn evaluate<T: Scalar>(y: &Volume<T>, mask: &Volume<T>) -> Result<MetricsReport> {
    same_dims("evaluate", y, mask)?;
    let mut c = ConfusionCounts::default();
    let one = T::one();
    for (i, (&t, &p)) in y.data().iter().zip(mask.data()).enumerate() {
        let bad = |v: T| v != T::zero() && v != one;
        if bad(t) || bad(p) {
            return Err(Error::Config(format!(
                "evaluate expects binary volumes; voxel {i} is not 0 or 1"
            )));
        }
        match (t == one, p == one) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(MetricsReport::from_counts(c))
}

/// Best Dice coefficient reachable by one global intensity threshold
/// (`scan >= t` is foreground), chosen with the ground truth in hand.
/// Returns `(t, dc)`; `t` is infinite when predicting nothing is best.
pub fn best_threshold_dice<T: Scalar>(scan: &Volume<T>, y: &Volume<T>) -> Result<(f64, f64)> {
    same_dims("best_threshold_dice", scan, y)?;
    let mut pairs: alloc::vec::Vec<(f64, bool)> = scan
        .data()
        .iter()
        .zip(y.data())
        .map(|(&v, &t)| (v.as_f64(), t >= T::from_f64(THRESHOLD)))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = pairs.iter().filter(|p| p.1).count() as u64;
    let dc_of = |tp: u64, fp: u64| ratio(2 * tp, tp + fp + positives);
    let mut best = (f64::INFINITY, dc_of(0, 0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let dc = dc_of(tp, fp);
        if dc > best.1 {
            best = (v, dc);
        }
    }
    Ok(best)
}

/// Mean and sample standard deviation of a metric over runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: impl IntoIterator<Item = f64>) -> MeanStd {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    let vals: alloc::vec::Vec<f64> = values.into_iter().collect();
    for &v in &vals {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = sum / n as f64;
    for &v in &vals {
        sq += (v - mean) * (v - mean);
    }
    let std = if n > 1 {
        num_traits::Float::sqrt(sq / (n - 1) as f64)
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub dice_loss: MeanStd,
    pub ma: MeanStd,
    pub iu: MeanStd,
    pub dc: MeanStd,
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn best_threshold_matches_exhaustive_search() {
        let scan = v(&[0.1, 0.9, 0.5, 0.7, 0.7, 0.2]);
        let y = v(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let (t, dc) = best_threshold_dice(&scan, &y).unwrap();
        let mut brute = 0.0f64;
        for &cut in scan.data() {
            let m = scan.map(|x| if x >= cut { 1.0 } else { 0.0 });
            brute = brute.max(evaluate(&y, &m).unwrap().dc);
        }
        assert_eq!(dc, brute);
        assert_eq!(t, 0.7);
        assert!((dc - 0.8).abs() < 1e-12);
    }

    fn v(data: &[f64]) -> Volume<f64> {
        Volume::new([1, 1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let y = v(&[1.0, 0.0, 1.0, 1.0]);
        assert!(dice_loss(&y, &y).unwrap().abs() < 1e-7);
        assert!((dice_loss(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-7);
        assert!((dice_loss(&v(&[1.0, 0.0]), &v(&[0.5, 0.5])).unwrap() - 0.5).abs() < 1e-7);
        let empty = v(&[0.0, 0.0]);
        assert!(dice_loss(&empty, &empty).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dice_dim_mismatch() {
        assert!(matches!(
            dice_loss(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn joint_examples() {
        let y = v(&[1.0, 0.0, 1.0]);
        let a = v(&[0.9, 0.2, 0.4]);
        let b = v(&[0.1, 0.7, 0.8]);
        assert_eq!(
            joint_loss(&y, &a, &b, 1.0).unwrap(),
            dice_loss(&y, &b).unwrap()
        );
        assert_eq!(
            joint_loss(&y, &a, &b, 0.0).unwrap(),
            dice_loss(&y, &a).unwrap()
        );
        assert!(joint_loss(&y, &a, &b, 1.5).is_err());
        let c = 0.99;
        let mixed = c * 0.2 + (1.0 - c) * 0.6;
        assert!((mixed - 0.204f64).abs() < 1e-15);
    }

    #[test]
    fn joint_graph_matches_plain() {
        let y = v(&[1.0, 0.0, 1.0]);
        let a = v(&[0.9, 0.2, 0.4]);
        let b = v(&[0.1, 0.7, 0.8]);
        let mut g = Graph::new();
        let va = g.constant([3], a.data().to_vec()).unwrap();
        let vb = g.constant([3], b.data().to_vec()).unwrap();
        let l = joint_loss_graph(&mut g, y.data(), va, vb, 0.3).unwrap();
        assert!((g.value(l)[0] - joint_loss(&y, &a, &b, 0.3).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn balance_schedule_values() {
        let s1 = BalanceSchedule::default();
        assert_eq!(s1.c, 0.99);
        let s2 = advance_balance(s1);
        assert_eq!(s2.c, 0.99 * 0.99);
        let s3 = s2.advance();
        assert_eq!(s3.c, 0.99 * 0.99 * (0.99 * 0.99));
        assert!((s3.c - 0.96059601).abs() < 1e-15);
        assert_eq!(s3.epoch, 3);
        let mut s = s3;
        for _ in 0..20 {
            let n = s.advance();
            assert!(n.c < s.c);
            s = n;
        }
    }

    #[test]
    fn threshold_boundary() {
        let m = threshold_mask(&v(&[0.49, 0.51, 0.5, 0.0, 1.0]));
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(threshold_mask(&m), m);
    }

    #[test]
    fn metric_examples() {
        let y = v(&[1.0, 0.0, 1.0, 0.0]);
        let r = evaluate(&y, &y).unwrap();
        assert_eq!((r.ma, r.iu, r.dc), (1.0, 1.0, 1.0));
        let r = MetricsReport::from_counts(ConfusionCounts {
            tp: 1,
            tn: 1,
            fp: 1,
            fn_: 1,
        });
        assert_eq!(r.ma, 0.5);
        assert!((r.iu - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.dc, 0.5);
        let e = v(&[0.0, 0.0]);
        let r = evaluate(&e, &e).unwrap();
        assert_eq!((r.ma, r.iu, r.dc), (1.0, 1.0, 1.0));
        assert!(evaluate(&v(&[2.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn record_format() {
        let r = MetricsReport::from_counts(ConfusionCounts {
            tp: 1,
            tn: 1,
            fp: 1,
            fn_: 1,
        });
        assert_eq!(
            r.to_record(),
            "tp=1\ntn=1\nfp=1\nfn=1\nma=0.500000\niu=0.333333\ndc=0.500000\n"
        );
    }

    #[test]
    fn mean_std_sample() {
        let m = mean_std(vec![1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(mean_std(vec![0.7; 4]).std, 0.0);
    }
}
