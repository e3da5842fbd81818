//! Classification and saliency metrics.
//!
//! Saliency metrics follow the conventions of the MIT saliency benchmark
//! code: KL with a machine-epsilon regularizer, NSS on population z-scores,
//! Judd AUC, Pearson CC and histogram-intersection SIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regularizer used by the KL divergence.
pub const KL_EPS: f64 = f64::EPSILON;

/// Maps whose standard deviation falls below this are treated as constant.
const CONSTANT_STD: f64 = 1e-12;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn with_classes(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("class_{i}")).collect())
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        let mut cm = Self::with_classes(n);
        cm.counts = counts;
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.num_classes();
        if truth >= n || predicted >= n {
            return Err(Error::invalid(format!(
                "label pair ({truth}, {predicted}) outside {n} classes"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum::<u64>() as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: ClassMetrics,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro-averaged precision, recall and F1. Any metric with
/// a zero denominator is 0.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let n = cm.num_classes();
    if n == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..n).map(|r| cm.counts[r][c]).sum();
            let actual: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
    let macro_avg = ClassMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(ClassificationReport {
        macro_avg,
        accuracy: cm.accuracy(),
        per_class,
    })
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: {a} vs {b} pixels")));
    }
    if a == 0 {
        return Err(Error::invalid(format!("{what}: empty map")));
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `sum gt * ln(eps + gt / (eps + pred))`.
pub fn kl(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(pred.len(), gt.len(), "kl")?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| g * (KL_EPS + g / (KL_EPS + p)).ln())
        .sum())
}

/// Mean z-scored prediction at fixated pixels; 0 for a constant map.
pub fn nss(pred: &[f64], fixations: &[bool]) -> Result<f64> {
    same_len(pred.len(), fixations.len(), "nss")?;
    let count = fixations.iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(Error::invalid("nss: fixation mask is empty"));
    }
    let (mean, std) = mean_std(pred);
    if std < CONSTANT_STD {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(fixations).filter(|(_, &f)| f).map(|(&p, _)| (p - mean) / std).sum();
    Ok(sum / count as f64)
}

/// Judd AUC: one ROC point per fixated pixel value.
pub fn auc_judd(pred: &[f64], fixations: &[bool]) -> Result<f64> {
    same_len(pred.len(), fixations.len(), "auc")?;
    let mut fix: Vec<f64> = pred.iter().zip(fixations).filter(|(_, &f)| f).map(|(&p, _)| p).collect();
    if fix.is_empty() {
        return Err(Error::invalid("auc: fixation mask is empty"));
    }
    let mut rest: Vec<f64> = pred.iter().zip(fixations).filter(|(_, &f)| !f).map(|(&p, _)| p).collect();
    fix.sort_by(|a, b| b.total_cmp(a));
    rest.sort_by(|a, b| b.total_cmp(a));
    // count of sorted-descending values >= t
    let at_least = |sorted: &[f64], t: f64| sorted.partition_point(|&v| v >= t);
    let (nf, nr) = (fix.len() as f64, rest.len() as f64);
    let mut curve = vec![(0.0, 0.0)];
    let mut prev = f64::NAN;
    for &t in &fix {
        if t == prev {
            continue;
        }
        prev = t;
        let tpr = at_least(&fix, t) as f64 / nf;
        let fpr = if rest.is_empty() { 0.0 } else { at_least(&rest, t) as f64 / nr };
        curve.push((fpr, tpr));
    }
    curve.push((1.0, 1.0));
    Ok(curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Pearson correlation; a constant map is an error.
pub fn cc(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len(), "cc")?;
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa < CONSTANT_STD || sb < CONSTANT_STD {
        return Err(Error::UndefinedMetric("cc of a constant map".into()));
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

/// Histogram intersection of the two maps after sum-normalization.
pub fn sim(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a.len(), b.len(), "sim")?;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if sa <= 0.0 || sb <= 0.0 {
        return Err(Error::UndefinedMetric("sim of a map with no mass".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x / sa).min(y / sb)).sum())
}

/// A predicted distribution, a ground-truth density and the fixation mask
/// the density was built from.
#[derive(Debug, Clone)]
pub struct SaliencyPair<'a> {
    pub pred: &'a [f64],
    pub gt: &'a [f64],
    pub fixations: &'a [bool],
}

impl<'a> SaliencyPair<'a> {
    pub fn new(pred: &'a [f64], gt: &'a [f64], fixations: &'a [bool]) -> Result<Self> {
        same_len(pred.len(), gt.len(), "saliency pair")?;
        same_len(pred.len(), fixations.len(), "saliency pair")?;
        for (name, map) in [("prediction", pred), ("ground truth", gt)] {
            if map.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!("{name} map has negative or non-finite values")));
            }
            let s: f64 = map.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("{name} map sums to {s}, not 1")));
            }
        }
        if !fixations.iter().any(|&f| f) {
            return Err(Error::invalid("fixation mask is empty"));
        }
        Ok(Self { pred, gt, fixations })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMetrics {
    pub kl: f64,
    pub nss: f64,
    pub auc: f64,
    /// `None` when the prediction is constant and correlation is undefined.
    pub cc: Option<f64>,
    pub sim: f64,
}

impl SaliencyMetrics {
    pub fn evaluate(pair: &SaliencyPair<'_>) -> Result<Self> {
        Ok(Self {
            kl: kl(pair.pred, pair.gt)?,
            nss: nss(pair.pred, pair.fixations)?,
            auc: auc_judd(pair.pred, pair.fixations)?,
            cc: match cc(pair.pred, pair.gt) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            },
            sim: sim(pair.pred, pair.gt)?,
        })
    }

    /// Component-wise mean; `cc` is undefined if it is undefined for any item.
    pub fn mean(items: &[Self]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Self) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self {
            kl: avg(|m| m.kl),
            nss: avg(|m| m.nss),
            auc: avg(|m| m.auc),
            cc: items.iter().map(|m| m.cc).sum::<Option<f64>>().map(|s| s / n),
            sim: avg(|m| m.sim),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_report() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![2, 4]]).unwrap();
        let r = classification_report(&cm).unwrap();
        assert!((r.per_class[0].precision - 0.6).abs() < 1e-12);
        assert!((r.per_class[0].recall - 0.75).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cm.total(), 10);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 0, 0], vec![0, 3, 0], vec![0, 0, 0]]).unwrap();
        let r = classification_report(&cm).unwrap();
        assert_eq!(r.per_class[2], ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert!((r.macro_avg.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn auc_ties_and_no_background() {
        // every pixel fixated: the curve jumps straight to full recall
        assert_eq!(auc_judd(&[0.1, 0.2], &[true, true]).unwrap(), 1.0);
        // fixation and background tied everywhere
        let a = auc_judd(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
    }
}
