//! Classification metrics, representation separability, and seed
//! aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::real::sq;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confusion {
    pub acc: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn check_inputs(y: &[u8], scores: &[f64]) -> Result<()> {
    if y.len() != scores.len() {
        return Err(Error::shape("metrics", format!("{} labels vs {} scores", y.len(), scores.len())));
    }
    if y.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "metrics" });
    }
    Ok(())
}

/// Accuracy, precision, recall and F1 of `prob >= threshold`; undefined
/// ratios are 0.
pub fn confusion_metrics(y: &[u8], prob: &[f64], threshold: f64) -> Result<Confusion> {
    check_inputs(y, prob)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0.0, 0.0, 0.0, 0.0);
    for (&yi, &p) in y.iter().zip(prob) {
        match (yi == 1, p >= threshold) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fneg += 1.0,
        }
    }
    let prec = ratio(tp, tp + fp);
    let rec = ratio(tp, tp + fneg);
    Ok(Confusion { acc: (tp + tn) / y.len() as f64, prec, rec, f1: ratio(2.0 * prec * rec, prec + rec) })
}

/// Indices sorted by descending score (ties in index order).
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Groups of equal scores in descending order, as `(positives, negatives)`.
fn tie_groups(y: &[u8], scores: &[f64]) -> Vec<(usize, usize)> {
    let idx = descending(scores);
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in idx {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group opened above");
        if y[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(y: &[u8], scores: &[f64]) -> Result<f64> {
    check_inputs(y, scores)?;
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    // Walk groups from the lowest score up, counting negatives seen below.
    let mut below = 0usize;
    let mut wins = 0.0;
    for &(p, n) in tie_groups(y, scores).iter().rev() {
        wins += p as f64 * below as f64 + 0.5 * (p * n) as f64;
        below += n;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Average precision: sum over descending thresholds of
/// `(R_k - R_{k-1}) * P_k`, tied scores entering together.
pub fn auprc(y: &[u8], scores: &[f64]) -> Result<f64> {
    check_inputs(y, scores)?;
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    if n_pos == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (p, n) in tie_groups(y, scores) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Rescaled cosine silhouette, `100 * (mean s(i) + 1) / 2`. A point alone
/// in its class has `a(i) = 0`.
pub fn rep_sep_score(embeddings: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    let n = embeddings.len();
    if n != labels.len() {
        return Err(Error::shape("rep_sep_score", format!("{n} embeddings vs {} labels", labels.len())));
    }
    let d = embeddings.first().map_or(0, Vec::len);
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::shape("rep_sep_score", "embeddings must share a positive width"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let counts = [labels.iter().filter(|&&l| l == 0).count(), labels.iter().filter(|&&l| l == 1).count()];
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::SingleClass);
    }
    let mut unit = Vec::with_capacity(n);
    for (row, e) in embeddings.iter().enumerate() {
        let norm = libm::sqrt(e.iter().map(|v| sq(*v)).sum::<f64>());
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm { row });
        }
        unit.push(e.iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = [0.0f64; 2];
        for j in 0..n {
            if i != j {
                let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                sums[labels[j] as usize] += 1.0 - cos;
            }
        }
        let own = labels[i] as usize;
        let a = if counts[own] > 1 { sums[own] / (counts[own] - 1) as f64 } else { 0.0 };
        let b = sums[1 - own] / counts[1 - own] as f64;
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(100.0 * (total / n as f64 + 1.0) / 2.0)
}

/// Per-seed evaluation of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub acc: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub rep_sep: f64,
}

pub const METRIC_NAMES: [&str; 7] = ["acc", "prec", "rec", "f1", "auroc", "auprc", "rep_sep"];

impl SeedMetrics {
    pub fn values(&self) -> [f64; 7] {
        [self.acc, self.prec, self.rec, self.f1, self.auroc, self.auprc, self.rep_sep]
    }

    /// Confusion metrics at 0.5, AUROC, AUPRC and separability of the
    /// pooled embeddings.
    pub fn compute(seed: u64, y: &[u8], prob: &[f64], embeddings: &[Vec<f64>]) -> Result<Self> {
        let c = confusion_metrics(y, prob, 0.5)?;
        Ok(SeedMetrics {
            seed,
            acc: c.acc,
            prec: c.prec,
            rec: c.rec,
            f1: c.f1,
            auroc: auroc(y, prob)?,
            auprc: auprc(y, prob)?,
            rep_sep: rep_sep_score(embeddings, y)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and `n - 1` standard deviation; a single value, or a run of
/// identical values, has std exactly 0.
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate zero values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 && values.iter().any(|v| *v != values[0]) {
        libm::sqrt(values.iter().map(|v| sq(v - mean)).sum::<f64>() / (n - 1.0))
    } else {
        0.0
    };
    Ok(MeanStd { mean, std })
}

/// Results of one variant over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    pub per_seed: Vec<SeedMetrics>,
    /// Aggregate per metric, in [`METRIC_NAMES`] order.
    pub aggregate: Vec<MeanStd>,
    /// Set when only one seed was run and the deviations are placeholders.
    pub single_seed: bool,
}

pub fn aggregate(variant: &str, per_seed: Vec<SeedMetrics>) -> Result<MetricsReport> {
    if per_seed.is_empty() {
        return Err(Error::invalid("no seeds to aggregate"));
    }
    let mut agg = Vec::with_capacity(METRIC_NAMES.len());
    for k in 0..METRIC_NAMES.len() {
        let vals: Vec<f64> = per_seed.iter().map(|m| m.values()[k]).collect();
        agg.push(mean_std(&vals)?);
    }
    Ok(MetricsReport { variant: variant.into(), single_seed: per_seed.len() == 1, per_seed, aggregate: agg })
}

impl MetricsReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|m| *m == metric).map(|k| self.aggregate[k].mean)
    }

    pub fn values(&self, metric: &str) -> Option<Vec<f64>> {
        let k = METRIC_NAMES.iter().position(|m| *m == metric)?;
        Some(self.per_seed.iter().map(|s| s.values()[k]).collect())
    }
}

/// `"92.00 ± 2.83"`.
pub fn format_mean_std(m: MeanStd) -> String {
    format!("{:.2} ± {:.2}", m.mean, m.std)
}

pub const TABLE_COLUMNS: [&str; 6] = ["Acc", "Prec", "Rec", "F1", "AUROC", "AUPRC"];

/// One table row: the variant name followed by the six classification
/// metrics in percent.
pub fn table_row(report: &MetricsReport) -> Vec<String> {
    let mut row = vec![report.variant.clone()];
    for k in 0..TABLE_COLUMNS.len() {
        let m = report.aggregate[k];
        row.push(format_mean_std(MeanStd { mean: 100.0 * m.mean, std: 100.0 * m.std }));
    }
    row
}
