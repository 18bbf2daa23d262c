//! The six saliency evaluation metrics, split into perception-based
//! (NSS, CC, SIM) and non-perception-based (sAUC, AUC, KLD) groups.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{FixationMap, SaliencyMap};

#[cfg(test)]
mod tests;

/// Regularization constant inside the KL divergence.
pub const KLD_EPS: f64 = 2.2204e-16;

/// Resample count for the shuffled AUC.
pub const SAUC_DEFAULT_SPLITS: usize = 10;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{metric}: maps have different shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        metric: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{metric}: degenerate input ({reason})")]
    Degenerate {
        metric: &'static str,
        reason: String,
    },
    #[error("{metric}: fixation map has no fixated pixel")]
    EmptyFixations { metric: &'static str },
    #[error("auc: every pixel is fixated, no negatives exist")]
    AllFixated,
    #[error("sauc: negative pool is empty")]
    EmptyNegativePool,
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Cc,
    Sim,
    Kld,
    Nss,
    Auc,
    Sauc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricGroup {
    Perception,
    NonPerception,
}

impl Metric {
    /// All six metrics, perception-based group first.
    pub const ALL: [Metric; 6] = [
        Metric::Cc,
        Metric::Sim,
        Metric::Nss,
        Metric::Sauc,
        Metric::Auc,
        Metric::Kld,
    ];

    /// Column order of the CSV report.
    pub const CSV_ORDER: [Metric; 6] = [
        Metric::Cc,
        Metric::Sim,
        Metric::Kld,
        Metric::Nss,
        Metric::Auc,
        Metric::Sauc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Cc => "cc",
            Metric::Sim => "sim",
            Metric::Kld => "kld",
            Metric::Nss => "nss",
            Metric::Auc => "auc",
            Metric::Sauc => "sauc",
        }
    }

    pub fn group(self) -> MetricGroup {
        match self {
            Metric::Cc | Metric::Sim | Metric::Nss => MetricGroup::Perception,
            Metric::Kld | Metric::Auc | Metric::Sauc => MetricGroup::NonPerception,
        }
    }
}

fn check_shapes(
    metric: &'static str,
    lhs: (usize, usize),
    rhs: (usize, usize),
) -> Result<()> {
    if lhs != rhs {
        return Err(MetricError::ShapeMismatch { metric, lhs, rhs });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// distribution-based metrics
// ---------------------------------------------------------------------------

pub(crate) fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

pub(crate) fn pearson(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if is_constant(pred) || is_constant(gt) {
        return Err(MetricError::Degenerate {
            metric: "cc",
            reason: "constant map has zero standard deviation".into(),
        });
    }
    let n = pred.len() as f64;
    let mu_p = pred.iter().sum::<f64>() / n;
    let mu_g = gt.iter().sum::<f64>() / n;
    let mut spg = 0.0;
    let mut spp = 0.0;
    let mut sgg = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        let dp = p - mu_p;
        let dg = g - mu_g;
        spg += dp * dg;
        spp += dp * dp;
        sgg += dg * dg;
    }
    if spp == 0.0 || sgg == 0.0 {
        return Err(MetricError::Degenerate {
            metric: "cc",
            reason: "map variance underflowed to zero".into(),
        });
    }
    Ok(spg / (spp * sgg).sqrt())
}

/// Pearson linear correlation of the flattened maps.
pub fn cc(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_shapes("cc", (pred.width, pred.height), (gt.width, gt.height))?;
    pearson(pred.density(), gt.density())
}

pub(crate) fn sum_normalize(metric: &'static str, v: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        return Err(MetricError::Degenerate {
            metric,
            reason: "map sums to zero, cannot normalize".into(),
        });
    }
    Ok(v.iter().map(|x| x / s).collect())
}

/// Histogram intersection of the two sum-normalized maps.
pub fn sim(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_shapes("sim", (pred.width, pred.height), (gt.width, gt.height))?;
    let p = sum_normalize("sim", pred.density())?;
    let g = sum_normalize("sim", gt.density())?;
    Ok(p.iter().zip(&g).map(|(a, b)| a.min(*b)).sum())
}

pub(crate) fn kld_normalized(pred: &[f64], gt: &[f64]) -> f64 {
    gt.iter()
        .zip(pred)
        .map(|(&g, &p)| g * (KLD_EPS + g / (KLD_EPS + p)).ln())
        .sum()
}

/// KL divergence from prediction to ground truth with epsilon regularization,
/// both maps sum-normalized first.
pub fn kld(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_shapes("kld", (pred.width, pred.height), (gt.width, gt.height))?;
    let p = sum_normalize("kld", pred.density())?;
    let g = sum_normalize("kld", gt.density())?;
    Ok(kld_normalized(&p, &g))
}

// ---------------------------------------------------------------------------
// location-based metrics
// ---------------------------------------------------------------------------

pub(crate) fn z_scores(metric: &'static str, pred: &[f64]) -> Result<Vec<f64>> {
    if is_constant(pred) {
        return Err(MetricError::Degenerate {
            metric,
            reason: "constant prediction has zero standard deviation".into(),
        });
    }
    let n = pred.len() as f64;
    let mu = pred.iter().sum::<f64>() / n;
    let var = pred.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(MetricError::Degenerate {
            metric,
            reason: "prediction variance underflowed to zero".into(),
        });
    }
    let sd = var.sqrt();
    Ok(pred.iter().map(|v| (v - mu) / sd).collect())
}

/// Mean z-scored prediction value at fixated pixels (population std).
pub fn nss(pred: &SaliencyMap, fix: &FixationMap) -> Result<f64> {
    check_shapes("nss", (pred.width, pred.height), (fix.width, fix.height))?;
    if fix.count() == 0 {
        return Err(MetricError::EmptyFixations { metric: "nss" });
    }
    let z = z_scores("nss", pred.density())?;
    let hits = fix.hit_indices();
    Ok(hits.iter().map(|&i| z[i]).sum::<f64>() / hits.len() as f64)
}

/// ROC area from a threshold sweep over the distinct positive values,
/// "above threshold" meaning >= t, with (0,0) and (1,1) anchors and
/// trapezoidal integration. Equal values collapse into one threshold.
pub(crate) fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut pos_sorted = pos.to_vec();
    let mut neg_sorted = neg.to_vec();
    pos_sorted.sort_by(|a, b| b.total_cmp(a));
    neg_sorted.sort_by(|a, b| b.total_cmp(a));
    let npos = pos_sorted.len() as f64;
    let nneg = neg_sorted.len() as f64;

    let mut points = vec![(0.0f64, 0.0f64)];
    let mut pi = 0usize;
    let mut ni = 0usize;
    while pi < pos_sorted.len() {
        let t = pos_sorted[pi];
        while pi < pos_sorted.len() && pos_sorted[pi] >= t {
            pi += 1;
        }
        while ni < neg_sorted.len() && neg_sorted[ni] >= t {
            ni += 1;
        }
        points.push((ni as f64 / nneg, pi as f64 / npos));
    }
    points.push((1.0, 1.0));

    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// AUC-Judd: fixated pixels are positives, every non-fixated pixel is a
/// negative.
pub fn auc_judd(pred: &SaliencyMap, fix: &FixationMap) -> Result<f64> {
    check_shapes("auc", (pred.width, pred.height), (fix.width, fix.height))?;
    let hits = fix.hit_indices();
    if hits.is_empty() {
        return Err(MetricError::EmptyFixations { metric: "auc" });
    }
    if hits.len() == fix.len() {
        return Err(MetricError::AllFixated);
    }
    let pos: Vec<f64> = hits.iter().map(|&i| pred.density()[i]).collect();
    let neg: Vec<f64> = pred
        .density()
        .iter()
        .enumerate()
        .filter(|&(i, _)| fix.hits()[i] == 0)
        .map(|(_, &v)| v)
        .collect();
    Ok(roc_auc(&pos, &neg))
}

/// Shuffled AUC: negatives are drawn (seeded) from the union of other images'
/// fixated pixels, this image's fixations removed; sample size equals the
/// positive count; the mean over `n_splits` resamples is reported.
pub fn sauc(
    pred: &SaliencyMap,
    fix: &FixationMap,
    other_fix: &[&FixationMap],
    seed: u64,
    n_splits: usize,
) -> Result<f64> {
    check_shapes("sauc", (pred.width, pred.height), (fix.width, fix.height))?;
    let hits = fix.hit_indices();
    if hits.is_empty() {
        return Err(MetricError::EmptyFixations { metric: "sauc" });
    }
    let own: BTreeSet<usize> = hits.iter().copied().collect();
    let mut pool: BTreeSet<usize> = BTreeSet::new();
    for other in other_fix {
        check_shapes(
            "sauc",
            (pred.width, pred.height),
            (other.width, other.height),
        )?;
        pool.extend(other.hit_indices());
    }
    let pool: Vec<usize> = pool.difference(&own).copied().collect();
    if pool.is_empty() {
        return Err(MetricError::EmptyNegativePool);
    }
    let pos: Vec<f64> = hits.iter().map(|&i| pred.density()[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_splits {
        let sample = sample_indices(&pool, pos.len(), &mut rng);
        let neg: Vec<f64> = sample.iter().map(|&i| pred.density()[i]).collect();
        total += roc_auc(&pos, &neg);
    }
    Ok(total / n_splits as f64)
}

/// Uniform sample of `count` entries: without replacement when the pool is
/// large enough (partial Fisher-Yates), with replacement otherwise.
pub(crate) fn sample_indices(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() >= count {
        let mut scratch = pool.to_vec();
        for i in 0..count {
            let j = rng.gen_range(i..scratch.len());
            scratch.swap(i, j);
        }
        scratch.truncate(count);
        scratch
    } else {
        (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

/// A metric either produced a value or was skipped as degenerate with a
/// reason; it is never replaced by a fake number.
#[derive(Debug, Clone)]
pub enum MetricOutcome {
    Value(f64),
    Degenerate(String),
}

impl MetricOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricOutcome::Value(v) => Some(*v),
            MetricOutcome::Degenerate(_) => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, MetricOutcome::Degenerate(_))
    }
}

#[derive(Debug, Clone)]
pub struct ImageReport {
    pub name: String,
    outcomes: Vec<(Metric, MetricOutcome)>,
}

impl ImageReport {
    pub fn outcome(&self, metric: Metric) -> &MetricOutcome {
        &self
            .outcomes
            .iter()
            .find(|(m, _)| *m == metric)
            .expect("all six metrics are always present")
            .1
    }

    pub fn score(&self, metric: Metric) -> Option<f64> {
        self.outcome(metric).value()
    }

    pub fn degenerate_metrics(&self) -> Vec<Metric> {
        Metric::CSV_ORDER
            .iter()
            .copied()
            .filter(|&m| self.outcome(m).is_degenerate())
            .collect()
    }

    /// `degenerate:cc,nss` style flag string, empty when every metric ran.
    pub fn flags(&self) -> String {
        let degenerate = self.degenerate_metrics();
        if degenerate.is_empty() {
            String::new()
        } else {
            format!(
                "degenerate:{}",
                degenerate
                    .iter()
                    .map(|m| m.label())
                    .collect::<Vec<_>>()
                    .join(",")
            )
        }
    }
}

/// Per-image and aggregate scores over an evaluation batch.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub per_image: Vec<ImageReport>,
}

impl MetricReport {
    pub fn push(&mut self, report: ImageReport) {
        self.per_image.push(report);
    }

    /// Arithmetic mean over the images where the metric produced a value.
    pub fn aggregate(&self, metric: Metric) -> Option<f64> {
        let values: Vec<f64> = self
            .per_image
            .iter()
            .filter_map(|r| r.score(metric))
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    pub fn any_degenerate(&self) -> bool {
        self.per_image
            .iter()
            .any(|r| !r.degenerate_metrics().is_empty())
    }

    /// CSV report: `image,cc,sim,kld,nss,auc,sauc,flags` with one row per
    /// image plus a final `mean` row; degenerate cells stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,cc,sim,kld,nss,auc,sauc,flags\n");
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for report in &self.per_image {
            let cells: Vec<String> = Metric::CSV_ORDER
                .iter()
                .map(|&m| fmt(report.score(m)))
                .collect();
            let _ = writeln!(
                out,
                "{},{},{}",
                csv_field(&report.name),
                cells.join(","),
                csv_field(&report.flags())
            );
        }
        let cells: Vec<String> = Metric::CSV_ORDER
            .iter()
            .map(|&m| fmt(self.aggregate(m)))
            .collect();
        let _ = writeln!(out, "mean,{},", cells.join(","));
        out
    }

    /// Fixed-width table with the perception-based columns grouped first.
    pub fn pretty_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} | {:^26} | {:^26}",
            "", "perception-based", "non-perception-based"
        );
        let _ = writeln!(
            out,
            "{:<20} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
            "image", "CC", "SIM", "NSS", "sAUC", "AUC", "KLD"
        );
        let _ = writeln!(out, "{}", "-".repeat(78));
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "--".to_string(),
        };
        let mut write_row = |name: &str, get: &dyn Fn(Metric) -> Option<f64>| {
            let _ = writeln!(
                out,
                "{:<20} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
                name,
                fmt(get(Metric::Cc)),
                fmt(get(Metric::Sim)),
                fmt(get(Metric::Nss)),
                fmt(get(Metric::Sauc)),
                fmt(get(Metric::Auc)),
                fmt(get(Metric::Kld)),
            );
        };
        for report in &self.per_image {
            write_row(&report.name, &|m| report.score(m));
        }
        write_row("mean", &|m| self.aggregate(m));
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs all six metrics for one image; degenerate metrics are recorded as
/// absent with their reason.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pair(
    name: &str,
    pred: &SaliencyMap,
    gt_map: &SaliencyMap,
    gt_fix: &FixationMap,
    shuffle_pool: &[&FixationMap],
    seed: u64,
    n_splits: usize,
) -> ImageReport {
    let outcome = |r: Result<f64>| match r {
        Ok(v) => MetricOutcome::Value(v),
        Err(e) => MetricOutcome::Degenerate(e.to_string()),
    };
    let outcomes = vec![
        (Metric::Cc, outcome(cc(pred, gt_map))),
        (Metric::Sim, outcome(sim(pred, gt_map))),
        (Metric::Kld, outcome(kld(pred, gt_map))),
        (Metric::Nss, outcome(nss(pred, gt_fix))),
        (Metric::Auc, outcome(auc_judd(pred, gt_fix))),
        (
            Metric::Sauc,
            outcome(sauc(pred, gt_fix, shuffle_pool, seed, n_splits)),
        ),
    ];
    ImageReport {
        name: name.to_string(),
        outcomes,
    }
}
