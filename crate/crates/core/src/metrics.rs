//! Binary-classification metrics with `Fake` as the positive class, subset
//! reports with two aggregation modes, and multi-frame score averaging.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmsupcon::sigmoid;
use crate::data::{Label, ScoredPrediction};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no predictions")]
    EmptyInput,
    #[error("balanced accuracy needs both classes")]
    SingleClassInput,
    #[error("average precision needs at least one Fake sample")]
    NoPositives,
    #[error("video {0:?} has no frames")]
    EmptyVideo(String),
    #[error("frame count must be positive")]
    ZeroFrames,
}

#[inline]
fn predicts_fake(score: f64, threshold: f64) -> bool {
    score >= threshold
}

/// Confusion counts with Fake as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[ScoredPrediction], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for p in preds {
            match (predicts_fake(p.score, threshold), p.label) {
                (true, Label::Fake) => c.tp += 1,
                (true, Label::Real) => c.fp += 1,
                (false, Label::Real) => c.tn += 1,
                (false, Label::Fake) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn accuracy(preds: &[ScoredPrediction], threshold: f64) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let c = Confusion::from_predictions(preds, threshold);
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// Mean of the per-class recalls.
pub fn balanced_accuracy(preds: &[ScoredPrediction], threshold: f64) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let c = Confusion::from_predictions(preds, threshold);
    let (pos, neg) = (c.tp + c.fn_, c.tn + c.fp);
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClassInput);
    }
    Ok((c.tp as f64 / pos as f64 + c.tn as f64 / neg as f64) / 2.0)
}

/// Non-interpolated average precision. Samples with equal scores enter at
/// one threshold together.
pub fn average_precision(preds: &[ScoredPrediction]) -> Result<f64, MetricsError> {
    let positives = preds.iter().filter(|p| p.label.is_fake()).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<&ScoredPrediction> = preds.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = order[i].score;
        let mut gained = 0;
        while i < order.len() && order[i].score == s {
            if order[i].label.is_fake() {
                gained += 1;
            }
            seen += 1;
            i += 1;
        }
        if gained > 0 {
            tp += gained;
            ap += (gained as f64 / positives as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Precision, recall and F1 on the Fake class. Undefined ratios are 0 and
/// flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

pub fn precision_recall_f1(preds: &[ScoredPrediction], threshold: f64) -> Result<PrecisionRecall, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let c = Confusion::from_predictions(preds, threshold);
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            (0.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PrecisionRecall {
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Unweighted mean of the subset rows.
    #[default]
    SubsetMean,
    /// Metrics recomputed on all predictions pooled together.
    Overall,
}

/// One row of an [`EvalReport`]. `None` marks a metric that is undefined
/// for the row (single-class input for balanced accuracy, no positives for
/// AP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subset: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub acc: f64,
    pub balanced_acc: Option<f64>,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    /// Sorted by subset name.
    pub subsets: Vec<MetricRow>,
    pub mean_over_subsets: MetricRow,
    pub overall_pooled: MetricRow,
    /// The aggregate the caller asked to headline.
    pub headline: Aggregation,
    pub warnings: Vec<String>,
}

fn row_for(subset: &str, preds: &[ScoredPrediction], threshold: f64) -> Result<MetricRow, MetricsError> {
    let n_fake = preds.iter().filter(|p| p.label.is_fake()).count();
    let pr = precision_recall_f1(preds, threshold)?;
    Ok(MetricRow {
        subset: subset.to_string(),
        n_real: preds.len() - n_fake,
        n_fake,
        acc: accuracy(preds, threshold)?,
        balanced_acc: balanced_accuracy(preds, threshold).ok(),
        ap: average_precision(preds).ok(),
        precision: pr.precision,
        recall: pr.recall,
        f1: pr.f1,
    })
}

/// Running mean; exact when all values are equal.
fn stable_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut mean = None;
    for (k, v) in values.enumerate() {
        mean = Some(match mean {
            None => v,
            Some(m) => m + (v - m) / (k + 1) as f64,
        });
    }
    mean
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    stable_mean(values.flatten())
}

/// Per-subset rows plus both aggregates. Undefined subset metrics are
/// excluded from the subset mean and reported as warnings.
pub fn per_subset_report(
    preds: &[ScoredPrediction],
    headline: Aggregation,
    threshold: f64,
) -> Result<EvalReport, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut groups: BTreeMap<&str, Vec<ScoredPrediction>> = BTreeMap::new();
    for p in preds {
        groups.entry(p.subset.as_str()).or_default().push(p.clone());
    }
    let mut warnings = Vec::new();
    let mut subsets = Vec::with_capacity(groups.len());
    for (name, group) in &groups {
        let row = row_for(name, group, threshold)?;
        if row.ap.is_none() {
            warnings.push(format!("subset {name:?}: AP undefined (no Fake samples)"));
        }
        if row.balanced_acc.is_none() {
            warnings.push(format!("subset {name:?}: balanced accuracy undefined (single class)"));
        }
        subsets.push(row);
    }
    for w in &warnings {
        warn!("{w}");
    }
    let mean = |f: fn(&MetricRow) -> f64| stable_mean(subsets.iter().map(f)).expect("at least one subset");
    let mean_over_subsets = MetricRow {
        subset: "mean_over_subsets".into(),
        n_real: subsets.iter().map(|r| r.n_real).sum(),
        n_fake: subsets.iter().map(|r| r.n_fake).sum(),
        acc: mean(|r| r.acc),
        balanced_acc: mean_defined(subsets.iter().map(|r| r.balanced_acc)),
        ap: mean_defined(subsets.iter().map(|r| r.ap)),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
    };
    let overall_pooled = row_for("overall_pooled", preds, threshold)?;
    Ok(EvalReport {
        threshold,
        subsets,
        mean_over_subsets,
        overall_pooled,
        headline,
        warnings,
    })
}

impl EvalReport {
    pub fn headline_row(&self) -> &MetricRow {
        match self.headline {
            Aggregation::SubsetMean => &self.mean_over_subsets,
            Aggregation::Overall => &self.overall_pooled,
        }
    }

    pub const CSV_HEADER: &'static str = "subset,n_real,n_fake,acc,balanced_acc,ap,precision,recall,f1";

    /// Subset rows in name order, then `mean_over_subsets` and
    /// `overall_pooled`. Undefined metrics are written as `NA`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in self
            .subsets
            .iter()
            .chain([&self.mean_over_subsets, &self.overall_pooled])
        {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.subset,
                r.n_real,
                r.n_fake,
                r.acc,
                opt(r.balanced_acc),
                opt(r.ap),
                r.precision,
                r.recall,
                r.f1
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Per-frame model output for one video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FrameScore {
    Logit(f64),
    Probability(f64),
}

/// Indices of `t` uniformly spaced frames out of `n`, always including the
/// middle frame `n / 2`. `t ≥ n` selects every frame.
pub fn frame_indices(n: usize, t: usize) -> Vec<usize> {
    if n == 0 || t == 0 {
        return Vec::new();
    }
    if t >= n {
        return (0..n).collect();
    }
    let mid = n / 2;
    if t == 1 {
        return vec![mid];
    }
    let mut idx: Vec<usize> = (0..t)
        .map(|k| ((k as f64 + 0.5) * n as f64 / t as f64).floor() as usize)
        .map(|i| i.min(n - 1))
        .collect();
    if !idx.contains(&mid) {
        let nearest = (0..t).min_by_key(|&k| idx[k].abs_diff(mid)).expect("t > 0");
        idx[nearest] = mid;
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoScore {
    pub video_id: String,
    pub prediction: ScoredPrediction,
    pub frames_used: Vec<usize>,
    /// True when probabilities were averaged because logits were missing.
    pub approximate: bool,
}

/// Scores a video as `sigmoid(mean logit)` over `t` selected frames, or the
/// mean probability (flagged) when any selected frame has no logit.
pub fn multi_frame_average(
    video_id: &str,
    frames: &[FrameScore],
    t: usize,
    label: Label,
    subset: &str,
) -> Result<VideoScore, MetricsError> {
    if frames.is_empty() {
        return Err(MetricsError::EmptyVideo(video_id.to_string()));
    }
    if t == 0 {
        return Err(MetricsError::ZeroFrames);
    }
    let idx = frame_indices(frames.len(), t);
    let logits: Option<Vec<f64>> = idx
        .iter()
        .map(|&i| match frames[i] {
            FrameScore::Logit(l) => Some(l),
            FrameScore::Probability(_) => None,
        })
        .collect();
    let k = idx.len() as f64;
    let (score, approximate) = match logits {
        Some(l) => (sigmoid(l.iter().sum::<f64>() / k), false),
        None => {
            let p: f64 = idx
                .iter()
                .map(|&i| match frames[i] {
                    FrameScore::Logit(l) => sigmoid(l),
                    FrameScore::Probability(p) => p,
                })
                .sum();
            (p / k, true)
        }
    };
    Ok(VideoScore {
        video_id: video_id.to_string(),
        prediction: ScoredPrediction::new(score.clamp(0.0, 1.0), label, subset),
        frames_used: idx,
        approximate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Label::*;

    fn preds(scores: &[f64], labels: &[Label]) -> Vec<ScoredPrediction> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| ScoredPrediction::new(s, l, "s"))
            .collect()
    }

    /// Brute force: enumerate every candidate threshold (each distinct score)
    /// and compute precision/recall from scratch.
    fn oracle_ap(p: &[ScoredPrediction]) -> f64 {
        let pos = p.iter().filter(|x| x.label == Fake).count() as f64;
        let mut thresholds: Vec<f64> = p.iter().map(|x| x.score).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let selected: Vec<_> = p.iter().filter(|x| x.score >= t).collect();
            let tp = selected.iter().filter(|x| x.label == Fake).count() as f64;
            let recall = tp / pos;
            let precision = tp / selected.len() as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    fn oracle_acc(p: &[ScoredPrediction], t: f64) -> f64 {
        let mut hit = 0;
        for x in p {
            let fake = x.score >= t;
            if fake == (x.label == Fake) {
                hit += 1;
            }
        }
        hit as f64 / p.len() as f64
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&preds(&[0.9, 0.1], &[Fake, Real]), 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&preds(&[0.9, 0.1], &[Real, Fake]), 0.5).unwrap(), 0.0);
        assert_eq!(accuracy(&preds(&[0.5], &[Fake]), 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[], 0.5), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn balanced_examples() {
        let all_real = preds(&[0.1; 4], &[Real, Real, Fake, Fake]);
        assert_eq!(balanced_accuracy(&all_real, 0.5).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&preds(&[0.1, 0.9], &[Real, Fake]), 0.5).unwrap(), 1.0);
        let mut skewed = preds(&[0.1; 90], &[Real; 90]);
        skewed.extend(preds(&[0.2; 10], &[Fake; 10]));
        assert_eq!(accuracy(&skewed, 0.5).unwrap(), 0.9);
        assert_eq!(balanced_accuracy(&skewed, 0.5).unwrap(), 0.5);
        assert_eq!(
            balanced_accuracy(&preds(&[0.3], &[Real]), 0.5),
            Err(MetricsError::SingleClassInput)
        );
    }

    #[test]
    fn ap_examples() {
        let s = [0.9, 0.8, 0.7, 0.6];
        assert_eq!(average_precision(&preds(&s, &[Fake, Fake, Real, Real])).unwrap(), 1.0);
        let ap = average_precision(&preds(&s, &[Fake, Real, Fake, Real])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let tied = average_precision(&preds(&[0.4; 6], &[Fake, Real, Fake, Real, Fake, Real])).unwrap();
        assert_eq!(tied, 0.5);
        assert_eq!(
            average_precision(&preds(&[0.4], &[Real])),
            Err(MetricsError::NoPositives)
        );
    }

    #[test]
    fn prf_examples() {
        let perfect = precision_recall_f1(&preds(&[0.9, 0.1], &[Fake, Real]), 0.5).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = precision_recall_f1(&preds(&[0.1, 0.2], &[Fake, Real]), 0.5).unwrap();
        assert!(none.precision_undefined && !none.recall_undefined);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let p = preds(&[0.9, 0.9, 0.9, 0.9, 0.1], &[Fake, Fake, Fake, Real, Fake]);
        let r = precision_recall_f1(&p, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.75, 0.75, 0.75));
    }

    #[test]
    fn report_examples() {
        let one = preds(&[0.9, 0.2, 0.6], &[Fake, Real, Real]);
        let r = per_subset_report(&one, Aggregation::SubsetMean, 0.5).unwrap();
        assert_eq!(r.mean_over_subsets.acc, r.overall_pooled.acc);

        let mut two: Vec<ScoredPrediction> = vec![ScoredPrediction::new(0.9, Fake, "a"); 10];
        two.extend((0..1000).map(|_| ScoredPrediction::new(0.9, Real, "b")));
        let r = per_subset_report(&two, Aggregation::Overall, 0.5).unwrap();
        assert_eq!(r.mean_over_subsets.acc, 0.5);
        assert!((r.overall_pooled.acc - 10.0 / 1010.0).abs() < 1e-15);
        assert!((r.overall_pooled.acc - 0.0099).abs() < 1e-4);
        assert_eq!(r.subsets[1].ap, None);
        assert!(!r.warnings.is_empty());
        assert_eq!(r.mean_over_subsets.ap, Some(1.0));
        assert_eq!(r.headline_row().subset, "overall_pooled");
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(2).unwrap().contains(",NA,"));
    }

    #[test]
    fn frame_selection() {
        assert_eq!(frame_indices(5, 1), vec![2]);
        assert_eq!(frame_indices(4, 1), vec![2]);
        assert_eq!(frame_indices(3, 8), vec![0, 1, 2]);
        for n in 1..40 {
            for t in 1..=n {
                let idx = frame_indices(n, t);
                assert_eq!(idx.len(), t, "n={n} t={t}");
                assert!(idx.contains(&(n / 2)));
            }
        }
        let v = multi_frame_average("v", &[FrameScore::Logit(0.2), FrameScore::Logit(0.4)], 2, Fake, "s").unwrap();
        assert!((v.prediction.score - sigmoid(0.3)).abs() < 1e-15);
        assert!(!v.approximate);
        let same = [FrameScore::Logit(-1.3); 7];
        let s1 = multi_frame_average("v", &same, 1, Real, "s").unwrap().prediction.score;
        for t in 2..9 {
            assert_eq!(
                multi_frame_average("v", &same, t, Real, "s").unwrap().prediction.score,
                s1
            );
        }
        let probs = multi_frame_average(
            "v",
            &[FrameScore::Probability(0.2), FrameScore::Probability(0.6)],
            2,
            Real,
            "s",
        )
        .unwrap();
        assert!(probs.approximate && (probs.prediction.score - 0.4).abs() < 1e-15);
        assert!(matches!(
            multi_frame_average("v", &[], 1, Real, "s"),
            Err(MetricsError::EmptyVideo(_))
        ));
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> Vec<ScoredPrediction> {
        let n = rng.random_range(1..=50);
        let levels = rng.random_range(1..=10);
        (0..n)
            .map(|_| {
                let s = rng.random_range(0..=levels) as f64 / levels as f64;
                let l = if rng.random_bool(0.5) { Fake } else { Real };
                ScoredPrediction::new(s, l, "s")
            })
            .collect()
    }

    #[test]
    fn oracle_equivalence_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let p = random_instance(&mut rng);
            assert_eq!(accuracy(&p, 0.5).unwrap(), oracle_acc(&p, 0.5));
            if p.iter().any(|x| x.label == Fake) {
                let a = average_precision(&p).unwrap();
                let o = oracle_ap(&p);
                assert!((a - o).abs() <= 1e-12, "{a} vs {o}");
            }
        }
    }

    proptest! {
        #[test]
        fn ap_rank_invariant(scores in proptest::collection::vec(0.0f64..1.0, 1..40), fakes in proptest::collection::vec(any::<bool>(), 40)) {
            let labels: Vec<Label> = (0..scores.len()).map(|i| if fakes[i] || i == 0 { Fake } else { Real }).collect();
            let p = preds(&scores, &labels);
            let q = preds(&scores.iter().map(|s| s * s * 0.5 + 0.1).collect::<Vec<_>>(), &labels);
            prop_assert_eq!(average_precision(&p).unwrap(), average_precision(&q).unwrap());
        }

        #[test]
        fn balanced_invariant_to_duplication(scores in proptest::collection::vec(0.0f64..1.0, 2..30), k in 2usize..4) {
            let labels: Vec<Label> = (0..scores.len()).map(|i| if i % 2 == 0 { Fake } else { Real }).collect();
            let p = preds(&scores, &labels);
            let fakes: Vec<_> = p.iter().filter(|x| x.label == Fake).cloned().collect();
            let mut dup = p.clone();
            for _ in 1..k { dup.extend(fakes.iter().cloned()); }
            prop_assert_eq!(balanced_accuracy(&p, 0.5).unwrap(), balanced_accuracy(&dup, 0.5).unwrap());
        }

        #[test]
        fn balanced_equals_acc_when_even(scores in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let mut labels = vec![Fake; scores.len()];
            labels.extend(vec![Real; scores.len()]);
            let mut s = scores.clone();
            s.extend(scores.iter().map(|v| 1.0 - v));
            let p = preds(&s, &labels);
            prop_assert_eq!(balanced_accuracy(&p, 0.5).unwrap(), accuracy(&p, 0.5).unwrap());
        }

        #[test]
        fn identical_subsets_mean_exact(scores in proptest::collection::vec(0.0f64..1.0, 2..20)) {
            let labels: Vec<Label> = (0..scores.len()).map(|i| if i % 2 == 0 { Fake } else { Real }).collect();
            let one = preds(&scores, &labels);
            let single = per_subset_report(&one, Aggregation::SubsetMean, 0.5).unwrap();
            let mut many = Vec::new();
            for k in 0..3 {
                many.extend(one.iter().map(|p| ScoredPrediction::new(p.score, p.label, format!("s{k}"))));
            }
            let r = per_subset_report(&many, Aggregation::SubsetMean, 0.5).unwrap();
            prop_assert_eq!(r.mean_over_subsets.acc, single.subsets[0].acc);
            prop_assert_eq!(r.mean_over_subsets.ap, single.subsets[0].ap);
        }
    }
}
