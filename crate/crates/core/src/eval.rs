//! Prefix construction and validation metrics: accuracy per prefix fraction,
//! AUROC (Mann-Whitney rank form with midranks) and confusion matrices.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::cells::{forward, BatchInput, ModelParams};
use crate::vocab::EncodedTrace;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUROC is undefined: scores contain a single class")]
    SingleClass,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// 2x2 outcome counts for one prefix fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

/// Metrics of one prefix fraction over the whole validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionMetrics {
    pub fraction: u8,
    pub accuracy: f64,
    /// Absent when the validation labels are single-class.
    pub auroc: Option<f64>,
    pub confusion: Confusion,
}

/// Per-iteration evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iteration: usize,
    pub fractions: Vec<FractionMetrics>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl MetricsReport {
    pub fn accuracy_at(&self, fraction: u8) -> Option<f64> {
        self.fractions
            .iter()
            .find(|f| f.fraction == fraction)
            .map(|f| f.accuracy)
    }

    pub fn auroc_at(&self, fraction: u8) -> Option<f64> {
        self.fractions
            .iter()
            .find(|f| f.fraction == fraction)
            .and_then(|f| f.auroc)
    }

    /// Field-wise equality ignoring the wall-clock columns; two runs with the
    /// same seed must agree on everything else bit for bit.
    pub fn stats_eq(&self, other: &MetricsReport) -> bool {
        self.iteration == other.iteration && self.fractions == other.fractions
    }
}

/// Leading `max(1, ceil(fraction/100 * len))` ids of a sequence.
pub fn prefix(ids: &[usize], fraction: u8) -> &[usize] {
    assert!(fraction > 0 && fraction <= 100, "fraction must be in (0, 100]");
    let len = ids.len();
    let keep = (fraction as usize * len).div_ceil(100).max(1);
    &ids[..keep.min(len)]
}

/// Classifies one encoded sequence: `label = argmax` of the two-logit
/// softmax, with an exact 0.5 tie resolving to false.
pub fn classify(params: &ModelParams, ids: &[usize]) -> (bool, f64) {
    let batch = BatchInput::from_sequences(&[ids], &[0]);
    let (probs, _) = forward(params, &batch);
    let prob_true = probs.at(0, 1);
    (prob_true > 0.5, prob_true)
}

/// AUROC via the Mann-Whitney rank-sum formulation with midranks:
/// `(R_pos - P(P+1)/2) / (P * N)`, which equals concordant pairs plus half
/// the ties over all positive-negative pairs.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks over tie groups; rank sums stay half-integers and thus exact.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based: positions i..=j share the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Scores every validation trace at each prefix fraction. Classification is
/// batched; results are independent of the batch split.
pub fn evaluate(
    params: &ModelParams,
    validation: &[EncodedTrace],
    fractions: &[u8],
    batch_size: usize,
) -> Result<MetricsReport, EvalError> {
    if validation.is_empty() {
        return Err(EvalError::EmptyValidation);
    }
    assert!(batch_size >= 1);
    let labels: Vec<bool> = validation.iter().map(|t| t.label_id == 1).collect();
    let mut out = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut scores = Vec::with_capacity(validation.len());
        for chunk in validation.chunks(batch_size) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|t| prefix(&t.ids, fraction)).collect();
            let chunk_labels: Vec<u8> = chunk.iter().map(|t| t.label_id).collect();
            let batch = BatchInput::from_sequences(&seqs, &chunk_labels);
            let (probs, _) = forward(params, &batch);
            for row in 0..chunk.len() {
                scores.push(probs.at(row, 1));
            }
        }
        let mut confusion = Confusion::default();
        for (&score, &truth) in scores.iter().zip(&labels) {
            let predicted = score > 0.5;
            match (predicted, truth) {
                (true, true) => confusion.tp += 1,
                (true, false) => confusion.fp += 1,
                (false, true) => confusion.fn_ += 1,
                (false, false) => confusion.tn += 1,
            }
        }
        let auroc_value = match auroc(&scores, &labels) {
            Ok(v) => Some(v),
            Err(EvalError::SingleClass) => None,
            Err(e) => return Err(e),
        };
        out.push(FractionMetrics {
            fraction,
            accuracy: confusion.accuracy(),
            auroc: auroc_value,
            confusion,
        });
    }
    Ok(MetricsReport {
        iteration: 0,
        fractions: out,
        train_seconds: 0.0,
        eval_seconds: 0.0,
    })
}

pub const METRICS_CSV_HEADER: &str =
    "iteration,fraction,accuracy,auroc,tp,fp,fn,tn,train_seconds,eval_seconds";

/// One CSV row per (iteration, fraction); an undefined AUROC stays an empty
/// field.
pub fn write_metrics_rows(writer: &mut impl Write, report: &MetricsReport) -> std::io::Result<()> {
    for f in &report.fractions {
        let auroc = f.auroc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{},{},{}",
            report.iteration,
            f.fraction,
            f.accuracy,
            auroc,
            f.confusion.tp,
            f.confusion.fp,
            f.confusion.fn_,
            f.confusion.tn,
            report.train_seconds,
            report.eval_seconds
        )?;
    }
    Ok(())
}

/// Writes a full metrics CSV (header plus every report) atomically.
pub fn write_metrics_csv(reports: &[MetricsReport], path: &Path) -> Result<(), EvalError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let io_err = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    };
    writeln!(tmp, "{METRICS_CSV_HEADER}").map_err(io_err)?;
    for report in reports {
        write_metrics_rows(&mut tmp, report).map_err(io_err)?;
    }
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{init_params, CellKind};
    use crate::numeric::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn prefix_applies_ceiling_with_minimum_one() {
        let ids = [1usize, 2, 3, 4];
        assert_eq!(prefix(&ids, 25), &[1]);
        let ids5 = [1usize, 2, 3, 4, 5];
        assert_eq!(prefix(&ids5, 50), &[1, 2, 3]);
        assert_eq!(prefix(&ids5, 100), &ids5[..]);
        assert_eq!(prefix(&[9], 25), &[9]);
    }

    #[test]
    fn prefix_is_monotone_in_fraction() {
        let ids: Vec<usize> = (0..17).collect();
        for small in [10u8, 25, 40, 75] {
            for big in [50u8, 75, 100] {
                if small <= big {
                    let a = prefix(&ids, small);
                    let b = prefix(&ids, big);
                    assert!(b.starts_with(a));
                }
            }
        }
    }

    #[test]
    fn classify_zero_model_ties_to_false() {
        let mut params = init_params(CellKind::Gru, 4, 3, 1, 0);
        for t in params.tensors_mut() {
            t.fill(0.0);
        }
        let (label, prob) = classify(&params, &[1, 2, 3]);
        assert_eq!(prob, 0.5);
        assert!(!label, "an exact tie must resolve to false");
    }

    #[test]
    fn classify_label_is_consistent_with_probability() {
        let params = init_params(CellKind::Gru, 6, 5, 1, 3);
        let mut rng = seeded_rng(4);
        for _ in 0..20 {
            let len = rng.random_range(1..10);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..6)).collect();
            let (label, prob) = classify(&params, &ids);
            assert_eq!(label, prob > 0.5);
        }
    }

    /// Brute-force pair counting: concordant + half ties over all
    /// positive-negative pairs.
    fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auroc_known_cases() {
        // Perfect separation.
        let v = auroc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(v, 1.0);

        // Values frozen from the brute-force pair-counting oracle.
        let scores = [0.9, 0.3, 0.8, 0.1];
        let perfect = [true, false, true, false];
        assert_eq!(auroc_oracle(&scores, &perfect), 1.0);
        assert_eq!(auroc(&scores, &perfect).unwrap(), 1.0);

        let swapped = [true, true, false, false];
        assert_eq!(auroc_oracle(&scores, &swapped), 0.75);
        assert_eq!(auroc(&scores, &swapped).unwrap(), 0.75);

        let mixed = [false, true, true, false];
        assert_eq!(auroc_oracle(&scores, &mixed), 0.5);
        assert_eq!(auroc(&scores, &mixed).unwrap(), 0.5);
    }

    #[test]
    fn auroc_all_ties_is_exactly_half() {
        let scores = [0.4; 9];
        let labels = [true, false, true, false, false, true, false, false, true];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_is_undefined() {
        assert!(matches!(
            auroc(&[0.1, 0.9], &[true, true]),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn auroc_matches_pair_counting_on_random_instances() {
        let mut rng = seeded_rng(77);
        for _ in 0..100 {
            let n = rng.random_range(2..=200);
            let mut scores: Vec<f64> = Vec::with_capacity(n);
            let mut labels: Vec<bool> = Vec::with_capacity(n);
            for _ in 0..n {
                // Coarse grid so ties actually happen.
                scores.push((rng.random_range(0..20) as f64) / 20.0);
                labels.push(rng.random_bool(0.4));
            }
            if !labels.contains(&true) || !labels.contains(&false) {
                labels[0] = true;
                labels[1] = false;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_oracle(&scores, &labels);
            assert_eq!(fast, slow, "rank form must equal pair counting exactly");
        }
    }

    proptest! {
        #[test]
        fn auroc_is_invariant_under_increasing_transforms(
            raw in proptest::collection::vec((0u8..15, proptest::bool::ANY), 4..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 15.0).collect();
            let mut labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            if !labels.contains(&true) { labels[0] = true; }
            if !labels.contains(&false) { labels[1] = false; }
            let base = auroc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).exp()).collect();
            let after = auroc(&warped, &labels).unwrap();
            prop_assert_eq!(base, after);
        }

        #[test]
        fn prefix_never_empties_and_is_idempotent_at_full(
            ids in proptest::collection::vec(0usize..50, 1..120),
            fraction in 1u8..=100
        ) {
            let p = prefix(&ids, fraction);
            prop_assert!(!p.is_empty());
            prop_assert!(p.len() <= ids.len());
            prop_assert_eq!(prefix(&ids, 100), ids.as_slice());
        }
    }

    #[test]
    fn evaluate_confusion_partitions_validation() {
        let params = init_params(CellKind::Gru, 5, 4, 1, 8);
        let mut rng = seeded_rng(9);
        let validation: Vec<EncodedTrace> = (0..57)
            .map(|i| {
                let len = rng.random_range(1..12);
                EncodedTrace {
                    ids: (0..len).map(|_| rng.random_range(0..5)).collect(),
                    label_id: (i % 3 == 0) as u8,
                }
            })
            .collect();
        let report = evaluate(&params, &validation, &[25, 50, 75, 100], 16).unwrap();
        for f in &report.fractions {
            assert_eq!(f.confusion.total(), validation.len());
            assert_eq!(f.accuracy, f.confusion.accuracy());
        }
    }

    #[test]
    fn evaluate_is_independent_of_batch_split() {
        let params = init_params(CellKind::Lstm, 5, 4, 1, 10);
        let mut rng = seeded_rng(11);
        let validation: Vec<EncodedTrace> = (0..23)
            .map(|i| {
                let len = rng.random_range(1..9);
                EncodedTrace {
                    ids: (0..len).map(|_| rng.random_range(0..5)).collect(),
                    label_id: (i % 2) as u8,
                }
            })
            .collect();
        let a = evaluate(&params, &validation, &[50, 100], 7).unwrap();
        let b = evaluate(&params, &validation, &[50, 100], 23).unwrap();
        assert!(a.stats_eq(&b));
    }

    #[test]
    fn metrics_rows_have_empty_auroc_when_undefined() {
        let report = MetricsReport {
            iteration: 3,
            fractions: vec![FractionMetrics {
                fraction: 100,
                accuracy: 0.5,
                auroc: None,
                confusion: Confusion { tp: 0, fp: 0, fn_: 1, tn: 1 },
            }],
            train_seconds: 1.0,
            eval_seconds: 0.5,
        };
        let mut buf = Vec::new();
        write_metrics_rows(&mut buf, &report).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line.trim(), "3,100,0.5,,0,0,1,1,1,0.5");
    }
}
