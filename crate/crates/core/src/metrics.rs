//! AUC and the two evaluation protocols: local test (each client's own
//! model on its own test set) and new test (probability ensemble of all
//! client models on a pooled held-out set).

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::partition::ParamStore;
use crate::vit::{SubnetMode, VisionTransformer};

/// Area under the ROC curve for binary labels, ties counted one half.
///
/// Computed exactly as `(2 * wins + ties) / (2 * n_pos * n_neg)` with integer
/// counts, so it agrees bit-for-bit with a pairwise count.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("label {y} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

const EVAL_BATCH: usize = 256;

/// Positive-class probability of every sample under the Full-mode model.
pub fn positive_scores(model: &VisionTransformer, store: &ParamStore, data: &Dataset) -> Result<Vec<f64>> {
    if data.num_classes != 2 {
        return Err(Error::Data(format!("AUC scoring needs 2 classes, dataset has {}", data.num_classes)));
    }
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let probs = model.predict_proba(store, &data.batch(chunk), SubnetMode::Full)?;
        out.extend(probs.data().chunks_exact(2).map(|r| r[1] as f64));
    }
    Ok(out)
}

/// Per-client AUC of each client's own model on its own test set.
pub fn local_test(model: &VisionTransformer, clients: &[(&ParamStore, &Dataset)]) -> Result<Vec<f64>> {
    clients
        .iter()
        .map(|(store, test)| auc(&positive_scores(model, store, test)?, test.labels()))
        .collect()
}

/// Elementwise mean of per-model score vectors, summed in model order.
pub fn ensemble_scores(per_model: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = per_model.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for scores in per_model {
        for (o, s) in out.iter_mut().zip(scores) {
            *o += s;
        }
    }
    let m = per_model.len() as f64;
    out.iter_mut().for_each(|v| *v /= m);
    out
}

/// AUC of the averaged positive-class probabilities of all `stores`.
pub fn new_test(model: &VisionTransformer, stores: &[&ParamStore], held_out: &Dataset) -> Result<f64> {
    if stores.is_empty() {
        return Err(Error::Data("new test needs at least one model".into()));
    }
    let per: Vec<Vec<f64>> = stores
        .iter()
        .map(|s| positive_scores(model, s, held_out))
        .collect::<Result<_>>()?;
    auc(&ensemble_scores(&per), held_out.labels())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub local_auc: Vec<f64>,
    pub new_auc: f64,
    pub test_counts: Vec<usize>,
}

impl EvalResult {
    pub fn mean_local_auc(&self) -> f64 {
        self.local_auc.iter().sum::<f64>() / self.local_auc.len().max(1) as f64
    }
}

pub fn evaluate(model: &VisionTransformer, clients: &[(&ParamStore, &Dataset)], held_out: &Dataset) -> Result<EvalResult> {
    let stores: Vec<&ParamStore> = clients.iter().map(|(s, _)| *s).collect();
    Ok(EvalResult {
        local_auc: local_test(model, clients)?,
        new_auc: new_test(model, &stores, held_out)?,
        test_counts: clients.iter().map(|(_, d)| d.len()).collect(),
    })
}

/// One row of the metrics CSV. `client` is `None` for pooled (new-test) rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub client: Option<usize>,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

pub const CSV_HEADER: &str = "round,client_id,split,metric,value";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::with_capacity(32 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let client = r.client.map_or_else(|| "*".to_string(), |c| c.to_string());
        writeln!(s, "{},{client},{},{},{:.6}", r.round, r.split, r.metric, r.value).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], labels: &[usize]) -> f64 {
        let mut twice = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            p += 1;
            for (j, &yj) in labels.iter().enumerate() {
                if yj == 0 {
                    twice += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                }
            }
        }
        n += labels.iter().filter(|&&y| y == 0).count() as u64;
        twice as f64 / (2 * p * n) as f64
    }

    #[test]
    fn hand_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.2], &[1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[], &[]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn ensemble_of_constant_scores() {
        let a = vec![0.9, 0.2, 0.6, 0.4];
        let b = vec![0.1, 0.4, 0.6, 0.0];
        let m = ensemble_scores(&[a, b]);
        for (got, want) in m.iter().zip([0.5, 0.3, 0.6, 0.2]) {
            assert!((got - want).abs() < 1e-12, "{m:?}");
        }
        // labels [1, 0, 1, 0]: positives 0.5, 0.6 beat negatives 0.3, 0.2.
        assert_eq!(auc(&m, &[1, 0, 1, 0]).unwrap(), 1.0);
        // positives 0.3, 0.6 vs negatives 0.5, 0.2: 3 of 4 pairs won.
        assert_eq!(auc(&m, &[0, 1, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn csv_format() {
        let rows = vec![
            MetricRow { round: 1, client: Some(0), split: "local", metric: "auc", value: 0.5 },
            MetricRow { round: 1, client: None, split: "new", metric: "auc", value: 2.0 / 3.0 },
        ];
        assert_eq!(
            metrics_csv(&rows),
            "round,client_id,split,metric,value\n1,0,local,auc,0.500000\n1,*,new,auc,0.666667\n"
        );
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(0usize..2, n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    }

    proptest! {
        #[test]
        fn matches_pairwise_count((s, l) in instance()) {
            prop_assert_eq!(auc(&s, &l).unwrap(), brute(&s, &l));
        }

        #[test]
        fn monotone_transforms_preserve_auc((s, l) in instance()) {
            let a = auc(&s, &l).unwrap();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let f: Vec<f64> = s.iter().map(|v| 3.0 * v - 7.0).collect();
            prop_assert_eq!(auc(&e, &l).unwrap(), a);
            prop_assert_eq!(auc(&f, &l).unwrap(), a);
        }

        #[test]
        fn negation_complements(l in prop::collection::vec(0usize..2, 2..80)) {
            prop_assume!(l.contains(&0) && l.contains(&1));
            let s: Vec<f64> = (0..l.len()).map(|i| (i * 7919 % 1009) as f64).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
