use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::NO_RELATION;

/// Relation-extraction scores with `no_relation` as the negative class.
///
/// Micro precision counts every non-negative prediction, micro recall every
/// non-negative gold label; a hit is an exact match on a positive label.
/// Macro F1 averages per-relation F1 over the positive labels that occur in
/// gold or predictions. Undefined ratios are reported as 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub n: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of precision and recall in count form, 2·tp / (pred + gold),
/// which rounds once.
fn f1(tp: usize, pred: usize, gold: usize) -> f64 {
    ratio(2 * tp, pred + gold)
}

pub fn score<G: AsRef<str>, P: AsRef<str>>(pairs: impl IntoIterator<Item = (G, P)>) -> Metrics {
    let mut tp = 0;
    let mut pred_pos = 0;
    let mut gold_pos = 0;
    let mut correct = 0;
    let mut n = 0;
    // Per relation: (tp, predicted, gold).
    let mut per: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (gold, pred) in pairs {
        let (gold, pred) = (gold.as_ref(), pred.as_ref());
        n += 1;
        if gold == pred {
            correct += 1;
        }
        if pred != NO_RELATION {
            pred_pos += 1;
            per.entry(pred.to_string()).or_default().1 += 1;
        }
        if gold != NO_RELATION {
            gold_pos += 1;
            per.entry(gold.to_string()).or_default().2 += 1;
            if gold == pred {
                tp += 1;
                per.entry(gold.to_string()).or_default().0 += 1;
            }
        }
    }
    let p = ratio(tp, pred_pos);
    let r = ratio(tp, gold_pos);
    let macro_f1 = if per.is_empty() {
        0.0
    } else {
        per.values().map(|&(t, pp, gp)| f1(t, pp, gp)).sum::<f64>() / per.len() as f64
    };
    Metrics {
        micro_precision: p,
        micro_recall: r,
        micro_f1: f1(tp, pred_pos, gold_pos),
        macro_f1,
        accuracy: ratio(correct, n),
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let m = score([("a", "a"), ("b", "b"), (NO_RELATION, NO_RELATION)]);
        assert_eq!((m.micro_f1, m.macro_f1, m.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_negative_predictions() {
        let m = score([("a", NO_RELATION), ("b", NO_RELATION)]);
        assert_eq!(m.micro_f1, 0.0);
        assert_eq!(m.macro_f1, 0.0);
    }

    #[test]
    fn two_hits_one_false_positive_one_miss() {
        let m = score([("r", "r"), ("r", "r"), (NO_RELATION, "r"), ("r", NO_RELATION)]);
        assert_eq!(m.micro_precision, 2.0 / 3.0);
        assert_eq!(m.micro_f1, 2.0 / 3.0);
    }
}
