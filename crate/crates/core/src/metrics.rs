//! SARI, token-level mask precision/recall/F1, and classifier-judged
//! agreement.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Relation;
use crate::error::{contract, Error, Result};
use crate::stance::StanceModel;

pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SariScore {
    pub keep_f1: f64,
    pub add_f1: f64,
    pub del_f1: f64,
    pub sari: f64,
}

impl SariScore {
    fn from_components(keep_f1: f64, add_f1: f64, del_f1: f64) -> Self {
        SariScore {
            keep_f1,
            add_f1,
            del_f1,
            sari: (keep_f1 * add_f1 * del_f1).cbrt(),
        }
    }
}

type Counts<'a, T> = HashMap<&'a [T], usize>;

fn ngrams<T: Eq + Hash>(seq: &[T], n: usize) -> Counts<'_, T> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn intersect<'a, T: Eq + Hash>(a: &Counts<'a, T>, b: &Counts<'a, T>) -> Counts<'a, T> {
    a.iter()
        .filter_map(|(g, &c)| b.get(g).map(|&d| (*g, c.min(d))))
        .collect()
}

fn difference<'a, T: Eq + Hash>(a: &Counts<'a, T>, b: &Counts<'a, T>) -> Counts<'a, T> {
    a.iter()
        .filter_map(|(g, &c)| {
            let left = c.saturating_sub(b.get(g).copied().unwrap_or(0));
            (left > 0).then_some((*g, left))
        })
        .collect()
}

/// Multiset F1 with the empty-set convention: both empty scores 1, exactly
/// one empty scores 0.
fn multiset_f1<T: Eq + Hash>(pred: &Counts<'_, T>, gold: &Counts<'_, T>) -> f64 {
    let np: usize = pred.values().sum();
    let ng: usize = gold.values().sum();
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let overlap: usize = intersect(pred, gold).values().sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / np as f64;
    let r = overlap as f64 / ng as f64;
    2.0 * p * r / (p + r)
}

/// SARI of `output` against a single `reference`, both rewrites of `input`.
pub fn sari<T: Eq + Hash>(input: &[T], output: &[T], reference: &[T]) -> Result<SariScore> {
    if input.is_empty() || reference.is_empty() {
        return Err(contract("SARI needs a nonempty input and reference"));
    }
    let (mut keep, mut add, mut del) = (0.0, 0.0, 0.0);
    for n in 1..=MAX_NGRAM {
        let i = ngrams(input, n);
        let o = ngrams(output, n);
        let r = ngrams(reference, n);
        keep += multiset_f1(&intersect(&i, &o), &intersect(&i, &r));
        add += multiset_f1(&difference(&o, &i), &difference(&r, &i));
        del += multiset_f1(&difference(&i, &o), &difference(&i, &r));
    }
    let k = MAX_NGRAM as f64;
    Ok(SariScore::from_components(keep / k, add / k, del / k))
}

/// Per-sentence SARI averaged over a corpus (each component and the
/// combined score are averaged separately).
pub fn mean_sari(scores: &[SariScore]) -> Result<SariScore> {
    if scores.is_empty() {
        return Err(contract("mean of zero SARI scores"));
    }
    let n = scores.len() as f64;
    Ok(SariScore {
        keep_f1: scores.iter().map(|s| s.keep_f1).sum::<f64>() / n,
        add_f1: scores.iter().map(|s| s.add_f1).sum::<f64>() / n,
        del_f1: scores.iter().map(|s| s.del_f1).sum::<f64>() / n,
        sari: scores.iter().map(|s| s.sari).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged token-level scores with masked tokens as positives.
/// No predicted positives gives precision 0 and no gold positives gives
/// recall 0, except that both empty scores (1, 1, 1).
pub fn mask_prf(predicted: &[Vec<u8>], gold: &[Vec<u8>]) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(contract(format!(
            "{} predicted masks against {} gold masks",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (k, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(contract(format!(
                "mask {k}: predicted length {} but gold length {}",
                p.len(),
                g.len()
            )));
        }
        for (&a, &b) in p.iter().zip(g) {
            match (a != 0, b != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp == 0 && tp + fn_ == 0 {
        return Ok(Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        });
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}

/// Fraction of `(sentence, claim)` id pairs the classifier labels AGREE.
/// An empty sentence counts as not agreeing.
pub fn agreement_rate(stance: &StanceModel, rewrites: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    if rewrites.is_empty() {
        return Err(contract("agreement rate of an empty list"));
    }
    let agree: Vec<bool> = rewrites
        .par_iter()
        .map(|(s, c)| {
            if s.is_empty() {
                return Ok(false);
            }
            Ok::<_, Error>(stance.predict(s, c)? == Relation::Agree)
        })
        .collect::<Result<_>>()?;
    Ok(agree.iter().filter(|&&a| a).count() as f64 / rewrites.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn perfect_output_scores_one() {
        let s = sari(&t("a b c d"), &t("a x c d"), &t("a x c d")).unwrap();
        assert_eq!(s, SariScore::from_components(1.0, 1.0, 1.0));
        assert_eq!(s.sari, 1.0);
    }

    #[test]
    fn copying_input_misses_the_addition() {
        let s = sari(&t("a b c d e"), &t("a b c d e"), &t("a b c d e f")).unwrap();
        assert_eq!(s.add_f1, 0.0);
        assert_eq!(s.sari, 0.0);
    }

    #[test]
    fn empty_output_is_allowed() {
        let s = sari(&t("a b"), &[], &t("a c")).unwrap();
        assert_eq!(s.keep_f1, 0.25 * (0.0 + 1.0 + 1.0 + 1.0));
        assert!(sari::<&str>(&[], &t("a"), &t("a")).is_err());
    }

    #[test]
    fn mask_prf_conventions() {
        let g = vec![vec![0, 1, 1, 0]];
        assert_eq!(
            mask_prf(&g, &g).unwrap(),
            Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        let none = vec![vec![0, 0, 0, 0]];
        assert_eq!(
            mask_prf(&none, &g).unwrap(),
            Prf {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0
            }
        );
        assert_eq!(mask_prf(&none, &none).unwrap().f1, 1.0);
        assert!(mask_prf(&[vec![0, 1]], &g).is_err());
        let p = mask_prf(&[vec![1, 1, 0, 0]], &g).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
    }
}
