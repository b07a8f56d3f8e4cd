//! ROUGE, Fleiss' kappa, majority-vote win rate and the paired permutation test.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::textproc::tokenize;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Self {
        if hyp == 0 || reference == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / hyp as f64;
        let recall = overlap as f64 / reference as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N over token lists, with overlap clipped by reference multiplicity.
pub fn rouge_n_tokens(hyp: &[String], reference: &[String], n: usize) -> RougeScore {
    assert!(n >= 1, "rouge n must be positive");
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h
        .iter()
        .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |m: &HashMap<&[String], usize>| m.values().sum::<usize>();
    RougeScore::from_counts(overlap, total(&h), total(&r))
}

pub fn rouge_n(hypothesis: &str, reference: &str, n: usize) -> RougeScore {
    rouge_n_tokens(&tokenize(hypothesis), &tokenize(reference), n)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(hyp: &[String], reference: &[String]) -> RougeScore {
    RougeScore::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

pub fn rouge_l(hypothesis: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&tokenize(hypothesis), &tokenize(reference))
}

/// Fleiss' kappa over an items × categories count table.
pub fn fleiss_kappa(ratings: &[Vec<usize>]) -> Result<f64> {
    if ratings.is_empty() {
        return Err(Error::EmptyInput("ratings"));
    }
    let raters: usize = ratings[0].iter().sum();
    let categories = ratings[0].len();
    if raters < 2 {
        return Err(Error::InvalidArgument("each item needs at least 2 raters".into()));
    }
    for (i, row) in ratings.iter().enumerate() {
        if row.len() != categories || row.iter().sum::<usize>() != raters {
            return Err(Error::InvalidArgument(format!(
                "item {i} is rated {} times over {} categories; expected {raters} over {categories}",
                row.iter().sum::<usize>(),
                row.len()
            )));
        }
    }
    let items = ratings.len() as f64;
    let n = raters as f64;
    let p_bar = ratings
        .iter()
        .map(|row| {
            let agree: f64 = row.iter().map(|&c| (c * c) as f64).sum::<f64>() - n;
            agree / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..categories)
        .map(|j| {
            let pj = ratings.iter().map(|r| r[j] as f64).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::Numeric(
            "chance agreement is 1; kappa is undefined".into(),
        ));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Two-sided paired permutation test on the mean difference.
///
/// Each resample flips the sign of every per-item difference with
/// probability 1/2. Returns `(1 + #{|mean| >= observed}) / (1 + resamples)`.
pub fn permutation_test(
    scores_a: &[f64],
    scores_b: &[f64],
    resamples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::DimensionMismatch(scores_a.len(), scores_b.len()));
    }
    if scores_a.is_empty() {
        return Err(Error::EmptyInput("permutation test scores"));
    }
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    // Guards against counting float noise as a strictly smaller statistic.
    let tol = 1e-12 * observed.max(1.0);
    let mut hits = 0usize;
    for _ in 0..resamples {
        let s: f64 = diffs
            .iter()
            .map(|d| if rng.gen::<bool>() { *d } else { -*d })
            .sum();
        if (s / n).abs() >= observed - tol {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + resamples) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Vote {
    X,
    Y,
}

/// Fraction of items whose rater majority prefers system X.
pub fn win_rate(judgments: &[Vec<Vote>]) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::EmptyInput("win-rate judgments"));
    }
    let mut wins = 0usize;
    for (i, votes) in judgments.iter().enumerate() {
        if votes.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "item {i} has an even number of raters ({})",
                votes.len()
            )));
        }
        let x = votes.iter().filter(|v| **v == Vote::X).count();
        if 2 * x > votes.len() {
            wins += 1;
        }
    }
    Ok(wins as f64 / judgments.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rouge_examples() {
        let s = rouge_n("a b c", "a b c", 1);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = rouge_n("a b d", "a b c", 1);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_n("a b", "c d", 2).f1, 0.0);
        assert_eq!(rouge_n("a", "a b", 2), RougeScore::default());
    }

    #[test]
    fn rouge_l_examples() {
        let s = rouge_l("a c b d", "a b c d");
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l("", "a b").f1, 0.0);
        let x = rouge_l("a b c d e", "b d f");
        let y = rouge_l("b d f", "a b c d e");
        assert_eq!(x.f1, y.f1);
    }

    #[test]
    fn clipping_by_reference_multiplicity() {
        let s = rouge_n("the the the", "the cat", 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn kappa_perfect_agreement() {
        let k = fleiss_kappa(&[vec![3, 0], vec![0, 3], vec![3, 0]]).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_errors() {
        assert!(fleiss_kappa(&[vec![2, 1], vec![1, 1]]).is_err());
        assert!(fleiss_kappa(&[vec![3, 0], vec![3, 0]]).is_err());
        assert!(fleiss_kappa(&[]).is_err());
    }

    #[test]
    fn permutation_identical_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = [1.0, 2.0, 3.5];
        assert_eq!(permutation_test(&a, &a, 500, &mut rng).unwrap(), 1.0);
        assert!(permutation_test(&a, &a[..2], 10, &mut rng).is_err());
    }

    #[test]
    fn permutation_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let a: Vec<f64> = b.iter().map(|x| x + 10.0).collect();
        let p = permutation_test(&a, &b, 10_000, &mut rng).unwrap();
        assert!(p < 0.01 && p > 0.0, "p = {p}");
    }

    #[test]
    fn win_rate_rules() {
        use Vote::*;
        assert_eq!(win_rate(&[vec![X, X, X], vec![X, X, X]]).unwrap(), 1.0);
        assert_eq!(win_rate(&[vec![X, Y, X], vec![Y, X, X]]).unwrap(), 1.0);
        assert_eq!(win_rate(&[vec![X, Y, Y], vec![Y, X, X]]).unwrap(), 0.5);
        assert!(win_rate(&[vec![X, Y]]).is_err());
    }
}
