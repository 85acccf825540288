//! Corpus-level BLEU over token-id sequences.
//!
//! Unigram precision is unsmoothed; 2- to 4-gram precisions use add-one
//! smoothing `(m + 1) / (t + 1)` so short sentences do not zero the score.
//! The brevity penalty is `exp(1 − r/c)` when the hypothesis corpus is
//! shorter than the reference corpus. Scores are scaled by 100. A corpus
//! with no hypothesis tokens at all scores 0; an empty corpus is undefined.

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU of `hyps` against aligned `refs`, in [0, 100].
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "hypothesis and reference corpora differ in size: {} vs {}",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Undefined("BLEU of an empty corpus".into()));
    }

    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);

    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let (m, t) = (matches[n - 1] as f64, totals[n - 1] as f64);
        let p = if n == 1 { m / t } else { (m + 1.0) / (t + 1.0) };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_precision_sum += p.ln();
    }

    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * (log_precision_sum / MAX_ORDER as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_scores_exactly_100() {
        let corpus = vec![vec![4, 5, 6, 7, 8], vec![9, 10, 11]];
        assert_eq!(corpus_bleu(&corpus, &corpus).unwrap(), 100.0);
    }

    #[test]
    fn worked_example_is_reproduced_to_1e9() {
        // hyp = a b c d, ref = a b c d e:
        // p1 = 4/4; p2 = (3+1)/(3+1); p3 = (2+1)/(2+1); p4 = (1+1)/(1+1);
        // BP = exp(1 − 5/4)  =>  BLEU = 100·e^(−1/4).
        let hyp = vec![vec![10, 11, 12, 13]];
        let reference = vec![vec![10, 11, 12, 13, 14]];
        let got = corpus_bleu(&hyp, &reference).unwrap();
        assert!((got - 77.880_078_307_140_49).abs() < 1e-9, "{got}");
    }

    #[test]
    fn disjoint_corpora_score_zero() {
        let hyp = vec![vec![4, 5, 6, 7]];
        let reference = vec![vec![8, 9, 10, 11]];
        assert_eq!(corpus_bleu(&hyp, &reference).unwrap(), 0.0);
    }

    #[test]
    fn empty_hypotheses_score_zero_not_nan() {
        let hyp = vec![vec![], vec![]];
        let reference = vec![vec![4, 5], vec![6]];
        assert_eq!(corpus_bleu(&hyp, &reference).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_is_undefined_and_mismatch_is_a_contract_error() {
        assert!(matches!(
            corpus_bleu(&[], &[]),
            Err(Error::Undefined(_))
        ));
        assert!(matches!(
            corpus_bleu(&[vec![4]], &[vec![4], vec![5]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn long_hypotheses_pay_no_brevity_penalty_but_lose_precision() {
        let reference = vec![vec![4, 5, 6]];
        let exact = corpus_bleu(&[vec![4, 5, 6]], &reference).unwrap();
        let padded = corpus_bleu(&[vec![4, 5, 6, 9, 9, 9]], &reference).unwrap();
        assert!(padded < exact);
        let truncated = corpus_bleu(&[vec![4, 5]], &reference).unwrap();
        assert!(truncated < exact);
    }

    #[test]
    fn corpus_bleu_is_permutation_invariant() {
        let hyps = vec![vec![4, 5, 6], vec![7, 8], vec![9, 10, 11, 12]];
        let refs = vec![vec![4, 5, 7], vec![7, 8, 9], vec![9, 10, 12]];
        let forward = corpus_bleu(&hyps, &refs).unwrap();
        let hyps_rev: Vec<_> = hyps.iter().rev().cloned().collect();
        let refs_rev: Vec<_> = refs.iter().rev().cloned().collect();
        let backward = corpus_bleu(&hyps_rev, &refs_rev).unwrap();
        assert_eq!(forward.to_bits(), backward.to_bits());
    }

    #[test]
    fn replacing_a_hypothesis_with_its_reference_never_hurts() {
        // clipping guarantees per-sentence matches never exceed the
        // reference n-gram total, so each precision is nondecreasing; the
        // brevity penalty is nondecreasing in hypothesis length toward r.
        let hyps = vec![vec![4, 5, 9, 9], vec![7, 8], vec![4, 4, 4, 4, 4]];
        let refs = vec![vec![4, 5, 6], vec![7, 8, 9], vec![4, 10, 4, 11]];
        let base = corpus_bleu(&hyps, &refs).unwrap();
        for i in 0..hyps.len() {
            let mut patched = hyps.clone();
            patched[i] = refs[i].clone();
            let better = corpus_bleu(&patched, &refs).unwrap();
            assert!(better >= base - 1e-12, "sentence {i}: {better} < {base}");
        }
    }
}
