//! Corpus BLEU over token-id sequences, and the post-convergence window mean
//! used to summarize evaluation histories.

use std::collections::HashMap;

use crate::diagnostics::EvalReport;
use crate::error::{Error, Result};

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut counts: HashMap<&[u32], u64> = HashMap::new();
    if seq.len() >= n {
        for window in seq.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU in [0, 100]: geometric mean of clipped n-gram precisions
/// (n = 1..max_n) times the brevity penalty. No smoothing: a zero precision
/// at any order zeroes the score.
pub fn corpus_bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Invalid("max_n must be at least 1".into()));
    }

    let mut clipped = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                total[n - 1] += count;
                let allowed = ref_counts.get(gram).copied().unwrap_or(0);
                clipped[n - 1] += count.min(allowed);
            }
        }
    }

    let mut log_precision_sum = 0.0;
    for n in 0..max_n {
        if total[n] == 0 || clipped[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (clipped[n] as f64 / total[n] as f64).ln();
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision_sum / max_n as f64).exp())
}

/// Mean BLEU over a window of consecutive reports centered on the best BLEU
/// (ties resolved to the earliest), clamped to the history's bounds.
pub fn post_convergence_mean(history: &[EvalReport], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::Invalid("window must be at least 1".into()));
    }
    if window > history.len() {
        return Err(Error::Invalid(format!(
            "window of {window} over {} reports",
            history.len()
        )));
    }
    let mut best = 0usize;
    for (i, report) in history.iter().enumerate() {
        if report.bleu > history[best].bleu {
            best = i;
        }
    }
    let start = best
        .saturating_sub((window - 1) / 2)
        .min(history.len() - window);
    let slice = &history[start..start + window];
    Ok(slice.iter().map(|r| r.bleu).sum::<f64>() / window as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reports(bleus: &[f64]) -> Vec<EvalReport> {
        bleus
            .iter()
            .enumerate()
            .map(|(i, &b)| EvalReport {
                step: (i as u64 + 1) * 10,
                token_accuracy: 0.0,
                bleu: b,
            })
            .collect()
    }

    #[test]
    fn perfect_corpus_scores_100() {
        let corpus = vec![vec![2, 3, 4, 5], vec![6, 7], vec![8, 9, 10, 11, 12]];
        let score = corpus_bleu(&corpus, &corpus, 4).unwrap();
        assert_eq!(score, 100.0);
    }

    #[test]
    fn disjoint_unigrams_score_zero() {
        let hyps = vec![vec![2, 3, 4, 5]];
        let refs = vec![vec![6, 7, 8, 9]];
        assert_eq!(corpus_bleu(&hyps, &refs, 4).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_single_pair() {
        // hyp "a b c d" vs ref "a b c e":
        // p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0 -> BLEU(4) = 0
        // BLEU(3) = 100 * (3/4 * 2/3 * 1/2)^(1/3), brevity penalty 1
        let hyps = vec![vec![10u32, 11, 12, 13]];
        let refs = vec![vec![10u32, 11, 12, 14]];
        assert_eq!(corpus_bleu(&hyps, &refs, 4).unwrap(), 0.0);
        let expected = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5).powf(1.0 / 3.0);
        let got = corpus_bleu(&hyps, &refs, 3).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!((got - 62.996052494743664).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_punishes_short_hypotheses() {
        let hyps = vec![vec![2u32, 3]];
        let refs = vec![vec![2u32, 3, 4, 5]];
        // p1 = 1, p2 = 1; bp = exp(1 - 4/2)
        let expected = 100.0 * (1.0f64 - 2.0).exp();
        let got = corpus_bleu(&hyps, &refs, 2).unwrap();
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariant_over_sentence_pairs() {
        let hyps = vec![vec![2u32, 3, 4], vec![5u32, 6, 7, 8], vec![9u32, 10]];
        let refs = vec![vec![2u32, 3, 5], vec![5u32, 6, 7, 7], vec![9u32, 11]];
        let a = corpus_bleu(&hyps, &refs, 2).unwrap();
        let order = [2usize, 0, 1];
        let hyps_p: Vec<_> = order.iter().map(|&i| hyps[i].clone()).collect();
        let refs_p: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
        let b = corpus_bleu(&hyps_p, &refs_p, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn any_mismatch_scores_below_100() {
        let refs = vec![vec![2u32, 3, 4, 5], vec![6u32, 7, 8]];
        let mut hyps = refs.clone();
        hyps[1][2] = 9;
        let score = corpus_bleu(&hyps, &refs, 4).unwrap();
        assert!(score < 100.0);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(corpus_bleu(&[], &[], 4).is_err());
    }

    #[test]
    fn post_convergence_window_centers_on_best() {
        let history = reports(&[10.0, 20.0, 30.0, 20.0, 10.0]);
        let got = post_convergence_mean(&history, 3).unwrap();
        assert!((got - 70.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn post_convergence_degenerate_cases() {
        let history = reports(&[5.0, 5.0, 5.0]);
        assert_eq!(post_convergence_mean(&history, 2).unwrap(), 5.0);

        let history = reports(&[10.0, 40.0, 20.0]);
        assert_eq!(post_convergence_mean(&history, 1).unwrap(), 40.0);

        // best at the edge: window clamps into range
        let history = reports(&[50.0, 10.0, 20.0]);
        let got = post_convergence_mean(&history, 3).unwrap();
        assert!((got - 80.0 / 3.0).abs() < 1e-12);

        assert!(post_convergence_mean(&history, 4).is_err());
    }
}
