//! Corpus BLEU (4-gram, clipped, brevity penalty, unsmoothed) and word error
//! rate over whitespace tokens.

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_NGRAM: usize = 4;

/// Corpus-level BLEU in [0, 100]: `100 * BP * exp(mean log p_n)` with clipped
/// n-gram counts; returns 0 when any p_n is 0.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::data(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0u64; MAX_NGRAM];
    let mut total = [0u64; MAX_NGRAM];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let hyp_words: Vec<&str> = hyp.split_whitespace().collect();
        let ref_words: Vec<&str> = reference.split_whitespace().collect();
        hyp_len += hyp_words.len() as u64;
        ref_len += ref_words.len() as u64;
        for n in 1..=MAX_NGRAM {
            if hyp_words.len() + 1 <= n {
                continue;
            }
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            if ref_words.len() + 1 > n {
                for gram in ref_words.windows(n) {
                    *ref_counts.entry(gram).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[&str], u64> = HashMap::new();
            for gram in hyp_words.windows(n) {
                *hyp_counts.entry(gram).or_insert(0) += 1;
            }
            for (gram, count) in &hyp_counts {
                total[n - 1] += count;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += (*count).min(clip);
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0f64;
    for n in 0..MAX_NGRAM {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision_sum / MAX_NGRAM as f64).exp())
}

/// Unit-cost Levenshtein distance over word slices.
pub fn edit_distance(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus word error rate as a percentage: total edits over total reference
/// words. The reference corpus must contain at least one word.
pub fn wer(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::data(format!(
            "wer: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut edits = 0u64;
    let mut ref_words_total = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let hyp_words: Vec<&str> = hyp.split_whitespace().collect();
        let ref_words: Vec<&str> = reference.split_whitespace().collect();
        edits += edit_distance(&hyp_words, &ref_words) as u64;
        ref_words_total += ref_words.len() as u64;
    }
    if ref_words_total == 0 {
        return Err(Error::data("wer: reference corpus has no words"));
    }
    Ok(100.0 * edits as f64 / ref_words_total as f64)
}
