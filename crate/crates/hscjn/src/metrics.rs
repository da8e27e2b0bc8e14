//! Automatic evaluation: corpus-level BLEU-1..4 with add-one smoothing
//! of zero-match higher orders, Distinct-1..3 as (ratio, count) over
//! the pooled generated tokens, and word-frequency profiles.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corpus-level BLEU-1..max_n, reported on the 0..100 scale. Clipped
/// n-gram matches and candidate counts aggregate over the whole corpus;
/// the brevity penalty uses total lengths. With `smoothing`, orders >= 2
/// with zero matches get (matches+1)/(total+1).
pub fn bleu_scores(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
    smoothing: bool,
) -> Vec<f64> {
    assert!(!candidates.is_empty(), "bleu: empty corpus");
    assert_eq!(candidates.len(), references.len(), "bleu: candidate/reference count mismatch");
    assert!((1..=4).contains(&max_n), "bleu: max_n must be in 1..=4");

    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &c) in &cand_counts {
                let r = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += c.min(r);
                totals[n - 1] += c;
            }
        }
    }

    if cand_len == 0 {
        return vec![0.0; max_n];
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if smoothing && i > 0 && matches[i] == 0 {
                (matches[i] + 1) as f64 / (totals[i] + 1) as f64
            } else if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();

    (1..=max_n)
        .map(|n| {
            if precisions[..n].contains(&0.0) {
                return 0.0;
            }
            let mean_log: f64 = precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            100.0 * bp * mean_log.exp()
        })
        .collect()
}

/// Mean of per-pair BLEU-1..max_n (the sentence-level alternative).
pub fn sentence_bleu_scores(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
    smoothing: bool,
) -> Vec<f64> {
    assert!(!candidates.is_empty(), "bleu: empty corpus");
    let mut sums = vec![0.0; max_n];
    for (cand, reference) in candidates.iter().zip(references) {
        let scores = bleu_scores(
            std::slice::from_ref(cand),
            std::slice::from_ref(reference),
            max_n,
            smoothing,
        );
        for (s, v) in sums.iter_mut().zip(scores) {
            *s += v;
        }
    }
    sums.into_iter().map(|s| s / candidates.len() as f64).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// (ratio, count) of distinct n-grams pooled over all responses.
/// Responses shorter than n contribute nothing.
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> (f64, u64) {
    assert!((1..=3).contains(&n), "distinct: n must be in 1..=3");
    let mut seen: HashSet<&[String]> = HashSet::new();
    let mut total = 0u64;
    for r in responses {
        if r.len() >= n {
            for w in r.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
    }
    let count = seen.len() as u64;
    let ratio = if total == 0 { 0.0 } else { count as f64 / total as f64 };
    (ratio, count)
}

/// A token with no alphanumeric character counts as punctuation.
pub fn is_punctuation(token: &str) -> bool {
    !token.chars().any(|c| c.is_alphanumeric())
}

/// Top-k tokens by pooled frequency, ties broken lexicographically.
pub fn word_frequency_profile(
    responses: &[Vec<String>],
    k: usize,
    exclude_punct: bool,
) -> Vec<(String, u64)> {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for r in responses {
        for tok in r {
            if exclude_punct && is_punctuation(tok) {
                continue;
            }
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(k);
    ranked.into_iter().map(|(t, c)| (t.to_string(), c)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinctEntry {
    pub n: usize,
    pub ratio: f64,
    pub count: u64,
    /// Table-style rendering, e.g. "0.031/247".
    pub display: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub pairs: usize,
    /// BLEU-1..4 on the 0..100 scale.
    pub bleu: Vec<f64>,
    pub distinct: Vec<DistinctEntry>,
    pub top_words: Vec<(String, u64)>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub sentence_bleu: bool,
    pub smoothing: bool,
    /// Drop `<unk>` tokens from the distinct-n streams so out-of-vocab
    /// output earns no diversity credit.
    pub exclude_unk: bool,
    pub top_k: usize,
    pub label: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            sentence_bleu: false,
            smoothing: true,
            exclude_unk: true,
            top_k: 10,
            label: None,
        }
    }
}

pub fn eval_report(
    outputs: &[Vec<String>],
    references: &[Vec<String>],
    opts: &EvalOptions,
) -> EvalReport {
    assert!(!outputs.is_empty(), "eval: empty corpus");
    assert_eq!(outputs.len(), references.len(), "eval: output/reference count mismatch");
    let bleu = if opts.sentence_bleu {
        sentence_bleu_scores(outputs, references, 4, opts.smoothing)
    } else {
        bleu_scores(outputs, references, 4, opts.smoothing)
    };
    let distinct_stream: Vec<Vec<String>> = if opts.exclude_unk {
        outputs
            .iter()
            .map(|r| r.iter().filter(|t| t.as_str() != crate::corpus::UNK_TOKEN).cloned().collect())
            .collect()
    } else {
        outputs.to_vec()
    };
    let distinct = (1..=3)
        .map(|n| {
            let (ratio, count) = distinct_n(&distinct_stream, n);
            DistinctEntry { n, ratio, count, display: format!("{:.3}/{}", ratio, count) }
        })
        .collect();
    let top_words = word_frequency_profile(outputs, opts.top_k, true);
    EvalReport { model: opts.label.clone(), pairs: outputs.len(), bleu, distinct, top_words }
}

pub fn read_response_file(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect();
    if rows.is_empty() {
        return Err(Error::Eval(format!("{}: no responses", path.display())));
    }
    Ok(rows)
}

pub fn eval_report_files(
    outputs_path: &Path,
    references_path: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let outputs = read_response_file(outputs_path)?;
    let references = read_response_file(references_path)?;
    if outputs.len() != references.len() {
        return Err(Error::Eval(format!(
            "{} has {} lines but {} has {}",
            outputs_path.display(),
            outputs.len(),
            references_path.display(),
            references.len()
        )));
    }
    Ok(eval_report(&outputs, &references, opts))
}
