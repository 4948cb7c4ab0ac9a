//! ROUGE-1, ROUGE-2 and ROUGE-L scoring of candidate summaries against
//! references, with corpus aggregation and length statistics. Tokenization
//! is the same lowercase whitespace scheme used everywhere else; no
//! stemming or stopword removal.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::vocab::tokenize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when an input was too short to score (empty candidate, or a
    /// reference shorter than the n-gram order); the score is 0.
    pub degenerate: bool,
}

impl RougeScore {
    fn from_counts(overlap: f64, cand_total: f64, ref_total: f64) -> Self {
        if cand_total == 0.0 || ref_total == 0.0 {
            return RougeScore {
                degenerate: true,
                ..RougeScore::default()
            };
        }
        let precision = overlap / cand_total;
        let recall = overlap / ref_total;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
            degenerate: false,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map: HashMap<&[String], usize> = HashMap::new();
    if n == 0 || tokens.len() < n {
        return map;
    }
    for i in 0..=tokens.len() - n {
        *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
    }
    map
}

/// Clipped n-gram overlap (multiset intersection), n in {1, 2}.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Result<RougeScore> {
    if !(1..=2).contains(&n) {
        return Err(Error::Contract(format!("rouge_n supports n in {{1, 2}}, got {n}")));
    }
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refr.values().sum();
    let mut overlap = 0usize;
    for (gram, &c) in &cand {
        if let Some(&r) = refr.get(gram) {
            overlap += c.min(r);
        }
    }
    Ok(RougeScore::from_counts(
        overlap as f64,
        cand_total as f64,
        ref_total as f64,
    ))
}

/// Longest common subsequence length, two-row dynamic program.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let m = b.len();
    let mut prev = vec![0usize; m + 1];
    let mut curr = vec![0usize; m + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// Sentence-level ROUGE-L over the whole summary: LCS precision against the
/// candidate length, recall against the reference length, F1 harmonic mean.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> RougeScore {
    let l = lcs_len(candidate, reference) as f64;
    RougeScore::from_counts(l, candidate.len() as f64, reference.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

pub fn score_pair(candidate: &str, reference: &str) -> Result<RougeTriple> {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    Ok(RougeTriple {
        rouge1: rouge_n(&cand, &refr, 1)?,
        rouge2: rouge_n(&cand, &refr, 2)?,
        rouge_l: rouge_l(&cand, &refr),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRouge {
    pub index: usize,
    pub scores: RougeTriple,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
}

/// Per-sample scores plus arithmetic means and summary-length statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RougeReport {
    pub samples: Vec<SampleRouge>,
    pub mean: RougeTriple,
    pub mean_candidate_tokens: f64,
    pub mean_reference_tokens: f64,
}

pub fn evaluate_pairs(pairs: &[(String, String)]) -> Result<RougeReport> {
    let mut samples = Vec::with_capacity(pairs.len());
    let mut sums = [[0.0f64; 3]; 3];
    let mut cand_len_sum = 0usize;
    let mut ref_len_sum = 0usize;
    for (i, (cand, refr)) in pairs.iter().enumerate() {
        let scores = score_pair(cand, refr)?;
        let cand_tokens = tokenize(cand).len();
        let ref_tokens = tokenize(refr).len();
        cand_len_sum += cand_tokens;
        ref_len_sum += ref_tokens;
        for (row, s) in [scores.rouge1, scores.rouge2, scores.rouge_l]
            .iter()
            .enumerate()
        {
            sums[row][0] += s.precision;
            sums[row][1] += s.recall;
            sums[row][2] += s.f1;
        }
        samples.push(SampleRouge {
            index: i,
            scores,
            candidate_tokens: cand_tokens,
            reference_tokens: ref_tokens,
        });
    }
    let n = pairs.len().max(1) as f64;
    let mean_of = |row: [f64; 3]| RougeScore {
        precision: row[0] / n,
        recall: row[1] / n,
        f1: row[2] / n,
        degenerate: false,
    };
    Ok(RougeReport {
        samples,
        mean: RougeTriple {
            rouge1: mean_of(sums[0]),
            rouge2: mean_of(sums[1]),
            rouge_l: mean_of(sums[2]),
        },
        mean_candidate_tokens: cand_len_sum as f64 / n,
        mean_reference_tokens: ref_len_sum as f64 / n,
    })
}

/// Score two line-aligned files, one summary per line.
pub fn evaluate_corpus(hyp_path: impl AsRef<Path>, ref_path: impl AsRef<Path>) -> Result<RougeReport> {
    let hyp_path = hyp_path.as_ref();
    let ref_path = ref_path.as_ref();
    let hyp = fs::read_to_string(hyp_path).map_err(|e| Error::io(hyp_path, e))?;
    let refr = fs::read_to_string(ref_path).map_err(|e| Error::io(ref_path, e))?;
    let hyp_lines: Vec<&str> = hyp.lines().collect();
    let ref_lines: Vec<&str> = refr.lines().collect();
    if hyp_lines.len() != ref_lines.len() {
        return Err(Error::format(
            hyp_path,
            format!(
                "line count mismatch: {} hypotheses vs {} references",
                hyp_lines.len(),
                ref_lines.len()
            ),
        ));
    }
    let pairs: Vec<(String, String)> = hyp_lines
        .iter()
        .zip(&ref_lines)
        .map(|(h, r)| (h.to_string(), r.to_string()))
        .collect();
    evaluate_pairs(&pairs)
}
