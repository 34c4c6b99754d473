use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistinctLevel {
    /// Distinct n-grams over the whole set divided by all n-gram tokens.
    #[default]
    Corpus,
    /// Mean of per-response ratios.
    ResponseMean,
}

/// Lowercases, splits on Unicode whitespace and strips non-alphanumeric
/// characters from both ends of each token. Tokens that are only
/// punctuation disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Diversity of `texts` measured on `n`-grams.
///
/// At corpus level a set with no `n`-grams at all scores 1.0, consistent
/// with the response-mean rule for short texts.
pub fn distinct_n(texts: &[&str], n: usize, level: DistinctLevel) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::InvalidArgument("n must be at least 1".into()));
    }
    if texts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
    match level {
        DistinctLevel::Corpus => {
            let mut distinct: HashSet<&[String]> = HashSet::new();
            let mut total = 0usize;
            for tokens in &tokenized {
                for gram in tokens.windows(n) {
                    distinct.insert(gram);
                    total += 1;
                }
            }
            Ok(if total == 0 { 1.0 } else { distinct.len() as f64 / total as f64 })
        }
        DistinctLevel::ResponseMean => {
            let sum: f64 = tokenized
                .iter()
                .map(|tokens| {
                    if tokens.len() < n {
                        return 1.0;
                    }
                    let grams: HashSet<&[String]> = tokens.windows(n).collect();
                    grams.len() as f64 / (tokens.len() - n + 1) as f64
                })
                .sum();
            Ok(sum / tokenized.len() as f64)
        }
    }
}
