use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    distinct_n, two_proportion_z_rates, two_proportion_z_test, welch_t_test, win_rates, CandidateTable, CoherenceScorer, Criterion, DistinctLevel,
    EvalError, RatingRecord, RatingValue, SourceKey,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub alpha: f64,
    pub distinct_level: DistinctLevel,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            distinct_level: DistinctLevel::Corpus,
        }
    }
}

/// Per-source columns. `None` means nothing was rated or scored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub responses: usize,
    pub accuracy: Option<f64>,
    pub accuracy_ratings: usize,
    pub coherence: Option<f64>,
    pub consistency: Option<f64>,
    pub engagingness: Option<f64>,
    pub distinct_3: Option<f64>,
    pub distinct_4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence_model: Option<f64>,
    /// `+`: significantly above ground truth; `*`: above fine-tuned.
    pub marks: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateEntry {
    pub rate: f64,
    pub wins: usize,
    pub total: usize,
    /// Two-proportion test of this rate against an even split.
    pub p_value: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub alpha: f64,
    pub distinct_level: DistinctLevel,
    pub accuracy_aggregation: String,
    pub sources: BTreeMap<SourceKey, SourceMetrics>,
    /// row source → column source → share of preferences won by the row.
    pub win_rates: BTreeMap<SourceKey, BTreeMap<SourceKey, WinRateEntry>>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Default)]
struct Collected {
    scales: BTreeMap<Criterion, Vec<f64>>,
    matches: usize,
    accuracy_n: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Assembles the metric table from candidates, ratings and an optional
/// coherence model. A failing coherence model drops that column with a
/// warning.
pub fn build_report(
    table: &CandidateTable,
    ratings: &[RatingRecord],
    scorer: Option<&dyn CoherenceScorer>,
    options: &ReportOptions,
) -> Result<MetricReport, EvalError> {
    let mut warnings = Vec::new();
    let mut collected: BTreeMap<SourceKey, Collected> = BTreeMap::new();
    for r in ratings {
        let Some(source) = r.rated_source() else { continue };
        let c = collected.entry(source).or_default();
        match r.value {
            RatingValue::Scale(v) => c.scales.entry(r.criterion).or_default().push(f64::from(v)),
            RatingValue::Match(m) => {
                c.accuracy_n += 1;
                c.matches += usize::from(m);
            }
            RatingValue::Choice(_) => {}
        }
    }

    let mut sources = BTreeMap::new();
    for &key in &table.sources {
        let texts = table.texts(key);
        let mut m = SourceMetrics {
            responses: texts.len(),
            ..SourceMetrics::default()
        };
        if !texts.is_empty() {
            m.distinct_3 = Some(distinct_n(&texts, 3, options.distinct_level)?);
            m.distinct_4 = Some(distinct_n(&texts, 4, options.distinct_level)?);
            if let Some(scorer) = scorer {
                match scorer.score(&texts) {
                    Ok(scores) => m.coherence_model = mean(&scores),
                    Err(e) => {
                        tracing::warn!(source = %key, error = %e, "coherence model unavailable; column omitted");
                        warnings.push(format!("coherence model omitted for {key}: {e}"));
                    }
                }
            }
        }
        if let Some(c) = collected.get(&key) {
            m.coherence = c.scales.get(&Criterion::Coherence).and_then(|v| mean(v));
            m.consistency = c.scales.get(&Criterion::Consistency).and_then(|v| mean(v));
            m.engagingness = c.scales.get(&Criterion::Engagingness).and_then(|v| mean(v));
            m.accuracy_ratings = c.accuracy_n;
            m.accuracy = (c.accuracy_n > 0).then(|| c.matches as f64 / c.accuracy_n as f64);
        }
        sources.insert(key, m);
    }

    // Significance marks against the ground-truth and fine-tuned columns.
    let empty = Collected::default();
    for (&key, metrics) in sources.iter_mut() {
        let mine = collected.get(&key).unwrap_or(&empty);
        for (comparator, mark) in [(SourceKey::GroundTruth, "+"), (SourceKey::FineTuned, "*")] {
            if comparator == key || !table.sources.contains(&comparator) {
                continue;
            }
            let theirs = collected.get(&comparator).unwrap_or(&empty);
            let mut tests = Vec::new();
            for criterion in Criterion::SCALES {
                let a = mine.scales.get(&criterion).map(Vec::as_slice).unwrap_or(&[]);
                let b = theirs.scales.get(&criterion).map(Vec::as_slice).unwrap_or(&[]);
                tests.push((criterion.as_str(), welch_t_test(a, b)));
            }
            tests.push((
                Criterion::Accuracy.as_str(),
                two_proportion_z_test(mine.matches, mine.accuracy_n, theirs.matches, theirs.accuracy_n),
            ));
            for (name, test) in tests {
                match test {
                    Ok(t) if t.greater_at(options.alpha) => metrics.marks.entry(name.to_string()).or_default().push_str(mark),
                    Ok(_) | Err(EvalError::InsufficientSamples { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }

    let mut matrix: BTreeMap<SourceKey, BTreeMap<SourceKey, WinRateEntry>> = BTreeMap::new();
    for (a, b, cell) in win_rates(ratings).pairs() {
        if cell.total == 0 {
            continue;
        }
        // An even split observed over the same number of judgements is the
        // comparison point.
        let test = two_proportion_z_rates(cell.rate(), cell.total, 0.5, cell.total).ok();
        matrix.entry(a).or_default().insert(
            b,
            WinRateEntry {
                rate: cell.rate(),
                wins: cell.wins,
                total: cell.total,
                p_value: test.map(|t| t.p_value),
                significant: test.is_some_and(|t| t.greater_at(options.alpha)),
            },
        );
    }

    Ok(MetricReport {
        alpha: options.alpha,
        distinct_level: options.distinct_level,
        accuracy_aggregation: "pooled over all ratings".to_string(),
        sources,
        win_rates: matrix,
        warnings,
    })
}
