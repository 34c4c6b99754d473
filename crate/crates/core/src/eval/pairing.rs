use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CandidateTable, EvalError, SourceKey};
use crate::lexicon::Lexicon;

/// Which canonical member of a pair is shown on the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PresentedOrder {
    #[serde(rename = "ab")]
    AB,
    #[serde(rename = "ba")]
    BA,
}

/// One rating job: two responses to the same instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingJob {
    pub pair_id: String,
    pub instance_id: String,
    /// Canonical order follows the source list given to [`make_pairings`].
    pub source_a: SourceKey,
    pub source_b: SourceKey,
    pub presented_order: PresentedOrder,
}

impl PairingJob {
    pub fn left(&self) -> SourceKey {
        match self.presented_order {
            PresentedOrder::AB => self.source_a,
            PresentedOrder::BA => self.source_b,
        }
    }

    pub fn right(&self) -> SourceKey {
        match self.presented_order {
            PresentedOrder::AB => self.source_b,
            PresentedOrder::BA => self.source_a,
        }
    }
}

/// Every unordered source pair for every instance, with a seeded left/right
/// assignment. With `k` sources each response lands in `k - 1` jobs.
pub fn make_pairings(instance_ids: &[String], sources: &[SourceKey], seed: u64) -> Result<Vec<PairingJob>, EvalError> {
    if sources.len() < 2 {
        return Err(EvalError::InvalidArgument("pairing needs at least two sources".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(instance_ids.len() * sources.len() * (sources.len() - 1) / 2);
    for instance_id in instance_ids {
        for (i, &a) in sources.iter().enumerate() {
            for &b in &sources[i + 1..] {
                let presented_order = if rng.gen_bool(0.5) {
                    PresentedOrder::BA
                } else {
                    PresentedOrder::AB
                };
                jobs.push(PairingJob {
                    pair_id: format!("p{:05}", jobs.len() + 1),
                    instance_id: instance_id.clone(),
                    source_a: a,
                    source_b: b,
                    presented_order,
                });
            }
        }
    }
    Ok(jobs)
}

#[derive(Serialize)]
struct SheetRow<'a> {
    pair_id: &'a str,
    instance_id: &'a str,
    left_source: SourceKey,
    right_source: SourceKey,
    presented_order: PresentedOrder,
    context: String,
    response_left: &'a str,
    response_right: &'a str,
    target_intent_description: String,
}

/// Writes the rater-facing sheet. Sources are included so that ratings
/// can be joined back; hide those columns from raters.
pub fn write_pairing_sheet<W: Write>(
    out: W,
    jobs: &[PairingJob],
    table: &CandidateTable,
    lexicon: &Lexicon,
) -> Result<(), EvalError> {
    let mut writer = csv::Writer::from_writer(out);
    for job in jobs {
        let instance = table
            .instances
            .iter()
            .find(|i| i.id == job.instance_id)
            .ok_or_else(|| EvalError::InvalidArgument(format!("unknown instance {}", job.instance_id)))?;
        let text = |source: SourceKey| {
            table
                .get(&job.instance_id, source)
                .and_then(|c| c.text.as_deref())
                .ok_or_else(|| EvalError::InvalidArgument(format!("no {source} response for {}", job.instance_id)))
        };
        let context = instance
            .history
            .iter()
            .map(|t| format!("{}: {}", t.role(instance.task).display_label(), t.text))
            .collect::<Vec<_>>()
            .join("\n");
        let directive = lexicon.directive_for(instance.gold_intent);
        writer.serialize(SheetRow {
            pair_id: &job.pair_id,
            instance_id: &job.instance_id,
            left_source: job.left(),
            right_source: job.right(),
            presented_order: job.presented_order,
            context,
            response_left: text(job.left())?,
            response_right: text(job.right())?,
            target_intent_description: directive.text.unwrap_or_else(|| instance.gold_intent.name().to_string()),
        })?;
    }
    writer.flush()?;
    Ok(())
}
