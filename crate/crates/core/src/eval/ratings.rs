use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalError, PresentedOrder, SourceKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Accuracy,
    Coherence,
    Consistency,
    Engagingness,
    Preference,
}

impl Criterion {
    pub const SCALES: [Criterion; 3] = [Criterion::Coherence, Criterion::Consistency, Criterion::Engagingness];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Accuracy => "accuracy",
            Criterion::Coherence => "coherence",
            Criterion::Consistency => "consistency",
            Criterion::Engagingness => "engagingness",
            Criterion::Preference => "preference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingValue {
    /// 1 to 5.
    Scale(u8),
    /// Forced choice for the preference criterion.
    Choice(Side),
    /// Whether the response realizes the target intent.
    Match(bool),
}

impl fmt::Display for RatingValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatingValue::Scale(v) => write!(f, "{v}"),
            RatingValue::Choice(Side::Left) => f.write_str("left"),
            RatingValue::Choice(Side::Right) => f.write_str("right"),
            RatingValue::Match(true) => f.write_str("match"),
            RatingValue::Match(false) => f.write_str("no-match"),
        }
    }
}

/// One rater judgement on one pairing job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingRecord {
    pub pair_id: String,
    pub instance_id: String,
    pub left_source: SourceKey,
    pub right_source: SourceKey,
    pub presented_order: PresentedOrder,
    pub criterion: Criterion,
    /// The side a per-response criterion is about; `None` for preference.
    pub target: Option<Side>,
    pub value: RatingValue,
}

impl RatingRecord {
    /// Source the record is about, for per-response criteria.
    pub fn rated_source(&self) -> Option<SourceKey> {
        self.target.map(|side| match side {
            Side::Left => self.left_source,
            Side::Right => self.right_source,
        })
    }

    /// (winner, loser) for preference records.
    pub fn preference(&self) -> Option<(SourceKey, SourceKey)> {
        match self.value {
            RatingValue::Choice(Side::Left) => Some((self.left_source, self.right_source)),
            RatingValue::Choice(Side::Right) => Some((self.right_source, self.left_source)),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RatingRow {
    pair_id: String,
    instance_id: String,
    left_source: String,
    right_source: String,
    presented_order: PresentedOrder,
    criterion: Criterion,
    #[serde(default)]
    target: Option<Side>,
    value: String,
}

fn parse_value(criterion: Criterion, raw: &str) -> Result<RatingValue, String> {
    let raw = raw.trim();
    match criterion {
        Criterion::Preference => match raw {
            "left" => Ok(RatingValue::Choice(Side::Left)),
            "right" => Ok(RatingValue::Choice(Side::Right)),
            _ => Err(format!("preference must be left or right, got {raw:?}")),
        },
        Criterion::Accuracy => match raw {
            "match" => Ok(RatingValue::Match(true)),
            "no-match" => Ok(RatingValue::Match(false)),
            _ => Err(format!("accuracy must be match or no-match, got {raw:?}")),
        },
        _ => match u8::from_str(raw) {
            Ok(v @ 1..=5) => Ok(RatingValue::Scale(v)),
            _ => Err(format!("{} must be an integer from 1 to 5, got {raw:?}", criterion.as_str())),
        },
    }
}

/// Reads a ratings CSV (header row required). Line numbers in errors count
/// the header as line 1.
pub fn read_ratings<R: Read>(input: R) -> Result<Vec<RatingRecord>, EvalError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<RatingRow>().enumerate() {
        let line = i + 2;
        let bad = |message: String| EvalError::InvalidRating { line, message };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let left_source = row.left_source.parse().map_err(|e: EvalError| bad(e.to_string()))?;
        let right_source = row.right_source.parse().map_err(|e: EvalError| bad(e.to_string()))?;
        if left_source == right_source {
            return Err(bad("left and right sources are the same".into()));
        }
        let value = parse_value(row.criterion, &row.value).map_err(bad)?;
        match (row.criterion, row.target) {
            (Criterion::Preference, Some(_)) => return Err(bad("preference records take no target".into())),
            (Criterion::Preference, None) => {}
            (_, None) => return Err(bad(format!("{} records need a target side", row.criterion.as_str()))),
            (_, Some(_)) => {}
        }
        out.push(RatingRecord {
            pair_id: row.pair_id,
            instance_id: row.instance_id,
            left_source,
            right_source,
            presented_order: row.presented_order,
            criterion: row.criterion,
            target: row.target,
            value,
        });
    }
    Ok(out)
}

pub fn write_ratings<W: Write>(out: W, records: &[RatingRecord]) -> Result<(), EvalError> {
    let mut writer = csv::Writer::from_writer(out);
    for r in records {
        writer.serialize(RatingRow {
            pair_id: r.pair_id.clone(),
            instance_id: r.instance_id.clone(),
            left_source: r.left_source.to_string(),
            right_source: r.right_source.to_string(),
            presented_order: r.presented_order,
            criterion: r.criterion,
            target: r.target,
            value: r.value.to_string(),
        })?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WinCell {
    /// Preferences for the row source.
    pub wins: usize,
    /// All preference records comparing the two sources.
    pub total: usize,
}

impl WinCell {
    pub fn rate(&self) -> f64 {
        self.wins as f64 / self.total as f64
    }
}

/// Pairwise preference counts, keyed by (row source, column source).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WinRates {
    cells: BTreeMap<(SourceKey, SourceKey), WinCell>,
}

impl WinRates {
    pub fn cell(&self, a: SourceKey, b: SourceKey) -> Result<WinCell, EvalError> {
        self.cells
            .get(&(a, b))
            .copied()
            .filter(|c| c.total > 0)
            .ok_or(EvalError::NoData { a, b })
    }

    /// Share of A-vs-B preferences that went to A.
    pub fn win_rate(&self, a: SourceKey, b: SourceKey) -> Result<f64, EvalError> {
        self.cell(a, b).map(|c| c.rate())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (SourceKey, SourceKey, WinCell)> + '_ {
        self.cells.iter().map(|(&(a, b), &c)| (a, b, c))
    }
}

/// Counts preference records. Records of other criteria are ignored.
pub fn win_rates(ratings: &[RatingRecord]) -> WinRates {
    let mut cells: BTreeMap<(SourceKey, SourceKey), WinCell> = BTreeMap::new();
    for (winner, loser) in ratings.iter().filter_map(RatingRecord::preference) {
        cells.entry((winner, loser)).or_default().wins += 1;
        cells.entry((winner, loser)).or_default().total += 1;
        cells.entry((loser, winner)).or_default().total += 1;
    }
    WinRates { cells }
}
