//! Event vocabulary and the labeled two-stream sequence shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds covered by one aggregated step (20 frames at 25 fps).
pub const STEP_SECONDS: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    LeftLane,
    RightLane,
    LeftTurn,
    RightTurn,
    Straight,
}

impl Maneuver {
    pub const ALL: [Maneuver; 5] = [
        Maneuver::LeftLane,
        Maneuver::RightLane,
        Maneuver::LeftTurn,
        Maneuver::RightTurn,
        Maneuver::Straight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Maneuver::LeftLane => "left_lane",
            Maneuver::RightLane => "right_lane",
            Maneuver::LeftTurn => "left_turn",
            Maneuver::RightTurn => "right_turn",
            Maneuver::Straight => "straight",
        }
    }

    pub fn is_turn(self) -> bool {
        matches!(self, Maneuver::LeftTurn | Maneuver::RightTurn)
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, Maneuver::LeftLane | Maneuver::RightLane)
    }

    pub fn is_left(self) -> bool {
        matches!(self, Maneuver::LeftLane | Maneuver::LeftTurn)
    }
}

impl fmt::Display for Maneuver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Maneuver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Maneuver::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown maneuver label {s:?}")))
    }
}

/// Which maneuvers a model predicts over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Lane,
    Turn,
    #[default]
    All,
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lane" => Ok(Setting::Lane),
            "turn" => Ok(Setting::Turn),
            "all" => Ok(Setting::All),
            other => Err(Error::Invalid(format!("unknown setting {other:?}"))),
        }
    }
}

/// Ordered event vocabulary; index `k` is output `k` of a model.
/// Driving straight is always present and always last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Maneuver>", into = "Vec<Maneuver>")]
pub struct EventSet {
    events: Vec<Maneuver>,
}

impl EventSet {
    pub fn new(events: Vec<Maneuver>) -> Result<Self> {
        if events.len() < 2 {
            return Err(Error::Config("an event set needs straight plus at least one maneuver".into()));
        }
        if events.last() != Some(&Maneuver::Straight)
            || events[..events.len() - 1].contains(&Maneuver::Straight)
        {
            return Err(Error::Config("straight must appear exactly once, last".into()));
        }
        let mut sorted = events.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != events.len() {
            return Err(Error::Config("duplicate maneuver in event set".into()));
        }
        Ok(EventSet { events })
    }

    pub fn for_setting(setting: Setting) -> Self {
        use Maneuver::*;
        let events = match setting {
            Setting::All => Maneuver::ALL.to_vec(),
            Setting::Lane => vec![LeftLane, RightLane, Straight],
            Setting::Turn => vec![LeftTurn, RightTurn, Straight],
        };
        EventSet { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[Maneuver] {
        &self.events
    }

    pub fn straight(&self) -> usize {
        self.events.len() - 1
    }

    pub fn index_of(&self, m: Maneuver) -> Option<usize> {
        self.events.iter().position(|e| *e == m)
    }

    pub fn get(&self, k: usize) -> Maneuver {
        self.events[k]
    }

    pub fn contains(&self, m: Maneuver) -> bool {
        self.events.contains(&m)
    }
}

impl TryFrom<Vec<Maneuver>> for EventSet {
    type Error = Error;

    fn try_from(v: Vec<Maneuver>) -> Result<Self> {
        EventSet::new(v)
    }
}

impl From<EventSet> for Vec<Maneuver> {
    fn from(s: EventSet) -> Self {
        s.events
    }
}

/// Paired outside (`xs`) and inside (`zs`) streams with the maneuver that
/// follows the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub id: String,
    pub xs: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
    pub label: Maneuver,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Contiguous sub-sequence `[start, end]` (inclusive) with the same label.
    pub fn slice(&self, start: usize, end: usize, id: String) -> SequenceSample {
        SequenceSample {
            id,
            xs: self.xs[start..=end].to_vec(),
            zs: self.zs[start..=end].to_vec(),
            label: self.label,
            meta: Some(serde_json::json!({ "source": self.id, "start": start, "end": end })),
        }
    }
}

/// Keeps the samples whose label belongs to `events`.
pub fn filter_to(dataset: &[SequenceSample], events: &EventSet) -> Vec<SequenceSample> {
    dataset
        .iter()
        .filter(|s| events.contains(s.label))
        .cloned()
        .collect()
}

/// Shared stream dimensions of a dataset.
pub fn stream_dims(dataset: &[SequenceSample]) -> Result<(usize, usize)> {
    let first = dataset.first().ok_or(Error::Empty("dataset"))?;
    let x = first.xs.first().map(Vec::len).ok_or(Error::Empty("sample steps"))?;
    let z = first.zs.first().map(Vec::len).ok_or(Error::Empty("sample steps"))?;
    for s in dataset {
        if s.xs.len() != s.zs.len() || s.is_empty() {
            return Err(Error::Invalid(format!("sample {}: ragged or empty streams", s.id)));
        }
        if s.xs.iter().any(|v| v.len() != x) || s.zs.iter().any(|v| v.len() != z) {
            return Err(Error::Invalid(format!("sample {}: inconsistent feature dimensions", s.id)));
        }
    }
    Ok((x, z))
}
