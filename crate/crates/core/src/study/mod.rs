//! Analysis of the heatmap-ranking study: inclusion filtering, rank
//! imputation, inter-rater agreement and per-method rank summaries.

mod agreement;
mod io;
mod mice;
mod report;
mod summary;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::saliency::MethodId;

pub use agreement::{agreement_per_pair, kendalls_w, AgreementResult};
pub use io::{profiles_csv, rankings_csv, read_profiles, read_rankings, write_profiles, write_rankings};
pub use mice::{mice_impute, MiceConfig, MiceOutput};
pub use report::{analyze, AnalysisConfig, AnalysisReport};
pub use summary::{rank_summary, MethodRanks, RankSummary};

/// Number of methods each participant orders.
pub const N_METHODS: usize = MethodId::ALL.len();
/// Ranking tasks offered to each participant.
pub const TASKS_PER_PARTICIPANT: u8 = 14;
/// Participants with fewer completed tasks are excluded.
pub const MIN_COMPLETED_TASKS: u8 = 4;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("invalid ranking of participant `{participant}` for pair `{pair}`: {message}")]
    InvalidRecord { participant: String, pair: String, message: String },
    #[error("Kendall's W needs at least 2 raters, got {0}")]
    TooFewRaters(usize),
    #[error("Kendall's W needs at least 2 items and equal-length rankings")]
    BadShape,
    #[error("rankings carry no order information (every rater tied all items)")]
    AllTied,
    #[error("no ranking records")]
    Empty,
    #[error("MICE needs at least one iteration")]
    ZeroIterations,
}

pub type Result<T> = std::result::Result<T, StudyError>;

/// One participant's ordering of the seven maps of one image-class pair.
/// `ranks` is indexed like [`MethodId::ALL`]; 1 is best.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub participant_id: String,
    pub pair_id: String,
    pub ranks: [Option<u8>; N_METHODS],
}

impl RankingRecord {
    pub fn rank(&self, method: MethodId) -> Option<u8> {
        self.ranks[method.index()]
    }

    pub fn is_complete(&self) -> bool {
        self.ranks.iter().all(Option::is_some)
    }

    pub fn missing(&self) -> usize {
        self.ranks.iter().filter(|r| r.is_none()).count()
    }

    /// Present ranks are distinct and within 1..=7.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in self.ranks.iter().flatten() {
            let message = if !(1..=N_METHODS as u8).contains(r) {
                format!("rank {r} outside 1..={N_METHODS}")
            } else if !seen.insert(*r) {
                format!("rank {r} given twice")
            } else {
                continue;
            };
            return Err(StudyError::InvalidRecord {
                participant: self.participant_id.clone(),
                pair: self.pair_id.clone(),
                message,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expertise {
    Basic,
    Intermediate,
    /// Advanced or expert.
    Advanced,
}

impl Expertise {
    pub const ALL: [Expertise; 3] = [Expertise::Basic, Expertise::Intermediate, Expertise::Advanced];

    pub fn as_str(self) -> &'static str {
        match self {
            Expertise::Basic => "basic",
            Expertise::Intermediate => "intermediate",
            Expertise::Advanced => "advanced",
        }
    }
}

impl fmt::Display for Expertise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Expertise {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_lowercase().as_str() {
            "basic" => Ok(Expertise::Basic),
            "intermediate" => Ok(Expertise::Intermediate),
            "advanced" | "expert" | "advanced/expert" => Ok(Expertise::Advanced),
            other => Err(format!("unknown expertise level `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub participant_id: String,
    pub age_band: String,
    pub gender: String,
    pub education: String,
    pub expertise: Expertise,
    /// Ranking tasks finished, out of 14.
    pub completed_tasks: u8,
}

/// Keeps the records of participants with at least four completed tasks.
/// The count comes from the profile when there is one, otherwise from the
/// number of distinct pairs the participant ranked.
pub fn inclusion_filter(records: &[RankingRecord], profiles: &[ParticipantProfile]) -> Vec<RankingRecord> {
    let from_profiles: BTreeMap<&str, u8> =
        profiles.iter().map(|p| (p.participant_id.as_str(), p.completed_tasks)).collect();
    let mut from_records: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        from_records.entry(&r.participant_id).or_default().insert(&r.pair_id);
    }
    records
        .iter()
        .filter(|r| {
            let id = r.participant_id.as_str();
            let done = from_profiles.get(id).copied().unwrap_or_else(|| from_records[id].len().min(255) as u8);
            done >= MIN_COMPLETED_TASKS
        })
        .cloned()
        .collect()
}
