//! SQLite persistence. Rows are only ever inserted; the protocol cursor is
//! derived from what exists.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use iconoloc::study::{Expertise, ParticipantProfile, RankingRecord};
use iconoloc::MethodId;
use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{MaskError, RleMask};
use crate::session::{Cursor, Randomization, Step};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database: {0}")]
    Db(#[from] rusqlite::Error),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown pair {0}")]
    UnknownPair(String),
    #[error("consent is required")]
    NoConsent,
    #[error("{0}")]
    OutOfOrder(String),
    #[error("invalid mask: {0}")]
    Mask(#[from] MaskError),
    #[error("invalid ranking: {0}")]
    Ranking(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demographics {
    pub age_band: String,
    pub gender: String,
    pub education: String,
    pub expertise: Expertise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub session_id: String,
    pub seed: u64,
    pub consent: bool,
    pub demographics: Demographics,
    pub randomization: Randomization,
    pub cursor: Cursor,
}

impl Session {
    /// Configured pair index the cursor points at, if any.
    pub fn current_pair(&self) -> Option<usize> {
        (self.cursor.step != Step::Done).then(|| self.randomization.pair_order[self.cursor.position])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoredAnnotation {
    pub session_id: String,
    pub pair_id: String,
    pub mask: RleMask,
    pub submitted_unix: u64,
}

pub struct Store {
    conn: Connection,
    /// Configured pair ids, in configuration order.
    pairs: Vec<String>,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS sessions (
    ordinal INTEGER PRIMARY KEY AUTOINCREMENT,
    session_id TEXT NOT NULL UNIQUE,
    seed INTEGER NOT NULL,
    consent INTEGER NOT NULL,
    age_band TEXT NOT NULL,
    gender TEXT NOT NULL,
    education TEXT NOT NULL,
    expertise TEXT NOT NULL,
    created_unix INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS annotations (
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    pair_id TEXT NOT NULL,
    width INTEGER NOT NULL,
    height INTEGER NOT NULL,
    counts TEXT NOT NULL,
    submitted_unix INTEGER NOT NULL,
    PRIMARY KEY (session_id, pair_id)
);
CREATE TABLE IF NOT EXISTS ranking_steps (
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    pair_id TEXT NOT NULL,
    submitted_unix INTEGER NOT NULL,
    PRIMARY KEY (session_id, pair_id)
);
CREATE TABLE IF NOT EXISTS ranks (
    session_id TEXT NOT NULL,
    pair_id TEXT NOT NULL,
    method_id TEXT NOT NULL,
    rank INTEGER NOT NULL,
    PRIMARY KEY (session_id, pair_id, method_id)
);
";

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Store {
    pub fn open(path: &Path, pairs: Vec<String>) -> Result<Self> {
        Self::init(Connection::open(path)?, pairs)
    }

    pub fn in_memory(pairs: Vec<String>) -> Result<Self> {
        Self::init(Connection::open_in_memory()?, pairs)
    }

    fn init(conn: Connection, pairs: Vec<String>) -> Result<Self> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn, pairs })
    }

    pub fn pairs(&self) -> &[String] {
        &self.pairs
    }

    fn pair_index(&self, pair_id: &str) -> Result<usize> {
        self.pairs.iter().position(|p| p == pair_id).ok_or_else(|| StoreError::UnknownPair(pair_id.to_string()))
    }

    pub fn create_session(&mut self, consent: bool, demographics: Demographics) -> Result<Session> {
        if !consent {
            return Err(StoreError::NoConsent);
        }
        let seed: u64 = rand::random();
        let session_id = hex::encode(rand::random::<[u8; 16]>());
        self.conn.execute(
            "INSERT INTO sessions (session_id, seed, consent, age_band, gender, education, expertise, created_unix)
             VALUES (?1, ?2, 1, ?3, ?4, ?5, ?6, ?7)",
            params![
                session_id,
                seed as i64,
                demographics.age_band,
                demographics.gender,
                demographics.education,
                demographics.expertise.as_str(),
                now() as i64
            ],
        )?;
        self.session(&session_id)
    }

    pub fn session(&self, session_id: &str) -> Result<Session> {
        session_in(&self.conn, session_id, self.pairs.len())
    }

    pub fn submit_annotation(&mut self, session_id: &str, pair_id: &str, mask: &RleMask, dims: (u32, u32)) -> Result<()> {
        let pair = self.pair_index(pair_id)?;
        let n = self.pairs.len();
        let tx = self.conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let s = session_in(&tx, session_id, n)?;
        expect_step(&s, pair, Step::Annotate, pair_id)?;
        let canonical = mask.validate(dims.0, dims.1)?.encode();
        tx.execute(
            "INSERT INTO annotations (session_id, pair_id, width, height, counts, submitted_unix) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                session_id,
                pair_id,
                canonical.width,
                canonical.height,
                serde_json::to_string(&canonical.counts).expect("serializable"),
                now() as i64
            ],
        )?;
        tx.commit()?;
        Ok(())
    }

    /// `ranks` maps methods to distinct positions in 1..=7; methods left out
    /// are missing ranks.
    pub fn submit_ranking(&mut self, session_id: &str, pair_id: &str, ranks: &BTreeMap<MethodId, u8>) -> Result<()> {
        let pair = self.pair_index(pair_id)?;
        let mut seen = [false; 8];
        for (m, &r) in ranks {
            if !(1..=7).contains(&r) {
                return Err(StoreError::Ranking(format!("rank {r} for {m} outside 1..=7")));
            }
            if std::mem::replace(&mut seen[r as usize], true) {
                return Err(StoreError::Ranking(format!("rank {r} given twice")));
            }
        }
        let n = self.pairs.len();
        let tx = self.conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let s = session_in(&tx, session_id, n)?;
        expect_step(&s, pair, Step::Rank, pair_id)?;
        tx.execute(
            "INSERT INTO ranking_steps (session_id, pair_id, submitted_unix) VALUES (?1, ?2, ?3)",
            params![session_id, pair_id, now() as i64],
        )?;
        for (m, r) in ranks {
            tx.execute(
                "INSERT INTO ranks (session_id, pair_id, method_id, rank) VALUES (?1, ?2, ?3, ?4)",
                params![session_id, pair_id, m.as_str(), r],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    pub fn annotation(&self, session_id: &str, pair_id: &str) -> Result<Option<StoredAnnotation>> {
        self.pair_index(pair_id)?;
        session_in(&self.conn, session_id, self.pairs.len())?;
        Ok(self
            .conn
            .query_row(
                "SELECT width, height, counts, submitted_unix FROM annotations WHERE session_id = ?1 AND pair_id = ?2",
                params![session_id, pair_id],
                annotation_row(session_id, pair_id),
            )
            .optional()?)
    }

    /// Session ids in creation order.
    pub fn session_ids(&self) -> Result<Vec<String>> {
        let mut stmt = self.conn.prepare("SELECT session_id FROM sessions ORDER BY ordinal")?;
        let ids = stmt.query_map([], |r| r.get(0))?.collect::<rusqlite::Result<Vec<String>>>()?;
        Ok(ids)
    }

    /// Ranking records per session (creation order) and pair (configuration
    /// order), and one profile per session. The session id is the
    /// participant id.
    pub fn export_records(&self) -> Result<(Vec<RankingRecord>, Vec<ParticipantProfile>)> {
        let mut records = Vec::new();
        let mut profiles = Vec::new();
        for id in self.session_ids()? {
            let s = self.session(&id)?;
            let mut completed = 0u8;
            for pair_id in &self.pairs {
                let submitted: bool = self.conn.query_row(
                    "SELECT EXISTS(SELECT 1 FROM ranking_steps WHERE session_id = ?1 AND pair_id = ?2)",
                    params![id, pair_id],
                    |r| r.get(0),
                )?;
                if !submitted {
                    continue;
                }
                completed += 1;
                let mut ranks = [None; 7];
                let mut stmt = self.conn.prepare_cached("SELECT method_id, rank FROM ranks WHERE session_id = ?1 AND pair_id = ?2")?;
                let rows = stmt.query_map(params![id, pair_id], |r| Ok((r.get::<_, String>(0)?, r.get::<_, u8>(1)?)))?;
                for row in rows {
                    let (m, rank) = row?;
                    let m: MethodId = m.parse().map_err(|_| StoreError::Ranking(format!("stored method `{m}`")))?;
                    ranks[m.index()] = Some(rank);
                }
                records.push(RankingRecord { participant_id: id.clone(), pair_id: pair_id.clone(), ranks });
            }
            profiles.push(ParticipantProfile {
                participant_id: id,
                age_band: s.demographics.age_band,
                gender: s.demographics.gender,
                education: s.demographics.education,
                expertise: s.demographics.expertise,
                completed_tasks: completed,
            });
        }
        Ok((records, profiles))
    }

    /// All annotations, ordered like [`Store::export_records`].
    pub fn export_annotations(&self) -> Result<Vec<StoredAnnotation>> {
        let mut out = Vec::new();
        for id in self.session_ids()? {
            for pair_id in &self.pairs {
                if let Some(a) = self.annotation(&id, pair_id)? {
                    out.push(a);
                }
            }
        }
        Ok(out)
    }
}

fn annotation_row<'a>(session_id: &'a str, pair_id: &'a str) -> impl FnOnce(&rusqlite::Row<'_>) -> rusqlite::Result<StoredAnnotation> + 'a {
    move |r| {
        let counts: String = r.get(2)?;
        Ok(StoredAnnotation {
            session_id: session_id.to_string(),
            pair_id: pair_id.to_string(),
            mask: RleMask {
                width: r.get(0)?,
                height: r.get(1)?,
                counts: serde_json::from_str(&counts)
                    .map_err(|e| rusqlite::Error::FromSqlConversionFailure(2, rusqlite::types::Type::Text, Box::new(e)))?,
            },
            submitted_unix: r.get::<_, i64>(3)? as u64,
        })
    }
}

fn expect_step(s: &Session, pair: usize, step: Step, pair_id: &str) -> Result<()> {
    let Some(current) = s.current_pair() else {
        return Err(StoreError::OutOfOrder("session is complete".into()));
    };
    if current != pair {
        return Err(StoreError::OutOfOrder(format!("pair {pair_id} is not the session's current pair")));
    }
    if s.cursor.step != step {
        let what = match step {
            Step::Annotate => "annotation for this pair was already submitted",
            _ => "the pair must be annotated before it is ranked",
        };
        return Err(StoreError::OutOfOrder(what.into()));
    }
    Ok(())
}

fn session_in(conn: &Connection, session_id: &str, n_pairs: usize) -> Result<Session> {
    let row = conn
        .query_row(
            "SELECT seed, consent, age_band, gender, education, expertise FROM sessions WHERE session_id = ?1",
            params![session_id],
            |r| {
                Ok((
                    r.get::<_, i64>(0)? as u64,
                    r.get::<_, bool>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, String>(4)?,
                    r.get::<_, String>(5)?,
                ))
            },
        )
        .optional()?
        .ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))?;
    let (seed, consent, age_band, gender, education, expertise) = row;
    let count = |table: &str| -> rusqlite::Result<usize> {
        conn.query_row(&format!("SELECT COUNT(*) FROM {table} WHERE session_id = ?1"), params![session_id], |r| {
            r.get::<_, i64>(0)
        })
        .map(|n| n as usize)
    };
    let cursor = Cursor::from_progress(count("ranking_steps")?, count("annotations")?, n_pairs);
    Ok(Session {
        session_id: session_id.to_string(),
        seed,
        consent,
        demographics: Demographics {
            age_band,
            gender,
            education,
            expertise: expertise.parse().map_err(StoreError::Ranking)?,
        },
        randomization: Randomization::from_seed(seed, n_pairs),
        cursor,
    })
}
