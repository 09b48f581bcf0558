//! CSV formats.
//!
//! Rankings: `participant_id,pair_id,method_id,rank`, one row per map; an
//! empty rank or an absent row is a missing rank.
//!
//! Profiles: `participant_id,age_band,gender,education,expertise,completed_tasks`.

use std::collections::HashMap;
use std::path::Path;

use super::{Expertise, ParticipantProfile, RankingRecord, Result, StudyError, N_METHODS, TASKS_PER_PARTICIPANT};
use crate::saliency::MethodId;

const RANKING_HEADER: [&str; 4] = ["participant_id", "pair_id", "method_id", "rank"];
const PROFILE_HEADER: [&str; 6] = ["participant_id", "age_band", "gender", "education", "expertise", "completed_tasks"];

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let found = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(StudyError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(rdr)
}

fn csv_error(path: &Path, e: csv::Error) -> StudyError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => StudyError::Io { path: path.to_path_buf(), source },
        kind => StudyError::Parse { path: path.to_path_buf(), line, message: format!("{kind:?}") },
    }
}

/// Records in order of first appearance.
pub fn read_rankings(path: &Path) -> Result<Vec<RankingRecord>> {
    let mut rdr = reader(path, &RANKING_HEADER)?;
    let mut records: Vec<RankingRecord> = Vec::new();
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| StudyError::Parse { path: path.to_path_buf(), line, message };
        let method: MethodId = row[2].parse().map_err(|e: crate::saliency::SaliencyError| bad(e.to_string()))?;
        let rank = match &row[3] {
            "" => None,
            s => Some(s.parse::<u8>().map_err(|_| bad(format!("rank `{s}` is not an integer")))?),
        };
        let key = (row[0].to_string(), row[1].to_string());
        let k = *slot.entry(key.clone()).or_insert_with(|| {
            records.push(RankingRecord { participant_id: key.0, pair_id: key.1, ranks: [None; N_METHODS] });
            records.len() - 1
        });
        let cell = &mut records[k].ranks[method.index()];
        if cell.is_some() {
            return Err(bad(format!("second rank for {method}")));
        }
        *cell = rank;
        records[k].validate().map_err(|e| bad(e.to_string()))?;
    }
    Ok(records)
}

pub fn write_rankings(path: &Path, records: &[RankingRecord]) -> Result<()> {
    std::fs::write(path, rankings_csv(records)).map_err(|source| StudyError::Io { path: path.to_path_buf(), source })
}

/// The rankings file body: seven rows per record, in record order.
pub fn rankings_csv(records: &[RankingRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RANKING_HEADER).expect("in-memory write");
    for r in records {
        for m in MethodId::ALL {
            let rank = r.rank(m).map_or(String::new(), |v| v.to_string());
            w.write_record([r.participant_id.as_str(), r.pair_id.as_str(), m.as_str(), rank.as_str()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn read_profiles(path: &Path) -> Result<Vec<ParticipantProfile>> {
    let mut rdr = reader(path, &PROFILE_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| StudyError::Parse { path: path.to_path_buf(), line, message };
        let expertise: Expertise = row[4].parse().map_err(bad)?;
        let completed_tasks: u8 = row[5]
            .parse()
            .ok()
            .filter(|&n| n <= TASKS_PER_PARTICIPANT)
            .ok_or_else(|| bad(format!("completed_tasks `{}` not in 0..={TASKS_PER_PARTICIPANT}", &row[5])))?;
        out.push(ParticipantProfile {
            participant_id: row[0].to_string(),
            age_band: row[1].to_string(),
            gender: row[2].to_string(),
            education: row[3].to_string(),
            expertise,
            completed_tasks,
        });
    }
    Ok(out)
}

pub fn write_profiles(path: &Path, profiles: &[ParticipantProfile]) -> Result<()> {
    std::fs::write(path, profiles_csv(profiles)).map_err(|source| StudyError::Io { path: path.to_path_buf(), source })
}

pub fn profiles_csv(profiles: &[ParticipantProfile]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PROFILE_HEADER).expect("in-memory write");
    for p in profiles {
        let done = p.completed_tasks.to_string();
        w.write_record([
            p.participant_id.as_str(),
            p.age_band.as_str(),
            p.gender.as_str(),
            p.education.as_str(),
            p.expertise.as_str(),
            done.as_str(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
