use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AgreementResult, Expertise, ParticipantProfile, RankingRecord, Result, StudyError, N_METHODS};
use crate::saliency::MethodId;

/// Rank distribution of one method over a set of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRanks {
    pub method: MethodId,
    pub n: usize,
    pub mean_rank: f64,
    /// `histogram[k]` counts rank `k + 1`.
    pub histogram: [usize; N_METHODS],
}

impl MethodRanks {
    fn share(&self, k: usize) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.histogram[k] as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    /// All records, in method order.
    pub overall: Vec<MethodRanks>,
    pub per_pair: BTreeMap<String, Vec<MethodRanks>>,
    /// Only strata with at least one record; empty without profiles.
    pub by_expertise: BTreeMap<Expertise, Vec<MethodRanks>>,
}

fn summarize<'a>(records: impl Iterator<Item = &'a RankingRecord> + Clone) -> Vec<MethodRanks> {
    MethodId::ALL
        .iter()
        .map(|&method| {
            let mut histogram = [0usize; N_METHODS];
            let mut sum = 0u64;
            let mut n = 0;
            for r in records.clone() {
                let rank = r.rank(method).expect("complete record");
                histogram[rank as usize - 1] += 1;
                sum += u64::from(rank);
                n += 1;
            }
            let mean_rank = if n == 0 { 0.0 } else { sum as f64 / n as f64 };
            MethodRanks { method, n, mean_rank, histogram }
        })
        .collect()
}

/// Mean rank and rank histogram per method, overall, per pair and, when
/// profiles are given, per expertise level. Records must be complete.
pub fn rank_summary(records: &[RankingRecord], profiles: Option<&[ParticipantProfile]>) -> Result<RankSummary> {
    if records.is_empty() {
        return Err(StudyError::Empty);
    }
    for r in records {
        r.validate()?;
        if !r.is_complete() {
            return Err(StudyError::InvalidRecord {
                participant: r.participant_id.clone(),
                pair: r.pair_id.clone(),
                message: "rank summaries need complete rankings; impute first".into(),
            });
        }
    }
    let mut pairs: BTreeMap<&str, Vec<&RankingRecord>> = BTreeMap::new();
    for r in records {
        pairs.entry(&r.pair_id).or_default().push(r);
    }
    let per_pair = pairs.into_iter().map(|(p, rs)| (p.to_string(), summarize(rs.into_iter()))).collect();
    let mut by_expertise = BTreeMap::new();
    if let Some(profiles) = profiles {
        let level: BTreeMap<&str, Expertise> = profiles.iter().map(|p| (p.participant_id.as_str(), p.expertise)).collect();
        for e in Expertise::ALL {
            let stratum = records.iter().filter(|r| level.get(r.participant_id.as_str()) == Some(&e));
            if stratum.clone().next().is_some() {
                by_expertise.insert(e, summarize(stratum));
            }
        }
    }
    Ok(RankSummary { overall: summarize(records.iter()), per_pair, by_expertise })
}

fn to_csv(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn rank_cells(m: &MethodRanks) -> Vec<String> {
    let mut v = vec![m.method.to_string(), m.n.to_string(), format!("{:.4}", m.mean_rank)];
    v.extend(m.histogram.iter().map(usize::to_string));
    v
}

const RANK_COLUMNS: [&str; N_METHODS] = ["rank_1", "rank_2", "rank_3", "rank_4", "rank_5", "rank_6", "rank_7"];

impl RankSummary {
    /// Per stratum (`all` plus expertise levels) and method: n, mean rank, histogram.
    pub fn methods_csv(&self) -> String {
        let mut rows = Vec::new();
        let strata = std::iter::once(("all".to_string(), &self.overall))
            .chain(self.by_expertise.iter().map(|(e, v)| (e.to_string(), v)));
        for (name, ms) in strata {
            for m in ms {
                let mut row = vec![name.clone()];
                row.extend(rank_cells(m));
                rows.push(row);
            }
        }
        let mut header = vec!["stratum", "method", "n", "mean_rank"];
        header.extend(RANK_COLUMNS);
        to_csv(&header, rows)
    }

    /// Divergent stacked-bar table: per pair and method, the share of each
    /// rank and the left edge of the bar when rank 4 straddles zero and
    /// better ranks extend to the right.
    pub fn divergent_bars_csv(&self, agreement: &[AgreementResult]) -> String {
        let w: BTreeMap<&str, f64> = agreement.iter().map(|a| (a.pair_id.as_str(), a.w)).collect();
        let mut rows = Vec::new();
        for (pair, ms) in &self.per_pair {
            for m in ms {
                let mut row = vec![
                    pair.clone(),
                    w.get(pair.as_str()).map_or(String::new(), |w| format!("{w:.4}")),
                    m.method.to_string(),
                    m.n.to_string(),
                    format!("{:.4}", m.mean_rank),
                ];
                row.extend((0..N_METHODS).map(|k| format!("{:.4}", m.share(k))));
                let left = -(m.share(3) / 2.0 + (4..N_METHODS).map(|k| m.share(k)).sum::<f64>());
                row.push(format!("{left:.4}"));
                rows.push(row);
            }
        }
        let mut header = vec!["pair_id", "kendall_w", "method", "n", "mean_rank"];
        header.extend(["share_1", "share_2", "share_3", "share_4", "share_5", "share_6", "share_7", "bar_left"]);
        to_csv(&header, rows)
    }
}
