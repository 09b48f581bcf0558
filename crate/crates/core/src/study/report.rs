use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    agreement_per_pair, inclusion_filter, mice_impute, rank_summary, AgreementResult, MiceConfig, ParticipantProfile,
    RankSummary, RankingRecord, Result, StudyError,
};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub mice: MiceConfig,
    /// Compute W on the complete records before imputation instead of after.
    pub w_before_imputation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub participants_total: usize,
    pub participants_included: usize,
    pub records_total: usize,
    pub records_included: usize,
    /// `(participant_id, pair_id)` of records without any rank.
    pub dropped_records: Vec<(String, String)>,
    pub imputed_cells: usize,
    pub agreement: Vec<AgreementResult>,
    pub summary: RankSummary,
}

/// Filter, impute, then compute agreement and rank summaries.
pub fn analyze(records: &[RankingRecord], profiles: &[ParticipantProfile], cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    if records.is_empty() {
        return Err(StudyError::Empty);
    }
    let participants = |rs: &[RankingRecord]| rs.iter().map(|r| r.participant_id.clone()).collect::<BTreeSet<_>>().len();
    let included = inclusion_filter(records, profiles);
    if included.is_empty() {
        return Err(StudyError::Empty);
    }
    let imputed = mice_impute(&included, &cfg.mice)?;
    let agreement = if cfg.w_before_imputation { agreement_per_pair(&included) } else { agreement_per_pair(&imputed.records) };
    let summary = rank_summary(&imputed.records, Some(profiles))?;
    Ok(AnalysisReport {
        config: *cfg,
        participants_total: participants(records),
        participants_included: participants(&included),
        records_total: records.len(),
        records_included: included.len(),
        dropped_records: imputed.dropped,
        imputed_cells: imputed.imputed_cells,
        agreement,
        summary,
    })
}

impl AnalysisReport {
    pub fn agreement_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["pair_id", "kendall_w", "raters", "items"]).expect("in-memory write");
        for a in &self.agreement {
            w.write_record([a.pair_id.clone(), format!("{:.6}", a.w), a.m.to_string(), a.n.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Writes `analysis.json`, `agreement.csv`, `method_ranks.csv` and
    /// `divergent_bars.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StudyError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let files = [
            ("analysis.json", serde_json::to_string_pretty(self).expect("serializable") + "\n"),
            ("agreement.csv", self.agreement_csv()),
            ("method_ranks.csv", self.summary.methods_csv()),
            ("divergent_bars.csv", self.summary.divergent_bars_csv(&self.agreement)),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(io(&path))?;
            out.push(path);
        }
        Ok(out)
    }
}
