//! Chained-equation imputation of missing rank positions with predictive
//! mean matching, followed by re-ranking within each record.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RankingRecord, Result, StudyError, N_METHODS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiceConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Candidate donors per imputed cell.
    pub donors: usize,
}

impl Default for MiceConfig {
    fn default() -> Self {
        MiceConfig { iterations: 20, seed: 0, donors: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiceOutput {
    /// Complete records in input order, minus the dropped ones.
    pub records: Vec<RankingRecord>,
    /// `(participant_id, pair_id)` of records with no rank at all.
    pub dropped: Vec<(String, String)>,
    /// Cells filled in.
    pub imputed_cells: usize,
}

/// Fills every missing rank. All records are pooled: each method's rank is
/// regressed on the other six by least squares, and a missing cell takes the
/// observed value of a donor drawn from the `donors` observed rows whose
/// predictions are closest. After the last iteration each record's missing
/// slots receive its leftover ranks in the order of their imputed values.
pub fn mice_impute(records: &[RankingRecord], cfg: &MiceConfig) -> Result<MiceOutput> {
    if cfg.iterations == 0 {
        return Err(StudyError::ZeroIterations);
    }
    for r in records {
        r.validate()?;
    }
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for r in records {
        if r.missing() == N_METHODS {
            log::warn!("dropping record of {} for {}: no ranks to impute from", r.participant_id, r.pair_id);
            dropped.push((r.participant_id.clone(), r.pair_id.clone()));
        } else {
            kept.push(r.clone());
        }
    }
    let imputed_cells = kept.iter().map(RankingRecord::missing).sum();
    if imputed_cells == 0 {
        return Ok(MiceOutput { records: kept, dropped, imputed_cells });
    }

    let rows = kept.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let observed: Vec<Vec<usize>> =
        (0..N_METHODS).map(|j| (0..rows).filter(|&i| kept[i].ranks[j].is_some()).collect()).collect();
    let mut x = DMatrix::<f64>::zeros(rows, N_METHODS);
    for (i, r) in kept.iter().enumerate() {
        for j in 0..N_METHODS {
            x[(i, j)] = match r.ranks[j] {
                Some(v) => f64::from(v),
                None => initial_value(&kept, &observed[j], j, i, &mut rng),
            };
        }
    }

    for _ in 0..cfg.iterations {
        for j in 0..N_METHODS {
            if observed[j].len() == rows {
                continue;
            }
            let design = design_matrix(&x, j);
            let pred = match fit(&design, &x, j, &observed[j]) {
                Some(beta) => &design * beta,
                None => continue,
            };
            let donors_by_pred: Vec<(f64, f64)> = observed[j].iter().map(|&i| (pred[i], x[(i, j)])).collect();
            for i in (0..rows).filter(|&i| kept[i].ranks[j].is_none()) {
                x[(i, j)] = pmm_draw(pred[i], &donors_by_pred, cfg.donors.max(1), &mut rng);
            }
        }
    }

    let records = kept
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            let imputed: Vec<f64> = (0..N_METHODS).map(|j| x[(i, j)]).collect();
            rerank(&mut r, &imputed);
            r
        })
        .collect();
    Ok(MiceOutput { records, dropped, imputed_cells })
}

/// A value drawn from the column's observed ranks, or the mean of the
/// record's leftover ranks when nothing in the column is observed.
fn initial_value(records: &[RankingRecord], observed: &[usize], column: usize, row: usize, rng: &mut ChaCha8Rng) -> f64 {
    match observed.choose(rng) {
        Some(&i) => f64::from(records[i].ranks[column].expect("observed")),
        None => {
            let left = leftover(&records[row]);
            left.iter().map(|&v| f64::from(v)).sum::<f64>() / left.len() as f64
        }
    }
}

fn design_matrix(x: &DMatrix<f64>, target: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::from_element(x.nrows(), N_METHODS, 1.0);
    let mut c = 1;
    for j in (0..N_METHODS).filter(|&j| j != target) {
        d.set_column(c, &x.column(j));
        c += 1;
    }
    d
}

/// Least-squares coefficients fitted on the observed rows of column `target`.
fn fit(design: &DMatrix<f64>, x: &DMatrix<f64>, target: usize, rows: &[usize]) -> Option<DVector<f64>> {
    if rows.len() < 2 {
        return None;
    }
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| x[(i, target)]));
    design.select_rows(rows).svd(true, true).solve(&y, 1e-9).ok()
}

fn pmm_draw(target: f64, donors: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut order: Vec<usize> = (0..donors.len()).collect();
    order.sort_by(|&a, &b| (donors[a].0 - target).abs().total_cmp(&(donors[b].0 - target).abs()).then(a.cmp(&b)));
    let pick = order[rng.random_range(0..k.min(order.len()))];
    donors[pick].1
}

fn leftover(r: &RankingRecord) -> Vec<u8> {
    (1..=N_METHODS as u8).filter(|v| !r.ranks.contains(&Some(*v))).collect()
}

/// Missing slots take the record's unused ranks, smallest rank to the
/// smallest imputed value; ties keep method order.
fn rerank(r: &mut RankingRecord, imputed: &[f64]) {
    let left = leftover(r);
    let mut slots: Vec<usize> = (0..N_METHODS).filter(|&j| r.ranks[j].is_none()).collect();
    slots.sort_by(|&a, &b| imputed[a].total_cmp(&imputed[b]).then(a.cmp(&b)));
    for (slot, rank) in slots.into_iter().zip(left) {
        r.ranks[slot] = Some(rank);
    }
}
