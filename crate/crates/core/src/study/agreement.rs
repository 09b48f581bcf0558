use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{RankingRecord, Result, StudyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub pair_id: String,
    /// Kendall's coefficient of concordance.
    pub w: f64,
    /// Raters.
    pub m: usize,
    /// Items.
    pub n: usize,
}

/// Kendall's W over `m` rankings of the same `n` items, with the usual
/// correction for tied ranks. Each inner slice is one rater.
pub fn kendalls_w(pair_id: &str, rankings: &[Vec<f64>]) -> Result<AgreementResult> {
    let m = rankings.len();
    if m < 2 {
        return Err(StudyError::TooFewRaters(m));
    }
    let n = rankings[0].len();
    if n < 2 || rankings.iter().any(|r| r.len() != n) {
        return Err(StudyError::BadShape);
    }
    let sums: Vec<f64> = (0..n).map(|i| rankings.iter().map(|r| r[i]).sum()).collect();
    let mean = sums.iter().sum::<f64>() / n as f64;
    let s: f64 = sums.iter().map(|r| (r - mean).powi(2)).sum();
    let ties: f64 = rankings.iter().map(|r| tie_term(r)).sum();
    let (m_f, n_f) = (m as f64, n as f64);
    let denom = m_f * m_f * (n_f.powi(3) - n_f) - m_f * ties;
    if denom <= 0.0 {
        return Err(StudyError::AllTied);
    }
    Ok(AgreementResult { pair_id: pair_id.to_string(), w: (12.0 * s / denom).clamp(0.0, 1.0), m, n })
}

/// Σ (t³ − t) over groups of equal ranks.
fn tie_term(ranks: &[f64]) -> f64 {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for r in ranks {
        *counts.entry(r.to_bits()).or_default() += 1;
    }
    counts.values().map(|&t| (t * t * t - t) as f64).sum()
}

/// W for every pair with at least two complete rankings, in pair order.
/// Incomplete records are ignored; pairs with fewer than two raters are
/// skipped with a warning.
pub fn agreement_per_pair(records: &[RankingRecord]) -> Vec<AgreementResult> {
    let mut by_pair: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_complete()) {
        by_pair
            .entry(&r.pair_id)
            .or_default()
            .push(r.ranks.iter().map(|x| f64::from(x.expect("complete"))).collect());
    }
    by_pair
        .into_iter()
        .filter_map(|(pair, rankings)| match kendalls_w(pair, &rankings) {
            Ok(a) => Some(a),
            Err(e) => {
                log::warn!("pair {pair}: {e}");
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let id = |v: &[f64]| v.to_vec();
        let same = vec![id(&[1., 2., 3., 4., 5., 6., 7.]); 3];
        assert!((kendalls_w("p", &same).unwrap().w - 1.0).abs() < 1e-12);
        let rev = vec![id(&[1., 2., 3.]), id(&[3., 2., 1.])];
        assert_eq!(kendalls_w("p", &rev).unwrap().w, 0.0);
        let part = vec![id(&[1., 2., 3.]), id(&[1., 3., 2.])];
        assert!((kendalls_w("p", &part).unwrap().w - 0.75).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(kendalls_w("p", &[vec![1.0, 2.0]]), Err(StudyError::TooFewRaters(1))));
        assert!(matches!(kendalls_w("p", &[vec![1.0, 2.0], vec![1.0]]), Err(StudyError::BadShape)));
        assert!(matches!(kendalls_w("p", &[vec![1.5, 1.5], vec![1.5, 1.5]]), Err(StudyError::AllTied)));
    }

    #[test]
    fn ties_raise_w() {
        // Two raters, one with a tie: the corrected W exceeds the uncorrected one.
        let r = vec![vec![1.0, 2.5, 2.5], vec![1.0, 2.0, 3.0]];
        let s: f64 = [2.0f64, 4.5, 5.5].iter().map(|x| (x - 4.0).powi(2)).sum();
        let expected = 12.0 * s / (4.0 * 24.0 - 2.0 * 6.0);
        assert!((kendalls_w("p", &r).unwrap().w - expected).abs() < 1e-12);
    }
}
