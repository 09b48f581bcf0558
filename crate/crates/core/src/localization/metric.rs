use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{binarize, iou, largest_component_bbox, size_bucket, BoundingBox, LocalizationError, Result, SizeBucket, SizeCutoffs};
use crate::dataset::DatasetIndex;
use crate::saliency::MethodId;

/// How an image-class pair with several boxes is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GtMatching {
    /// One instance per image-class pair; hit if the predicted box reaches δ
    /// against any of the pair's boxes.
    #[default]
    AnyBox,
    /// One instance per ground-truth box.
    SingleBox,
}

/// What to do when a positive instance has no map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingMaps {
    #[default]
    Error,
    /// Count the instance as a miss.
    Miss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau_grid: Vec<f64>,
    pub delta_set: Vec<f64>,
    pub gt_matching: GtMatching,
    pub size_cutoffs: SizeCutoffs,
    pub missing_maps: MissingMaps,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau_grid: Self::default_tau_grid(),
            delta_set: vec![0.30, 0.50],
            gt_matching: GtMatching::AnyBox,
            size_cutoffs: SizeCutoffs::default(),
            missing_maps: MissingMaps::Error,
        }
    }
}

impl EvalConfig {
    /// 0.20, 0.21, ..., 0.90.
    pub fn default_tau_grid() -> Vec<f64> {
        (20..=90).map(|i| i as f64 / 100.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LocalizationError::InvalidConfig(m));
        if self.tau_grid.is_empty() {
            return bad("tau_grid is empty".into());
        }
        if self.tau_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tau_grid must be strictly increasing".into());
        }
        if self.tau_grid.iter().any(|t| !(0.2..=0.9).contains(t)) {
            return bad("tau_grid values must lie within [0.2, 0.9]".into());
        }
        if self.delta_set.is_empty() || self.delta_set.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return bad("delta_set values must lie within (0, 1]".into());
        }
        let c = self.size_cutoffs;
        if !(c.small > 0.0 && c.small < c.medium && c.medium < 1.0) {
            return bad(format!("size cutoffs must satisfy 0 < small < medium < 1, got {} and {}", c.small, c.medium));
        }
        Ok(())
    }
}

/// One scored unit of the metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub image_id: String,
    pub class_label: String,
    pub width: u32,
    pub height: u32,
    pub gts: Vec<BoundingBox>,
    pub size_bucket: SizeBucket,
}

impl Instance {
    pub fn key(&self) -> (String, String) {
        (self.image_id.clone(), self.class_label.clone())
    }
}

/// Positive instances of a dataset. Under any-box matching an instance's size
/// bucket is that of its largest box.
pub fn build_instances(index: &DatasetIndex, cfg: &EvalConfig) -> Vec<Instance> {
    let mut out = Vec::new();
    for ((image_id, class), boxes) in index.pairs() {
        let img = index.image(&image_id).expect("index invariant: boxes reference known images");
        let bucket = |b: &BoundingBox| size_bucket(b, img.width, img.height, &cfg.size_cutoffs);
        let make = |gts: Vec<BoundingBox>, size_bucket| Instance {
            image_id: image_id.to_string(),
            class_label: class.to_string(),
            width: img.width,
            height: img.height,
            gts,
            size_bucket,
        };
        match cfg.gt_matching {
            GtMatching::AnyBox => {
                let largest = boxes.iter().max_by_key(|b| b.area()).expect("pairs are non-empty");
                out.push(make(boxes.clone(), bucket(largest)));
            }
            GtMatching::SingleBox => out.extend(boxes.iter().map(|b| make(vec![*b], bucket(b)))),
        }
    }
    out
}

/// Best IoU of a prediction against a set of boxes; 0 without a prediction.
pub fn best_iou(pred: Option<&BoundingBox>, gts: &[BoundingBox]) -> f64 {
    pred.map_or(0.0, |p| gts.iter().map(|g| iou(p, g)).fold(0.0, f64::max))
}

pub type Predictions = HashMap<(String, String), Option<BoundingBox>>;

/// Fraction of instances whose prediction reaches IoU ≥ δ. A missing or
/// empty prediction is a miss.
pub fn box_acc(preds: &Predictions, instances: &[Instance], delta: f64) -> Result<f64> {
    if instances.is_empty() {
        return Err(LocalizationError::NoInstances);
    }
    let hits = instances
        .iter()
        .filter(|inst| best_iou(preds.get(&inst.key()).and_then(Option::as_ref), &inst.gts) >= delta)
        .count();
    Ok(hits as f64 / instances.len() as f64)
}

/// Maximum over a `(τ, accuracy)` curve; ties go to the smallest τ.
pub fn best_tau(curve: &[(f64, f64)]) -> Option<(f64, f64)> {
    curve.iter().fold(None, |best: Option<(f64, f64)>, &(tau, acc)| match best {
        Some((_, b)) if acc <= b => best,
        _ => Some((tau, acc)),
    })
    .map(|(tau, acc)| (acc, tau))
}

/// `(best accuracy, argmax τ)` over predictions computed at each τ.
pub fn sweep_tau(preds_by_tau: &[(f64, Predictions)], instances: &[Instance], delta: f64) -> Result<(f64, f64)> {
    let curve = preds_by_tau
        .iter()
        .map(|(tau, preds)| Ok((*tau, box_acc(preds, instances, delta)?)))
        .collect::<Result<Vec<_>>>()?;
    best_tau(&curve).ok_or_else(|| LocalizationError::InvalidConfig("tau_grid is empty".into()))
}

/// Source of saliency maps for evaluation.
pub trait MapProvider: Sync {
    /// The map of one method for one image-class pair, if present.
    fn load(&self, method: MethodId, image_id: &str, class: &str) -> std::result::Result<Option<Array2<f64>>, String>;
}

impl MapProvider for HashMap<(MethodId, String, String), Array2<f64>> {
    fn load(&self, method: MethodId, image_id: &str, class: &str) -> std::result::Result<Option<Array2<f64>>, String> {
        Ok(self.get(&(method, image_id.to_string(), class.to_string())).cloned())
    }
}

/// Hit and instance counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub hits: usize,
    pub n: usize,
}

impl Tally {
    /// `None` for an empty cell.
    pub fn accuracy(&self) -> Option<f64> {
        (self.n > 0).then(|| self.hits as f64 / self.n as f64)
    }
}

/// Counts at one τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    pub overall: Tally,
    pub by_size: [Tally; 3],
    pub by_class: BTreeMap<String, Tally>,
}

/// One `(method, δ)` row. Per-size and per-class figures are taken at the
/// τ that maximizes overall accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: MethodId,
    pub delta: f64,
    pub argmax_tau: f64,
    pub curve: Vec<TauPoint>,
}

impl ReportRow {
    fn at_best(&self) -> &TauPoint {
        self.curve.iter().find(|p| p.tau == self.argmax_tau).expect("argmax is a grid point")
    }

    pub fn n(&self) -> usize {
        self.at_best().overall.n
    }

    pub fn box_acc(&self) -> f64 {
        self.at_best().overall.accuracy().unwrap_or(0.0)
    }

    pub fn size_tally(&self, bucket: SizeBucket) -> Tally {
        self.at_best().by_size[bucket.index()]
    }

    pub fn size_acc(&self, bucket: SizeBucket) -> Option<f64> {
        self.size_tally(bucket).accuracy()
    }

    pub fn class_tallies(&self) -> &BTreeMap<String, Tally> {
        &self.at_best().by_class
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// Ordered by method, then δ in configured order.
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, method: MethodId, delta: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.delta == delta)
    }
}

/// Best IoU per τ for every instance of one method.
fn instance_ious(
    instances: &[Instance],
    method: MethodId,
    maps: &dyn MapProvider,
    cfg: &EvalConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        groups.entry((&inst.image_id, &inst.class_label)).or_default().push(i);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let per_group: Vec<std::result::Result<Vec<(usize, Vec<f64>)>, LocalizationError>> = groups
        .par_iter()
        .map(|((image_id, class), members)| {
            let first = &instances[members[0]];
            let map = maps.load(method, image_id, class).map_err(LocalizationError::MapLoad)?;
            let Some(map) = map else {
                return match cfg.missing_maps {
                    MissingMaps::Error => Err(LocalizationError::MissingMaps(vec![format!("{method}:{image_id}:{class}")])),
                    MissingMaps::Miss => Ok(members.iter().map(|&i| (i, vec![0.0; cfg.tau_grid.len()])).collect()),
                };
            };
            if map.dim() != (first.height as usize, first.width as usize) {
                return Err(LocalizationError::MapShape {
                    key: format!("{method}:{image_id}:{class}"),
                    expected: (first.height as usize, first.width as usize),
                    actual: map.dim(),
                });
            }
            let boxes: Vec<Option<BoundingBox>> =
                cfg.tau_grid.iter().map(|&tau| largest_component_bbox(&binarize(&map, tau))).collect();
            Ok(members
                .iter()
                .map(|&i| (i, boxes.iter().map(|b| best_iou(b.as_ref(), &instances[i].gts)).collect()))
                .collect())
        })
        .collect();
    let mut out = vec![Vec::new(); instances.len()];
    let mut missing = Vec::new();
    for r in per_group {
        match r {
            Ok(v) => v.into_iter().for_each(|(i, ious)| out[i] = ious),
            Err(LocalizationError::MissingMaps(m)) => missing.extend(m),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(LocalizationError::MissingMaps(missing));
    }
    Ok(out)
}

/// BoxAcc for every method and δ over the given instances.
pub fn evaluate(instances: &[Instance], methods: &[MethodId], maps: &dyn MapProvider, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(LocalizationError::NoInstances);
    }
    let mut rows = Vec::new();
    for &method in methods {
        let ious = instance_ious(instances, method, maps, cfg)?;
        for &delta in &cfg.delta_set {
            let curve: Vec<TauPoint> = cfg
                .tau_grid
                .iter()
                .enumerate()
                .map(|(t, &tau)| {
                    let mut p = TauPoint { tau, overall: Tally::default(), by_size: [Tally::default(); 3], by_class: BTreeMap::new() };
                    for (inst, iou) in instances.iter().zip(&ious) {
                        let hit = (iou[t] >= delta) as usize;
                        for tally in [
                            &mut p.overall,
                            &mut p.by_size[inst.size_bucket.index()],
                        ] {
                            tally.hits += hit;
                            tally.n += 1;
                        }
                        let c = p.by_class.entry(inst.class_label.clone()).or_default();
                        c.hits += hit;
                        c.n += 1;
                    }
                    p
                })
                .collect();
            let mut argmax = 0;
            for (t, p) in curve.iter().enumerate() {
                if p.overall.hits > curve[argmax].overall.hits {
                    argmax = t;
                }
            }
            rows.push(ReportRow { method, delta, argmax_tau: cfg.tau_grid[argmax], curve });
        }
    }
    Ok(EvalReport { config: cfg.clone(), rows })
}
