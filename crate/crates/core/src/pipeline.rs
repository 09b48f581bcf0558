//! The generate, eval and dataset-stats drivers behind the CLI.
//!
//! Layout under `out_dir`:
//!
//! - `maps/`: one map file and sidecar per (image, class, method), plus
//!   `manifest.json`.
//! - `eval/`: `summary.csv`, `per_class.csv`, `curve.csv`, `table.txt` and
//!   `report.json`.
//! - `dataset/`: `table.txt`, `table.csv`, `classes.csv`, `sizes.csv`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::RgbImage;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, PreparedInput};
use crate::config::{ConfigError, RunConfig, Slot};
use crate::dataset::{self, class_stats, dataset_table, dataset_table_csv, size_distribution, DatasetError, DatasetIndex, ImageRecord};
use crate::localization::{build_instances, evaluate, EvalReport, LocalizationError, MapProvider, SizeBucket, SizeCutoffs, TableOptions};
use crate::saliency::store::{self, map_file_name, MapMeta, StoreError};
use crate::saliency::{generate_all, ImageSource, MethodId, Registry, SaliencyRequest};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("could not start worker pool: {0}")]
    Workers(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| PipelineError::Io { path: parent.to_path_buf(), source })?;
    }
    std::fs::write(path, body).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

pub fn maps_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("maps")
}

pub fn load_dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    Ok(dataset::load(&cfg.dataset.root, cfg.dataset.adapter, cfg.dataset.split.as_deref())?)
}

/// Image-class pairs with at least one box, after the configured subset.
pub fn selected_pairs(cfg: &RunConfig, index: &DatasetIndex) -> Vec<(String, String)> {
    let pairs: Vec<(String, String)> = index.pairs().into_keys().collect();
    cfg.select(&pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub class: String,
    pub method: MethodId,
    pub file: String,
    pub forward_passes: usize,
    pub backward_passes: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub image_id: String,
    pub class: String,
    pub method: MethodId,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub generation_hash: String,
    pub created_unix: u64,
    pub prompt_template: String,
    pub entries: Vec<ManifestEntry>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<Failure>,
    /// Methods that produced no map at all while having work to do.
    pub fully_failed: Vec<MethodId>,
    pub manifest: PathBuf,
}

#[derive(Default)]
struct ImageOutcome {
    entries: Vec<(ManifestEntry, bool)>,
    failures: Vec<Failure>,
}

struct Worker {
    residual: Box<dyn Backbone + Send>,
    transformer: Box<dyn Backbone + Send>,
}

/// Existing map whose sidecar carries `hash`.
fn existing_entry(dir: &Path, image_id: &str, class: &str, method: MethodId, hash: &str) -> Option<ManifestEntry> {
    let file = map_file_name(image_id, class, method);
    let meta = store::read_meta(&dir.join(&file)).ok()?;
    (meta.config_hash == hash && meta.image_id == image_id && meta.class == class && meta.method == method).then(|| {
        ManifestEntry {
            image_id: image_id.to_string(),
            class: class.to_string(),
            method,
            file,
            forward_passes: meta.passes.forward_passes,
            backward_passes: meta.passes.backward_passes,
            degenerate: meta.degenerate,
        }
    })
}

fn load_image(cfg: &RunConfig, record: &ImageRecord) -> std::result::Result<RgbImage, String> {
    let path = cfg.images_dir().join(&record.file);
    let img = image::open(&path).map_err(|e| format!("{}: {e}", path.display()))?.to_rgb8();
    if (img.width(), img.height()) != (record.width, record.height) {
        return Err(format!(
            "{}: decoded size {}x{} differs from annotated {}x{}",
            path.display(),
            img.width(),
            img.height(),
            record.width,
            record.height
        ));
    }
    Ok(img)
}

fn process_image(cfg: &RunConfig, worker: &Worker, record: &ImageRecord, classes: &[String], dir: &Path) -> ImageOutcome {
    let hash = cfg.generation_hash();
    let mut out = ImageOutcome::default();
    let mut todo: Vec<(&String, Vec<MethodId>)> = Vec::new();
    for class in classes {
        let mut missing = Vec::new();
        for &m in &cfg.methods {
            match existing_entry(dir, &record.id, class, m, &hash) {
                Some(e) => out.entries.push((e, false)),
                None => missing.push(m),
            }
        }
        if !missing.is_empty() {
            todo.push((class, missing));
        }
    }
    if todo.is_empty() {
        return out;
    }
    let fail_all = |out: &mut ImageOutcome, error: &str| {
        for (class, methods) in &todo {
            for &method in methods {
                out.failures.push(Failure {
                    image_id: record.id.clone(),
                    class: class.to_string(),
                    method,
                    error: error.to_string(),
                });
            }
        }
    };
    let image = match load_image(cfg, record) {
        Ok(img) => img,
        Err(e) => {
            log::warn!("{e}");
            fail_all(&mut out, &e);
            return out;
        }
    };
    let slots: [(Slot, &dyn Backbone); 2] =
        [(Slot::Residual, worker.residual.as_ref()), (Slot::Transformer, worker.transformer.as_ref())];
    let prepared: Vec<Option<PreparedInput>> = slots
        .iter()
        .map(|&(slot, bb)| {
            let used = todo.iter().any(|(_, ms)| ms.iter().any(|&m| cfg.slot(m) == slot));
            used.then(|| bb.preprocessor().with_mode(cfg.backbone(slot).resize).prepare(&image))
        })
        .collect();
    for (class, methods) in &todo {
        let request = SaliencyRequest::from_template(record.id.clone(), class.to_string(), &cfg.prompt_template);
        for (k, &(slot, bb)) in slots.iter().enumerate() {
            let registry = methods.iter().filter(|&&m| cfg.slot(m) == slot).fold(Registry::new(), |r, &m| r.with(m, bb));
            let Some(input) = prepared[k].as_ref().filter(|_| !registry.is_empty()) else { continue };
            let generated = generate_all(ImageSource::Prepared(input), &request, &registry, &cfg.method);
            for map in generated.maps {
                let meta = MapMeta::for_map(&map, &bb.spec().identifier, &hash);
                match store::write_map(dir, &map.values, &meta) {
                    Ok(path) => out.entries.push((
                        ManifestEntry {
                            image_id: record.id.clone(),
                            class: class.to_string(),
                            method: map.method,
                            file: path.file_name().expect("file").to_string_lossy().into_owned(),
                            forward_passes: map.passes.forward_passes,
                            backward_passes: map.passes.backward_passes,
                            degenerate: map.degenerate,
                        },
                        true,
                    )),
                    Err(e) => out.failures.push(Failure {
                        image_id: record.id.clone(),
                        class: class.to_string(),
                        method: map.method,
                        error: e.to_string(),
                    }),
                }
            }
            for (method, e) in generated.failures {
                out.failures.push(Failure {
                    image_id: record.id.clone(),
                    class: class.to_string(),
                    method,
                    error: e.to_string(),
                });
            }
        }
    }
    out
}

/// Computes every missing or stale map of the selected pairs and rewrites
/// the manifest. Images are spread over `workers` threads, each with its own
/// backbone instances.
pub fn generate(cfg: &RunConfig, workers: usize) -> Result<GenerateSummary> {
    cfg.validate()?;
    let index = load_dataset(cfg)?;
    let pairs = selected_pairs(cfg, &index);
    let mut by_image: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (image_id, class) in &pairs {
        by_image.entry(image_id).or_default().push(class.clone());
    }
    let jobs: Vec<(&ImageRecord, Vec<String>)> = by_image
        .into_iter()
        .map(|(id, classes)| (index.image(id).expect("pairs reference indexed images"), classes))
        .collect();
    // Fail fast on backbone construction before spawning workers.
    cfg.backbones.residual.build()?;
    cfg.backbones.transformer.build()?;

    let dir = maps_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Workers(e.to_string()))?;
    let outcomes: Vec<ImageOutcome> = pool.install(|| {
        jobs.par_iter()
            .map_init(
                || Worker {
                    residual: cfg.backbones.residual.build().expect("validated above"),
                    transformer: cfg.backbones.transformer.build().expect("validated above"),
                },
                |worker, (record, classes)| process_image(cfg, worker, record, classes, &dir),
            )
            .collect()
    });

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut written = 0;
    for o in outcomes {
        for (e, new) in o.entries {
            written += usize::from(new);
            entries.push(e);
        }
        failures.extend(o.failures);
    }
    let skipped = entries.len() - written;
    let produced: BTreeSet<MethodId> = entries.iter().map(|e| e.method).collect();
    let fully_failed: Vec<MethodId> = failures
        .iter()
        .map(|f| f.method)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|m| !produced.contains(m))
        .collect();
    let manifest = Manifest {
        config_hash: cfg.config_hash(),
        generation_hash: cfg.generation_hash(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        prompt_template: cfg.prompt_template.clone(),
        entries,
        failures: failures.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    write_file(&manifest_path, &(serde_json::to_string_pretty(&manifest).expect("serializable") + "\n"))?;
    Ok(GenerateSummary { written, skipped, failures, fully_failed, manifest: manifest_path })
}

/// Maps read from a generate output directory. A map whose sidecar carries
/// a different generation hash is an error, not a silent reuse.
pub struct DirMaps {
    pub dir: PathBuf,
    pub generation_hash: String,
}

impl MapProvider for DirMaps {
    fn load(&self, method: MethodId, image_id: &str, class: &str) -> std::result::Result<Option<Array2<f64>>, String> {
        let path = self.dir.join(map_file_name(image_id, class, method));
        if !path.exists() {
            return Ok(None);
        }
        let (values, meta) = store::read_map(&path).map_err(|e| e.to_string())?;
        if meta.config_hash != self.generation_hash {
            return Err(format!(
                "{}: generated with settings {} but the run expects {}; rerun generate",
                path.display(),
                meta.config_hash,
                self.generation_hash
            ));
        }
        if (meta.image_id.as_str(), meta.class.as_str(), meta.method) != (image_id, class, method) {
            return Err(format!("{}: sidecar names {}/{}/{}", path.display(), meta.image_id, meta.class, meta.method));
        }
        Ok(Some(values))
    }
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub table: String,
    pub files: Vec<PathBuf>,
}

fn report_header(cfg: &RunConfig, index: &DatasetIndex) -> String {
    format!(
        "config_hash: {}\ndataset: {} (split {})\nprompt template: {}\nbackbones: residual {:?}, transformer {:?}\n",
        cfg.config_hash(),
        index.name,
        index.split.as_deref().unwrap_or("-"),
        cfg.prompt_template,
        cfg.backbones.residual.model,
        cfg.backbones.transformer.model,
    )
}

/// Scores the persisted maps of the selected pairs and writes the report files.
pub fn eval(cfg: &RunConfig, show_tau: bool) -> Result<EvalOutput> {
    cfg.validate()?;
    let index = load_dataset(cfg)?;
    let selected: BTreeSet<(String, String)> = selected_pairs(cfg, &index).into_iter().collect();
    let instances: Vec<_> = build_instances(&index, &cfg.eval).into_iter().filter(|i| selected.contains(&i.key())).collect();
    let maps = DirMaps { dir: maps_dir(cfg), generation_hash: cfg.generation_hash() };
    let report = evaluate(&instances, &cfg.methods, &maps, &cfg.eval)?;
    let hash = cfg.config_hash();
    let table = report_header(cfg, &index) + &report.table(&TableOptions { show_tau, title: None });
    let dir = cfg.out_dir.join("eval");
    let mut json = serde_json::to_value(&report).expect("serializable");
    json["config_hash"] = serde_json::Value::String(hash.clone());
    json["prompt_template"] = serde_json::Value::String(cfg.prompt_template.clone());
    let files = [
        ("summary.csv", report.summary_csv(&hash)),
        ("per_class.csv", report.per_class_csv(&hash)),
        ("curve.csv", report.curve_csv(&hash)),
        ("table.txt", table.clone()),
        ("report.json", serde_json::to_string_pretty(&json).expect("serializable") + "\n"),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        write_file(&p, &body)?;
        paths.push(p);
    }
    Ok(EvalOutput { report, table, files: paths })
}

/// Dataset totals, class shares and size-bucket shares.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub text: String,
    pub table_csv: String,
    pub classes_csv: String,
    pub sizes_csv: String,
}

fn prefix_column(csv: &str, name: &str, value: &str) -> String {
    csv.lines()
        .enumerate()
        .map(|(i, l)| format!("{},{l}\n", if i == 0 { name } else { value }))
        .collect()
}

pub fn dataset_stats(index: &DatasetIndex, cutoffs: &SizeCutoffs, config_hash: Option<&str>) -> DatasetStats {
    let classes = class_stats(index);
    let sizes = size_distribution(index, cutoffs);
    let mut text = String::new();
    if let Some(h) = config_hash {
        let _ = writeln!(text, "config_hash: {h}");
    }
    let _ = writeln!(text, "split: {}", index.split.as_deref().unwrap_or("-"));
    text.push_str(&dataset_table(&[index]));
    text.push('\n');
    text.push_str(&classes.to_text());
    text.push('\n');
    let _ = writeln!(
        text,
        "size buckets (S <= {:.2}% of image area, M <= {:.2}%, L above):",
        cutoffs.small * 100.0,
        cutoffs.medium * 100.0
    );
    for b in SizeBucket::ALL {
        let _ = writeln!(text, "  {b}: {:>6} boxes, {:>6.2}%", sizes.counts[b.index()], sizes.share(b) * 100.0);
    }
    let mut sizes_csv = String::from("bucket,boxes,share\n");
    for b in SizeBucket::ALL {
        let _ = writeln!(sizes_csv, "{b},{},{:.6}", sizes.counts[b.index()], sizes.share(b));
    }
    let (mut table_csv, mut classes_csv) = (dataset_table_csv(&[index]), classes.to_csv());
    if let Some(h) = config_hash {
        table_csv = prefix_column(&table_csv, "config_hash", h);
        classes_csv = prefix_column(&classes_csv, "config_hash", h);
        sizes_csv = prefix_column(&sizes_csv, "config_hash", h);
    }
    DatasetStats { text, table_csv, classes_csv, sizes_csv }
}

impl DatasetStats {
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (name, body) in [
            ("table.txt", &self.text),
            ("table.csv", &self.table_csv),
            ("classes.csv", &self.classes_csv),
            ("sizes.csv", &self.sizes_csv),
        ] {
            let p = dir.join(name);
            write_file(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}
