mod common;

use std::path::Path;

use common::boxacc::{brute_force, flatten, synthetic};
use iconoloc::config::RunConfig;
use iconoloc::dataset::to_canonical_json;
use iconoloc::pipeline::{dataset_stats, eval, generate, load_dataset, maps_dir, DirMaps};
use iconoloc::localization::{MapProvider, SizeCutoffs};
use iconoloc::saliency::store::{write_map, MapMeta};
use iconoloc::{MethodId, PassCounter};
use ndarray::Array2;

const TOML: &str = r#"
out_dir = "out"
[dataset]
root = "data"
adapter = "canonical-json"
[backbones.residual]
model = "synthetic-rn-small"
[backbones.transformer]
model = "synthetic-vit-small"
"#;

fn config(dir: &Path, extra: &str) -> RunConfig {
    RunConfig::from_toml(&format!("{extra}\n{TOML}"), &dir.join("run.toml")).unwrap()
}

/// Two 48x40 noise images with one "halo" box each.
fn tiny_dataset(dir: &Path) {
    let data = dir.join("data");
    std::fs::create_dir_all(data.join("images")).unwrap();
    for (i, seed) in [(0, 1), (1, 2)] {
        common::noise_image(48, 40, seed).save(data.join(format!("images/im{i}.png"))).unwrap();
    }
    let doc = serde_json::json!({
        "name": "tiny",
        "split": "test",
        "classes": ["halo"],
        "images": [
            {"id": "im0", "file": "images/im0.png", "width": 48, "height": 40},
            {"id": "im1", "file": "images/im1.png", "width": 48, "height": 40}
        ],
        "instances": [
            {"image_id": "im0", "class": "halo", "box": [4, 4, 20, 18]},
            {"image_id": "im1", "class": "halo", "box": [10, 2, 40, 30]}
        ]
    });
    std::fs::write(data.join("test.json"), doc.to_string()).unwrap();
}

fn meta(image_id: &str, class: &str, method: MethodId, hash: &str) -> MapMeta {
    MapMeta {
        image_id: image_id.into(),
        class: class.into(),
        method,
        prompt: format!("a painting of a {class}"),
        backbone: "test".into(),
        config_hash: hash.into(),
        degenerate: false,
        passes: PassCounter::default(),
    }
}

fn map_files(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "npyish")).count()
}

#[test]
fn generate_writes_every_map_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let cfg = config(dir.path(), "method = { top_k = 6 }");
    let first = generate(&cfg, 2).unwrap();
    assert!(first.failures.is_empty(), "{:?}", first.failures);
    assert_eq!((first.written, first.skipped), (14, 0));
    assert_eq!(map_files(&maps_dir(&cfg)), 14);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&first.manifest).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 14);
    assert_eq!(manifest["generation_hash"], cfg.generation_hash());

    let again = generate(&cfg, 1).unwrap();
    assert_eq!((again.written, again.skipped), (0, 14));

    // Eval settings do not invalidate maps; the prompt does.
    let eval_only = config(dir.path(), "method = { top_k = 6 }\neval = { delta_set = [0.5] }");
    assert_eq!(generate(&eval_only, 1).unwrap().written, 0);
    let reprompt = config(dir.path(), "method = { top_k = 6 }\nprompt_template = \"an image of a {class}\"");
    let third = generate(&reprompt, 2).unwrap();
    assert_eq!((third.written, third.skipped), (14, 0));
}

#[test]
fn missing_image_fails_its_maps_only() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    std::fs::remove_file(dir.path().join("data/images/im1.png")).unwrap();
    let cfg = config(dir.path(), "methods = [\"gradcam\", \"legrad\"]");
    let out = generate(&cfg, 1).unwrap();
    assert_eq!(out.written, 2);
    assert_eq!(out.failures.len(), 2);
    assert!(out.failures.iter().all(|f| f.image_id == "im1" && f.error.contains("im1.png")));
    assert!(out.fully_failed.is_empty());
}

#[test]
fn a_method_failing_everywhere_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    // The small residual backbone has 12 channels, fewer than the default top-k.
    let cfg = config(dir.path(), "methods = [\"gscorecam\", \"gradcam\"]");
    let out = generate(&cfg, 1).unwrap();
    assert_eq!(out.written, 2);
    assert_eq!(out.fully_failed, vec![MethodId::GScoreCam]);
    assert!(out.failures[0].error.contains("top_k"));
}

#[test]
fn eval_of_generated_maps_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let cfg = config(dir.path(), "methods = [\"gradcam\", \"clip-surgery\", \"legrad\"]");
    generate(&cfg, 2).unwrap();
    let a = eval(&cfg, true).unwrap();
    let bytes: Vec<Vec<u8>> = a.files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let b = eval(&cfg, true).unwrap();
    for (p, before) in b.files.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(p).unwrap(), before, "{}", p.display());
    }
    assert_eq!(a.report.rows.len(), 3 * 2);
    assert!(a.table.contains(&cfg.config_hash()));
    assert!(a.table.contains("a painting of a {class}"));
}

#[test]
fn indicator_maps_score_perfectly_and_stale_maps_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let cfg = config(dir.path(), "methods = [\"gradcam\"]");
    let index = load_dataset(&cfg).unwrap();
    let maps = maps_dir(&cfg);
    for b in index.boxes() {
        let img = index.image(&b.image_id).unwrap();
        let mut m = Array2::zeros((img.height as usize, img.width as usize));
        let bb = b.bbox;
        m.slice_mut(ndarray::s![bb.y_min as usize..bb.y_max as usize, bb.x_min as usize..bb.x_max as usize]).fill(1.0);
        write_map(&maps, &m, &meta(&b.image_id, &b.class_label, MethodId::GradCam, &cfg.generation_hash())).unwrap();
    }
    let out = eval(&cfg, false).unwrap();
    for row in &out.report.rows {
        assert_eq!(row.box_acc(), 1.0);
    }

    let stale = DirMaps { dir: maps.clone(), generation_hash: "0000000000000000".into() };
    let err = stale.load(MethodId::GradCam, "im0", "halo").unwrap_err();
    assert!(err.contains("rerun generate"), "{err}");
    assert!(eval(&config(dir.path(), "methods = [\"gradcam\"]\nprompt_template = \"x {class}\""), false).is_err());
}

#[test]
fn eval_matches_brute_force_on_fifty_instances() {
    let dir = tempfile::tempdir().unwrap();
    let methods = [MethodId::GradCam, MethodId::ScoreCam];
    let (index, maps) = synthetic(50, &methods, 11);
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    std::fs::write(dir.path().join("data/test.json"), to_canonical_json(&index)).unwrap();
    let cfg = config(dir.path(), "methods = [\"gradcam\", \"scorecam\"]");
    for ((m, id, class), values) in &maps {
        write_map(&maps_dir(&cfg), values, &meta(id, class, *m, &cfg.generation_hash())).unwrap();
    }
    let out = eval(&cfg, false).unwrap();
    assert_eq!(out.report.rows[0].n(), 50);
    assert_eq!(flatten(&out.report), brute_force(&index, &maps, &methods, &cfg.eval));
}

#[test]
fn dataset_stats_embed_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let cfg = config(dir.path(), "");
    let index = load_dataset(&cfg).unwrap();
    let stats = dataset_stats(&index, &SizeCutoffs::default(), Some(&cfg.config_hash()));
    assert!(stats.text.starts_with(&format!("config_hash: {}", cfg.config_hash())));
    assert!(stats.table_csv.lines().skip(1).all(|l| l.starts_with(&cfg.config_hash())));
    // Box areas 16*14 and 30*28 over 48*40: 11.7% and 43.8%, both large.
    assert!(stats.sizes_csv.contains(",L,2,1.000000"));
    let files = stats.write_to(&dir.path().join("stats")).unwrap();
    assert_eq!(files.len(), 4);
}
