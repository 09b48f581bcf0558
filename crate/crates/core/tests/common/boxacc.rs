//! A slow, literal BoxAcc: pixel lists, union-find components and IoU from
//! pixel-set counts. Shares no code with the library's metric.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use iconoloc::dataset::{from_canonical_json, DatasetIndex};
use iconoloc::localization::{EvalReport, GtMatching, MissingMaps};
use iconoloc::{EvalConfig, MethodId};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Maps = HashMap<(MethodId, String, String), Array2<f64>>;

/// (method, δ, argmax τ, per τ: (τ, overall, [S, M, L], per class)), counts as (hits, n).
pub type Flat = Vec<(MethodId, f64, f64, Vec<(f64, (usize, usize), [(usize, usize); 3], BTreeMap<String, (usize, usize)>)>)>;

pub const CLASSES: [&str; 3] = ["angel", "beard", "halo"];

fn random_box(rng: &mut ChaCha8Rng, w: u32, h: u32) -> [u32; 4] {
    let bw = rng.random_range(1..=w);
    let bh = rng.random_range(1..=h);
    let x = rng.random_range(0..=w - bw);
    let y = rng.random_range(0..=h - bh);
    [x, y, x + bw, y + bh]
}

/// Random images, boxes and maps with exactly `pairs` image-class pairs.
/// Map values are partly quantized to hundredths so some cells sit exactly
/// on grid thresholds; some maps are blank.
pub fn synthetic(pairs: usize, methods: &[MethodId], seed: u64) -> (DatasetIndex, Maps) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut instances = Vec::new();
    let mut pair_list = Vec::new();
    let mut i = 0;
    while pair_list.len() < pairs {
        let (w, h) = (rng.random_range(6..=40u32), rng.random_range(6..=40u32));
        let id = format!("img{i:04}");
        i += 1;
        images.push(serde_json::json!({"id": id, "file": format!("{id}.jpg"), "width": w, "height": h}));
        let n_classes = rng.random_range(0..=2usize);
        let mut classes: Vec<&str> = CLASSES.to_vec();
        for _ in 0..n_classes {
            if pair_list.len() == pairs {
                break;
            }
            let class = classes.remove(rng.random_range(0..classes.len()));
            for _ in 0..rng.random_range(1..=3) {
                let b = if rng.random_bool(0.3) {
                    // Small boxes to populate the S bucket.
                    let s = rng.random_range(1..=3u32);
                    let x = rng.random_range(0..=w - s);
                    let y = rng.random_range(0..=h - s);
                    [x, y, x + s, y + s]
                } else {
                    random_box(&mut rng, w, h)
                };
                instances.push(serde_json::json!({"image_id": id, "class": class, "box": b}));
            }
            pair_list.push((id.clone(), class.to_string(), w, h));
        }
    }
    let doc = serde_json::json!({"name": "synthetic", "classes": CLASSES, "images": images, "instances": instances});
    let index = from_canonical_json(&doc.to_string(), Path::new("synthetic.json")).expect("valid synthetic set");

    let mut maps = Maps::new();
    for &m in methods {
        for (id, class, w, h) in &pair_list {
            maps.insert((m, id.clone(), class.clone()), random_map(&mut rng, *w as usize, *h as usize));
        }
    }
    (index, maps)
}

pub fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Array2<f64> {
    if rng.random_bool(0.05) {
        return Array2::zeros((h, w));
    }
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=4))
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(0.5..(w.max(h) as f64 / 2.0)),
                rng.random_range(0.2..1.0),
            )
        })
        .collect();
    let quantize = rng.random_bool(0.5);
    let noise = rng.random_range(0.0..0.3);
    let mut m = Array2::from_shape_fn((h, w), |(y, x)| {
        blobs.iter().map(|&(cx, cy, s, a)| a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * s * s)).exp()).sum::<f64>()
    });
    m.mapv_inplace(|v| v + noise * rng.random::<f64>());
    let max = m.iter().cloned().fold(0.0, f64::max);
    m.mapv_inplace(|v| v / max);
    if quantize {
        m.mapv_inplace(|v| (v * 100.0).round() / 100.0);
    }
    m
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Largest 8-connected on-region as a pixel set; ties go to the region
/// holding the smallest row-major index.
pub fn largest_region(map: &Array2<f64>, tau: f64) -> BTreeSet<(usize, usize)> {
    let (h, w) = map.dim();
    let on: Vec<bool> = map.iter().map(|&v| v >= tau).collect();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            if !on[y * w + x] {
                continue;
            }
            for (dy, dx) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if on[j] {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    let mut regions: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in 0..h * w {
        if on[p] {
            let r = find(&mut parent, p);
            regions.entry(r).or_default().push(p);
        }
    }
    let best = regions.values().max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])));
    best.map(|r| r.iter().map(|&p| (p / w, p % w)).collect()).unwrap_or_default()
}

/// Every pixel inside the tightest rectangle around `region`.
pub fn hull_pixels(region: &BTreeSet<(usize, usize)>) -> BTreeSet<(usize, usize)> {
    if region.is_empty() {
        return BTreeSet::new();
    }
    let y0 = region.iter().map(|p| p.0).min().unwrap();
    let y1 = region.iter().map(|p| p.0).max().unwrap();
    let x0 = region.iter().map(|p| p.1).min().unwrap();
    let x1 = region.iter().map(|p| p.1).max().unwrap();
    (y0..=y1).flat_map(|y| (x0..=x1).map(move |x| (y, x))).collect()
}

fn box_pixels(b: [u32; 4]) -> BTreeSet<(usize, usize)> {
    (b[1] as usize..b[3] as usize).flat_map(|y| (b[0] as usize..b[2] as usize).map(move |x| (y, x))).collect()
}

fn pixel_iou(a: &BTreeSet<(usize, usize)>, b: &BTreeSet<(usize, usize)>) -> f64 {
    let inter = a.intersection(b).count() as u64;
    let union = a.union(b).count() as u64;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn bucket(area: u64, w: u32, h: u32) -> usize {
    let image = w as u64 * h as u64;
    if area * 100 <= image {
        0
    } else if area * 10 <= image {
        1
    } else {
        2
    }
}

struct OracleInstance {
    image: String,
    class: String,
    gts: Vec<[u32; 4]>,
    bucket: usize,
}

fn oracle_instances(index: &DatasetIndex, matching: GtMatching) -> Vec<OracleInstance> {
    let mut grouped: BTreeMap<(String, String), Vec<[u32; 4]>> = BTreeMap::new();
    for b in index.boxes() {
        grouped
            .entry((b.image_id.clone(), b.class_label.clone()))
            .or_default()
            .push([b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max]);
    }
    let area = |b: &[u32; 4]| (b[2] - b[0]) as u64 * (b[3] - b[1]) as u64;
    let mut out = Vec::new();
    for ((image, class), gts) in grouped {
        let img = index.images().iter().find(|i| i.id == image).unwrap();
        match matching {
            GtMatching::AnyBox => {
                let largest = gts.iter().map(area).max().unwrap();
                out.push(OracleInstance { image, class, bucket: bucket(largest, img.width, img.height), gts });
            }
            GtMatching::SingleBox => {
                for g in gts {
                    out.push(OracleInstance {
                        image: image.clone(),
                        class: class.clone(),
                        bucket: bucket(area(&g), img.width, img.height),
                        gts: vec![g],
                    });
                }
            }
        }
    }
    out
}

/// The metric computed from its definition, one instance and threshold at a time.
pub fn brute_force(index: &DatasetIndex, maps: &Maps, methods: &[MethodId], cfg: &EvalConfig) -> Flat {
    let instances = oracle_instances(index, cfg.gt_matching);
    let mut out = Vec::new();
    for &m in methods {
        // ious[i][t]
        let ious: Vec<Vec<f64>> = instances
            .iter()
            .map(|inst| {
                let map = maps.get(&(m, inst.image.clone(), inst.class.clone()));
                cfg.tau_grid
                    .iter()
                    .map(|&tau| match map {
                        None => {
                            assert_eq!(cfg.missing_maps, MissingMaps::Miss);
                            0.0
                        }
                        Some(map) => {
                            let pred = hull_pixels(&largest_region(map, tau));
                            if pred.is_empty() {
                                return 0.0;
                            }
                            inst.gts.iter().map(|g| pixel_iou(&pred, &box_pixels(*g))).fold(0.0, f64::max)
                        }
                    })
                    .collect()
            })
            .collect();
        for &delta in &cfg.delta_set {
            let mut curve = Vec::new();
            for (t, &tau) in cfg.tau_grid.iter().enumerate() {
                let mut overall = (0, 0);
                let mut sizes = [(0, 0); 3];
                let mut classes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
                for (inst, iou) in instances.iter().zip(&ious) {
                    let hit = usize::from(iou[t] >= delta);
                    overall.0 += hit;
                    overall.1 += 1;
                    sizes[inst.bucket].0 += hit;
                    sizes[inst.bucket].1 += 1;
                    let c = classes.entry(inst.class.clone()).or_default();
                    c.0 += hit;
                    c.1 += 1;
                }
                curve.push((tau, overall, sizes, classes));
            }
            let best = curve.iter().map(|p| p.1 .0).max().unwrap();
            let argmax = curve.iter().find(|p| p.1 .0 == best).unwrap().0;
            out.push((m, delta, argmax, curve));
        }
    }
    out
}

pub fn flatten(report: &EvalReport) -> Flat {
    report
        .rows
        .iter()
        .map(|r| {
            let curve = r
                .curve
                .iter()
                .map(|p| {
                    (
                        p.tau,
                        (p.overall.hits, p.overall.n),
                        p.by_size.map(|t| (t.hits, t.n)),
                        p.by_class.iter().map(|(k, t)| (k.clone(), (t.hits, t.n))).collect(),
                    )
                })
                .collect();
            (r.method, r.delta, r.argmax_tau, curve)
        })
        .collect()
}
