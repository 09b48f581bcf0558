//! Loop-level re-implementation of the toy transformer, used as an
//! independent trace for the attention-based methods. Gradients here come
//! from central differences, never from the crate's backward code.

use iconoloc::backbone::{LayerNorm, ToyVitConfig, VitBlock, VitWeights};
use ndarray::{Array1, Array2, Array3};

type Tokens = Vec<Vec<f64>>;

fn hand(a: usize, b: usize, k: usize) -> f64 {
    ((a * 7 + b * 3 + k * 5) % 11) as f64 / 10.0 - 0.5
}

fn mat(rows: usize, cols: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, c)| hand(r, c, k))
}

fn vec_of(n: usize, k: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |i| hand(i, k, k) * 0.5)
}

fn norm_layer(n: usize, k: usize) -> LayerNorm {
    LayerNorm {
        gamma: Array1::from_shape_fn(n, |i| 1.0 + 0.1 * hand(i, k, 1)),
        beta: Array1::from_shape_fn(n, |i| 0.05 * hand(i, k, 2)),
    }
}

/// Two blocks, two heads, a 2x2 patch grid of 1-pixel patches.
pub fn toy_weights() -> (ToyVitConfig, VitWeights) {
    let cfg = ToyVitConfig {
        identifier: "toy-trace".into(),
        patch_size: 1,
        grid: (2, 2),
        width: 4,
        heads: 2,
        depth: 2,
        mlp_width: 4,
        embed_dim: 3,
        surgery_depth: 1,
        seed: 11,
    };
    let d = cfg.width;
    let m = cfg.mlp_width;
    let blocks = (0..cfg.depth)
        .map(|l| {
            let k = 10 * (l + 1);
            VitBlock {
                ln1: norm_layer(d, k),
                wq: mat(d, d, k + 1),
                bq: vec_of(d, k + 1),
                wk: mat(d, d, k + 2),
                bk: vec_of(d, k + 2),
                wv: mat(d, d, k + 3),
                bv: vec_of(d, k + 3),
                wo: mat(d, d, k + 4),
                bo: vec_of(d, k + 4),
                ln2: norm_layer(d, k + 5),
                w1: mat(m, d, k + 6),
                b1: vec_of(m, k + 6),
                w2: mat(d, m, k + 7),
                b2: vec_of(d, k + 7),
            }
        })
        .collect();
    let weights = VitWeights {
        patch: mat(d, 3, 1),
        class_embedding: vec_of(d, 2),
        positional: mat(5, d, 3) * 0.5,
        ln_pre: norm_layer(d, 4),
        blocks,
        ln_post: norm_layer(d, 5),
        proj: mat(d, cfg.embed_dim, 6),
    };
    (cfg, weights)
}

pub fn toy_input() -> Array3<f64> {
    Array3::from_shape_fn((3, 2, 2), |(c, y, x)| hand(c, 2 * y + x, 9) * 2.0)
}

fn ln(x: &[f64], n: &LayerNorm) -> Vec<f64> {
    let len = x.len() as f64;
    let mu = x.iter().sum::<f64>() / len;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len;
    let sigma = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mu) / sigma * n.gamma[i] + n.beta[i]).collect()
}

fn lin(x: &[f64], w: &Array2<f64>, b: &Array1<f64>) -> Vec<f64> {
    (0..w.nrows()).map(|o| b[o] + (0..w.ncols()).map(|i| w[[o, i]] * x[i]).sum::<f64>()).collect()
}

fn softmax(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

fn gelu(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn embed(w: &VitWeights, input: &Array3<f64>) -> Tokens {
    let (_, gh, gw) = input.dim();
    let mut tokens = vec![add(&w.class_embedding.to_vec(), &w.positional.row(0).to_vec())];
    for y in 0..gh {
        for x in 0..gw {
            let pixel = [input[[0, y, x]], input[[1, y, x]], input[[2, y, x]]];
            let p: Vec<f64> = (0..w.patch.nrows()).map(|o| (0..3).map(|i| w.patch[[o, i]] * pixel[i]).sum()).collect();
            tokens.push(add(&p, &w.positional.row(1 + y * gw + x).to_vec()));
        }
    }
    tokens.iter().map(|t| ln(t, &w.ln_pre)).collect()
}

/// Attention probabilities `[head][query][key]` and the attention output.
fn attention(
    x: &Tokens,
    b: &VitBlock,
    heads: usize,
    value_value: bool,
    over: Option<&Array3<f64>>,
) -> (Vec<Vec<Vec<f64>>>, Tokens) {
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let h: Tokens = x.iter().map(|t| ln(t, &b.ln1)).collect();
    let q: Tokens = h.iter().map(|t| lin(t, &b.wq, &b.bq)).collect();
    let k: Tokens = h.iter().map(|t| lin(t, &b.wk, &b.bk)).collect();
    let v: Tokens = h.iter().map(|t| lin(t, &b.wv, &b.bv)).collect();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![vec![vec![0.0; n]; n]; heads];
    let mut o = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        let r = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let mut row: Vec<f64> = (0..n)
                .map(|j| {
                    let (a, bb) = if value_value { (&v[i], &v[j]) } else { (&q[i], &k[j]) };
                    r.clone().map(|c| a[c] * bb[c]).sum::<f64>() * scale
                })
                .collect();
            softmax(&mut row);
            if let Some(over) = over {
                row = (0..n).map(|j| over[[hd, i, j]]).collect();
            }
            for j in 0..n {
                for c in r.clone() {
                    o[i][c] += row[j] * v[j][c];
                }
            }
            probs[hd][i] = row;
        }
    }
    let res = o.iter().map(|t| lin(t, &b.wo, &b.bo)).collect();
    (probs, res)
}

fn mlp_residual(mid: &Tokens, b: &VitBlock) -> Tokens {
    mid.iter()
        .map(|t| {
            let hidden: Vec<f64> = lin(&ln(t, &b.ln2), &b.w1, &b.b1).into_iter().map(gelu).collect();
            add(t, &lin(&hidden, &b.w2, &b.b2))
        })
        .collect()
}

fn block(x: &Tokens, b: &VitBlock, heads: usize, over: Option<&Array3<f64>>) -> (Vec<Vec<Vec<f64>>>, Tokens) {
    let (probs, res) = attention(x, b, heads, false, over);
    let mid: Tokens = x.iter().zip(&res).map(|(a, r)| add(a, r)).collect();
    (probs, mlp_residual(&mid, b))
}

fn project(w: &VitWeights, t: &[f64]) -> Vec<f64> {
    let y = ln(t, &w.ln_post);
    (0..w.proj.ncols()).map(|k| (0..y.len()).map(|i| y[i] * w.proj[[i, k]]).sum()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn layer_score(cfg: &ToyVitConfig, w: &VitWeights, input: &Array3<f64>, text: &[f64], layer: usize, over: &Array3<f64>) -> f64 {
    let mut x = embed(w, input);
    for l in 0..=layer {
        x = block(&x, &w.blocks[l], cfg.heads, (l == layer).then_some(over)).1;
    }
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..x[0].len()).map(|c| x.iter().map(|t| t[c]).sum::<f64>() / n).collect();
    cosine(&project(w, &mean), text)
}

fn min_max(values: Vec<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Array2::from_shape_vec((rows, cols), values.iter().map(|v| (v - lo) / (hi - lo)).collect()).unwrap()
}

/// Rectified attention gradients of each layer score, averaged over heads and
/// query rows, class column dropped, summed over the last `layers` blocks.
pub fn legrad_map(cfg: &ToyVitConfig, w: &VitWeights, input: &Array3<f64>, text: &[f64], layers: usize) -> Array2<f64> {
    let n = cfg.grid.0 * cfg.grid.1 + 1;
    let mut x = embed(w, input);
    let mut relevance = vec![0.0; n - 1];
    for l in 0..cfg.depth {
        let (probs, out) = block(&x, &w.blocks[l], cfg.heads, None);
        if l >= cfg.depth - layers {
            let base = Array3::from_shape_fn((cfg.heads, n, n), |(h, i, j)| probs[h][i][j]);
            let step = 1e-6;
            for h in 0..cfg.heads {
                for i in 0..n {
                    for j in 1..n {
                        let mut p = base.clone();
                        let mut m = base.clone();
                        p[[h, i, j]] += step;
                        m[[h, i, j]] -= step;
                        let g = (layer_score(cfg, w, input, text, l, &p) - layer_score(cfg, w, input, text, l, &m)) / (2.0 * step);
                        relevance[j - 1] += g.max(0.0) / (cfg.heads * n) as f64;
                    }
                }
            }
        }
        x = out;
    }
    min_max(relevance, cfg.grid.0, cfg.grid.1)
}

/// Value-value attention path through the last `surgery_depth` blocks,
/// accumulating attention residuals only; cosine of each patch token with
/// `t - r`; min-max normalized without rectification.
pub fn surgery_map(cfg: &ToyVitConfig, w: &VitWeights, input: &Array3<f64>, t: &[f64], r: Option<&[f64]>) -> Array2<f64> {
    let first = cfg.depth - cfg.surgery_depth;
    let mut x = embed(w, input);
    let mut new_path: Option<Tokens> = None;
    for (l, b) in w.blocks.iter().enumerate() {
        if l < first {
            x = block(&x, b, cfg.heads, None).1;
            continue;
        }
        let (_, res_new) = attention(&x, b, cfg.heads, true, None);
        let base = new_path.take().unwrap_or_else(|| x.clone());
        new_path = Some(base.iter().zip(&res_new).map(|(a, r)| add(a, r)).collect());
        x = block(&x, b, cfg.heads, None).1;
    }
    let stream = new_path.unwrap();
    let direction: Vec<f64> = match r {
        Some(r) => t.iter().zip(r).map(|(a, b)| a - b).collect(),
        None => t.to_vec(),
    };
    let sims: Vec<f64> = stream[1..]
        .iter()
        .map(|tok| {
            let e = project(w, tok);
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>() / norm
        })
        .collect();
    min_max(sims, cfg.grid.0, cfg.grid.1)
}

/// `ln_post` and projection of each cell of a `(width, rows, cols)` grid,
/// flattened row-major as `(cells, embed_dim)`.
pub fn project_patch_grid(w: &VitWeights, grid: &Array3<f64>) -> Vec<f64> {
    let (d, gh, gw) = grid.dim();
    let mut out = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            let tok: Vec<f64> = (0..d).map(|c| grid[[c, y, x]]).collect();
            out.extend(project(w, &tok));
        }
    }
    out
}
