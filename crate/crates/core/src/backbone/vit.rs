//! Small CLIP-style vision transformer with explicit weights.
//!
//! Layout follows the CLIP visual tower: patch projection without bias, class
//! token, positional embedding, pre-norm, pre-LN residual blocks with
//! QuickGELU MLPs, post-norm on the class token, projection. Used both as a
//! seeded synthetic backbone and as a hand-specified fixture.

use std::cell::Cell;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    cosine_grad, Backbone, BackboneError, BackboneSpec, Embedding, FeatureStack, Family, HashTextEncoder, Modality,
    Result, SurgeryTokens, TapPoint,
};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    fn forward(&self, x: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>, f64) {
        let n = x.len() as f64;
        let mu = x.sum() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sigma = (var + LN_EPS).sqrt();
        let xhat = x.mapv(|v| (v - mu) / sigma);
        let y = &xhat * &self.gamma + &self.beta;
        (y, xhat, sigma)
    }

    fn forward_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.outer_iter().enumerate() {
            out.row_mut(i).assign(&self.forward(row).0);
        }
        out
    }

    fn backward(&self, xhat: &Array1<f64>, sigma: f64, g_y: &Array1<f64>) -> Array1<f64> {
        let g_xhat = g_y * &self.gamma;
        let n = xhat.len() as f64;
        let mean_g = g_xhat.sum() / n;
        let mean_gx = (&g_xhat * xhat).sum() / n;
        (&g_xhat - mean_g - xhat * mean_gx) / sigma
    }
}

/// One pre-LN residual block. Linear weights are `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VitBlock {
    pub ln1: LayerNorm,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2: LayerNorm,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVitConfig {
    pub identifier: String,
    pub patch_size: usize,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_width: usize,
    pub embed_dim: usize,
    /// Number of trailing blocks rewritten by the surgery forward.
    pub surgery_depth: usize,
    pub seed: u64,
}

impl ToyVitConfig {
    /// Patch geometry of CLIP ViT-B/32 (7x7 patches of 32 px at 224 px) with a
    /// reduced width and depth.
    pub fn vit_b32() -> Self {
        ToyVitConfig {
            identifier: "synthetic-vit-b32".into(),
            patch_size: 32,
            grid: (7, 7),
            width: 32,
            heads: 4,
            depth: 4,
            mlp_width: 64,
            embed_dim: 64,
            surgery_depth: 2,
            seed: 0,
        }
    }

    pub fn small(seed: u64) -> Self {
        ToyVitConfig {
            identifier: "synthetic-vit-small".into(),
            patch_size: 4,
            grid: (3, 3),
            width: 8,
            heads: 2,
            depth: 3,
            mlp_width: 12,
            embed_dim: 6,
            surgery_depth: 2,
            seed,
        }
    }
}

/// All weights of a [`ToyVit`].
#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    /// `(width, 3 * patch * patch)`, channel-major patch flattening.
    pub patch: Array2<f64>,
    pub class_embedding: Array1<f64>,
    /// `(tokens, width)`, class token first.
    pub positional: Array2<f64>,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<VitBlock>,
    pub ln_post: LayerNorm,
    /// `(width, embed_dim)`.
    pub proj: Array2<f64>,
}

#[derive(Debug)]
pub struct ToyVit {
    spec: BackboneSpec,
    cfg: ToyVitConfig,
    weights: VitWeights,
    text: HashTextEncoder,
    forward_calls: Cell<usize>,
    backward_calls: Cell<usize>,
}

/// Per-block intermediates of one forward pass.
struct BlockTrace {
    v: Array2<f64>,
    attn: Array3<f64>,
    mid: Array2<f64>,
    ln2_xhat: Array2<f64>,
    ln2_sigma: Vec<f64>,
    mlp_pre: Array2<f64>,
    output: Array2<f64>,
}

fn quick_gelu(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

fn quick_gelu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-1.702 * x).exp());
    s + 1.702 * x * s * (1.0 - s)
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

impl ToyVit {
    pub fn new(cfg: ToyVitConfig) -> Result<Self> {
        if !cfg.width.is_multiple_of(cfg.heads) {
            return Err(BackboneError::InvalidSpec("width must be divisible by heads".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let mut mat = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| unit.sample(&mut rng) * scale)
        };
        let d = cfg.width;
        let m = cfg.mlp_width;
        let p = 3 * cfg.patch_size * cfg.patch_size;
        let tokens = cfg.grid.0 * cfg.grid.1 + 1;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let patch = mat(d, p, inv(p));
        let class_embedding = mat(1, d, 0.5).row(0).to_owned();
        let positional = mat(tokens, d, 0.5);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(VitBlock {
                ln1: LayerNorm::identity(d),
                wq: mat(d, d, inv(d)),
                bq: mat(1, d, 0.1).row(0).to_owned(),
                wk: mat(d, d, inv(d)),
                bk: mat(1, d, 0.1).row(0).to_owned(),
                wv: mat(d, d, inv(d)),
                bv: mat(1, d, 0.1).row(0).to_owned(),
                wo: mat(d, d, inv(d)),
                bo: mat(1, d, 0.1).row(0).to_owned(),
                ln2: LayerNorm::identity(d),
                w1: mat(m, d, inv(d)),
                b1: mat(1, m, 0.1).row(0).to_owned(),
                w2: mat(d, m, inv(m)),
                b2: mat(1, d, 0.1).row(0).to_owned(),
            });
        }
        let proj = mat(d, cfg.embed_dim, inv(d));
        let weights = VitWeights {
            patch,
            class_embedding,
            positional,
            ln_pre: LayerNorm::identity(d),
            blocks,
            ln_post: LayerNorm::identity(d),
            proj,
        };
        Self::from_weights(cfg, weights)
    }

    /// Builds a model from explicit weights; shapes are validated against `cfg`.
    pub fn from_weights(cfg: ToyVitConfig, weights: VitWeights) -> Result<Self> {
        let d = cfg.width;
        let tokens = cfg.grid.0 * cfg.grid.1 + 1;
        let bad = |what: &str| Err(BackboneError::InvalidSpec(format!("weight shape mismatch: {what}")));
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return bad("heads");
        }
        if weights.patch.dim() != (d, 3 * cfg.patch_size * cfg.patch_size) {
            return bad("patch");
        }
        if weights.positional.dim() != (tokens, d) || weights.class_embedding.len() != d {
            return bad("positional/class");
        }
        if weights.blocks.len() != cfg.depth || weights.proj.dim() != (d, cfg.embed_dim) {
            return bad("blocks/proj");
        }
        if cfg.surgery_depth > cfg.depth {
            return bad("surgery_depth");
        }
        let res = cfg.grid.0.max(cfg.grid.1) * cfg.patch_size;
        let spec = BackboneSpec::with_tap(
            Family::VisionTransformer,
            cfg.identifier.clone(),
            res,
            Family::VisionTransformer.default_tap(),
        )?;
        Ok(ToyVit {
            spec,
            text: HashTextEncoder::new(cfg.embed_dim, cfg.seed ^ 0x7e57),
            cfg,
            weights,
            forward_calls: Cell::new(0),
            backward_calls: Cell::new(0),
        })
    }

    pub fn config(&self) -> &ToyVitConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &VitWeights {
        &self.weights
    }

    pub fn invocations(&self) -> (usize, usize) {
        (self.forward_calls.get(), self.backward_calls.get())
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<()> {
        let (c, h, w) = input.dim();
        let (eh, ew) = (self.cfg.grid.0 * self.cfg.patch_size, self.cfg.grid.1 * self.cfg.patch_size);
        if c != 3 || h != eh || w != ew {
            return Err(BackboneError::ResolutionMismatch { expected: eh.max(ew), height: h, width: w });
        }
        Ok(())
    }

    /// Class token plus patch tokens after positional embedding and pre-norm.
    pub fn embed_tokens(&self, input: &Array3<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let p = self.cfg.patch_size;
        let (gh, gw) = self.cfg.grid;
        let d = self.cfg.width;
        let mut x = Array2::zeros((gh * gw + 1, d));
        x.row_mut(0).assign(&self.weights.class_embedding);
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = input.slice(s![.., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                let flat = Array1::from_iter(patch.iter().cloned());
                x.row_mut(1 + gy * gw + gx).assign(&self.weights.patch.dot(&flat));
            }
        }
        x += &self.weights.positional;
        Ok(self.weights.ln_pre.forward_rows(&x))
    }

    fn split_heads(&self, m: &Array2<f64>, h: usize) -> Array2<f64> {
        let dh = self.cfg.width / self.cfg.heads;
        m.slice(s![.., h * dh..(h + 1) * dh]).to_owned()
    }

    fn block_forward(&self, block: &VitBlock, x: &Array2<f64>, attn_override: Option<&Array3<f64>>) -> BlockTrace {
        let n = x.nrows();
        let heads = self.cfg.heads;
        let dh = self.cfg.width / heads;
        let h = block.ln1.forward_rows(x);
        let q = linear(&h, &block.wq, &block.bq);
        let k = linear(&h, &block.wk, &block.bk);
        let v = linear(&h, &block.wv, &block.bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Array3::zeros((heads, n, n));
        let mut o = Array2::zeros((n, self.cfg.width));
        for hd in 0..heads {
            let a = match attn_override {
                Some(over) => over.index_axis(Axis(0), hd).to_owned(),
                None => {
                    let mut logits = self.split_heads(&q, hd).dot(&self.split_heads(&k, hd).t()) * scale;
                    softmax_rows(&mut logits);
                    logits
                }
            };
            o.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&a.dot(&self.split_heads(&v, hd)));
            attn.index_axis_mut(Axis(0), hd).assign(&a);
        }
        let mid = x + &linear(&o, &block.wo, &block.bo);
        let mut ln2_xhat = Array2::zeros(mid.raw_dim());
        let mut ln2_sigma = Vec::with_capacity(n);
        let mut normed = Array2::zeros(mid.raw_dim());
        for (i, row) in mid.outer_iter().enumerate() {
            let (y, xhat, sigma) = block.ln2.forward(row);
            normed.row_mut(i).assign(&y);
            ln2_xhat.row_mut(i).assign(&xhat);
            ln2_sigma.push(sigma);
        }
        let mlp_pre = linear(&normed, &block.w1, &block.b1);
        let act = mlp_pre.mapv(quick_gelu);
        let output = &mid + &linear(&act, &block.w2, &block.b2);
        BlockTrace { v, attn, mid, ln2_xhat, ln2_sigma, mlp_pre, output }
    }

    fn run(&self, input: &Array3<f64>, attn_override: Option<(usize, &Array3<f64>)>) -> Result<Vec<BlockTrace>> {
        let mut x = self.embed_tokens(input)?;
        let mut traces = Vec::with_capacity(self.cfg.depth);
        for (l, block) in self.weights.blocks.iter().enumerate() {
            let over = attn_override.and_then(|(ol, a)| (ol == l).then_some(a));
            let t = self.block_forward(block, &x, over);
            x = t.output.clone();
            traces.push(t);
        }
        Ok(traces)
    }

    fn class_embedding_of(&self, tokens: &Array2<f64>) -> Vec<f64> {
        let (y, _, _) = self.weights.ln_post.forward(tokens.row(0));
        y.dot(&self.weights.proj).to_vec()
    }

    fn pooled_projection(&self, tokens: &Array2<f64>) -> (Array1<f64>, Array1<f64>, f64, Vec<f64>) {
        let z = tokens.mean_axis(Axis(0)).expect("tokens");
        let (y, xhat, sigma) = self.weights.ln_post.forward(z.view());
        let e = y.dot(&self.weights.proj).to_vec();
        (z, xhat, sigma, e)
    }

    /// Layer-wise score of block `layer` with its attention probabilities
    /// replaced by `attn`. Used to check attention gradients numerically.
    pub fn layer_score_with_attention(
        &self,
        input: &Array3<f64>,
        text: &Embedding,
        layer: usize,
        attn: &Array3<f64>,
    ) -> Result<f64> {
        let traces = self.run(input, Some((layer, attn)))?;
        let (_, _, _, e) = self.pooled_projection(&traces[layer].output);
        super::cosine(&e, text.values())
    }

    /// Attention probabilities of every block for an input.
    pub fn attention_maps(&self, input: &Array3<f64>) -> Result<Vec<Array3<f64>>> {
        Ok(self.run(input, None)?.into_iter().map(|t| t.attn).collect())
    }

    fn attention_gradient(&self, block: &VitBlock, t: &BlockTrace, text: &Embedding) -> Result<Array3<f64>> {
        let n = t.output.nrows() as f64;
        let (_, xhat, sigma, e) = self.pooled_projection(&t.output);
        let (_, g_e) = cosine_grad(&e, text.values())?;
        let g_ln = self.weights.proj.dot(&Array1::from(g_e));
        let g_z = self.weights.ln_post.backward(&xhat, sigma, &g_ln);
        // Every token receives g_z / n through the mean; propagate through the MLP residual.
        let g_out = g_z / n;
        let g_act = block.w2.t().dot(&g_out);
        let mut g_mid = Array2::zeros(t.mid.raw_dim());
        for i in 0..t.mid.nrows() {
            let g_pre = &g_act * &t.mlp_pre.row(i).mapv(quick_gelu_grad);
            let g_norm = block.w1.t().dot(&g_pre);
            let g_ln2 = block.ln2.backward(&t.ln2_xhat.row(i).to_owned(), t.ln2_sigma[i], &g_norm);
            g_mid.row_mut(i).assign(&(&g_out + &g_ln2));
        }
        let g_o = g_mid.dot(&block.wo);
        let heads = self.cfg.heads;
        let mut g_attn = Array3::zeros(t.attn.raw_dim());
        for hd in 0..heads {
            let g = self.split_heads(&g_o, hd).dot(&self.split_heads(&t.v, hd).t());
            g_attn.index_axis_mut(Axis(0), hd).assign(&g);
        }
        Ok(g_attn)
    }

    fn surgery_forward(&self, input: &Array3<f64>) -> Result<Array2<f64>> {
        let mut x = self.embed_tokens(input)?;
        let first = self.cfg.depth - self.cfg.surgery_depth;
        let heads = self.cfg.heads;
        let dh = self.cfg.width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut new_path: Option<Array2<f64>> = None;
        for (l, block) in self.weights.blocks.iter().enumerate() {
            if l < first {
                x = self.block_forward(block, &x, None).output;
                continue;
            }
            let h = block.ln1.forward_rows(&x);
            let q = linear(&h, &block.wq, &block.bq);
            let k = linear(&h, &block.wk, &block.bk);
            let v = linear(&h, &block.wv, &block.bv);
            let mut o_ori = Array2::zeros(x.raw_dim());
            let mut o_new = Array2::zeros(x.raw_dim());
            for hd in 0..heads {
                let (qh, kh, vh) = (self.split_heads(&q, hd), self.split_heads(&k, hd), self.split_heads(&v, hd));
                let mut a_ori = qh.dot(&kh.t()) * scale;
                softmax_rows(&mut a_ori);
                let mut a_vv = vh.dot(&vh.t()) * scale;
                softmax_rows(&mut a_vv);
                o_ori.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&a_ori.dot(&vh));
                o_new.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&a_vv.dot(&vh));
            }
            let res_ori = linear(&o_ori, &block.wo, &block.bo);
            let res_new = linear(&o_new, &block.wo, &block.bo);
            // The new path starts from the stream entering the first rewritten
            // block and skips every feed-forward.
            let base = new_path.take().unwrap_or_else(|| x.clone());
            new_path = Some(base + &res_new);
            let mid = &x + &res_ori;
            let normed = block.ln2.forward_rows(&mid);
            let act = linear(&normed, &block.w1, &block.b1).mapv(quick_gelu);
            x = &mid + &linear(&act, &block.w2, &block.b2);
        }
        Ok(new_path.unwrap_or(x))
    }
}

impl Backbone for ToyVit {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        self.text.encode(prompt)
    }

    fn tap_shape(&self, tap: &TapPoint) -> Result<(usize, usize, usize)> {
        self.resolve_tap(tap)?;
        Ok((self.cfg.width, self.cfg.grid.0, self.cfg.grid.1))
    }

    fn encode_image(&self, input: &Array3<f64>) -> Result<Embedding> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        let traces = self.run(input, None)?;
        let last = traces.last().map(|t| &t.output).ok_or(BackboneError::InvalidSpec("zero depth".into()))?;
        Embedding::new(self.class_embedding_of(last), Modality::Image)
    }

    /// Taps `blocks.{i}.attn` / `blocks.last.attn` expose the patch tokens
    /// after the attention residual of block `i`, as `(width, rows, cols)`.
    fn forward_with_activations(&self, input: &Array3<f64>, tap: &TapPoint) -> Result<(Embedding, FeatureStack)> {
        let layer = self.resolve_tap(tap)?;
        self.forward_calls.set(self.forward_calls.get() + 1);
        let traces = self.run(input, None)?;
        let emb = Embedding::new(self.class_embedding_of(&traces[traces.len() - 1].output), Modality::Image)?;
        let (gh, gw) = self.cfg.grid;
        let mid = &traces[layer].mid;
        let mut values = Array3::zeros((self.cfg.width, gh, gw));
        for ((c, y, x), v) in values.indexed_iter_mut() {
            *v = mid[[1 + y * gw + x, c]];
        }
        Ok((emb, FeatureStack::new(values, tap.clone(), self.cfg.identifier.clone())?))
    }

    fn layer_attention_gradients(
        &self,
        input: &Array3<f64>,
        text: &Embedding,
        layers: usize,
    ) -> Result<(Vec<Array3<f64>>, (usize, usize))> {
        if layers == 0 || layers > self.cfg.depth {
            return Err(BackboneError::InvalidSpec(format!(
                "cannot aggregate {layers} layers of a depth-{} model",
                self.cfg.depth
            )));
        }
        let start_layer = self.cfg.depth - layers;
        self.forward_calls.set(self.forward_calls.get() + 1);
        self.backward_calls.set(self.backward_calls.get() + 1);
        let traces = self.run(input, None)?;
        let grads = (start_layer..self.cfg.depth)
            .map(|l| self.attention_gradient(&self.weights.blocks[l], &traces[l], text))
            .collect::<Result<Vec<_>>>()?;
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(BackboneError::NonFinite("attention gradient"));
        }
        Ok((grads, self.cfg.grid))
    }

    fn surgery_tokens(&self, input: &Array3<f64>) -> Result<SurgeryTokens> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        let stream = self.surgery_forward(input)?;
        let patches = stream.slice(s![1.., ..]).to_owned();
        let normed = self.weights.ln_post.forward_rows(&patches);
        Ok(SurgeryTokens { grid: self.cfg.grid, tokens: normed.dot(&self.weights.proj) })
    }
}

impl ToyVit {
    fn resolve_tap(&self, tap: &TapPoint) -> Result<usize> {
        let unknown = || BackboneError::UnknownTap { backbone: self.cfg.identifier.clone(), tap: tap.to_string() };
        let rest = tap.as_str().strip_prefix("blocks.").and_then(|r| r.strip_suffix(".attn")).ok_or_else(unknown)?;
        let layer = if rest == "last" { self.cfg.depth.checked_sub(1).ok_or_else(unknown)? } else { rest.parse().map_err(|_| unknown())? };
        if layer >= self.cfg.depth {
            return Err(unknown());
        }
        Ok(layer)
    }
}
