//! Seeded synthetic residual-family backbone.
//!
//! Architecture (all weights frozen, drawn from a seeded generator):
//!
//! ```text
//! input (3, R, R)
//!   -> average pool to (3, 2H, 2W)
//!   -> stage 3: relu(W3 · p + b3)                       (C3, 2H, 2W)   tap layer3.last.relu3
//!   -> 2x2 average pool                                  (C3, H, W)
//!   -> stage 4: relu(a·q[s1(c)] + a'·q[s2(c)] + b4)      (C, H, W)      tap layer4.last.relu3
//!   -> spatial mean, projection Wp                       (D)
//! ```
//!
//! The surgery forward replaces the pooling head with value-value attention
//! over the stage-4 tokens (normalized keys, sharpened temperature), with the
//! value and output projections folded into `Wp`.

use std::cell::Cell;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    check_resolution, cosine_grad, BackboneError, BackboneSpec, Embedding, FeatureStack, Family, HashTextEncoder,
    Modality, Result, ScoreKind, SurgeryTokens, TapGradient, TapPoint,
};
use crate::backbone::Backbone;

pub const LAYER4_TAP: &str = "layer4.last.relu3";
pub const LAYER3_TAP: &str = "layer3.last.relu3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticResNetConfig {
    pub identifier: String,
    pub input_resolution: usize,
    /// Stage-4 grid `(H, W)`; stage 3 runs at twice this resolution.
    pub grid: (usize, usize),
    pub stage3_channels: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl SyntheticResNetConfig {
    /// Tap geometry of CLIP's RN50x16: 3072 channels on a 12x12 grid at 384 px.
    pub fn rn50x16() -> Self {
        SyntheticResNetConfig {
            identifier: "synthetic-rn50x16".into(),
            input_resolution: 384,
            grid: (12, 12),
            stage3_channels: 64,
            channels: 3072,
            embed_dim: 64,
            seed: 0,
        }
    }

    pub fn small(seed: u64) -> Self {
        SyntheticResNetConfig {
            identifier: "synthetic-rn-small".into(),
            input_resolution: 32,
            grid: (4, 4),
            stage3_channels: 6,
            channels: 12,
            embed_dim: 8,
            seed,
        }
    }
}

#[derive(Debug)]
pub struct SyntheticResNet {
    spec: BackboneSpec,
    cfg: SyntheticResNetConfig,
    text: HashTextEncoder,
    w3: Array2<f64>,
    b3: Array1<f64>,
    a1: Array1<f64>,
    a2: Array1<f64>,
    src1: Vec<usize>,
    src2: Vec<usize>,
    b4: Array1<f64>,
    proj: Array2<f64>,
    forward_calls: Cell<usize>,
    backward_calls: Cell<usize>,
}

struct Trace {
    layer3: Array3<f64>,
    layer4: Array3<f64>,
    embedding: Vec<f64>,
}

impl SyntheticResNet {
    pub fn new(cfg: SyntheticResNetConfig) -> Result<Self> {
        let (h, w) = cfg.grid;
        if h == 0 || w == 0 || !cfg.input_resolution.is_multiple_of(2 * h) || !cfg.input_resolution.is_multiple_of(2 * w) {
            return Err(BackboneError::InvalidSpec(format!(
                "input resolution {} is not a multiple of twice the grid {:?}",
                cfg.input_resolution, cfg.grid
            )));
        }
        if cfg.channels == 0 || cfg.stage3_channels == 0 || cfg.embed_dim == 0 {
            return Err(BackboneError::InvalidSpec("zero-sized layer".into()));
        }
        let spec = BackboneSpec::with_tap(
            Family::ConvolutionalResidual,
            cfg.identifier.clone(),
            cfg.input_resolution,
            TapPoint::new(LAYER4_TAP),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let mut draw = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| unit.sample(&mut rng) * scale).collect() };
        let c3 = cfg.stage3_channels;
        let c = cfg.channels;
        let w3 = Array2::from_shape_vec((c3, 3), draw(c3 * 3, 1.0)).expect("shape");
        let b3 = Array1::from(draw(c3, 0.5));
        let a1 = Array1::from(draw(c, 1.0));
        let a2 = Array1::from(draw(c, 0.5));
        let b4 = Array1::from(draw(c, 0.25));
        let proj = Array2::from_shape_vec((cfg.embed_dim, c), draw(cfg.embed_dim * c, 1.0 / (c as f64).sqrt()))
            .expect("shape");
        let src1 = (0..c).map(|i| i % c3).collect();
        let src2 = (0..c).map(|i| (i / c3 + i + 1) % c3).collect();
        Ok(SyntheticResNet {
            spec,
            text: HashTextEncoder::new(cfg.embed_dim, cfg.seed ^ 0x7e57),
            cfg,
            w3,
            b3,
            a1,
            a2,
            src1,
            src2,
            b4,
            proj,
            forward_calls: Cell::new(0),
            backward_calls: Cell::new(0),
        })
    }

    pub fn config(&self) -> &SyntheticResNetConfig {
        &self.cfg
    }

    /// Full forward and backward passes executed so far.
    pub fn invocations(&self) -> (usize, usize) {
        (self.forward_calls.get(), self.backward_calls.get())
    }

    fn pooled(&self, input: &Array3<f64>) -> Array3<f64> {
        let (h, w) = self.cfg.grid;
        let (ph, pw) = (2 * h, 2 * w);
        let r = self.cfg.input_resolution;
        let (sy, sx) = (r / ph, r / pw);
        let mut out = Array3::zeros((3, ph, pw));
        let norm = 1.0 / (sy * sx) as f64;
        for c in 0..3 {
            let plane = input.index_axis(Axis(0), c);
            for (y, row) in plane.outer_iter().enumerate() {
                let py = y / sy;
                for (x, &v) in row.iter().enumerate() {
                    out[[c, py, x / sx]] += v * norm;
                }
            }
        }
        out
    }

    fn layer3(&self, pooled: &Array3<f64>) -> Array3<f64> {
        let (_, ph, pw) = pooled.dim();
        let flat = pooled.view().into_shape_with_order((3, ph * pw)).expect("contiguous");
        let mut pre = self.w3.dot(&flat);
        for (mut row, &b) in pre.outer_iter_mut().zip(self.b3.iter()) {
            row.mapv_inplace(|v| (v + b).max(0.0));
        }
        pre.into_shape_with_order((self.cfg.stage3_channels, ph, pw)).expect("shape")
    }

    fn downsample(layer3: &Array3<f64>) -> Array3<f64> {
        let (c, ph, pw) = layer3.dim();
        let mut q = Array3::zeros((c, ph / 2, pw / 2));
        for ((k, y, x), &v) in layer3.indexed_iter() {
            q[[k, y / 2, x / 2]] += 0.25 * v;
        }
        q
    }

    fn layer4(&self, q: &Array3<f64>) -> Array3<f64> {
        let (h, w) = self.cfg.grid;
        let mut out = Array3::zeros((self.cfg.channels, h, w));
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            let s1 = q.index_axis(Axis(0), self.src1[c]);
            let s2 = q.index_axis(Axis(0), self.src2[c]);
            let (a1, a2, b) = (self.a1[c], self.a2[c], self.b4[c]);
            ndarray::Zip::from(&mut plane)
                .and(&s1)
                .and(&s2)
                .for_each(|o, &u, &v| *o = (a1 * u + a2 * v + b).max(0.0));
        }
        out
    }

    fn head(&self, layer4: &Array3<f64>) -> Vec<f64> {
        let (c, h, w) = layer4.dim();
        let pooled = layer4
            .view()
            .into_shape_with_order((c, h * w))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("non-empty grid");
        self.proj.dot(&pooled).to_vec()
    }

    fn trace(&self, input: &Array3<f64>) -> Result<Trace> {
        check_resolution(input, self.cfg.input_resolution)?;
        let layer3 = self.layer3(&self.pooled(input));
        let layer4 = self.layer4(&Self::downsample(&layer3));
        let embedding = self.head(&layer4);
        Ok(Trace { layer3, layer4, embedding })
    }

    /// Score as a function of stage-4 activations, for gradient checks.
    pub fn score_from_layer4(&self, layer4: &Array3<f64>, text: &Embedding) -> Result<f64> {
        super::cosine(&self.head(layer4), text.values())
    }

    fn resolve(&self, tap: &TapPoint) -> Result<bool> {
        match tap.as_str() {
            LAYER4_TAP => Ok(true),
            LAYER3_TAP => Ok(false),
            _ => Err(BackboneError::UnknownTap { backbone: self.cfg.identifier.clone(), tap: tap.to_string() }),
        }
    }

    fn stack(&self, values: Array3<f64>, tap: &TapPoint) -> Result<FeatureStack> {
        FeatureStack::new(values, tap.clone(), self.cfg.identifier.clone())
    }
}

impl Backbone for SyntheticResNet {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        self.text.encode(prompt)
    }

    fn tap_shape(&self, tap: &TapPoint) -> Result<(usize, usize, usize)> {
        let (h, w) = self.cfg.grid;
        Ok(if self.resolve(tap)? {
            (self.cfg.channels, h, w)
        } else {
            (self.cfg.stage3_channels, 2 * h, 2 * w)
        })
    }

    fn encode_image(&self, input: &Array3<f64>) -> Result<Embedding> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        Embedding::new(self.trace(input)?.embedding, Modality::Image)
    }

    fn forward_with_activations(&self, input: &Array3<f64>, tap: &TapPoint) -> Result<(Embedding, FeatureStack)> {
        let is_layer4 = self.resolve(tap)?;
        self.forward_calls.set(self.forward_calls.get() + 1);
        let t = self.trace(input)?;
        let acts = if is_layer4 { t.layer4 } else { t.layer3 };
        Ok((Embedding::new(t.embedding, Modality::Image)?, self.stack(acts, tap)?))
    }

    fn capture_activations(&self, input: &Array3<f64>, tap: &TapPoint) -> Result<FeatureStack> {
        let is_layer4 = self.resolve(tap)?;
        check_resolution(input, self.cfg.input_resolution)?;
        let layer3 = self.layer3(&self.pooled(input));
        let acts = if is_layer4 { self.layer4(&Self::downsample(&layer3)) } else { layer3 };
        self.stack(acts, tap)
    }

    fn activations_and_gradients(
        &self,
        input: &Array3<f64>,
        text: &Embedding,
        taps: &[TapPoint],
        score: ScoreKind,
    ) -> Result<Vec<TapGradient>> {
        let which = taps.iter().map(|t| self.resolve(t)).collect::<Result<Vec<_>>>()?;
        self.forward_calls.set(self.forward_calls.get() + 1);
        self.backward_calls.set(self.backward_calls.get() + 1);
        let t = self.trace(input)?;
        let (cos, g_embed) = cosine_grad(&t.embedding, text.values())?;
        let scale = score.scale();
        let (c, h, w) = t.layer4.dim();
        let g_feat = self.proj.t().dot(&Array1::from(g_embed)) * (scale / (h * w) as f64);
        let mut g4 = Array3::<f64>::zeros((c, h, w));
        for ((k, _, _), g) in g4.indexed_iter_mut() {
            *g = g_feat[k];
        }
        // Back through stage 4 and the 2x2 pool into stage 3.
        let mut g_q = Array3::<f64>::zeros((self.cfg.stage3_channels, h, w));
        for ((k, y, x), &g) in g4.indexed_iter() {
            if t.layer4[[k, y, x]] > 0.0 {
                g_q[[self.src1[k], y, x]] += self.a1[k] * g;
                g_q[[self.src2[k], y, x]] += self.a2[k] * g;
            }
        }
        let mut g3 = Array3::<f64>::zeros(t.layer3.dim());
        for ((k, y, x), g) in g3.indexed_iter_mut() {
            *g = 0.25 * g_q[[k, y / 2, x / 2]];
        }
        taps.iter()
            .zip(which)
            .map(|(tap, is_layer4)| {
                let (acts, grads) = if is_layer4 { (&t.layer4, &g4) } else { (&t.layer3, &g3) };
                Ok(TapGradient {
                    activations: self.stack(acts.clone(), tap)?,
                    gradients: self.stack(grads.clone(), tap)?,
                    score: scale * cos,
                })
            })
            .collect()
    }

    fn surgery_tokens(&self, input: &Array3<f64>) -> Result<SurgeryTokens> {
        self.forward_calls.set(self.forward_calls.get() + 1);
        let t = self.trace(input)?;
        let (c, h, w) = t.layer4.dim();
        let tokens = t.layer4.into_shape_with_order((c, h * w)).expect("contiguous");
        let values = self.proj.dot(&tokens).reversed_axes(); // (HW, D)
        let temperature = 8.0 / (self.cfg.embed_dim as f64).sqrt();
        Ok(SurgeryTokens { grid: (h, w), tokens: value_value_attention(&values, temperature, true) })
    }
}

/// `softmax(t · k kᵀ) v` with `k = q = v` (optionally L2-normalized keys).
pub(crate) fn value_value_attention(values: &Array2<f64>, temperature: f64, normalize_keys: bool) -> Array2<f64> {
    let keys = if normalize_keys {
        let mut k = values.clone();
        for mut row in k.outer_iter_mut() {
            let n = row.dot(&row).sqrt() + 1e-6;
            row /= n;
        }
        k
    } else {
        values.clone()
    };
    let mut logits = keys.dot(&keys.t()) * temperature;
    super::vit::softmax_rows(&mut logits);
    logits.dot(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::grad_of_score;

    fn input(cfg: &SyntheticResNetConfig, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let r = cfg.input_resolution;
        Array3::from_shape_fn((3, r, r), |_| n.sample(&mut rng))
    }

    #[test]
    fn rn50x16_tap_has_3072_channels() {
        let net = SyntheticResNet::new(SyntheticResNetConfig::rn50x16()).unwrap();
        assert_eq!(net.tap_shape(&net.spec().tap_point).unwrap(), (3072, 12, 12));
    }

    #[test]
    fn capture_does_not_change_embedding() {
        let cfg = SyntheticResNetConfig::small(3);
        let net = SyntheticResNet::new(cfg.clone()).unwrap();
        let x = input(&cfg, 1);
        let plain = net.encode_image(&x).unwrap();
        let (with, acts) = net.forward_with_activations(&x, &TapPoint::new(LAYER4_TAP)).unwrap();
        assert_eq!(plain.values(), with.values());
        assert_eq!(acts.shape(), (12, 4, 4));
    }

    #[test]
    fn unknown_tap_and_bad_resolution() {
        let cfg = SyntheticResNetConfig::small(0);
        let net = SyntheticResNet::new(cfg.clone()).unwrap();
        let x = input(&cfg, 1);
        assert!(matches!(
            net.forward_with_activations(&x, &TapPoint::new("layer9")),
            Err(BackboneError::UnknownTap { .. })
        ));
        let small = Array3::zeros((3, 16, 16));
        assert!(matches!(net.encode_image(&small), Err(BackboneError::ResolutionMismatch { .. })));
    }

    #[test]
    fn layer4_gradient_matches_central_differences() {
        let cfg = SyntheticResNetConfig::small(11);
        let net = SyntheticResNet::new(cfg.clone()).unwrap();
        let x = input(&cfg, 5);
        let tap = TapPoint::new(LAYER4_TAP);
        let text = net.encode_text("a painting of a snake").unwrap();
        let grads = grad_of_score(&net, &x, "a painting of a snake", &tap, ScoreKind::Cosine).unwrap();
        let acts = net.capture_activations(&x, &tap).unwrap();
        let h = 1e-6;
        for ((k, y, xx), &g) in grads.values().indexed_iter() {
            let mut plus = acts.values().clone();
            let mut minus = acts.values().clone();
            plus[[k, y, xx]] += h;
            minus[[k, y, xx]] -= h;
            let fd = (net.score_from_layer4(&plus, &text).unwrap() - net.score_from_layer4(&minus, &text).unwrap())
                / (2.0 * h);
            let rel = (fd - g).abs() / g.abs().max(1e-6);
            assert!(rel < 1e-4, "({k},{y},{xx}): fd {fd} analytic {g}");
        }
    }

    #[test]
    fn layer3_gradient_matches_central_differences() {
        let cfg = SyntheticResNetConfig::small(2);
        let net = SyntheticResNet::new(cfg.clone()).unwrap();
        let x = input(&cfg, 9);
        let tap3 = TapPoint::new(LAYER3_TAP);
        let text = net.encode_text("bridge").unwrap();
        let tg = net.activations_and_gradients(&x, &text, &[tap3], ScoreKind::Cosine).unwrap();
        let l3 = tg[0].activations.values().clone();
        let score = |l3: &Array3<f64>| {
            let l4 = net.layer4(&SyntheticResNet::downsample(l3));
            net.score_from_layer4(&l4, &text).unwrap()
        };
        let h = 1e-6;
        for ((k, y, xx), &g) in tg[0].gradients.values().indexed_iter() {
            let mut p = l3.clone();
            let mut m = l3.clone();
            p[[k, y, xx]] += h;
            m[[k, y, xx]] -= h;
            let fd = (score(&p) - score(&m)) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-6) + 1e-9, "fd {fd} analytic {g}");
        }
    }

    #[test]
    fn logit_score_scales_gradient() {
        let cfg = SyntheticResNetConfig::small(4);
        let net = SyntheticResNet::new(cfg.clone()).unwrap();
        let x = input(&cfg, 2);
        let tap = TapPoint::new(LAYER4_TAP);
        let g1 = grad_of_score(&net, &x, "angel", &tap, ScoreKind::Cosine).unwrap();
        let g100 = grad_of_score(&net, &x, "angel", &tap, ScoreKind::Logit { scale: 100.0 }).unwrap();
        for (a, b) in g1.values().iter().zip(g100.values()) {
            assert!((100.0 * a - b).abs() < 1e-9);
        }
    }
}
