//! Hand-specified fixture backbones with analytically known outputs.

use std::cell::Cell;

use ndarray::{Array3, Axis};

use super::{
    Backbone, BackboneError, BackboneSpec, Embedding, FeatureStack, Family, Modality, Result, ScoreKind, TapGradient,
    TapPoint,
};
use crate::raster;

pub const STUB_TAP: &str = "stub.features";

/// Text encoder that maps a prompt with `t` whitespace tokens to `(t, 0, ...)`.
#[derive(Debug, Clone)]
pub struct TokenCountEncoder {
    pub dim: usize,
}

impl TokenCountEncoder {
    pub fn encode(&self, prompt: &str) -> Result<Embedding> {
        let t = prompt.split_whitespace().count();
        if t == 0 {
            return Err(BackboneError::EmptyPrompt);
        }
        let mut v = vec![0.0; self.dim.max(1)];
        v[0] = t as f64;
        Embedding::new(v, Modality::Text)
    }
}

/// Backbone with fixed activations and fixed score gradients.
///
/// Its input is ignored apart from the shape check (the input must be the
/// size of the feature grid). The prompt embedding is always `(1, 0)`; the
/// embedding of a channel-masked input has cosine similarity with the prompt
/// equal to the mean of the surviving channel activation.
#[derive(Debug)]
pub struct FixedCamStub {
    spec: BackboneSpec,
    activations: Array3<f64>,
    gradients: Array3<f64>,
    forward_calls: Cell<usize>,
    backward_calls: Cell<usize>,
}

impl FixedCamStub {
    pub fn new(activations: Array3<f64>, gradients: Array3<f64>) -> Result<Self> {
        if activations.dim() != gradients.dim() {
            return Err(BackboneError::InvalidSpec("activation and gradient shapes differ".into()));
        }
        let (_, h, w) = activations.dim();
        if h != w {
            return Err(BackboneError::InvalidSpec("stub grid must be square".into()));
        }
        let spec = BackboneSpec::with_tap(Family::ConvolutionalResidual, "fixed-cam-stub", h, TapPoint::new(STUB_TAP))?;
        Ok(FixedCamStub {
            spec,
            activations,
            gradients,
            forward_calls: Cell::new(0),
            backward_calls: Cell::new(0),
        })
    }

    /// Input tensor of the right size for this stub.
    pub fn input(&self) -> Array3<f64> {
        let (_, h, w) = self.activations.dim();
        Array3::ones((3, h, w))
    }

    pub fn invocations(&self) -> (usize, usize) {
        (self.forward_calls.get(), self.backward_calls.get())
    }

    fn check(&self, tap: &TapPoint) -> Result<()> {
        if tap.as_str() != STUB_TAP {
            return Err(BackboneError::UnknownTap { backbone: self.spec.identifier.clone(), tap: tap.to_string() });
        }
        Ok(())
    }

    fn stack(&self, values: Array3<f64>) -> Result<FeatureStack> {
        FeatureStack::new(values, TapPoint::new(STUB_TAP), self.spec.identifier.clone())
    }

    fn embedding_with_cosine(m: f64) -> Result<Embedding> {
        let m = m.clamp(-1.0, 1.0);
        Embedding::new(vec![m, (1.0 - m * m).max(0.0).sqrt()], Modality::Image)
    }
}

impl Backbone for FixedCamStub {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        if prompt.trim().is_empty() {
            return Err(BackboneError::EmptyPrompt);
        }
        Embedding::new(vec![1.0, 0.0], Modality::Text)
    }

    fn tap_shape(&self, tap: &TapPoint) -> Result<(usize, usize, usize)> {
        self.check(tap)?;
        Ok(self.activations.dim())
    }

    fn encode_image(&self, input: &Array3<f64>) -> Result<Embedding> {
        super::check_resolution(input, self.spec.input_resolution)?;
        self.forward_calls.set(self.forward_calls.get() + 1);
        let total: f64 = self.activations.sum() / self.activations.len() as f64;
        Self::embedding_with_cosine(total)
    }

    fn forward_with_activations(&self, input: &Array3<f64>, tap: &TapPoint) -> Result<(Embedding, FeatureStack)> {
        self.check(tap)?;
        let e = self.encode_image(input)?;
        Ok((e, self.stack(self.activations.clone())?))
    }

    fn capture_activations(&self, input: &Array3<f64>, tap: &TapPoint) -> Result<FeatureStack> {
        self.check(tap)?;
        super::check_resolution(input, self.spec.input_resolution)?;
        self.stack(self.activations.clone())
    }

    fn activations_and_gradients(
        &self,
        input: &Array3<f64>,
        _text: &Embedding,
        taps: &[TapPoint],
        score: ScoreKind,
    ) -> Result<Vec<TapGradient>> {
        super::check_resolution(input, self.spec.input_resolution)?;
        for tap in taps {
            self.check(tap)?;
        }
        self.forward_calls.set(self.forward_calls.get() + 1);
        self.backward_calls.set(self.backward_calls.get() + 1);
        let value = (&self.activations * &self.gradients).sum() * score.scale();
        taps.iter()
            .map(|_| {
                Ok(TapGradient {
                    activations: self.stack(self.activations.clone())?,
                    gradients: self.stack(self.gradients.mapv(|g| g * score.scale()))?,
                    score: value,
                })
            })
            .collect()
    }

    fn encode_channel_masked(&self, _input: &Array3<f64>, acts: &FeatureStack, channels: &[usize]) -> Result<Vec<Embedding>> {
        channels
            .iter()
            .map(|&c| {
                if c >= acts.channels() {
                    return Err(BackboneError::ChannelOutOfRange { index: c, channels: acts.channels() });
                }
                self.forward_calls.set(self.forward_calls.get() + 1);
                Self::embedding_with_cosine(raster::mean(acts.values().index_axis(Axis(0), c)))
            })
            .collect()
    }
}

/// Backbone whose tap activations are the input tensor itself and whose
/// score is the plain sum of activations, so the score gradient is all ones.
#[derive(Debug)]
pub struct LinearStub {
    spec: BackboneSpec,
}

impl LinearStub {
    pub fn new(side: usize) -> Result<Self> {
        Ok(LinearStub {
            spec: BackboneSpec::with_tap(Family::ConvolutionalResidual, "linear-stub", side, TapPoint::new(STUB_TAP))?,
        })
    }

    fn check(&self, tap: &TapPoint) -> Result<()> {
        if tap.as_str() != STUB_TAP {
            return Err(BackboneError::UnknownTap { backbone: self.spec.identifier.clone(), tap: tap.to_string() });
        }
        Ok(())
    }
}

impl Backbone for LinearStub {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        TokenCountEncoder { dim: 2 }.encode(prompt)
    }

    fn tap_shape(&self, tap: &TapPoint) -> Result<(usize, usize, usize)> {
        self.check(tap)?;
        Err(BackboneError::InvalidSpec("linear stub taps follow the input shape".into()))
    }

    fn encode_image(&self, input: &Array3<f64>) -> Result<Embedding> {
        super::check_resolution(input, self.spec.input_resolution)?;
        Embedding::new(vec![input.sum(), 1.0], Modality::Image)
    }

    fn forward_with_activations(&self, input: &Array3<f64>, tap: &TapPoint) -> Result<(Embedding, FeatureStack)> {
        self.check(tap)?;
        let e = self.encode_image(input)?;
        Ok((e, FeatureStack::new(input.clone(), tap.clone(), "linear-stub")?))
    }

    fn activations_and_gradients(
        &self,
        input: &Array3<f64>,
        _text: &Embedding,
        taps: &[TapPoint],
        _score: ScoreKind,
    ) -> Result<Vec<TapGradient>> {
        super::check_resolution(input, self.spec.input_resolution)?;
        taps.iter()
            .map(|tap| {
                self.check(tap)?;
                Ok(TapGradient {
                    activations: FeatureStack::new(input.clone(), tap.clone(), "linear-stub")?,
                    gradients: FeatureStack::new(Array3::ones(input.raw_dim()), tap.clone(), "linear-stub")?,
                    score: input.sum(),
                })
            })
            .collect()
    }
}
