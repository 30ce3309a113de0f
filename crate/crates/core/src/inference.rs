//! Multi-step synthesis: iterate the generator over its sampling steps,
//! re-noising the carried prediction between steps.
//!
//! Inference touches only the source image and the trained parameters — no
//! target image, no prior mask. With zero transition noise the whole chain is
//! a pure function of (source, parameters), which the determinism tests pin.

use crate::autodiff::{Graph, ParamStore};
use crate::bridge::inference_transition;
use crate::dtype::Scalar;
use crate::models::{image_to_nchw, nchw_to_image, Models};
use crate::nn::Fwd;
use crate::rng::{stream, SeedRng};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Synthesis-time settings; defaults mirror the training bridge schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Generator evaluations per slice.
    pub nfe: usize,
    /// Variance of the noise injected between steps.
    pub tau: f64,
    /// Seed for the per-slice noise streams.
    pub seed: u64,
    /// Slices scheduled together (plumbing for batched backends; slices are
    /// still synthesized one at a time here).
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { nfe: 5, tau: 0.01, seed: 0, batch: 1 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Sampling settings embedded in a resolved run-config JSON blob
    /// (checkpoints carry one); defaults when the section is absent.
    pub fn from_run_json(json: &serde_json::Value) -> Result<Self> {
        match json.get("inference") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("bad inference settings: {e}"))),
            None => Ok(InferenceConfig::default()),
        }
    }
}

/// Independent noise stream for slice `index` under `seed`.
pub fn slice_rng(seed: u64, index: usize) -> SeedRng {
    SeedRng::derive(seed, stream::INFERENCE, &[index as u64])
}

fn draw_z<S: Scalar>(dim: usize, rng: &mut SeedRng) -> ArrayD<S> {
    ArrayD::from_shape_fn(IxDyn(&[1, dim]), |_| S::standard_normal(rng))
}

/// Translate one source slice. Runs exactly `nfe` generator forwards at step
/// indices 0..nfe, carrying the prediction through the noising transition,
/// and returns the final prediction (never a noised state).
pub fn synthesize<S: Scalar>(
    source: &Array2<S>,
    models: &Models,
    store: &ParamStore<S>,
    canvas: usize,
    cfg: &InferenceConfig,
    rng: &mut SeedRng,
) -> Result<Array2<S>> {
    cfg.validate()?;
    let (h, w) = source.dim();
    if h != canvas || w != canvas {
        return Err(Error::dim("synthesis input", format!("{canvas}x{canvas}"), format!("{h}x{w}")));
    }
    let mut x = source.clone();
    let mut x_hat = source.clone();
    for i in 0..cfg.nfe {
        let z = draw_z::<S>(models.generator.z_dim(), rng);
        let mut g = Graph::new();
        let mut fwd = Fwd::frozen(&mut g, store);
        let input = fwd.graph.leaf(image_to_nchw(&x));
        let (out, _taps) = models.generator.forward(&mut fwd, input, i, &z)?;
        x_hat = nchw_to_image(fwd.graph.value(out))?;
        if i + 1 < cfg.nfe {
            x = inference_transition(&x_hat, cfg.tau, rng);
        }
    }
    Ok(x_hat)
}

/// Translate a stack of slices, each under its own derived noise stream, in
/// input order. Per-slice failures carry the offending index.
pub fn synthesize_stack<S: Scalar>(
    sources: &[Array2<S>],
    models: &Models,
    store: &ParamStore<S>,
    canvas: usize,
    cfg: &InferenceConfig,
) -> Result<Vec<Array2<S>>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let mut rng = slice_rng(cfg.seed, i);
        let y = synthesize(src, models, store, canvas, cfg, &mut rng)
            .map_err(|e| Error::Data(format!("slice {i}: {e}")))?;
        out.push(y);
    }
    Ok(out)
}
