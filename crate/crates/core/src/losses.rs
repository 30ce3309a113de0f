//! Objective terms: reconstruction, patch contrastive (uniform and
//! prior-weighted), context preservation, least-squares adversarial with
//! self-supervised decoder reconstruction, and the Donsker–Varadhan mutual
//! information pair.
//!
//! Every function builds onto a caller-supplied graph and returns the node of
//! a differentiable scalar; aggregation into a weighted total happens in
//! [`LossReport`]. Prior-guided location sampling runs through the same
//! weighted-reservoir path as uniform sampling, so an absent mask reproduces
//! the uniform draw bit for bit.

use crate::autodiff::{Graph, NodeId};
use crate::dtype::Scalar;
use crate::models::{CropBox, Critic, Discriminator, Generator, Projector, PATCH_TAP_COUNT};
use crate::nn::Fwd;
use crate::rng::SeedRng;
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Softmax temperature of the patch contrastive loss.
pub const NCE_TEMPERATURE: f64 = 0.07;

/// Default number of sampled patch locations per tapped depth.
pub const NCE_LOCATIONS: usize = 256;

/// Weight floor that keeps zero-density cells drawable once every positive
/// cell has been selected.
const WEIGHT_FLOOR: f64 = 1e-9;

// ── Weights and reporting ──────────────────────────────────────────────────

/// Multipliers of the generator objective; the adversarial term is fixed at 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_reg: f64,
    pub lambda_cpl: f64,
    pub lambda_wreg: f64,
    pub lambda_idt: f64,
    pub lambda_sb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 100.0,
            lambda_reg: 1.0,
            lambda_cpl: 10.0,
            lambda_wreg: 1.0,
            lambda_idt: 1.0,
            lambda_sb: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_reg", self.lambda_reg),
            ("lambda_cpl", self.lambda_cpl),
            ("lambda_wreg", self.lambda_wreg),
            ("lambda_idt", self.lambda_idt),
            ("lambda_sb", self.lambda_sb),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a nonnegative float, got {v}")));
            }
        }
        Ok(())
    }
}

/// Named raw term values plus their weighted sum.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a raw term value; the total accumulates `weight * value`.
    pub fn push(&mut self, name: &str, value: f64, weight: f64) {
        self.terms.insert(name.to_string(), value);
        self.total += weight * value;
    }

    /// First non-finite entry (term name), if any; the total is also checked.
    pub fn non_finite_term(&self) -> Option<&str> {
        for (name, v) in &self.terms {
            if !v.is_finite() {
                return Some(name);
            }
        }
        if !self.total.is_finite() {
            return Some("total");
        }
        None
    }
}

// ── Pixel losses ───────────────────────────────────────────────────────────

/// Mean absolute error.
pub fn loss_rec<S: Scalar>(g: &mut Graph<S>, x_hat: NodeId, x_b: NodeId) -> NodeId {
    let d = g.sub(x_hat, x_b);
    let a = g.abs(d);
    g.mean(a)
}

/// Context preservation: mean of mask ⊙ (x_hat − x_B)². The mask enters as a
/// constant, so pixels outside its support contribute an exact zero and the
/// value is bit-invariant to anything that happens there.
pub fn loss_cpl<S: Scalar>(
    g: &mut Graph<S>,
    x_hat: NodeId,
    x_b: NodeId,
    mask: &ArrayD<S>,
) -> NodeId {
    let d = g.sub(x_hat, x_b);
    let sq = g.square(d);
    let masked = g.mul_mask(sq, mask.clone());
    g.mean(masked)
}

// ── Adversarial (least squares) ────────────────────────────────────────────

/// Generator side: mean over the patch map of (D(x_hat) − 1)².
pub fn loss_adv_generator<S: Scalar>(g: &mut Graph<S>, score_fake: NodeId) -> NodeId {
    let ones = g.leaf(ArrayD::from_elem(g.value(score_fake).raw_dim(), S::one()));
    let d = g.sub(score_fake, ones);
    let sq = g.square(d);
    g.mean(sq)
}

/// Per-term breakdown of the self-supervised discriminator objective.
pub struct SslDiscLoss {
    pub adv_fake: NodeId,
    pub adv_real: NodeId,
    pub dec_resize: Option<NodeId>,
    pub dec_crop: Option<NodeId>,
    pub total: NodeId,
}

/// Discriminator side: least-squares real/fake terms plus decoder
/// reconstructions of the *real* image (half-resolution resize and the crop
/// under `crop`). The prediction enters as a constant — no gradient reaches
/// the generator.
pub fn loss_adv_discriminator<S: Scalar>(
    fwd: &mut Fwd<S>,
    disc: &Discriminator,
    x_hat_detached: &ArrayD<S>,
    x_b: &ArrayD<S>,
    t: usize,
    crop: &CropBox,
) -> Result<SslDiscLoss> {
    let canvas = x_b.shape()[2];
    let fake = fwd.graph.leaf(x_hat_detached.clone());
    let fake_out = disc.forward(fwd, fake, t);
    let fake_sq = fwd.graph.square(fake_out.score);
    let adv_fake = fwd.graph.mean(fake_sq);

    let real = fwd.graph.leaf(x_b.clone());
    let real_out = disc.forward(fwd, real, t);
    let ones = fwd
        .graph
        .leaf(ArrayD::from_elem(fwd.graph.value(real_out.score).raw_dim(), S::one()));
    let real_d = fwd.graph.sub(real_out.score, ones);
    let real_sq = fwd.graph.square(real_d);
    let adv_real = fwd.graph.mean(real_sq);

    let mut total = fwd.graph.add(adv_fake, adv_real);
    let (dec_resize, dec_crop) = if disc.has_decoders() {
        let target_half = fwd.graph.leaf(half_downsample(x_b));
        let recon_half = disc.decode_resize(fwd, &real_out);
        let dh = fwd.graph.sub(recon_half, target_half);
        let dh = fwd.graph.square(dh);
        let dec_resize = fwd.graph.mean(dh);

        let target_crop = fwd.graph.leaf(crop_image(x_b, crop)?);
        let recon_crop = disc.decode_crop(fwd, &real_out, crop, canvas)?;
        let dc = fwd.graph.sub(recon_crop, target_crop);
        let dc = fwd.graph.square(dc);
        let dec_crop = fwd.graph.mean(dc);

        total = fwd.graph.add(total, dec_resize);
        total = fwd.graph.add(total, dec_crop);
        (Some(dec_resize), Some(dec_crop))
    } else {
        (None, None)
    };
    Ok(SslDiscLoss { adv_fake, adv_real, dec_resize, dec_crop, total })
}

/// 2x2 box-mean downsample (exact half-scale bilinear resample) of an
/// (N,C,H,W) image with even spatial dims.
pub fn half_downsample<S: Scalar>(img: &ArrayD<S>) -> ArrayD<S> {
    let s = img.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "half_downsample needs even dims");
    let quarter = S::from_f64(0.25);
    ArrayD::from_shape_fn(IxDyn(&[n, c, h / 2, w / 2]), |ix| {
        let (b, ch, y, x) = (ix[0], ix[1], ix[2], ix[3]);
        (img[[b, ch, 2 * y, 2 * x]]
            + img[[b, ch, 2 * y, 2 * x + 1]]
            + img[[b, ch, 2 * y + 1, 2 * x]]
            + img[[b, ch, 2 * y + 1, 2 * x + 1]])
            * quarter
    })
}

/// Extract the crop-box region of an (N,C,H,W) image.
pub fn crop_image<S: Scalar>(img: &ArrayD<S>, crop: &CropBox) -> Result<ArrayD<S>> {
    let s = img.shape();
    if crop.y0 + crop.size > s[2] || crop.x0 + crop.size > s[3] {
        return Err(Error::Config(format!(
            "crop {}@({}, {}) outside {}x{} image",
            crop.size, crop.y0, crop.x0, s[2], s[3]
        )));
    }
    Ok(img
        .slice(ndarray::s![
            ..,
            ..,
            crop.y0..crop.y0 + crop.size,
            crop.x0..crop.x0 + crop.size
        ]
        .as_ref())
        .to_owned())
}

// ── Patch contrastive ──────────────────────────────────────────────────────

/// Density-proportional sampling weights over a feature grid, pooled from a
/// canvas-resolution binary mask. `None` or an all-zero mask yields exact
/// unit weights (the uniform fallback).
pub fn nce_location_weights(
    mask: Option<&Array2<u8>>,
    stride: usize,
    grid_h: usize,
    grid_w: usize,
) -> Vec<f64> {
    let uniform = vec![1.0; grid_h * grid_w];
    let Some(mask) = mask else { return uniform };
    if mask.iter().all(|&v| v == 0) {
        return uniform;
    }
    let cell = (stride * stride) as f64;
    let mut weights = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut sum = 0.0;
            for dy in 0..stride {
                for dx in 0..stride {
                    sum += mask[[gy * stride + dy, gx * stride + dx]] as f64;
                }
            }
            weights.push(sum / cell + WEIGHT_FLOOR);
        }
    }
    weights
}

/// Draw distinct grid locations, with probability proportional to `weights`
/// (unit weights = uniform). The count is clamped to the grid size; fewer
/// than two locations is an error (no negatives to contrast against).
pub fn sample_nce_locations(
    rng: &mut SeedRng,
    grid_h: usize,
    grid_w: usize,
    count: usize,
    weights: Option<&[f64]>,
) -> Result<Vec<(usize, usize)>> {
    let n = grid_h * grid_w;
    let count = count.min(n);
    if count < 2 {
        return Err(Error::Config(format!(
            "patch sampling needs at least 2 locations, got {count} on a {grid_h}x{grid_w} grid"
        )));
    }
    let uniform = vec![1.0; n];
    let w = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::dim("location weights", n, w.len()));
            }
            w
        }
        None => &uniform,
    };
    let picked = rng.weighted_indices(w, count);
    Ok(picked.into_iter().map(|i| (i / grid_w, i % grid_w)).collect())
}

/// Patch contrastive loss over the four tapped depths: queries gathered from
/// `query_taps`, positives/negatives from `key_taps` at the same locations,
/// projected to unit-norm embeddings, InfoNCE with in-image negatives,
/// averaged over taps.
pub fn loss_patchnce<S: Scalar>(
    fwd: &mut Fwd<S>,
    projector: &Projector,
    query_taps: &[NodeId],
    key_taps: &[NodeId],
    locations: &[Vec<(usize, usize)>],
) -> Result<NodeId> {
    if query_taps.len() != PATCH_TAP_COUNT
        || key_taps.len() != PATCH_TAP_COUNT
        || locations.len() != PATCH_TAP_COUNT
    {
        return Err(Error::dim("contrastive tap count", PATCH_TAP_COUNT, query_taps.len()));
    }
    let mut acc: Option<NodeId> = None;
    for tap in 0..PATCH_TAP_COUNT {
        if locations[tap].len() < 2 {
            return Err(Error::Config(format!(
                "tap {tap}: need at least 2 patch locations, got {}",
                locations[tap].len()
            )));
        }
        let q_raw = fwd.graph.gather_spatial(query_taps[tap], &locations[tap])?;
        let q = projector.apply(fwd, q_raw, tap);
        let k_raw = fwd.graph.gather_spatial(key_taps[tap], &locations[tap])?;
        let k = projector.apply(fwd, k_raw, tap);
        let logits = fwd.graph.matmul_nt(q, k, 1.0 / NCE_TEMPERATURE);
        let term = fwd.graph.info_nce_rows(logits);
        acc = Some(match acc {
            Some(prev) => fwd.graph.add(prev, term),
            None => term,
        });
    }
    let sum = acc.expect("at least one tap");
    Ok(fwd.graph.scale(sum, S::from_f64(1.0 / PATCH_TAP_COUNT as f64)))
}

// ── Identity ───────────────────────────────────────────────────────────────

/// Components of the identity objective (target image fed as input).
pub struct IdentityLoss {
    pub rec: NodeId,
    pub nce: NodeId,
}

/// Run the generation pathway with the target image as input and score how
/// well it is preserved: reconstruction plus patch contrastive terms, both
/// against that same target. Keys come from the forward pass features of the
/// input; queries from re-encoding the prediction.
pub fn loss_identity<S: Scalar>(
    fwd: &mut Fwd<S>,
    generator: &Generator,
    projector: &Projector,
    x_b: &ArrayD<S>,
    t: usize,
    z: &ArrayD<S>,
    locations: &[Vec<(usize, usize)>],
) -> Result<IdentityLoss> {
    let input = fwd.graph.leaf(x_b.clone());
    let (x_hat, key_taps) = generator.forward(fwd, input, t, z)?;
    let rec = loss_rec(fwd.graph, x_hat, input);
    let query_taps = generator.encode(fwd, x_hat, t)?;
    let nce = loss_patchnce(fwd, projector, &query_taps, &key_taps, locations)?;
    Ok(IdentityLoss { rec, nce })
}

// ── Mutual information ─────────────────────────────────────────────────────

/// Donsker–Varadhan lower-bound objective to *minimize*:
/// −( mean(joint scores) − ln mean(exp(marginal scores)) ).
pub fn dv_objective<S: Scalar>(g: &mut Graph<S>, joint: NodeId, marginal: NodeId) -> NodeId {
    let jm = g.mean(joint);
    let lme = g.log_mean_exp(marginal);
    let d = g.sub(jm, lme);
    g.scale(d, S::from_f64(-1.0))
}

/// The literal written form: −mean(joint scores). Unbounded below; kept
/// behind a flag for comparison.
pub fn dv_objective_literal<S: Scalar>(g: &mut Graph<S>, joint: NodeId) -> NodeId {
    let jm = g.mean(joint);
    g.scale(jm, S::from_f64(-1.0))
}

/// Critic-update loss. The joint pair is (x_t, x_B); marginal pairs keep x_t
/// and swap in mismatched endpoints from `negatives`. With a prior mask the
/// critic sees endpoint ⊙ mask as a third channel (the mask of the current
/// pair conditions every term). `literal` selects the written form, which
/// needs no negatives.
pub fn loss_mi_estimator<S: Scalar>(
    fwd: &mut Fwd<S>,
    critic: &Critic,
    x_t: &ArrayD<S>,
    x_b: &ArrayD<S>,
    mask: Option<&ArrayD<S>>,
    negatives: &[ArrayD<S>],
    literal: bool,
) -> Result<NodeId> {
    let with_mask = critic.in_channels() == 3;
    if with_mask && mask.is_none() {
        return Err(Error::Config("critic built with a prior channel but no mask given".into()));
    }
    let joint = {
        let xt = fwd.graph.leaf(x_t.clone());
        let xb = fwd.graph.leaf(x_b.clone());
        let mut parts = vec![xt, xb];
        if with_mask {
            let masked = fwd.graph.leaf(x_b * mask.expect("mask checked"));
            parts.push(masked);
        }
        critic.forward(fwd, &parts)?
    };
    if literal {
        return Ok(dv_objective_literal(fwd.graph, joint));
    }
    if negatives.is_empty() {
        return Err(Error::Config(
            "the contrast-form objective needs mismatched pairs; got a batch of 1".into(),
        ));
    }
    let k = negatives.len();
    let shape = x_t.shape();
    let stack = |imgs: &[ArrayD<S>]| -> ArrayD<S> {
        let mut out = ArrayD::zeros(IxDyn(&[k, shape[1], shape[2], shape[3]]));
        for (i, img) in imgs.iter().enumerate() {
            out.slice_mut(ndarray::s![i..i + 1, .., .., ..].as_ref()).assign(img);
        }
        out
    };
    let xt_rep = stack(&vec![x_t.clone(); k]);
    let negs = stack(negatives);
    let marginal = {
        let xt = fwd.graph.leaf(xt_rep);
        let xn = fwd.graph.leaf(negs.clone());
        let mut parts = vec![xt, xn];
        if with_mask {
            let m = mask.expect("mask checked");
            let mut masked = negs;
            for i in 0..k {
                let mut lane = masked.slice_mut(ndarray::s![i..i + 1, .., .., ..].as_ref());
                let copy = lane.to_owned() * m;
                lane.assign(&copy);
            }
            parts.push(fwd.graph.leaf(masked));
        }
        critic.forward(fwd, &parts)?
    };
    Ok(dv_objective(fwd.graph, joint, marginal))
}

/// Generator-update term: −mean E(x_t, x_hat[, x_hat ⊙ mask]) with the
/// critic's parameters as constants (`fwd` must be a frozen context), so the
/// gradient reaches only the generator through x_hat.
pub fn loss_mi_generator<S: Scalar>(
    fwd: &mut Fwd<S>,
    critic: &Critic,
    x_t: &ArrayD<S>,
    x_hat: NodeId,
    mask: Option<&ArrayD<S>>,
) -> Result<NodeId> {
    let with_mask = critic.in_channels() == 3;
    if with_mask && mask.is_none() {
        return Err(Error::Config("critic built with a prior channel but no mask given".into()));
    }
    let xt = fwd.graph.leaf(x_t.clone());
    let mut parts = vec![xt, x_hat];
    if with_mask {
        let masked = fwd.graph.mul_mask(x_hat, mask.expect("mask checked").clone());
        parts.push(masked);
    }
    let joint = critic.forward(fwd, &parts)?;
    Ok(dv_objective_literal(fwd.graph, joint))
}
