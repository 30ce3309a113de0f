//! Training orchestration: per step, roll the bridge generation chain to a
//! sampled depth, then update discriminator, information critic, and
//! generator — in that order — with per-network optimizers, a linearly
//! decaying learning rate, ablation wiring, and bit-exact checkpoint resume.
//!
//! Determinism contract: every stochastic choice of a step flows from the
//! training stream of [`SeedRng`] in one documented order per batch item —
//! (1) flip acceptance; (2) trajectory depth T; (3) per chain step, the
//! latent draw then (below depth T, τ > 0) the transition noise; (4) the
//! decoder crop box; (5) uniform patch locations, tap order; (6) prior-
//! weighted patch locations, tap order; (7) critic negative indices;
//! (8) identity patch locations then the identity latent. Epoch shuffles come
//! from a stateless per-epoch derived stream, so restoring the training
//! stream from a checkpoint resumes the exact trajectory.

use crate::autodiff::{Adam, Graph, ParamStore};
use crate::bridge::{default_s_schedule, sample_timestep, training_transition, BridgeConfig};
use crate::dataset::{augment_hflip, LoadedDataset, SlicePair};
use crate::dtype::Scalar;
use crate::losses::{
    loss_adv_discriminator, loss_adv_generator, loss_cpl, loss_identity, loss_mi_estimator,
    loss_mi_generator, loss_patchnce, loss_rec, nce_location_weights, sample_nce_locations,
    LossReport, LossWeights, NCE_LOCATIONS,
};
use crate::models::{
    build_models, image_to_nchw, nchw_to_image, CropBox, ModelConfig, ModelParts, Models,
};
use crate::nn::Fwd;
use crate::rng::{stream, RngState, SeedRng};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

// ── Configuration ──────────────────────────────────────────────────────────

/// Component switches for ablation runs; independent unless noted.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Drop the bridge machinery entirely: single forward at depth 0,
    /// reconstruction + patch contrastive terms only (no adversary, no
    /// critic, no identity, no prior terms).
    pub no_sb: bool,
    /// Plain patch discriminator without the self-supervised decoder heads.
    pub no_ssl_d: bool,
    /// Force all transition noise variances to zero.
    pub no_noise: bool,
    /// Disable the prior-mask terms (context preservation, weighted
    /// contrastive, critic mask channel) even when masks exist.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub disable_prior: bool,
}

impl AblationFlags {
    /// Prior guidance active under these flags.
    pub fn use_prior(&self) -> bool {
        !self.disable_prior && !self.no_sb
    }
}

/// Training-loop settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs.
    pub epochs: usize,
    /// Base learning rate; zero performs null updates (debugging aid).
    pub lr: f64,
    /// Epoch at which the linear ramp to zero begins; `None` → epochs / 2.
    pub lr_decay_start: Option<usize>,
    /// Slices per optimizer step (gradient accumulation).
    pub batch: usize,
    /// Horizontal-flip augmentation probability.
    pub flip_p: f64,
    /// Master seed for initialization, shuffling, and the training stream.
    pub seed: u64,
    /// Epochs between checkpoint saves.
    pub checkpoint_every: usize,
    /// Mismatched endpoint samples per critic update (contrastive form).
    pub mi_negatives: usize,
    /// Identity terms run on steps where `global_step % idt_every == 0`;
    /// zero disables them.
    pub idt_every: usize,
    /// Use the literal (contrast-free) information objective.
    pub mi_literal: bool,
    pub weights: LossWeights,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            lr_decay_start: None,
            batch: 1,
            flip_p: 0.5,
            seed: 0,
            checkpoint_every: 10,
            mi_negatives: 4,
            idt_every: 1,
            mi_literal: false,
            weights: LossWeights::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::Config(format!("flip_p {} outside [0, 1]", self.flip_p)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if let Some(ds) = self.lr_decay_start {
            if ds >= self.epochs {
                return Err(Error::Config(format!(
                    "lr_decay_start {ds} must lie before the final epoch {}",
                    self.epochs
                )));
            }
        }
        self.weights.validate()
    }

    /// Resolved decay start: the configured epoch or the halfway point.
    pub fn decay_start(&self) -> usize {
        self.lr_decay_start.unwrap_or(self.epochs / 2)
    }
}

/// Learning rate for `epoch`: flat until the decay start, then a linear ramp
/// reaching zero at `epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside the schedule 0..{}",
            cfg.epochs
        )));
    }
    let ds = cfg.decay_start();
    if epoch < ds {
        return Ok(cfg.lr);
    }
    Ok(cfg.lr * (cfg.epochs - epoch) as f64 / (cfg.epochs - ds) as f64)
}

// ── Ablation resolution ────────────────────────────────────────────────────

/// The component set a flag combination actually trains.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveComponents {
    /// Maximum trajectory depth (generator calls per chain = T + 1 ≤ nfe + 1).
    pub nfe: usize,
    /// Transition noise variance.
    pub tau: f64,
    /// Reference-weight schedule, indexed by the step being produced.
    pub s: Vec<f64>,
    pub adversarial: bool,
    pub decoders: bool,
    pub critic: bool,
    pub identity: bool,
    pub prior: bool,
}

impl EffectiveComponents {
    pub fn model_parts(&self) -> ModelParts {
        ModelParts {
            discriminator: self.adversarial,
            decoders: self.decoders,
            critic: self.critic,
        }
    }
}

/// Resolve flags against the bridge settings.
pub fn apply_ablation(cfg: &TrainConfig, bridge: &BridgeConfig) -> Result<EffectiveComponents> {
    bridge.validate()?;
    let f = cfg.ablation;
    let sb = !f.no_sb;
    let nfe = if sb { bridge.nfe } else { 1 };
    Ok(EffectiveComponents {
        nfe,
        tau: if f.no_noise || !sb { 0.0 } else { bridge.tau },
        s: if sb { bridge.schedule() } else { default_s_schedule(1) },
        adversarial: sb,
        decoders: sb && !f.no_ssl_d,
        critic: sb,
        identity: sb && cfg.idt_every > 0,
        prior: f.use_prior(),
    })
}

// ── Training state ─────────────────────────────────────────────────────────

/// Everything a run carries between steps: networks, parameters, the three
/// optimizers, the resolved component set, and the training noise stream.
pub struct TrainState {
    pub models: Models,
    pub store: ParamStore<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Option<Adam<f32>>,
    pub opt_e: Option<Adam<f32>>,
    pub effective: EffectiveComponents,
    pub model_cfg: ModelConfig,
    pub bridge_cfg: BridgeConfig,
    pub cfg: TrainConfig,
    pub rng: SeedRng,
    pub next_epoch: usize,
    pub global_step: u64,
}

impl TrainState {
    pub fn new(model: &ModelConfig, bridge: &BridgeConfig, cfg: &TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        model.validate()?;
        let effective = apply_ablation(cfg, bridge)?;
        if effective.critic && !cfg.mi_literal && cfg.mi_negatives == 0 {
            return Err(Error::Config(
                "mi_negatives must be >= 1 for the contrastive information objective".into(),
            ));
        }
        if effective.nfe > model.max_step {
            return Err(Error::Config(format!(
                "bridge nfe {} exceeds the generator's max_step {}",
                effective.nfe, model.max_step
            )));
        }
        let mut model_cfg = model.clone();
        model_cfg.critic_prior_channel = effective.prior;

        let mut store = ParamStore::new();
        let models = build_models(&mut store, cfg.seed, &model_cfg, effective.model_parts())?;

        let mut g_pids = store.ids_with_prefix("generator.");
        g_pids.extend(store.ids_with_prefix("projector."));
        let opt_g = Adam::new(&store, g_pids);
        let opt_d = models
            .discriminator
            .is_some()
            .then(|| Adam::new(&store, store.ids_with_prefix("discriminator.")));
        let opt_e = models
            .critic
            .is_some()
            .then(|| Adam::new(&store, store.ids_with_prefix("critic.")));

        Ok(TrainState {
            models,
            store,
            opt_g,
            opt_d,
            opt_e,
            effective,
            model_cfg,
            bridge_cfg: bridge.clone(),
            cfg: cfg.clone(),
            rng: SeedRng::new(cfg.seed, stream::TRAIN),
            next_epoch: 0,
            global_step: 0,
        })
    }
}

// ── Step execution ─────────────────────────────────────────────────────────

/// Prepared ingredients of one batch item, shared by all three updates.
struct StepSample {
    x_a: ArrayD<f32>,
    x_b: ArrayD<f32>,
    mask: Option<ArrayD<f32>>,
    t_final: usize,
    z_final: ArrayD<f32>,
    /// Input to the final generator call of the chain.
    x_t: ArrayD<f32>,
    /// Detached final prediction, as seen by the discriminator.
    x_hat: ArrayD<f32>,
    crop: CropBox,
    locs_uniform: Vec<Vec<(usize, usize)>>,
    locs_weighted: Option<Vec<Vec<(usize, usize)>>>,
    negatives: Vec<ArrayD<f32>>,
    idt: Option<(Vec<Vec<(usize, usize)>>, ArrayD<f32>)>,
}

fn mask_to_nchw(mask: &Array2<u8>) -> ArrayD<f32> {
    let (h, w) = mask.dim();
    ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| f32::from(mask[[ix[2], ix[3]]]))
}

fn draw_latent(dim: usize, rng: &mut SeedRng) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(&[1, dim]), |_| rng.normal() as f32)
}

/// Run the no-grad generation chain and draw everything the step needs, in
/// the canonical order documented at module level.
#[allow(clippy::too_many_arguments)]
fn prepare_sample(
    models: &Models,
    store: &ParamStore<f32>,
    effective: &EffectiveComponents,
    cfg: &TrainConfig,
    pool: &[SlicePair],
    pool_idx: usize,
    do_idt: bool,
    rng: &mut SeedRng,
) -> Result<StepSample> {
    let pair = augment_hflip(&pool[pool_idx], cfg.flip_p, rng);
    let canvas = pair.source.dim().0;

    let t_final = if effective.adversarial { sample_timestep(rng, effective.nfe) } else { 0 };

    // No-grad chain: carry the prediction through the reference-weighted
    // noising transition; keep the final call's input, latent, and output.
    let mut x = pair.source.clone();
    let mut x_t = x.clone();
    let mut x_hat = x.clone();
    let mut z_final = ArrayD::zeros(IxDyn(&[1, models.generator.z_dim()]));
    for i in 0..=t_final {
        let z = draw_latent(models.generator.z_dim(), rng);
        let mut g = Graph::new();
        let mut fwd = Fwd::frozen(&mut g, store);
        let input = fwd.graph.leaf(image_to_nchw(&x));
        let (out, _) = models.generator.forward(&mut fwd, input, i, &z)?;
        let pred = nchw_to_image(fwd.graph.value(out))?;
        if i == t_final {
            x_t = x.clone();
            z_final = z;
            x_hat = pred;
        } else {
            x = training_transition(&pair.target, &pred, effective.s[i + 1], effective.tau, rng)?;
        }
    }

    let crop = if effective.decoders {
        CropBox::sample(rng, canvas)
    } else {
        CropBox { y0: 0, x0: 0, size: canvas / 2 }
    };

    let strides = models.config.tap_strides();
    let sample_taps = |rng: &mut SeedRng, weighted: Option<&Array2<u8>>| -> Result<Vec<_>> {
        strides
            .iter()
            .map(|&stride| {
                let grid = canvas / stride;
                let weights = weighted
                    .map(|m| nce_location_weights(Some(m), stride, grid, grid));
                sample_nce_locations(rng, grid, grid, NCE_LOCATIONS, weights.as_deref())
            })
            .collect()
    };

    let locs_uniform = sample_taps(rng, None)?;
    let locs_weighted = if effective.prior {
        let mask = pair.prior_mask.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "prior guidance is enabled but slice {}/{} has no mask",
                pair.subject_id, pair.slice_index
            ))
        })?;
        Some(sample_taps(rng, Some(mask))?)
    } else {
        None
    };

    let negatives = if effective.critic && !cfg.mi_literal {
        (0..cfg.mi_negatives)
            .map(|_| {
                let mut j = rng.below(pool.len());
                if pool.len() > 1 {
                    while j == pool_idx {
                        j = rng.below(pool.len());
                    }
                }
                image_to_nchw(&pool[j].target)
            })
            .collect()
    } else {
        Vec::new()
    };

    let idt = if effective.identity && do_idt {
        let locs = sample_taps(rng, None)?;
        let z = draw_latent(models.generator.z_dim(), rng);
        Some((locs, z))
    } else {
        None
    };

    Ok(StepSample {
        x_a: image_to_nchw(&pair.source),
        x_b: image_to_nchw(&pair.target),
        mask: pair.prior_mask.as_ref().map(mask_to_nchw),
        t_final,
        z_final,
        x_t: image_to_nchw(&x_t),
        x_hat: image_to_nchw(&x_hat),
        crop,
        locs_uniform,
        locs_weighted,
        negatives,
        idt,
    })
}

fn ensure_finite(value: f64, term: &str, epoch: usize, step: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { term: term.into(), epoch, step });
    }
    Ok(value)
}

/// One optimization step over the batch items named by `batch_indices` into
/// `pool` (the full training split — also the negative-sample source).
/// Executes discriminator, critic, and generator updates in that order and
/// returns the per-term report (generator terms weighted into the total;
/// discriminator/critic terms recorded at weight zero).
pub fn train_step(
    state: &mut TrainState,
    batch_indices: &[usize],
    pool: &[SlicePair],
    epoch: usize,
    step: usize,
) -> Result<LossReport> {
    if batch_indices.is_empty() {
        return Err(Error::Data("train_step needs a nonempty batch".into()));
    }
    let lr = lr_at(epoch, &state.cfg)?;
    let do_idt = state.effective.identity
        && state.cfg.idt_every > 0
        && state.global_step % state.cfg.idt_every as u64 == 0;

    let samples: Vec<StepSample> = batch_indices
        .iter()
        .map(|&i| {
            prepare_sample(
                &state.models,
                &state.store,
                &state.effective,
                &state.cfg,
                pool,
                i,
                do_idt,
                &mut state.rng,
            )
        })
        .collect::<Result<_>>()?;
    let inv_batch = 1.0 / samples.len() as f64;
    let w = state.cfg.weights;

    let mut report = LossReport::new();
    let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();

    // Discriminator update.
    if state.opt_d.is_some() {
        let disc = state.models.discriminator.as_ref().expect("discriminator");
        state.store.zero_all_grads();
        for s in &samples {
            let mut g = Graph::new();
            let mut fwd = Fwd::new(&mut g, &state.store);
            let ssl = loss_adv_discriminator(&mut fwd, disc, &s.x_hat, &s.x_b, s.t_final, &s.crop)?;
            for (name, node) in [
                ("d_adv_fake", Some(ssl.adv_fake)),
                ("d_adv_real", Some(ssl.adv_real)),
                ("d_dec_resize", ssl.dec_resize),
                ("d_dec_crop", ssl.dec_crop),
                ("d_total", Some(ssl.total)),
            ] {
                if let Some(node) = node {
                    let v = ensure_finite(g.scalar(node).to_f64(), name, epoch, step)?;
                    *sums.entry(name).or_insert(0.0) += v * inv_batch;
                }
            }
            let scaled = g.scale(ssl.total, inv_batch as f32);
            g.backward(scaled, &mut state.store);
        }
        state.opt_d.as_mut().expect("opt_d").step(&mut state.store, lr);
    }

    // Information-critic update.
    if state.opt_e.is_some() {
        let critic = state.models.critic.as_ref().expect("critic");
        state.store.zero_all_grads();
        for s in &samples {
            let mut g = Graph::new();
            let mut fwd = Fwd::new(&mut g, &state.store);
            let mi = loss_mi_estimator(
                &mut fwd,
                critic,
                &s.x_t,
                &s.x_b,
                s.mask.as_ref(),
                &s.negatives,
                state.cfg.mi_literal,
            )?;
            let v = ensure_finite(g.scalar(mi).to_f64(), "e_mi", epoch, step)?;
            *sums.entry("e_mi").or_insert(0.0) += v * inv_batch;
            let scaled = g.scale(mi, inv_batch as f32);
            g.backward(scaled, &mut state.store);
        }
        state.opt_e.as_mut().expect("opt_e").step(&mut state.store, lr);
    }

    // Generator update: re-forward the final chain call with the same latent
    // (bit-identical to the no-grad chain), then assemble the weighted total.
    state.store.zero_all_grads();
    let mut g_terms: Vec<(&'static str, f64)> = Vec::new();
    for s in &samples {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, &state.store);
        let x_t_leaf = fwd.graph.leaf(s.x_t.clone());
        let (x_hat, _) = state.models.generator.forward(&mut fwd, x_t_leaf, s.t_final, &s.z_final)?;
        let x_b_leaf = fwd.graph.leaf(s.x_b.clone());
        let x_a_leaf = fwd.graph.leaf(s.x_a.clone());

        let mut terms: Vec<(&'static str, crate::autodiff::NodeId, f64)> = Vec::new();

        let rec = loss_rec(fwd.graph, x_hat, x_b_leaf);
        terms.push(("rec", rec, w.lambda_rec));

        let q_taps = state.models.generator.encode(&mut fwd, x_hat, s.t_final)?;
        let k_taps = state.models.generator.encode(&mut fwd, x_a_leaf, s.t_final)?;
        let nce =
            loss_patchnce(&mut fwd, &state.models.projector, &q_taps, &k_taps, &s.locs_uniform)?;
        terms.push(("nce", nce, w.lambda_reg));

        if state.effective.prior {
            let mask = s.mask.as_ref().expect("prior mask");
            let cpl = loss_cpl(fwd.graph, x_hat, x_b_leaf, mask);
            terms.push(("cpl", cpl, w.lambda_cpl));
            let locs = s.locs_weighted.as_ref().expect("weighted locations");
            let wnce = loss_patchnce(&mut fwd, &state.models.projector, &q_taps, &k_taps, locs)?;
            terms.push(("wnce", wnce, w.lambda_wreg));
        }

        if let Some(disc) = &state.models.discriminator {
            fwd.frozen = true;
            let d_out = disc.forward(&mut fwd, x_hat, s.t_final);
            fwd.frozen = false;
            let adv = loss_adv_generator(fwd.graph, d_out.score);
            terms.push(("adv", adv, 1.0));
        }

        if let Some(critic) = &state.models.critic {
            fwd.frozen = true;
            let mi = loss_mi_generator(&mut fwd, critic, &s.x_t, x_hat, s.mask.as_ref())?;
            fwd.frozen = false;
            terms.push(("mi", mi, w.lambda_sb));
        }

        if let Some((locs, z)) = &s.idt {
            let idt = loss_identity(
                &mut fwd,
                &state.models.generator,
                &state.models.projector,
                &s.x_b,
                s.t_final,
                z,
                locs,
            )?;
            terms.push(("idt_rec", idt.rec, w.lambda_idt * w.lambda_rec));
            terms.push(("idt_nce", idt.nce, w.lambda_idt * w.lambda_reg));
        }

        let mut total: Option<crate::autodiff::NodeId> = None;
        for &(name, node, weight) in &terms {
            let v = ensure_finite(g.scalar(node).to_f64(), name, epoch, step)?;
            *sums.entry(name).or_insert(0.0) += v * inv_batch;
            let scaled = g.scale(node, weight as f32);
            total = Some(match total {
                Some(acc) => g.add(acc, scaled),
                None => scaled,
            });
        }
        g_terms = terms.iter().map(|&(n, _, wt)| (n, wt)).collect();
        let total = total.expect("generator term set is never empty");
        let scaled = g.scale(total, inv_batch as f32);
        g.backward(scaled, &mut state.store);
    }
    state.opt_g.step(&mut state.store, lr);

    for (name, value) in &sums {
        let weight = g_terms
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, wt)| wt)
            .unwrap_or(0.0);
        report.push(name, *value, weight);
    }
    if let Some(term) = report.non_finite_term() {
        return Err(Error::NonFiniteLoss { term: term.into(), epoch, step });
    }

    state.global_step += 1;
    Ok(report)
}

// ── Epoch and run loops ────────────────────────────────────────────────────

/// One metrics-stream record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub global_step: u64,
    pub lr: f64,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

/// Run every batch of one epoch in shuffled order, invoking `on_step` with
/// each record.
pub fn train_epoch(
    state: &mut TrainState,
    pool: &[SlicePair],
    epoch: usize,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Data("cannot train on an empty split".into()));
    }
    let order =
        SeedRng::derive(state.cfg.seed, stream::SHUFFLE, &[epoch as u64]).permutation(pool.len());
    let lr = lr_at(epoch, &state.cfg)?;
    let batch = state.cfg.batch;
    for (step, chunk) in order.chunks(batch).enumerate() {
        let report = train_step(state, chunk, pool, epoch, step)?;
        on_step(&StepRecord {
            epoch,
            step,
            global_step: state.global_step,
            lr,
            terms: report.terms,
            total: report.total,
        })?;
    }
    state.next_epoch = epoch + 1;
    Ok(())
}

/// Full run over the training split from `state.next_epoch`; `on_step`
/// receives every record and `on_epoch_end` fires after each epoch (the
/// checkpointing hook).
pub fn train(
    state: &mut TrainState,
    dataset: &LoadedDataset,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    mut on_epoch_end: impl FnMut(&TrainState, usize) -> Result<()>,
) -> Result<()> {
    if dataset.train.is_empty() {
        return Err(Error::Data("cannot train on an empty split".into()));
    }
    if state.effective.prior {
        for pair in &dataset.train {
            if pair.prior_mask.is_none() {
                return Err(Error::Config(format!(
                    "prior guidance is enabled but slice {}/{} has no mask",
                    pair.subject_id, pair.slice_index
                )));
            }
        }
    }
    for epoch in state.next_epoch..state.cfg.epochs {
        train_epoch(state, &dataset.train, epoch, &mut on_step)?;
        on_epoch_end(state, epoch)?;
    }
    Ok(())
}

// ── Checkpointing ──────────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FGSBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimEntry {
    pub name: String,
    pub t: u64,
    pub params: Vec<String>,
}

/// Self-describing checkpoint header; the binary payload that follows holds
/// the parameter values and optimizer moments in header order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
    pub next_epoch: usize,
    pub global_step: u64,
    pub rng: RngState,
    pub config_digest: String,
    pub config_json: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub optimizers: Vec<OptimEntry>,
}

fn push_blob(buf: &mut Vec<u8>, arr: &ArrayD<f32>) {
    for &v in arr.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_blob(bytes: &[u8], offset: &mut usize, shape: &[usize]) -> Result<ArrayD<f32>> {
    let len: usize = shape.iter().product();
    let end = *offset + len * 4;
    if end > bytes.len() {
        return Err(Error::Checkpoint("payload shorter than the header promises".into()));
    }
    let mut data = Vec::with_capacity(len);
    for chunk in bytes[*offset..end].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    *offset = end;
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| Error::Checkpoint(format!("blob shape mismatch: {e}")))
}

fn optimizer_entries(state: &TrainState) -> Vec<(String, &Adam<f32>)> {
    let mut out: Vec<(String, &Adam<f32>)> = vec![("generator".into(), &state.opt_g)];
    if let Some(opt) = &state.opt_d {
        out.push(("discriminator".into(), opt));
    }
    if let Some(opt) = &state.opt_e {
        out.push(("critic".into(), opt));
    }
    out
}

/// Write the complete training state to one file: magic, version, header
/// length, JSON header, then little-endian f32 blobs (parameters in header
/// order, then per optimizer each parameter's first and second moments).
pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    config_digest: &str,
    config_json: &serde_json::Value,
) -> Result<()> {
    let param_ids = state.store.ids();
    let params: Vec<ParamEntry> = param_ids
        .iter()
        .map(|&pid| ParamEntry {
            name: state.store.name(pid).to_string(),
            shape: state.store.value(pid).shape().to_vec(),
        })
        .collect();
    let optimizers: Vec<OptimEntry> = optimizer_entries(state)
        .iter()
        .map(|(name, opt)| OptimEntry {
            name: name.clone(),
            t: opt.t,
            params: opt.pids().iter().map(|&p| state.store.name(p).to_string()).collect(),
        })
        .collect();

    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        model: state.model_cfg.clone(),
        bridge: state.bridge_cfg.clone(),
        train: state.cfg.clone(),
        next_epoch: state.next_epoch,
        global_step: state.global_step,
        rng: state.rng.state(),
        config_digest: config_digest.to_string(),
        config_json: config_json.clone(),
        params,
        optimizers,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    let mut payload = Vec::new();
    for &pid in &param_ids {
        push_blob(&mut payload, state.store.value(pid));
    }
    for (_, opt) in optimizer_entries(state) {
        for i in 0..opt.pids().len() {
            push_blob(&mut payload, &opt.m[i]);
            push_blob(&mut payload, &opt.v[i]);
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse only the header of a checkpoint file.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = split_checkpoint(&bytes)?;
    Ok(header)
}

fn split_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes([
        bytes[12], bytes[13], bytes[14], bytes[15], bytes[16], bytes[17], bytes[18], bytes[19],
    ]) as usize;
    if 20 + header_len > bytes.len() {
        return Err(Error::Checkpoint("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    Ok((header, &bytes[20 + header_len..]))
}

/// Restore a [`TrainState`] that continues training bit-exactly: parameters,
/// optimizer moments and step counts, rng position, and epoch cursor.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split_checkpoint(&bytes)?;
    if header.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }

    let mut state = TrainState::new(&header.model, &header.bridge, &header.train)?;

    let stored: Vec<&str> = header.params.iter().map(|p| p.name.as_str()).collect();
    let live: Vec<String> =
        state.store.ids().iter().map(|&p| state.store.name(p).to_string()).collect();
    if stored != live.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Checkpoint(format!(
            "parameter set mismatch: checkpoint has {} entries, rebuilt model has {}",
            stored.len(),
            live.len()
        )));
    }

    let mut offset = 0usize;
    for entry in &header.params {
        let value = read_blob(payload, &mut offset, &entry.shape)?;
        let pid = state
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        if state.store.value(pid).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
        }
        *state.store.value_mut(pid) = value;
    }

    for entry in &header.optimizers {
        let (opt, label) = match entry.name.as_str() {
            "generator" => (Some(&mut state.opt_g), "generator"),
            "discriminator" => (state.opt_d.as_mut(), "discriminator"),
            "critic" => (state.opt_e.as_mut(), "critic"),
            other => return Err(Error::Checkpoint(format!("unknown optimizer {other}"))),
        };
        let opt = opt.ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint has a {label} optimizer the config disables"))
        })?;
        let names: Vec<String> =
            opt.pids().iter().map(|&p| state.store.name(p).to_string()).collect();
        if names != entry.params {
            return Err(Error::Checkpoint(format!("{label} optimizer parameter list mismatch")));
        }
        opt.t = entry.t;
        for i in 0..entry.params.len() {
            let shape = opt.m[i].shape().to_vec();
            opt.m[i] = read_blob(payload, &mut offset, &shape)?;
            opt.v[i] = read_blob(payload, &mut offset, &shape)?;
        }
    }

    if offset != payload.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint payload has {} trailing bytes",
            payload.len() - offset
        )));
    }

    state.rng = SeedRng::from_state(&header.rng)?;
    state.next_epoch = header.next_epoch;
    state.global_step = header.global_step;
    Ok((header, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    const CANVAS: usize = 32;

    fn tiny_pairs(n: usize) -> Vec<SlicePair> {
        let mut rng = SeedRng::new(5, stream::EVAL);
        (0..n)
            .map(|i| {
                let source =
                    Array2::from_shape_fn((CANVAS, CANVAS), |_| rng.normal().tanh() as f32 * 0.5);
                let target = source.mapv(|v| (v * 0.8 + 0.1).clamp(-1.0, 1.0));
                let mask = Array2::from_shape_fn((CANVAS, CANVAS), |(y, x)| {
                    u8::from(y < CANVAS / 2 && x < CANVAS / 2)
                });
                SlicePair {
                    source,
                    target,
                    prior_mask: Some(mask),
                    subject_id: format!("s{i}"),
                    slice_index: i as u32,
                }
            })
            .collect()
    }

    fn tiny_cfg(epochs: usize) -> (ModelConfig, BridgeConfig, TrainConfig) {
        let model = ModelConfig::miniature();
        let bridge = BridgeConfig { nfe: 2, tau: 0.01, s_schedule: None };
        let train = TrainConfig { epochs, seed: 11, mi_negatives: 2, ..Default::default() };
        (model, bridge, train)
    }

    fn param_bytes(state: &TrainState) -> Vec<u8> {
        let mut out = Vec::new();
        for pid in state.store.ids() {
            push_blob(&mut out, state.store.value(pid));
        }
        out
    }

    fn moment_bytes(state: &TrainState) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, opt) in optimizer_entries(state) {
            out.extend_from_slice(&opt.t.to_le_bytes());
            for i in 0..opt.pids().len() {
                push_blob(&mut out, &opt.m[i]);
                push_blob(&mut out, &opt.v[i]);
            }
        }
        out
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig { epochs: 100, lr: 1e-4, ..Default::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(49, &cfg).unwrap(), 1e-4);
        assert!((lr_at(75, &cfg).unwrap() - 5e-5).abs() < 1e-18, "ramp midpoint halves the rate");
        assert!((lr_at(99, &cfg).unwrap() - 1e-4 / 50.0).abs() < 1e-18);
        assert!(lr_at(100, &cfg).is_err());
        let mut last = f64::INFINITY;
        for e in 0..100 {
            let lr = lr_at(e, &cfg).unwrap();
            assert!(lr <= last && lr > 0.0);
            last = lr;
        }
    }

    #[test]
    fn ablation_resolution() {
        let bridge = BridgeConfig::default();
        let base = TrainConfig::default();
        let full = apply_ablation(&base, &bridge).unwrap();
        assert!(full.adversarial && full.decoders && full.critic && full.identity && full.prior);
        assert_eq!((full.nfe, full.tau), (5, 0.01));

        let mut cfg = base.clone();
        cfg.ablation.no_sb = true;
        let nosb = apply_ablation(&cfg, &bridge).unwrap();
        assert_eq!(nosb.nfe, 1);
        assert!(!nosb.adversarial && !nosb.critic && !nosb.identity && !nosb.prior);

        let mut cfg = base.clone();
        cfg.ablation.no_ssl_d = true;
        let nossl = apply_ablation(&cfg, &bridge).unwrap();
        assert!(nossl.adversarial && !nossl.decoders && nossl.critic);

        let mut cfg = base.clone();
        cfg.ablation.no_noise = true;
        assert_eq!(apply_ablation(&cfg, &bridge).unwrap().tau, 0.0);

        let mut cfg = base;
        cfg.ablation.disable_prior = true;
        assert!(!apply_ablation(&cfg, &bridge).unwrap().prior);
    }

    #[test]
    fn steps_run_finite_with_all_components() {
        let pairs = tiny_pairs(4);
        let (model, bridge, train) = tiny_cfg(4);
        let mut state = TrainState::new(&model, &bridge, &train).unwrap();
        for step in 0..10 {
            let idx = step % pairs.len();
            let report = train_step(&mut state, &[idx], &pairs, 0, step).unwrap();
            assert!(report.non_finite_term().is_none(), "step {step}: {:?}", report.terms);
            for key in ["adv", "rec", "nce", "cpl", "wnce", "mi", "idt_rec", "idt_nce", "d_total", "e_mi"] {
                assert!(report.terms.contains_key(key), "missing term {key} at step {step}");
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let pairs = tiny_pairs(3);
        let (model, bridge, train) = tiny_cfg(2);
        let run = || {
            let mut state = TrainState::new(&model, &bridge, &train).unwrap();
            for step in 0..4 {
                train_step(&mut state, &[step % pairs.len()], &pairs, 0, step).unwrap();
            }
            param_bytes(&state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let pairs = tiny_pairs(2);
        let (model, bridge, mut train) = tiny_cfg(2);
        train.lr = 0.0;
        let mut state = TrainState::new(&model, &bridge, &train).unwrap();
        let before = param_bytes(&state);
        train_step(&mut state, &[0], &pairs, 0, 0).unwrap();
        assert_eq!(before, param_bytes(&state));
    }

    #[test]
    fn nonfinite_parameters_abort_with_term_name() {
        let pairs = tiny_pairs(2);
        let (model, bridge, train) = tiny_cfg(2);
        let mut state = TrainState::new(&model, &bridge, &train).unwrap();
        let pid = state.store.ids_with_prefix("generator.out.")[0];
        state.store.value_mut(pid).fill(f32::NAN);
        let err = train_step(&mut state, &[0], &pairs, 0, 0).unwrap_err();
        match err {
            Error::NonFiniteLoss { term, .. } => assert!(!term.is_empty()),
            other => panic!("expected a non-finite abort, got {other}"),
        }
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let pairs = tiny_pairs(3);
        let dataset = LoadedDataset {
            canvas: (CANVAS, CANVAS),
            train: pairs.clone(),
            test: Vec::new(),
        };
        let (model, bridge, train_cfg) = tiny_cfg(4);

        // Uninterrupted run.
        let mut straight = TrainState::new(&model, &bridge, &train_cfg).unwrap();
        train(&mut straight, &dataset, |_| Ok(()), |_, _| Ok(())).unwrap();

        // Interrupted at epoch 2, saved, reloaded, completed.
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        let mut first = TrainState::new(&model, &bridge, &train_cfg).unwrap();
        for epoch in 0..2 {
            train_epoch(&mut first, &dataset.train, epoch, |_| Ok(())).unwrap();
        }
        save_checkpoint(&ckpt, &first, "digest", &serde_json::json!({})).unwrap();

        let (header, mut resumed) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(header.next_epoch, 2);
        assert_eq!(param_bytes(&first), param_bytes(&resumed));
        assert_eq!(moment_bytes(&first), moment_bytes(&resumed));
        train(&mut resumed, &dataset, |_| Ok(()), |_, _| Ok(())).unwrap();

        assert_eq!(param_bytes(&straight), param_bytes(&resumed));
        assert_eq!(moment_bytes(&straight), moment_bytes(&resumed));
    }

    #[test]
    fn ablated_checkpoint_drops_decoder_parameters() {
        let (model, bridge, mut train_cfg) = tiny_cfg(1);
        train_cfg.ablation.no_ssl_d = true;
        let state = TrainState::new(&model, &bridge, &train_cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abl.ckpt");
        save_checkpoint(&path, &state, "digest", &serde_json::json!({})).unwrap();
        let header = read_checkpoint_header(&path).unwrap();
        assert!(header.params.iter().any(|p| p.name.starts_with("discriminator.")));
        assert!(
            !header.params.iter().any(|p| p.name.starts_with("discriminator.dec")),
            "decoder parameters must be absent"
        );
        let (_, reloaded) = load_checkpoint(&path).unwrap();
        assert!(reloaded.models.discriminator.as_ref().is_some_and(|d| !d.has_decoders()));
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let (model, bridge, train_cfg) = tiny_cfg(1);
        let state = TrainState::new(&model, &bridge, &train_cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("good.ckpt");
        save_checkpoint(&path, &state, "digest", &serde_json::json!({})).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.ckpt");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(load_checkpoint(&bad_magic).is_err());

        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());

        let padded = dir.path().join("long.ckpt");
        let mut b = bytes;
        b.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&padded, &b).unwrap();
        assert!(load_checkpoint(&padded).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { flip_p: 1.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr_decay_start: Some(50), ..ok.clone() }.validate().is_err());
        let mut neg = ok;
        neg.weights.lambda_rec = -1.0;
        assert!(neg.validate().is_err());
    }
}
