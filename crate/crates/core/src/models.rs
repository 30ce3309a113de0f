//! The four trainable networks: conditional generator, patch discriminator
//! with self-supervised decoder heads, pairwise critic, and patch projector.
//!
//! All parameters live in a shared [`ParamStore`] under the prefixes
//! `generator.`, `discriminator.`, `critic.`, `projector.`, which is also the
//! checkpoint layout. The discriminator stack is convolution-only (feature
//! modulation but no normalization layers), so each score depends exclusively
//! on its 70x70 receptive field — the patch-locality contract other modules
//! rely on.

use crate::autodiff::{NodeId, ParamStore};
use crate::dtype::Scalar;
use crate::nn::{sinusoidal_embedding, Conv2dLayer, FilmSite, Fwd, LinearLayer, LEAKY_SLOPE};
use crate::rng::{stream, SeedRng};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Number of generator feature depths tapped for patch contrastive losses.
pub const PATCH_TAP_COUNT: usize = 4;

/// Lift a (H,W) slice into the (1,1,H,W) layout the networks consume.
pub fn image_to_nchw<S: Scalar>(img: &Array2<S>) -> ArrayD<S> {
    let (h, w) = img.dim();
    img.to_owned().into_shape_with_order(IxDyn(&[1, 1, h, w])).expect("reshape to nchw")
}

/// Collapse a (1,1,H,W) network output back to a (H,W) slice.
pub fn nchw_to_image<S: Scalar>(x: &ArrayD<S>) -> Result<Array2<S>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
        return Err(Error::dim("single-channel nchw image", "[1, 1, H, W]", format!("{shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    Ok(x.to_owned().into_shape_with_order((h, w)).expect("reshape to hw"))
}

/// Trainable scalars registered under `prefix` (`""` counts the whole store).
pub fn count_parameters<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> usize {
    store.ids_with_prefix(prefix).iter().map(|&id| store.value(id).len()).sum()
}

// ── Configuration ──────────────────────────────────────────────────────────

/// Width/depth knobs for all four networks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Generator base channel width.
    pub ngf: usize,
    /// Discriminator base channel width.
    pub ndf: usize,
    /// Critic base channel width.
    pub ncf: usize,
    /// Residual blocks in the generator trunk.
    pub n_res_blocks: usize,
    /// Sinusoidal time-embedding width (even).
    pub time_embed_dim: usize,
    /// Latent noise dimension fed to the generator conditioning.
    pub z_dim: usize,
    /// Conditioning vector width after the embedding MLP.
    pub cond_dim: usize,
    /// Patch-projector embedding dimension.
    pub proj_dim: usize,
    /// Whether the discriminator (and its decoders) see the step index.
    pub disc_time_condition: bool,
    /// Whether the critic takes a third, prior-masked channel.
    pub critic_prior_channel: bool,
    /// Largest valid generator step index (inclusive).
    pub max_step: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk64()
    }
}

impl ModelConfig {
    /// Full-scale configuration for 256x256 canvases.
    pub fn default_full() -> Self {
        ModelConfig {
            ngf: 64,
            ndf: 64,
            ncf: 64,
            n_res_blocks: 9,
            time_embed_dim: 64,
            z_dim: 64,
            cond_dim: 256,
            proj_dim: 256,
            disc_time_condition: true,
            critic_prior_channel: true,
            max_step: 5,
        }
    }

    /// Desk-scale configuration for 64x64 canvases on a single CPU core.
    pub fn desk64() -> Self {
        ModelConfig {
            ngf: 16,
            ndf: 16,
            ncf: 16,
            n_res_blocks: 6,
            time_embed_dim: 32,
            z_dim: 64,
            cond_dim: 64,
            proj_dim: 32,
            disc_time_condition: true,
            critic_prior_channel: true,
            max_step: 5,
        }
    }

    /// Gradient-verification configuration: all four networks together stay
    /// under 5k parameters; valid down to 32x32 canvases.
    pub fn miniature() -> Self {
        ModelConfig {
            ngf: 1,
            ndf: 1,
            ncf: 1,
            n_res_blocks: 1,
            time_embed_dim: 4,
            z_dim: 2,
            cond_dim: 4,
            proj_dim: 4,
            disc_time_condition: true,
            critic_prior_channel: true,
            max_step: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ngf == 0 || self.ndf == 0 || self.ncf == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim == 0 {
            return Err(Error::Config("time_embed_dim must be positive and even".into()));
        }
        if self.n_res_blocks == 0 {
            return Err(Error::Config("n_res_blocks must be positive".into()));
        }
        if self.cond_dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config("cond_dim and proj_dim must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of each tapped generator feature depth.
    pub fn tap_channels(&self) -> [usize; PATCH_TAP_COUNT] {
        [self.ngf, 2 * self.ngf, 4 * self.ngf, 4 * self.ngf]
    }

    /// Spatial downscale factor of each tapped feature depth.
    pub fn tap_strides(&self) -> [usize; PATCH_TAP_COUNT] {
        [1, 2, 4, 4]
    }
}

// ── Conditioning MLP ───────────────────────────────────────────────────────

/// Maps (sinusoidal step embedding ++ optional latent) to the conditioning
/// vector consumed by the modulation sites: Linear -> ReLU -> Linear -> ReLU.
#[derive(Debug, Clone)]
pub struct CondMlp {
    l1: LinearLayer,
    l2: LinearLayer,
    embed_dim: usize,
    z_dim: usize,
}

impl CondMlp {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        name: &str,
        embed_dim: usize,
        z_dim: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        let l1 = LinearLayer::new(store, rng, &format!("{name}.l1"), embed_dim + z_dim, cond_dim)?;
        let l2 = LinearLayer::new(store, rng, &format!("{name}.l2"), cond_dim, cond_dim)?;
        Ok(CondMlp { l1, l2, embed_dim, z_dim })
    }

    /// Build the conditioning vector for step `t`; `z` must be (1, z_dim)
    /// when the MLP was built with a latent input.
    fn apply<S: Scalar>(&self, fwd: &mut Fwd<S>, t: f64, z: Option<&ArrayD<S>>) -> NodeId {
        let embed = fwd.graph.leaf(sinusoidal_embedding(t, self.embed_dim));
        let input = if self.z_dim > 0 {
            let z = z.expect("latent required by conditioning MLP");
            assert_eq!(z.shape(), [1, self.z_dim], "latent shape");
            let zn = fwd.graph.leaf(z.clone());
            fwd.graph.concat_channels(&[embed, zn])
        } else {
            embed
        };
        let h = self.l1.apply(fwd, input);
        let h = fwd.graph.relu(h);
        let h = self.l2.apply(fwd, h);
        fwd.graph.relu(h)
    }
}

// ── Generator ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv2dLayer,
    f1: FilmSite,
    c2: Conv2dLayer,
    f2: FilmSite,
}

/// Encoder–residual–decoder image mapper conditioned on (step, latent)
/// through per-layer feature modulation; output squashed to [-1, 1].
#[derive(Debug, Clone)]
pub struct Generator {
    cond: CondMlp,
    enc0: Conv2dLayer,
    f_enc0: FilmSite,
    enc1: Conv2dLayer,
    f_enc1: FilmSite,
    enc2: Conv2dLayer,
    f_enc2: FilmSite,
    res: Vec<ResBlock>,
    dec1: Conv2dLayer,
    f_dec1: FilmSite,
    dec2: Conv2dLayer,
    f_dec2: FilmSite,
    out: Conv2dLayer,
    z_dim: usize,
    max_step: usize,
}

impl Generator {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let ngf = cfg.ngf;
        let cd = cfg.cond_dim;
        let p = "generator";
        let cond = CondMlp::new(store, rng, &format!("{p}.cond"), cfg.time_embed_dim, cfg.z_dim, cd)?;
        let enc0 = Conv2dLayer::new(store, rng, &format!("{p}.enc0"), 1, ngf, 7, 1, 3)?;
        let f_enc0 = FilmSite::new(store, &format!("{p}.enc0.film"), cd, ngf)?;
        let enc1 = Conv2dLayer::new(store, rng, &format!("{p}.enc1"), ngf, 2 * ngf, 3, 2, 1)?;
        let f_enc1 = FilmSite::new(store, &format!("{p}.enc1.film"), cd, 2 * ngf)?;
        let enc2 = Conv2dLayer::new(store, rng, &format!("{p}.enc2"), 2 * ngf, 4 * ngf, 3, 2, 1)?;
        let f_enc2 = FilmSite::new(store, &format!("{p}.enc2.film"), cd, 4 * ngf)?;
        let mut res = Vec::new();
        for i in 0..cfg.n_res_blocks {
            res.push(ResBlock {
                c1: Conv2dLayer::new(store, rng, &format!("{p}.res{i}.c1"), 4 * ngf, 4 * ngf, 3, 1, 1)?,
                f1: FilmSite::new(store, &format!("{p}.res{i}.c1.film"), cd, 4 * ngf)?,
                c2: Conv2dLayer::new(store, rng, &format!("{p}.res{i}.c2"), 4 * ngf, 4 * ngf, 3, 1, 1)?,
                f2: FilmSite::new(store, &format!("{p}.res{i}.c2.film"), cd, 4 * ngf)?,
            });
        }
        let dec1 = Conv2dLayer::new(store, rng, &format!("{p}.dec1"), 4 * ngf, 2 * ngf, 3, 1, 1)?;
        let f_dec1 = FilmSite::new(store, &format!("{p}.dec1.film"), cd, 2 * ngf)?;
        let dec2 = Conv2dLayer::new(store, rng, &format!("{p}.dec2"), 2 * ngf, ngf, 3, 1, 1)?;
        let f_dec2 = FilmSite::new(store, &format!("{p}.dec2.film"), cd, ngf)?;
        let out = Conv2dLayer::new(store, rng, &format!("{p}.out"), ngf, 1, 7, 1, 3)?;
        Ok(Generator {
            cond,
            enc0,
            f_enc0,
            enc1,
            f_enc1,
            enc2,
            f_enc2,
            res,
            dec1,
            f_dec1,
            dec2,
            f_dec2,
            out,
            z_dim: cfg.z_dim,
            max_step: cfg.max_step,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn max_step(&self) -> usize {
        self.max_step
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.max_step {
            return Err(Error::Config(format!(
                "generator step {t} outside [0, {}]",
                self.max_step
            )));
        }
        Ok(())
    }

    /// Residual block index whose output is the deepest contrastive tap.
    fn mid_block(&self) -> usize {
        self.res.len() / 2
    }

    /// Encoder plus residual blocks up to and including the mid tap.
    /// Returns (trunk output, the four tapped feature maps).
    fn trunk<S: Scalar>(
        &self,
        fwd: &mut Fwd<S>,
        x: NodeId,
        cond: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let mut taps = Vec::with_capacity(PATCH_TAP_COUNT);
        let h = self.enc0.apply(fwd, x);
        let h = fwd.graph.instance_norm(h);
        let h = self.f_enc0.apply(fwd, h, cond);
        let h = fwd.graph.relu(h);
        taps.push(h);
        let h = self.enc1.apply(fwd, h);
        let h = fwd.graph.instance_norm(h);
        let h = self.f_enc1.apply(fwd, h, cond);
        let h = fwd.graph.relu(h);
        taps.push(h);
        let h = self.enc2.apply(fwd, h);
        let h = fwd.graph.instance_norm(h);
        let h = self.f_enc2.apply(fwd, h, cond);
        let mut h = fwd.graph.relu(h);
        taps.push(h);
        for block in &self.res[..=self.mid_block()] {
            h = self.res_block(fwd, block, h, cond);
        }
        taps.push(h);
        (h, taps)
    }

    fn res_block<S: Scalar>(
        &self,
        fwd: &mut Fwd<S>,
        block: &ResBlock,
        x: NodeId,
        cond: NodeId,
    ) -> NodeId {
        let h = block.c1.apply(fwd, x);
        let h = fwd.graph.instance_norm(h);
        let h = block.f1.apply(fwd, h, cond);
        let h = fwd.graph.relu(h);
        let h = block.c2.apply(fwd, h);
        let h = fwd.graph.instance_norm(h);
        let h = block.f2.apply(fwd, h, cond);
        fwd.graph.add(x, h)
    }

    /// Full generation pass: returns the prediction (same shape as `x`,
    /// values in [-1,1]) and the tapped encoder features.
    pub fn forward<S: Scalar>(
        &self,
        fwd: &mut Fwd<S>,
        x: NodeId,
        t: usize,
        z: &ArrayD<S>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_step(t)?;
        let cond = self.cond.apply(fwd, t as f64, Some(z));
        let (mut h, taps) = self.trunk(fwd, x, cond);
        for block in &self.res[self.mid_block() + 1..] {
            h = self.res_block(fwd, block, h, cond);
        }
        let h = fwd.graph.upsample2x(h);
        let h = self.dec1.apply(fwd, h);
        let h = fwd.graph.instance_norm(h);
        let h = self.f_dec1.apply(fwd, h, cond);
        let h = fwd.graph.relu(h);
        let h = fwd.graph.upsample2x(h);
        let h = self.dec2.apply(fwd, h);
        let h = fwd.graph.instance_norm(h);
        let h = self.f_dec2.apply(fwd, h, cond);
        let h = fwd.graph.relu(h);
        let h = self.out.apply(fwd, h);
        Ok((fwd.graph.tanh(h), taps))
    }

    /// Feature extraction only (zero latent), for contrastive queries/keys.
    pub fn encode<S: Scalar>(&self, fwd: &mut Fwd<S>, x: NodeId, t: usize) -> Result<Vec<NodeId>> {
        self.check_step(t)?;
        let z = ArrayD::zeros(IxDyn(&[1, self.z_dim]));
        let cond = self.cond.apply(fwd, t as f64, Some(&z));
        let (_, taps) = self.trunk(fwd, x, cond);
        Ok(taps)
    }
}

// ── Discriminator ──────────────────────────────────────────────────────────

/// Random square crop on the canvas; offsets and size are multiples of 4 so
/// the region aligns with the stride-4 feature grid the crop decoder reads.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct CropBox {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

impl CropBox {
    pub fn validate(&self, canvas: usize) -> Result<()> {
        if self.size != canvas / 2 {
            return Err(Error::Config(format!(
                "crop size {} must be half the {canvas} canvas",
                self.size
            )));
        }
        if self.y0 % 4 != 0 || self.x0 % 4 != 0 {
            return Err(Error::Config("crop offsets must be multiples of 4".into()));
        }
        if self.y0 + self.size > canvas || self.x0 + self.size > canvas {
            return Err(Error::Config(format!(
                "crop {}x{} at ({}, {}) exceeds {canvas} canvas",
                self.size, self.size, self.y0, self.x0
            )));
        }
        Ok(())
    }

    /// Uniform placement over feature-aligned offsets.
    pub fn sample(rng: &mut SeedRng, canvas: usize) -> Self {
        let size = canvas / 2;
        let slots = (canvas - size) / 4 + 1;
        let y0 = 4 * rng.below(slots);
        let x0 = 4 * rng.below(slots);
        CropBox { y0, x0, size }
    }
}

/// Two-upsample reconstruction head of four modulated convolutions.
#[derive(Debug, Clone)]
struct DecoderHead {
    convs: Vec<Conv2dLayer>,
    films: Vec<FilmSite>,
}

impl DecoderHead {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        name: &str,
        chans: [usize; 5],
        cond_dim: usize,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut films = Vec::new();
        for i in 0..4 {
            convs.push(Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.c{i}"),
                chans[i],
                chans[i + 1],
                3,
                1,
                1,
            )?);
            films.push(FilmSite::new(store, &format!("{name}.c{i}.film"), cond_dim, chans[i + 1])?);
        }
        Ok(DecoderHead { convs, films })
    }

    /// features -> up, conv x2 (modulated, rectified) with a second up in
    /// between, then two stride-1 convs, final one un-rectified, tanh.
    fn apply<S: Scalar>(&self, fwd: &mut Fwd<S>, feats: NodeId, cond: NodeId) -> NodeId {
        let h = fwd.graph.upsample2x(feats);
        let h = self.convs[0].apply(fwd, h);
        let h = self.films[0].apply(fwd, h, cond);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = fwd.graph.upsample2x(h);
        let h = self.convs[1].apply(fwd, h);
        let h = self.films[1].apply(fwd, h, cond);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = self.convs[2].apply(fwd, h);
        let h = self.films[2].apply(fwd, h, cond);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = self.convs[3].apply(fwd, h);
        let h = self.films[3].apply(fwd, h, cond);
        fwd.graph.tanh(h)
    }
}

/// Patch discriminator: five k4 convolutions (strides 2,2,2,1,1) producing a
/// score map whose entries each see a 70x70 input window at stride 8, plus
/// optional self-supervised decoder heads reading the internal features.
#[derive(Debug, Clone)]
pub struct Discriminator {
    cond: CondMlp,
    l1: Conv2dLayer,
    l2: Conv2dLayer,
    f2: FilmSite,
    l3: Conv2dLayer,
    f3: FilmSite,
    l4: Conv2dLayer,
    f4: FilmSite,
    l5: Conv2dLayer,
    dec_resize: Option<DecoderHead>,
    dec_crop: Option<DecoderHead>,
    time_condition: bool,
}

/// Forward products: patch score map plus the feature stack the decoders read.
pub struct DiscOutput {
    pub score: NodeId,
    /// Stride-4 features (input to the crop decoder).
    pub feat_l2: NodeId,
    /// Stride-8 features (input to the resize decoder).
    pub feat_l3: NodeId,
    /// Conditioning vector shared with the decoder heads.
    pub cond: NodeId,
}

impl Discriminator {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        cfg: &ModelConfig,
        with_decoders: bool,
    ) -> Result<Self> {
        let ndf = cfg.ndf;
        let cd = cfg.cond_dim;
        let p = "discriminator";
        let cond = CondMlp::new(store, rng, &format!("{p}.cond"), cfg.time_embed_dim, 0, cd)?;
        let l1 = Conv2dLayer::new(store, rng, &format!("{p}.l1"), 1, ndf, 4, 2, 1)?;
        let l2 = Conv2dLayer::new(store, rng, &format!("{p}.l2"), ndf, 2 * ndf, 4, 2, 1)?;
        let f2 = FilmSite::new(store, &format!("{p}.l2.film"), cd, 2 * ndf)?;
        let l3 = Conv2dLayer::new(store, rng, &format!("{p}.l3"), 2 * ndf, 4 * ndf, 4, 2, 1)?;
        let f3 = FilmSite::new(store, &format!("{p}.l3.film"), cd, 4 * ndf)?;
        let l4 = Conv2dLayer::new(store, rng, &format!("{p}.l4"), 4 * ndf, 4 * ndf, 4, 1, 1)?;
        let f4 = FilmSite::new(store, &format!("{p}.l4.film"), cd, 4 * ndf)?;
        let l5 = Conv2dLayer::new(store, rng, &format!("{p}.l5"), 4 * ndf, 1, 4, 1, 1)?;
        let (dec_resize, dec_crop) = if with_decoders {
            (
                Some(DecoderHead::new(
                    store,
                    rng,
                    &format!("{p}.dec1"),
                    [4 * ndf, 2 * ndf, ndf, ndf, 1],
                    cd,
                )?),
                Some(DecoderHead::new(
                    store,
                    rng,
                    &format!("{p}.dec2"),
                    [2 * ndf, 2 * ndf, ndf, ndf, 1],
                    cd,
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Discriminator {
            cond,
            l1,
            l2,
            f2,
            l3,
            f3,
            l4,
            f4,
            l5,
            dec_resize,
            dec_crop,
            time_condition: cfg.disc_time_condition,
        })
    }

    pub fn has_decoders(&self) -> bool {
        self.dec_resize.is_some()
    }

    /// Score map and feature stack for a canvas-sized batch at step `t`.
    pub fn forward<S: Scalar>(&self, fwd: &mut Fwd<S>, x: NodeId, t: usize) -> DiscOutput {
        let t_eff = if self.time_condition { t as f64 } else { 0.0 };
        let cond = self.cond.apply(fwd, t_eff, None);
        let h = self.l1.apply(fwd, x);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = self.l2.apply(fwd, h);
        let h = self.f2.apply(fwd, h, cond);
        let feat_l2 = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = self.l3.apply(fwd, feat_l2);
        let h = self.f3.apply(fwd, h, cond);
        let feat_l3 = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = self.l4.apply(fwd, feat_l3);
        let h = self.f4.apply(fwd, h, cond);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let score = self.l5.apply(fwd, h);
        DiscOutput { score, feat_l2, feat_l3, cond }
    }

    /// Reconstruct the half-resolution canvas from stride-8 features.
    pub fn decode_resize<S: Scalar>(&self, fwd: &mut Fwd<S>, out: &DiscOutput) -> NodeId {
        let head = self.dec_resize.as_ref().expect("decoder heads not built");
        head.apply(fwd, out.feat_l3, out.cond)
    }

    /// Reconstruct the cropped patch from stride-4 features under `crop`.
    pub fn decode_crop<S: Scalar>(
        &self,
        fwd: &mut Fwd<S>,
        out: &DiscOutput,
        crop: &CropBox,
        canvas: usize,
    ) -> Result<NodeId> {
        crop.validate(canvas)?;
        let head = self.dec_crop.as_ref().expect("decoder heads not built");
        let cells = crop.size / 4;
        let feats = fwd.graph.crop_spatial(out.feat_l2, crop.y0 / 4, crop.x0 / 4, cells, cells)?;
        Ok(head.apply(fwd, feats, out.cond))
    }
}

/// Score-map spatial size for a square canvas under the five-layer stack.
pub fn score_map_size(canvas: usize) -> usize {
    let d = |x: usize, k: usize, s: usize, p: usize| (x + 2 * p - k) / s + 1;
    let a = d(canvas, 4, 2, 1);
    let b = d(a, 4, 2, 1);
    let c = d(b, 4, 2, 1);
    let e = d(c, 4, 1, 1);
    d(e, 4, 1, 1)
}

/// Inclusive input-pixel interval (per axis) a score at index `i` depends on.
/// Intervals may extend past the canvas; clamp before use.
pub fn score_receptive_field(i: usize) -> (isize, isize) {
    (8 * i as isize - 23, 8 * i as isize + 46)
}

// ── Critic ─────────────────────────────────────────────────────────────────

/// Pairwise scorer E(intermediate, endpoint[, masked endpoint]) -> scalar:
/// three strided convolutions, global pooling, two dense layers. Unnormalized
/// and time-free.
#[derive(Debug, Clone)]
pub struct Critic {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    c3: Conv2dLayer,
    l1: LinearLayer,
    l2: LinearLayer,
    in_channels: usize,
}

impl Critic {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let cb = cfg.ncf;
        let in_channels = if cfg.critic_prior_channel { 3 } else { 2 };
        let p = "critic";
        Ok(Critic {
            c1: Conv2dLayer::new(store, rng, &format!("{p}.c1"), in_channels, cb, 4, 2, 1)?,
            c2: Conv2dLayer::new(store, rng, &format!("{p}.c2"), cb, 2 * cb, 4, 2, 1)?,
            c3: Conv2dLayer::new(store, rng, &format!("{p}.c3"), 2 * cb, 4 * cb, 4, 2, 1)?,
            l1: LinearLayer::new(store, rng, &format!("{p}.l1"), 4 * cb, 4 * cb)?,
            l2: LinearLayer::new(store, rng, &format!("{p}.l2"), 4 * cb, 1)?,
            in_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Score a batch assembled from same-shape single-channel parts
    /// (concatenated along channels). Returns (N, 1) scores.
    pub fn forward<S: Scalar>(&self, fwd: &mut Fwd<S>, parts: &[NodeId]) -> Result<NodeId> {
        let total: usize = parts.iter().map(|&p| fwd.graph.value(p).shape()[1]).sum();
        if total != self.in_channels {
            return Err(Error::dim("critic input channels", self.in_channels, total));
        }
        let x = if parts.len() == 1 { parts[0] } else { fwd.graph.concat_channels(parts) };
        let h = self.c1.apply(fwd, x);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = self.c2.apply(fwd, h);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = self.c3.apply(fwd, h);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        let h = fwd.graph.global_mean_pool(h);
        let h = self.l1.apply(fwd, h);
        let h = fwd.graph.leaky_relu(h, LEAKY_SLOPE);
        Ok(self.l2.apply(fwd, h))
    }
}

// ── Patch projector ────────────────────────────────────────────────────────

/// Per-tap two-layer MLP mapping gathered feature vectors to unit-norm
/// contrastive embeddings.
#[derive(Debug, Clone)]
pub struct Projector {
    taps: Vec<(LinearLayer, LinearLayer)>,
}

impl Projector {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let mut taps = Vec::new();
        for (i, &ch) in cfg.tap_channels().iter().enumerate() {
            let a = LinearLayer::new(store, rng, &format!("projector.tap{i}.l1"), ch, cfg.proj_dim)?;
            let b = LinearLayer::new(
                store,
                rng,
                &format!("projector.tap{i}.l2"),
                cfg.proj_dim,
                cfg.proj_dim,
            )?;
            taps.push((a, b));
        }
        Ok(Projector { taps })
    }

    /// Project gathered (L, C_tap) features for tap index `tap` to unit-norm
    /// (L, proj_dim) embeddings.
    pub fn apply<S: Scalar>(&self, fwd: &mut Fwd<S>, gathered: NodeId, tap: usize) -> NodeId {
        let (a, b) = &self.taps[tap];
        let h = a.apply(fwd, gathered);
        let h = fwd.graph.relu(h);
        let h = b.apply(fwd, h);
        fwd.graph.l2_normalize_rows(h)
    }
}

// ── Bundle ─────────────────────────────────────────────────────────────────

/// Which networks a run needs (ablations drop whole networks or heads).
#[derive(Debug, Clone, Copy)]
pub struct ModelParts {
    pub discriminator: bool,
    pub decoders: bool,
    pub critic: bool,
}

impl Default for ModelParts {
    fn default() -> Self {
        ModelParts { discriminator: true, decoders: true, critic: true }
    }
}

/// All networks of one run, parameters registered in a shared store.
pub struct Models {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub critic: Option<Critic>,
    pub projector: Projector,
    pub config: ModelConfig,
}

/// Build and initialize the requested networks. Each network draws its
/// initial weights from its own derived stream, so ablations do not shift
/// the initialization of the networks they keep.
pub fn build_models<S: Scalar>(
    store: &mut ParamStore<S>,
    seed: u64,
    cfg: &ModelConfig,
    parts: ModelParts,
) -> Result<Models> {
    cfg.validate()?;
    let mut gen_rng = SeedRng::derive(seed, stream::MODEL_INIT, &[0]);
    let generator = Generator::new(store, &mut gen_rng, cfg)?;
    let discriminator = if parts.discriminator {
        let mut rng = SeedRng::derive(seed, stream::MODEL_INIT, &[1]);
        Some(Discriminator::new(store, &mut rng, cfg, parts.decoders)?)
    } else {
        None
    };
    let critic = if parts.critic {
        let mut rng = SeedRng::derive(seed, stream::MODEL_INIT, &[2]);
        Some(Critic::new(store, &mut rng, cfg)?)
    } else {
        None
    };
    let mut proj_rng = SeedRng::derive(seed, stream::MODEL_INIT, &[3]);
    let projector = Projector::new(store, &mut proj_rng, cfg)?;
    Ok(Models { generator, discriminator, critic, projector, config: cfg.clone() })
}

/// Trainable-parameter count per network prefix.
pub fn parameter_counts<S: Scalar>(store: &ParamStore<S>) -> Vec<(String, usize)> {
    ["generator", "discriminator", "critic", "projector"]
        .iter()
        .map(|p| (p.to_string(), store.count_with_prefix(&format!("{p}."))))
        .collect()
}
