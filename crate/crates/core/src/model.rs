//! Generator and discriminator assembly plus the training objective.
//!
//! The generator encodes the base and reference images with a shared conv
//! stack, fuses the token maps (see `fusion`), and decodes the blended
//! tokens back to an image through transposed convolutions with a tanh
//! squash. The discriminator mirrors the encoder and carries two heads: a
//! raw adversarial score and class logits over the seen classes.

use rand_chacha::ChaCha8Rng;

use crate::data::Episode;
use crate::error::{Result, XmError};
use crate::fusion::{FusionBlock, ModulationMode};
use crate::metrics::PerceptualExtractor;
use crate::nn::{Act, ConvBlock, ConvTransposeBlock, Ctx, Linear, Module, Param, ParamKind, LEAKY_SLOPE};
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub image_size: usize,
    /// Encoder channel progression; the last entry is the token width and
    /// the block count sets the downsampling depth.
    pub enc_channels: Vec<usize>,
    pub heads: usize,
    pub noise_dim: usize,
    pub seen_classes: usize,
}

impl NetConfig {
    /// 32x32 images, 4x4 token map, 64-wide tokens, 4 heads.
    pub fn desk() -> Self {
        NetConfig {
            image_size: 32,
            enc_channels: vec![32, 64, 64],
            heads: 4,
            noise_dim: 16,
            seen_classes: 5,
        }
    }

    /// Miniature configuration for gradient checks and smoke tests.
    pub fn toy() -> Self {
        NetConfig {
            image_size: 8,
            enc_channels: vec![6, 8],
            heads: 2,
            noise_dim: 4,
            seen_classes: 3,
        }
    }

    pub fn dim(&self) -> usize {
        *self.enc_channels.last().expect("empty encoder config")
    }

    pub fn feat_size(&self) -> usize {
        self.image_size >> self.enc_channels.len()
    }

    pub fn token_count(&self) -> usize {
        self.feat_size() * self.feat_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() {
            return Err(XmError::Config("encoder needs at least one block".into()));
        }
        if !self.image_size.is_multiple_of(1 << self.enc_channels.len()) || self.feat_size() == 0 {
            return Err(XmError::Config(format!(
                "image size {} is incompatible with {} stride-2 blocks",
                self.image_size,
                self.enc_channels.len()
            )));
        }
        if !self.dim().is_multiple_of(self.heads) {
            return Err(XmError::Config(format!(
                "token width {} not divisible by {} heads",
                self.dim(),
                self.heads
            )));
        }
        Ok(())
    }
}

// ── Generator ───────────────────────────────────────────────────────

pub struct Generator {
    pub cfg: NetConfig,
    pub encoder: Vec<ConvBlock>,
    pub fusion: FusionBlock,
    pub decoder: Vec<ConvTransposeBlock>,
}

impl Generator {
    pub fn new(prefix: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in cfg.enc_channels.iter().enumerate() {
            encoder.push(ConvBlock::new(
                &format!("{prefix}.enc{i}"),
                in_ch,
                out_ch,
                4,
                2,
                1,
                true,
                Act::Leaky(LEAKY_SLOPE),
                rng,
            ));
            in_ch = out_ch;
        }
        let fusion = FusionBlock::new(&format!("{prefix}.fusion"), cfg.dim(), cfg.heads, cfg.noise_dim, rng)?;
        let mut decoder = Vec::new();
        let mut in_ch = cfg.dim();
        let depth = cfg.enc_channels.len();
        for i in 0..depth {
            let last = i == depth - 1;
            let out_ch = if last { 3 } else { cfg.enc_channels[depth - 2 - i] };
            decoder.push(ConvTransposeBlock::new(
                &format!("{prefix}.dec{i}"),
                in_ch,
                out_ch,
                4,
                2,
                1,
                !last,
                if last { Act::Tanh } else { Act::Leaky(LEAKY_SLOPE) },
                rng,
            ));
            in_ch = out_ch;
        }
        Ok(Generator { cfg: cfg.clone(), encoder, fusion, decoder })
    }

    /// Encode an image into `[n, D]` tokens (row-major spatial order).
    pub fn encode(&self, ctx: &mut Ctx, image: &Tensor) -> TensorId {
        let mut input = image.clone();
        input.shape = vec![1, image.shape[0], image.shape[1], image.shape[2]];
        input.requires_grad = false;
        let mut x = ctx.tape.leaf(input);
        for block in &self.encoder {
            x = block.forward(ctx, x);
        }
        let (d, n) = (self.cfg.dim(), self.cfg.token_count());
        let flat = ctx.tape.reshape(x, vec![d, n]);
        ctx.tape.transpose(flat)
    }

    /// Decode `[n, D]` tokens into a `[1,3,H,W]` image in [-1, 1].
    pub fn decode(&self, ctx: &mut Ctx, tokens: TensorId) -> TensorId {
        let (d, s) = (self.cfg.dim(), self.cfg.feat_size());
        let flat = ctx.tape.transpose(tokens);
        let mut x = ctx.tape.reshape(flat, vec![1, d, s, s]);
        for block in &self.decoder {
            x = block.forward(ctx, x);
        }
        x
    }

    /// Full generation pass for one episode.
    pub fn generate(&self, ctx: &mut Ctx, ep: &Episode, mode: ModulationMode) -> TensorId {
        assert!(
            !ep.refs.is_empty(),
            "episode has no references (K < 2); generation needs at least one"
        );
        let base_tokens = self.encode(ctx, &ep.base);
        let ref_tokens: Vec<TensorId> = ep.refs.iter().map(|r| self.encode(ctx, r)).collect();
        let fused = self
            .fusion
            .forward(ctx, base_tokens, &ref_tokens, &ep.alphas, &ep.zs, mode);
        self.decode(ctx, fused)
    }
}

impl Module for Generator {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        for b in &self.encoder {
            b.visit(f);
        }
        self.fusion.visit(f);
        for b in &self.decoder {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        for b in &mut self.encoder {
            b.visit_mut(f);
        }
        self.fusion.visit_mut(f);
        for b in &mut self.decoder {
            b.visit_mut(f);
        }
    }
}

// ── Discriminator ───────────────────────────────────────────────────

pub struct Discriminator {
    pub cfg: NetConfig,
    pub trunk: Vec<ConvBlock>,
    pub adv_head: Linear,
    pub cls_head: Linear,
    flat_dim: usize,
}

impl Discriminator {
    /// Trunk channel widths: half the encoder's (floor 8). A full-width
    /// mirror saturates its hinge within a few hundred steps at desk scale
    /// and starves the generator of sample-specific gradients.
    fn trunk_channels(cfg: &NetConfig) -> Vec<usize> {
        cfg.enc_channels.iter().map(|&c| (c / 2).max(8)).collect()
    }

    pub fn new(prefix: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let channels = Self::trunk_channels(cfg);
        let mut trunk = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in channels.iter().enumerate() {
            trunk.push(ConvBlock::new(
                &format!("{prefix}.trunk{i}"),
                in_ch,
                out_ch,
                4,
                2,
                1,
                i != 0, // first block without batch norm
                Act::Leaky(LEAKY_SLOPE),
                rng,
            ));
            in_ch = out_ch;
        }
        let flat = channels.last().unwrap() * cfg.token_count();
        Ok(Discriminator {
            cfg: cfg.clone(),
            trunk,
            adv_head: Linear::new(&format!("{prefix}.adv_head"), flat, 1, rng),
            cls_head: Linear::new(&format!("{prefix}.cls_head"), flat, cfg.seen_classes, rng),
            flat_dim: flat,
        })
    }

    pub fn flat_dim(&self) -> usize {
        self.flat_dim
    }

    /// Raw scores and class logits for a `[B,3,H,W]` batch.
    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> (TensorId, TensorId) {
        let batch = ctx.tape.shape(x)[0];
        let mut cur = x;
        for block in &self.trunk {
            cur = block.forward(ctx, cur);
        }
        let flat = ctx.tape.reshape(cur, vec![batch, self.flat_dim]);
        let score_col = self.adv_head.forward(ctx, flat);
        let score = ctx.tape.reshape(score_col, vec![batch]);
        let logits = self.cls_head.forward(ctx, flat);
        (score, logits)
    }

    pub fn forward_image(&self, ctx: &mut Ctx, image: &Tensor) -> (TensorId, TensorId) {
        let mut input = image.clone();
        input.shape = vec![1, image.shape[0], image.shape[1], image.shape[2]];
        input.requires_grad = false;
        let x = ctx.tape.leaf(input);
        self.forward(ctx, x)
    }
}

impl Module for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        for b in &self.trunk {
            b.visit(f);
        }
        self.adv_head.visit(f);
        self.cls_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        for b in &mut self.trunk {
            b.visit_mut(f);
        }
        self.adv_head.visit_mut(f);
        self.cls_head.visit_mut(f);
    }
}

/// Generator + discriminator pair with a shared construction seed.
pub struct FewShotGan {
    pub gen: Generator,
    pub disc: Discriminator,
}

impl FewShotGan {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, rng::domain::INIT, &[0]);
        Ok(FewShotGan {
            gen: Generator::new("gen", cfg, &mut r)?,
            disc: Discriminator::new("disc", cfg, &mut r)?,
        })
    }
}

impl Module for FewShotGan {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        self.gen.visit(f);
        self.disc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        self.gen.visit_mut(f);
        self.disc.visit_mut(f);
    }
}

// ── Losses ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub eta_p: f64,
    pub eta_cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { eta_p: 50.0, eta_cl: 1.0 }
    }
}

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))` over raw scores.
pub fn hinge_d_loss(tape: &mut Tape, d_real: TensorId, d_fake: TensorId) -> TensorId {
    let neg_real = tape.neg(d_real);
    let real_margin = tape.add_scalar(neg_real, 1.0);
    let real_hinge = tape.relu(real_margin);
    let real_term = tape.mean_all(real_hinge);
    let fake_margin = tape.add_scalar(d_fake, 1.0);
    let fake_hinge = tape.relu(fake_margin);
    let fake_term = tape.mean_all(fake_hinge);
    tape.add(real_term, fake_term)
}

/// `-mean(fake scores)`.
pub fn hinge_g_loss(tape: &mut Tape, d_fake: TensorId) -> TensorId {
    let m = tape.mean_all(d_fake);
    tape.neg(m)
}

/// How the per-reference feature distances are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerceptualMode {
    /// Term disabled (contributes zero).
    Off,
    /// Uniform `1/(K-1)` weights.
    Uniform,
    /// Blend-weighted, matching the fusion weights.
    Alpha,
}

/// Weighted sum of feature distances between the generated image and each
/// reference: `sum_i w_i * |phi(x_hat) - phi(ref_i)|_2`.
pub fn perceptual_loss(
    tape: &mut Tape,
    phi: &PerceptualExtractor,
    x_hat: TensorId,
    refs: &[Tensor],
    weights: &[f64],
) -> TensorId {
    assert_eq!(
        refs.len(),
        weights.len(),
        "perceptual_loss: {} references vs {} weights",
        refs.len(),
        weights.len()
    );
    let fake_feat = phi.features(tape, x_hat);
    let mut total: Option<TensorId> = None;
    for (r, &w) in refs.iter().zip(weights) {
        let mut input = r.clone();
        input.shape = vec![1, r.shape[0], r.shape[1], r.shape[2]];
        input.requires_grad = false;
        let rid = tape.leaf(input);
        let ref_feat = phi.features(tape, rid);
        let dist = tape.l2_distance(fake_feat, ref_feat);
        let term = tape.mul_scalar(dist, w);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.expect("perceptual_loss needs at least one reference")
}

/// Cross-entropy of class logits against seen-class labels.
pub fn classification_loss(tape: &mut Tape, logits: TensorId, labels: &[usize]) -> TensorId {
    tape.cross_entropy(logits, labels)
}

/// `adv + eta_p * perceptual + eta_cl * classification`, with finiteness
/// checks that name the offending term.
pub fn total_g_loss(
    tape: &mut Tape,
    l_adv: TensorId,
    l_p: TensorId,
    l_cl: TensorId,
    w: &LossWeights,
) -> Result<TensorId> {
    for (id, name) in [(l_adv, "adversarial"), (l_p, "perceptual"), (l_cl, "classification")] {
        let v = tape.scalar_value(id);
        if !v.is_finite() {
            return Err(XmError::NonFinite { term: name.into(), step: 0 });
        }
    }
    let p_term = tape.mul_scalar(l_p, w.eta_p);
    let cl_term = tape.mul_scalar(l_cl, w.eta_cl);
    let partial = tape.add(l_adv, p_term);
    Ok(tape.add(partial, cl_term))
}

// ── Per-episode loss graphs ─────────────────────────────────────────

/// Per-step record of the loss components; `total` is the weighted
/// generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_p: f64,
    pub l_cl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DStepScalars {
    pub adv: f64,
    pub cls: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GStepScalars {
    pub adv: f64,
    pub perc: f64,
    pub cls: f64,
    pub total: f64,
}

/// Discriminator-side graph for one episode: hinge on (real base, detached
/// fake) plus the auxiliary class loss on the real image. Returns the loss
/// node and the component values.
pub fn build_d_loss(
    ctx: &mut Ctx,
    model: &FewShotGan,
    ep: &Episode,
    label: usize,
    weights: &LossWeights,
    mode: ModulationMode,
) -> (TensorId, DStepScalars) {
    ctx.set_freeze(true);
    let fake = model.gen.generate(ctx, ep, mode);
    ctx.set_freeze(false);
    let fake_detached = ctx.tape.detach(fake);
    let (fake_score, _) = model.disc.forward(ctx, fake_detached);
    let (real_score, real_logits) = model.disc.forward_image(ctx, &ep.base);
    let adv = hinge_d_loss(ctx.tape, real_score, fake_score);
    let cls = classification_loss(ctx.tape, real_logits, &[label]);
    let cls_term = ctx.tape.mul_scalar(cls, weights.eta_cl);
    let total = ctx.tape.add(adv, cls_term);
    let scalars = DStepScalars {
        adv: ctx.tape.scalar_value(adv),
        cls: ctx.tape.scalar_value(cls),
    };
    (total, scalars)
}

/// Generator-side graph for one episode: hinge on the attached fake,
/// perceptual pull toward the references, and the class loss on the fake.
#[allow(clippy::too_many_arguments)]
pub fn build_g_loss(
    ctx: &mut Ctx,
    model: &FewShotGan,
    ep: &Episode,
    label: usize,
    weights: &LossWeights,
    phi: &PerceptualExtractor,
    mode: ModulationMode,
    perc: PerceptualMode,
) -> Result<(TensorId, GStepScalars)> {
    let fake = model.gen.generate(ctx, ep, mode);
    ctx.set_freeze(true);
    let (fake_score, fake_logits) = model.disc.forward(ctx, fake);
    ctx.set_freeze(false);
    let adv = hinge_g_loss(ctx.tape, fake_score);
    let k1 = ep.refs.len();
    let p = match perc {
        PerceptualMode::Off => {
            let zero = ctx.tape.leaf(Tensor::scalar(0.0));
            ctx.tape.add_scalar(zero, 0.0)
        }
        PerceptualMode::Uniform => {
            let w = vec![1.0 / k1 as f64; k1];
            perceptual_loss(ctx.tape, phi, fake, &ep.refs, &w)
        }
        PerceptualMode::Alpha => perceptual_loss(ctx.tape, phi, fake, &ep.refs, &ep.alphas),
    };
    let cls = classification_loss(ctx.tape, fake_logits, &[label]);
    let total = total_g_loss(ctx.tape, adv, p, cls, weights)?;
    let scalars = GStepScalars {
        adv: ctx.tape.scalar_value(adv),
        perc: ctx.tape.scalar_value(p),
        cls: ctx.tape.scalar_value(cls),
        total: ctx.tape.scalar_value(total),
    };
    Ok((total, scalars))
}
