//! Controllable fusion of base and reference feature tokens.
//!
//! One fusion pass runs, per reference: multi-head cross-attention with
//! queries from the base tokens and keys/values from the reference tokens
//! (plus a residual add of the base), then modulated layer normalization,
//! then a point-wise feed-forward refinement capped by a second modulated
//! normalization. The per-reference outputs are blended with the control
//! weights `alpha` into a single token map.
//!
//! The modulation vector for reference `i` combines a pooled global feature
//! of that reference, an affine embedding of `alpha_i`, and a projected
//! noise vector:
//!
//! ```text
//! w_i = global(ref_i) ⊙ (A·alpha_i + a0) + N(z_i)
//! ```
//!
//! and scales/shifts normalized tokens as `(scale ⊙ w_i) ⊙ x̂ + (shift ⊙ w_i)`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, XmError};
use crate::nn::{Ctx, Linear, Module, Param, ParamKind};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// How the normalization layers derive their modulation vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModulationMode {
    /// Plain layer norm: learnable scale/shift, no modulation vector.
    Plain,
    /// Modulation from projected noise only.
    NoiseOnly,
    /// Pooled reference feature ⊙ alpha embedding + projected noise.
    Full,
}

// ── Cross-attention ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Vec<Param>,
    pub wk: Vec<Param>,
    pub wv: Vec<Param>,
    pub out_proj: Param,
}

impl CrossAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(XmError::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let head_dim = dim / heads;
        let std = (1.0 / dim as f64).sqrt();
        let mk = |tag: &str, m: usize, rng: &mut ChaCha8Rng| {
            Param::new(format!("{name}.{tag}{m}"), Tensor::randn(vec![dim, head_dim], std, rng))
        };
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for m in 0..heads {
            wq.push(mk("wq", m, rng));
            wk.push(mk("wk", m, rng));
            wv.push(mk("wv", m, rng));
        }
        Ok(CrossAttention {
            dim,
            heads,
            head_dim,
            wq,
            wk,
            wv,
            out_proj: Param::new(format!("{name}.out_proj"), Tensor::randn(vec![dim, dim], std, rng)),
        })
    }

    /// Queries from `base`, keys/values from `reference`; residual add of
    /// `base` on the projected head concatenation.
    pub fn forward(&self, ctx: &mut Ctx, base: TensorId, reference: TensorId) -> TensorId {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let wq = ctx.bind(&self.wq[m]);
            let wk = ctx.bind(&self.wk[m]);
            let wv = ctx.bind(&self.wv[m]);
            let q = ctx.tape.matmul(base, wq);
            let k = ctx.tape.matmul(reference, wk);
            let v = ctx.tape.matmul(reference, wv);
            let kt = ctx.tape.transpose(k);
            let logits = ctx.tape.matmul(q, kt);
            let scaled = ctx.tape.mul_scalar(logits, scale);
            let attn = ctx.tape.softmax_rows(scaled);
            head_outs.push(ctx.tape.matmul(attn, v));
        }
        let merged = ctx.tape.concat_cols(&head_outs);
        let w = ctx.bind(&self.out_proj);
        let projected = ctx.tape.matmul(merged, w);
        ctx.tape.add(projected, base)
    }
}

impl Module for CrossAttention {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        for p in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            f(p, ParamKind::Learnable);
        }
        f(&self.out_proj, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        for p in self.wq.iter_mut().chain(self.wk.iter_mut()).chain(self.wv.iter_mut()) {
            f(p, ParamKind::Learnable);
        }
        f(&mut self.out_proj, ParamKind::Learnable);
    }
}

// ── Modulation network ──────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ModulationNet {
    pub feat: Linear,
    pub alpha_weight: Param,
    pub alpha_bias: Param,
    pub noise: Linear,
}

impl ModulationNet {
    pub fn new(name: &str, dim: usize, noise_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ModulationNet {
            feat: Linear::new(&format!("{name}.feat"), dim, dim, rng),
            alpha_weight: Param::new(
                format!("{name}.alpha_weight"),
                Tensor::randn(vec![dim], 1.0, rng),
            ),
            alpha_bias: Param::new(format!("{name}.alpha_bias"), Tensor::full(vec![dim], 1.0)),
            noise: Linear::new(&format!("{name}.noise"), noise_dim, dim, rng),
        }
    }

    /// Project the noise vector to a `[dim]` modulation term.
    pub fn noise_term(&self, ctx: &mut Ctx, z: &Tensor) -> TensorId {
        let zdim = z.numel();
        let mut row = z.clone();
        row.shape = vec![1, zdim];
        row.requires_grad = false;
        let zrow = ctx.tape.leaf(row);
        let projected = self.noise.forward(ctx, zrow);
        let dim = self.alpha_weight.value.numel();
        ctx.tape.reshape(projected, vec![dim])
    }

    /// Full modulation vector: pooled reference feature ⊙ alpha embedding
    /// plus the noise term.
    pub fn forward(&self, ctx: &mut Ctx, ref_tokens: TensorId, alpha: f64, z: &Tensor) -> TensorId {
        let mapped = self.feat.forward(ctx, ref_tokens);
        let global = ctx.tape.mean_rows(mapped);
        let aw = ctx.bind(&self.alpha_weight);
        let ab = ctx.bind(&self.alpha_bias);
        let scaled = ctx.tape.mul_scalar(aw, alpha);
        let alpha_embed = ctx.tape.add(scaled, ab);
        let gated = ctx.tape.mul(global, alpha_embed);
        let zn = self.noise_term(ctx, z);
        ctx.tape.add(gated, zn)
    }
}

impl Module for ModulationNet {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        self.feat.visit(f);
        f(&self.alpha_weight, ParamKind::Learnable);
        f(&self.alpha_bias, ParamKind::Learnable);
        self.noise.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        self.feat.visit_mut(f);
        f(&mut self.alpha_weight, ParamKind::Learnable);
        f(&mut self.alpha_bias, ParamKind::Learnable);
        self.noise.visit_mut(f);
    }
}

// ── Modulated layer normalization ───────────────────────────────────

/// Layer norm over the channel axis of each token, with scale and shift
/// gated elementwise by a per-sample modulation vector when present.
#[derive(Clone, Debug)]
pub struct ModLayerNorm {
    pub scale: Param,
    pub shift: Param,
    pub eps: f64,
}

impl ModLayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        ModLayerNorm {
            scale: Param::new(format!("{name}.scale"), Tensor::full(vec![dim], 1.0)),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros(vec![dim])),
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId, modulation: Option<TensorId>) -> TensorId {
        let normed = ctx.tape.normalize_rows(x, self.eps);
        let scale = ctx.bind(&self.scale);
        let shift = ctx.bind(&self.shift);
        let (lam, bet) = match modulation {
            Some(w) => (ctx.tape.mul(scale, w), ctx.tape.mul(shift, w)),
            None => (scale, shift),
        };
        let scaled = ctx.tape.mul_rowvec(normed, lam);
        ctx.tape.add_rowvec(scaled, bet)
    }
}

impl Module for ModLayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        f(&self.scale, ParamKind::Learnable);
        f(&self.shift, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        f(&mut self.scale, ParamKind::Learnable);
        f(&mut self.shift, ParamKind::Learnable);
    }
}

// ── Feed-forward refinement ─────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Ffn {
    pub expand: Linear,
    pub contract: Linear,
}

impl Ffn {
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Ffn {
            expand: Linear::new(&format!("{name}.expand"), dim, hidden, rng),
            contract: Linear::new(&format!("{name}.contract"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: TensorId) -> TensorId {
        let e = self.expand.forward(ctx, x);
        let a = ctx.tape.gelu(e);
        self.contract.forward(ctx, a)
    }
}

impl Module for Ffn {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        self.expand.visit(f);
        self.contract.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        self.expand.visit_mut(f);
        self.contract.visit_mut(f);
    }
}

// ── Fusion ──────────────────────────────────────────────────────────

/// Weighted sum of same-shape token maps. Weights are control inputs, not
/// learnable values.
pub fn fuse(tape: &mut Tape, parts: &[TensorId], weights: &[f64]) -> TensorId {
    assert!(
        !parts.is_empty() && parts.len() == weights.len(),
        "fuse: {} parts vs {} weights",
        parts.len(),
        weights.len()
    );
    let mut acc = tape.mul_scalar(parts[0], weights[0]);
    for (&p, &w) in parts.iter().zip(weights).skip(1) {
        let term = tape.mul_scalar(p, w);
        acc = tape.add(acc, term);
    }
    acc
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub dim: usize,
    pub noise_dim: usize,
    pub attn: CrossAttention,
    pub modnet: ModulationNet,
    pub norm_attn: ModLayerNorm,
    pub ffn: Ffn,
    pub norm_ffn: ModLayerNorm,
}

impl FusionBlock {
    pub fn new(name: &str, dim: usize, heads: usize, noise_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FusionBlock {
            dim,
            noise_dim,
            attn: CrossAttention::new(&format!("{name}.attn"), dim, heads, rng)?,
            modnet: ModulationNet::new(&format!("{name}.modnet"), dim, noise_dim, rng),
            norm_attn: ModLayerNorm::new(&format!("{name}.norm_attn"), dim),
            ffn: Ffn::new(&format!("{name}.ffn"), dim, 4 * dim, rng),
            norm_ffn: ModLayerNorm::new(&format!("{name}.norm_ffn"), dim),
        })
    }

    /// Refinement applied per reference after attention: modulated norm,
    /// point-wise FFN with residual, and a second modulated norm.
    pub fn refine(&self, ctx: &mut Ctx, attended: TensorId, modulation: Option<TensorId>) -> TensorId {
        let o = self.norm_attn.forward(ctx, attended, modulation);
        let h = self.ffn.forward(ctx, o);
        let res = ctx.tape.add(o, h);
        self.norm_ffn.forward(ctx, res, modulation)
    }

    pub fn modulation(
        &self,
        ctx: &mut Ctx,
        reference: TensorId,
        alpha: f64,
        z: &Tensor,
        mode: ModulationMode,
    ) -> Option<TensorId> {
        match mode {
            ModulationMode::Plain => None,
            ModulationMode::NoiseOnly => Some(self.modnet.noise_term(ctx, z)),
            ModulationMode::Full => Some(self.modnet.forward(ctx, reference, alpha, z)),
        }
    }

    /// Full pass: per reference, attention -> modulated refinement; then a
    /// weighted blend of the per-reference outputs.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        base: TensorId,
        refs: &[TensorId],
        alphas: &[f64],
        zs: &[Tensor],
        mode: ModulationMode,
    ) -> TensorId {
        assert!(
            !refs.is_empty() && refs.len() == alphas.len() && refs.len() == zs.len(),
            "fusion: {} refs, {} weights, {} noise vectors",
            refs.len(),
            alphas.len(),
            zs.len()
        );
        let mut parts = Vec::with_capacity(refs.len());
        for ((&r, &a), z) in refs.iter().zip(alphas).zip(zs) {
            let attended = self.attn.forward(ctx, base, r);
            let modulation = self.modulation(ctx, r, a, z, mode);
            parts.push(self.refine(ctx, attended, modulation));
        }
        fuse(ctx.tape, &parts, alphas)
    }
}

impl Module for FusionBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param, ParamKind)) {
        self.attn.visit(f);
        self.modnet.visit(f);
        self.norm_attn.visit(f);
        self.ffn.visit(f);
        self.norm_ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param, ParamKind)) {
        self.attn.visit_mut(f);
        self.modnet.visit_mut(f);
        self.norm_attn.visit_mut(f);
        self.ffn.visit_mut(f);
        self.norm_ffn.visit_mut(f);
    }
}
