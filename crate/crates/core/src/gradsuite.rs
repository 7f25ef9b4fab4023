//! End-to-end gradient verification suite.
//!
//! Covers every differentiable tape operation on random small instances,
//! then checks the full generator and discriminator losses on a miniature
//! model against central differences, one representative parameter per
//! layer kind with all coordinates probed.

use crate::data::Episode;
use crate::fusion::ModulationMode;
use crate::gradcheck::{grad_check, DEFAULT_STEP};
use crate::metrics::PerceptualExtractor;
use crate::model::{build_d_loss, build_g_loss, FewShotGan, LossWeights, NetConfig, PerceptualMode};
use crate::nn::{self, Ctx, Mode};
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

pub const TOLERANCE: f64 = 1e-4;

fn tiny_net() -> NetConfig {
    NetConfig {
        image_size: 8,
        enc_channels: vec![4, 8],
        heads: 2,
        noise_dim: 4,
        seen_classes: 3,
    }
}

fn synthetic_episode(seed: u64, cfg: &NetConfig) -> Episode {
    let mut r = rng::stream(seed, rng::domain::GRADCHECK, &[7000]);
    let s = cfg.image_size;
    let alphas = rng::flat_simplex(&mut r, 2);
    Episode {
        class_id: 0,
        base_index: 0,
        ref_indices: vec![1, 2],
        base: Tensor::randn(vec![3, s, s], 0.5, &mut r),
        refs: (0..2).map(|_| Tensor::randn(vec![3, s, s], 0.5, &mut r)).collect(),
        alphas,
        zs: (0..2)
            .map(|_| Tensor::from_vec(vec![cfg.noise_dim], rng::normal_vec(&mut r, cfg.noise_dim)))
            .collect(),
    }
}

fn op_checks(seed: u64, out: &mut Vec<CheckResult>) {
    let mut r = rng::stream(seed, rng::domain::GRADCHECK, &[7100]);
    let x = Tensor::randn(vec![3, 4], 1.0, &mut r);
    let other = Tensor::randn(vec![3, 4], 1.0, &mut r);
    let w = Tensor::randn(vec![4, 3], 0.5, &mut r);
    let v = Tensor::randn(vec![4], 0.5, &mut r);
    let img = Tensor::randn(vec![1, 2, 6, 6], 1.0, &mut r);
    let kernel = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut r);
    let tkernel = Tensor::randn(vec![2, 3, 4, 4], 0.5, &mut r);
    let bias3 = Tensor::randn(vec![3], 0.5, &mut r);
    let gamma = Tensor::randn(vec![2], 0.4, &mut r);

    // keep elementwise probes away from the leaky-relu kink
    let mut x_off = x.clone();
    for vv in &mut x_off.data {
        if vv.abs() < 1e-3 {
            *vv += 0.1_f64.copysign(*vv);
        }
    }

    let mut check = |name: &str, f: &dyn Fn(&mut Tape, TensorId) -> TensorId, at: &Tensor| {
        let err = grad_check(f, at, DEFAULT_STEP);
        out.push(CheckResult { name: format!("{name}[seed {seed}]"), max_rel_err: err });
    };

    check("add_sub_mul_neg_scalar", &{
        let o = other.clone();
        move |t: &mut Tape, xid| {
            let oid = t.param(&o);
            let a = t.add(xid, oid);
            let b = t.sub(a, oid);
            let c = t.mul(b, oid);
            let d = t.neg(c);
            let e = t.mul_scalar(d, 0.7);
            let f = t.add_scalar(e, 0.1);
            t.sum_all(f)
        }
    }, &x);
    check("matmul_transpose", &{
        let w = w.clone();
        move |t: &mut Tape, xid| {
            let wid = t.param(&w);
            let y = t.matmul(xid, wid);
            let yt = t.transpose(y);
            let sq = t.mul(yt, yt);
            t.sum_all(sq)
        }
    }, &x);
    check("rowvec_ops", &{
        let v = v.clone();
        move |t: &mut Tape, xid| {
            let vid = t.param(&v);
            let a = t.mul_rowvec(xid, vid);
            let b = t.add_rowvec(a, vid);
            t.mean_all(b)
        }
    }, &x);
    check("softmax_rows", &|t: &mut Tape, xid| {
        let s = t.softmax_rows(xid);
        let sq = t.mul(s, s);
        t.sum_all(sq)
    }, &x);
    check("normalize_rows", &|t: &mut Tape, xid| {
        let n = t.normalize_rows(xid, 1e-5);
        let g = t.gelu(n);
        t.sum_all(g)
    }, &x);
    check("leaky_relu_tanh", &|t: &mut Tape, xid| {
        let a = t.leaky_relu(xid, 0.2);
        let b = t.tanh(a);
        t.sum_all(b)
    }, &x_off);
    check("slice_concat_reshape", &|t: &mut Tape, xid| {
        let a = t.slice_cols(xid, 0, 2);
        let b = t.slice_cols(xid, 2, 2);
        let c = t.concat_cols(&[b, a]);
        let d = t.reshape(c, vec![4, 3]);
        let sq = t.mul(d, d);
        t.mean_all(sq)
    }, &x);
    check("mean_rows", &|t: &mut Tape, xid| {
        let m = t.mean_rows(xid);
        let sq = t.mul(m, m);
        t.sum_all(sq)
    }, &x);
    check("l2_distance", &{
        let o = other.clone();
        move |t: &mut Tape, xid| {
            let oid = t.constant(&o);
            t.l2_distance(xid, oid)
        }
    }, &x);
    check("cross_entropy", &|t: &mut Tape, xid| t.cross_entropy(xid, &[2, 0, 1]), &x);
    check("conv2d", &{
        let k = kernel.clone();
        let b = bias3.clone();
        move |t: &mut Tape, xid| {
            let kid = t.param(&k);
            let bid = t.param(&b);
            let y = nn::conv2d(t, xid, kid, bid, 2, 1);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }
    }, &img);
    check("conv2d_kernel", &{
        let i = img.clone();
        let b = bias3.clone();
        move |t: &mut Tape, kid| {
            let xid = t.constant(&i);
            let bid = t.param(&b);
            let y = nn::conv2d(t, xid, kid, bid, 1, 1);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }
    }, &kernel);
    check("conv_transpose2d", &{
        let k = tkernel.clone();
        let b = bias3.clone();
        move |t: &mut Tape, xid| {
            let kid = t.param(&k);
            let bid = t.param(&b);
            let y = nn::conv_transpose2d(t, xid, kid, bid, 2, 1);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }
    }, &img);
    check("batch_norm_train", &{
        let g = gamma.clone();
        move |t: &mut Tape, xid| {
            let gid = t.param(&g);
            let bid = t.constant(&Tensor::from_vec(vec![2], vec![0.2, -0.1]));
            let (y, _, _) = nn::batch_norm_train(t, xid, gid, bid, 1e-5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }
    }, &img);
    check("batch_norm_eval", &{
        let g = gamma.clone();
        move |t: &mut Tape, xid| {
            let gid = t.param(&g);
            let bid = t.constant(&Tensor::from_vec(vec![2], vec![0.2, -0.1]));
            let y = nn::batch_norm_eval(t, xid, gid, bid, &[0.1, -0.3], &[0.9, 1.4], 1e-5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }
    }, &img);
    check("global_avg_pool", &|t: &mut Tape, xid| {
        let y = nn::global_avg_pool(t, xid);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    }, &img);
}

/// Representative learnable parameters covering every layer kind.
const G_LOSS_PARAMS: &[&str] = &[
    "gen.enc0.kernel",
    "gen.enc0.bias",
    "gen.enc1.bn.gamma",
    "gen.enc1.bn.beta",
    "gen.fusion.attn.wq0",
    "gen.fusion.attn.wk1",
    "gen.fusion.attn.wv0",
    "gen.fusion.attn.out_proj",
    "gen.fusion.modnet.feat.weight",
    "gen.fusion.modnet.alpha_weight",
    "gen.fusion.modnet.alpha_bias",
    "gen.fusion.modnet.noise.weight",
    "gen.fusion.modnet.noise.bias",
    "gen.fusion.norm_attn.scale",
    "gen.fusion.norm_attn.shift",
    "gen.fusion.ffn.expand.weight",
    "gen.fusion.ffn.contract.bias",
    "gen.fusion.norm_ffn.scale",
    "gen.dec0.kernel",
    "gen.dec0.bn.beta",
    "gen.dec1.bias",
];

const D_LOSS_PARAMS: &[&str] = &[
    "disc.trunk0.kernel",
    "disc.trunk0.bias",
    "disc.trunk1.bn.gamma",
    "disc.adv_head.weight",
    "disc.adv_head.bias",
    "disc.cls_head.weight",
    "disc.cls_head.bias",
];

fn model_loss_checks(seed: u64, out: &mut Vec<CheckResult>) {
    let cfg = tiny_net();
    let model = FewShotGan::new(&cfg, seed).unwrap();
    let ep = synthetic_episode(seed, &cfg);
    let phi = PerceptualExtractor::new(crate::metrics::PHI_SEED);
    let weights = LossWeights::default();

    let find = |name: &str| -> Tensor {
        let mut found = None;
        use crate::nn::Module;
        model.visit(&mut |p, _| {
            if p.name == name {
                found = Some(p.value.clone());
            }
        });
        found.unwrap_or_else(|| panic!("parameter {name} not found"))
    };

    for &name in G_LOSS_PARAMS {
        let value = find(name);
        let model_ref = &model;
        let ep_ref = &ep;
        let phi_ref = &phi;
        let err = grad_check(
            move |tape, xid| {
                let mut ctx = Ctx::new(tape, Mode::Train);
                ctx.override_param(name.to_string(), xid);
                let (loss, _) = build_g_loss(
                    &mut ctx,
                    model_ref,
                    ep_ref,
                    0,
                    &weights,
                    phi_ref,
                    ModulationMode::Full,
                    PerceptualMode::Alpha,
                )
                .unwrap();
                loss
            },
            &value,
            DEFAULT_STEP,
        );
        out.push(CheckResult { name: format!("g_loss/{name}[seed {seed}]"), max_rel_err: err });
    }

    for &name in D_LOSS_PARAMS {
        let value = find(name);
        let model_ref = &model;
        let ep_ref = &ep;
        let err = grad_check(
            move |tape, xid| {
                let mut ctx = Ctx::new(tape, Mode::Train);
                ctx.override_param(name.to_string(), xid);
                let (loss, _) =
                    build_d_loss(&mut ctx, model_ref, ep_ref, 0, &weights, ModulationMode::Full);
                loss
            },
            &value,
            DEFAULT_STEP,
        );
        out.push(CheckResult { name: format!("d_loss/{name}[seed {seed}]"), max_rel_err: err });
    }
}

/// The whole suite across `seeds` seeds.
pub fn run(seeds: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        op_checks(seed, &mut out);
        model_loss_checks(seed, &mut out);
    }
    out
}

pub fn worst(results: &[CheckResult]) -> &CheckResult {
    results
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        .expect("empty suite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_two_seeds() {
        let results = run(2);
        for r in &results {
            assert!(
                r.max_rel_err <= TOLERANCE,
                "{} exceeded tolerance: {}",
                r.name,
                r.max_rel_err
            );
        }
    }
}
