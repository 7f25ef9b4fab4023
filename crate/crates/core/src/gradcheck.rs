//! Finite-difference verification of tape gradients.
//!
//! The checker is the independent oracle for every backward rule: it
//! re-evaluates the scalar function at coordinate-wise `x ± h` and compares
//! central differences against the tape gradient.

use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|g_auto - g_fd| / max(1, |g_fd|)` for a scalar
/// function of `x` built on a fresh tape by `f`.
///
/// Panics if the function value is non-finite at or around `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    // analytic gradient
    let mut tape = Tape::new();
    let xid = tape.param(x);
    let loss = f(&mut tape, xid);
    let value = tape.scalar_value(loss);
    assert!(value.is_finite(), "grad_check: non-finite function value {value}");
    tape.backward(loss);
    let g_auto: Vec<f64> = tape
        .grad(xid)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    // central differences
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let eval = |delta: f64| -> f64 {
            let mut probe = x.clone();
            probe.requires_grad = false;
            probe.data[i] += delta;
            let mut t = Tape::new();
            let id = t.leaf(probe);
            let out = f(&mut t, id);
            let v = t.scalar_value(out);
            assert!(v.is_finite(), "grad_check: non-finite function value at coordinate {i}");
            v
        };
        let g_fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (g_auto[i] - g_fd).abs() / g_fd.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn exact_for_linear_function() {
        let mut r = rng::stream(0, rng::domain::GRADCHECK, &[1]);
        let x = Tensor::randn(vec![3, 2], 1.0, &mut r);
        let err = grad_check(|t, x| t.sum_all(x), &x, DEFAULT_STEP);
        assert!(err < 1e-10, "linear case error {err}");
    }

    #[test]
    fn softmax_row_sums_have_zero_gradient() {
        let mut r = rng::stream(0, rng::domain::GRADCHECK, &[2]);
        let x = Tensor::randn(vec![2, 4], 1.0, &mut r);
        let err = grad_check(
            |t, x| {
                let s = t.softmax_rows(x);
                t.sum_all(s)
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(err < 1e-10, "softmax sum error {err}");
    }

    #[test]
    fn core_op_gradients_across_seeds() {
        for seed in 0..10u64 {
            let mut r = rng::stream(seed, rng::domain::GRADCHECK, &[3]);
            let x = Tensor::randn(vec![3, 4], 1.0, &mut r);
            let w = Tensor::randn(vec![4, 3], 0.5, &mut r);
            let v = Tensor::randn(vec![4], 0.5, &mut r);
            let other = Tensor::randn(vec![3, 4], 1.0, &mut r);

            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, TensorId) -> TensorId>)> = vec![
                ("matmul", {
                    let w = w.clone();
                    Box::new(move |t: &mut Tape, x: TensorId| {
                        let wid = t.constant(&w);
                        let y = t.matmul(x, wid);
                        t.sum_all(y)
                    })
                }),
                ("softmax_weighted", Box::new(|t: &mut Tape, x: TensorId| {
                    let s = t.softmax_rows(x);
                    let sq = t.mul(s, s);
                    t.sum_all(sq)
                })),
                ("normalize_rows", Box::new(|t: &mut Tape, x: TensorId| {
                    let n = t.normalize_rows(x, 1e-5);
                    let sq = t.mul(n, n);
                    let c = t.add_scalar(sq, 0.5);
                    let g = t.gelu(c);
                    t.mean_all(g)
                })),
                ("rowvec_ops", {
                    let v = v.clone();
                    Box::new(move |t: &mut Tape, x: TensorId| {
                        let vid = t.param(&v);
                        let a = t.mul_rowvec(x, vid);
                        let b = t.add_rowvec(a, vid);
                        let th = t.tanh(b);
                        t.sum_all(th)
                    })
                }),
                ("mixed_arith", {
                    let o = other.clone();
                    Box::new(move |t: &mut Tape, x: TensorId| {
                        let oid = t.param(&o);
                        let p = t.mul(x, oid);
                        let q = t.sub(p, oid);
                        let e = t.mul_scalar(q, 0.3);
                        let m = t.mean_rows(e);
                        let n = t.neg(m);
                        t.sum_all(n)
                    })
                }),
                ("slice_concat_transpose", Box::new(|t: &mut Tape, x: TensorId| {
                    let a = t.slice_cols(x, 0, 2);
                    let b = t.slice_cols(x, 2, 2);
                    let c = t.concat_cols(&[b, a]);
                    let ct = t.transpose(c);
                    let r = t.reshape(ct, vec![3, 4]);
                    let sq = t.mul(r, r);
                    t.sum_all(sq)
                })),
                ("l2_distance", {
                    let o = other.clone();
                    Box::new(move |t: &mut Tape, x: TensorId| {
                        let oid = t.constant(&o);
                        t.l2_distance(x, oid)
                    })
                }),
                ("cross_entropy", Box::new(|t: &mut Tape, x: TensorId| {
                    t.cross_entropy(x, &[0, 2, 1])
                })),
            ];

            for (name, f) in cases {
                let err = grad_check(f.as_ref(), &x, DEFAULT_STEP);
                assert!(err <= 1e-4, "{name} seed {seed}: max rel error {err}");
            }
        }
    }

    #[test]
    fn leaky_relu_gradient_away_from_kink() {
        for seed in 0..10u64 {
            let mut r = rng::stream(seed, rng::domain::GRADCHECK, &[4]);
            let mut x = Tensor::randn(vec![4, 4], 1.0, &mut r);
            // keep probes clear of the kink at zero
            for v in &mut x.data {
                if v.abs() < 1e-3 {
                    *v += 0.1_f64.copysign(*v);
                }
            }
            let err = grad_check(
                |t, x| {
                    let y = t.leaky_relu(x, 0.2);
                    let sq = t.mul(y, y);
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            );
            assert!(err <= 1e-4, "leaky_relu seed {seed}: {err}");
        }
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_function_is_rejected() {
        let x = Tensor::from_vec(vec![1], vec![0.0]);
        grad_check(
            |t, x| {
                // 1/x at 0 -> inf; surfaces as an evaluation error
                let y = t.add_scalar(x, 0.0);
                let inv = t.mul_scalar(y, f64::INFINITY);
                t.sum_all(inv)
            },
            &x,
            DEFAULT_STEP,
        );
    }
}
