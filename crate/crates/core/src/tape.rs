//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! Ops compute their output eagerly and, when any input participates in
//! gradients, record a backward closure that maps the output gradient to
//! per-input gradient contributions. `backward` walks the tape once in
//! reverse, accumulating into each node; repeated calls accumulate further.
//!
//! Broadcasting is deliberately limited to what the models need: row-vector
//! add/mul against a matrix, and scalar add/mul. Everything else is
//! same-shape elementwise, 2-D matmul, or a dedicated fused op.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

type BackFn = Box<dyn Fn(&[f64]) -> Vec<(TensorId, Vec<f64>)>>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Raw triple-loop matrix product, shared by forward and backward rules.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Node access ─────────────────────────────────────────────────

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Scalar convenience: the single value of a [1] tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert!(v.is_scalar(), "expected scalar, got shape {:?}", v.shape);
        v.data[0]
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, back: Option<BackFn>) -> TensorId {
        debug_assert!(data.iter().all(|x| x.is_finite()), "non-finite value produced on tape");
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value: Tensor { shape, data, requires_grad, grad: None },
            back: if requires_grad { back } else { None },
        });
        id
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Insert a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, mut t: Tensor) -> TensorId {
        t.grad = None;
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value: t, back: None });
        id
    }

    /// Leaf that participates in gradients.
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        let mut c = t.clone();
        c.requires_grad = true;
        self.leaf(c)
    }

    /// Leaf excluded from gradients.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        let mut c = t.clone();
        c.requires_grad = false;
        self.leaf(c)
    }

    /// Copy a node's value back out as a detached tensor.
    pub fn detach_value(&self, id: TensorId) -> Tensor {
        let mut t = self.nodes[id.0].value.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    /// Re-enter a node's value as a gradient-free leaf.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let t = self.detach_value(id);
        self.leaf(t)
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa, sb, "add: shape mismatch {:?} vs {:?}", sa, sb);
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: BackFn = Box::new(move |g| {
            let mut out = Vec::new();
            if na {
                out.push((a, g.to_vec()));
            }
            if nb {
                out.push((b, g.to_vec()));
            }
            out
        });
        self.push(sa, data, na || nb, Some(back))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa, sb, "sub: shape mismatch {:?} vs {:?}", sa, sb);
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: BackFn = Box::new(move |g| {
            let mut out = Vec::new();
            if na {
                out.push((a, g.to_vec()));
            }
            if nb {
                out.push((b, g.iter().map(|v| -v).collect()));
            }
            out
        });
        self.push(sa, data, na || nb, Some(back))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa, sb, "mul: shape mismatch {:?} vs {:?}", sa, sb);
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();
        let data: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: BackFn = Box::new(move |g| {
            let mut out = Vec::new();
            if na {
                out.push((a, g.iter().zip(&bv).map(|(gv, y)| gv * y).collect()));
            }
            if nb {
                out.push((b, g.iter().zip(&av).map(|(gv, x)| gv * x).collect()));
            }
            out
        });
        self.push(sa, data, na || nb, Some(back))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a, g.iter().map(|v| -v).collect())]);
        self.push(sa, data, na, Some(back))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a, g.to_vec())]);
        self.push(sa, data, na, Some(back))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a, g.iter().map(|v| v * c).collect())]);
        self.push(sa, data, na, Some(back))
    }

    // ── Row-vector broadcasting against a matrix ────────────────────

    /// `x[r,c] + v[c]`, v added to every row.
    pub fn add_rowvec(&mut self, x: TensorId, v: TensorId) -> TensorId {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        assert!(
            sx.len() == 2 && sv.len() == 1 && sv[0] == sx[1],
            "add_rowvec: shape mismatch {:?} vs {:?}",
            sx,
            sv
        );
        let (r, c) = (sx[0], sx[1]);
        let vv = self.data(v).to_vec();
        let mut data = self.data(x).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vv[j];
            }
        }
        let (nx, nv) = (self.needs(x), self.needs(v));
        let back: BackFn = Box::new(move |g| {
            let mut out = Vec::new();
            if nx {
                out.push((x, g.to_vec()));
            }
            if nv {
                let mut gv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gv[j] += g[i * c + j];
                    }
                }
                out.push((v, gv));
            }
            out
        });
        self.push(sx, data, nx || nv, Some(back))
    }

    /// `x[r,c] * v[c]`, each row scaled elementwise by v.
    pub fn mul_rowvec(&mut self, x: TensorId, v: TensorId) -> TensorId {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        assert!(
            sx.len() == 2 && sv.len() == 1 && sv[0] == sx[1],
            "mul_rowvec: shape mismatch {:?} vs {:?}",
            sx,
            sv
        );
        let (r, c) = (sx[0], sx[1]);
        let xv = self.data(x).to_vec();
        let vv = self.data(v).to_vec();
        let mut data = xv.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= vv[j];
            }
        }
        let (nx, nv) = (self.needs(x), self.needs(v));
        let back: BackFn = Box::new(move |g| {
            let mut out = Vec::new();
            if nx {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[i * c + j] * vv[j];
                    }
                }
                out.push((x, gx));
            }
            if nv {
                let mut gv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gv[j] += g[i * c + j] * xv[i * c + j];
                    }
                }
                out.push((v, gv));
            }
            out
        });
        self.push(sx, data, nx || nv, Some(back))
    }

    // ── Matrix ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();
        let data = matmul_raw(&av, &bv, m, k, n);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: BackFn = Box::new(move |g| {
            let mut out = Vec::new();
            if na {
                // dA = G * B^T
                let bt = transpose_raw(&bv, k, n);
                out.push((a, matmul_raw(g, &bt, m, n, k)));
            }
            if nb {
                // dB = A^T * G
                let at = transpose_raw(&av, m, k);
                out.push((b, matmul_raw(&at, g, k, m, n)));
            }
            out
        });
        self.push(vec![m, n], data, na || nb, Some(back))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "transpose expects 2-D, got {:?}", sa);
        let (r, c) = (sa[0], sa[1]);
        let data = transpose_raw(self.data(a), r, c);
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a, transpose_raw(g, c, r))]);
        self.push(vec![c, r], data, na, Some(back))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.data(a).len(),
            "reshape: {:?} incompatible with {:?}",
            self.shape(a),
            shape
        );
        let data = self.data(a).to_vec();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a, g.to_vec())]);
        self.push(shape, data, na, Some(back))
    }

    /// Columns `[start, start+width)` of a matrix.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, width: usize) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert!(
            sa.len() == 2 && start + width <= sa[1],
            "slice_cols: [{start}, {}) out of bounds for {:?}",
            start + width,
            sa
        );
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = vec![0.0; r * width];
        for i in 0..r {
            data[i * width..(i + 1) * width].copy_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + start..i * c + start + width].copy_from_slice(&g[i * width..(i + 1) * width]);
            }
            vec![(a, gx)]
        });
        self.push(vec![r, width], data, na, Some(back))
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let r = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert!(s.len() == 2 && s[0] == r, "concat_cols: row mismatch {:?}", s);
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let ids: Vec<TensorId> = parts.to_vec();
        let any = needs.iter().any(|&n| n);
        let back: BackFn = Box::new(move |g| {
            let mut out = Vec::new();
            let mut offset = 0;
            for ((&p, &w), &n) in ids.iter().zip(&widths).zip(&needs) {
                if n {
                    let mut gp = vec![0.0; r * w];
                    for i in 0..r {
                        gp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    out.push((p, gp));
                }
                offset += w;
            }
            out
        });
        self.push(vec![r, total], data, any, Some(back))
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let sa = self.shape(a).to_vec();
        let xv = self.data(a).to_vec();
        let data: Vec<f64> = xv.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            vec![(
                a,
                g.iter()
                    .zip(&xv)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { gv * slope })
                    .collect(),
            )]
        });
        self.push(sa, data, na, Some(back))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.leaky_relu(a, 0.0)
    }

    /// tanh-approximated GELU; smooth, which keeps finite-difference checks clean.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let sa = self.shape(a).to_vec();
        let xv = self.data(a).to_vec();
        let data: Vec<f64> = xv
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()))
            .collect();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            vec![(
                a,
                g.iter()
                    .zip(&xv)
                    .map(|(gv, &x)| {
                        let t = (C * (x + K * x * x * x)).tanh();
                        let d_inner = C * (1.0 + 3.0 * K * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)
                    })
                    .collect(),
            )]
        });
        self.push(sa, data, na, Some(back))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let yv = data.clone();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            vec![(a, g.iter().zip(&yv).map(|(gv, &y)| gv * (1.0 - y * y)).collect())]
        });
        self.push(sa, data, na, Some(back))
    }

    // ── Row-wise softmax and normalization ──────────────────────────

    /// Softmax over each row, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "softmax_rows expects 2-D, got {:?}", sa);
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let yv = data.clone();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            // ds_j = s_j * (g_j - sum_k g_k s_k) per row
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let s = &yv[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = s.iter().zip(gr).map(|(sv, gv)| sv * gv).sum();
                for j in 0..c {
                    gx[i * c + j] = s[j] * (gr[j] - dot);
                }
            }
            vec![(a, gx)]
        });
        self.push(sa, data, na, Some(back))
    }

    /// Per-row normalization to zero mean and unit variance (population),
    /// without affine scaling. Scale/shift are composed on top by callers.
    pub fn normalize_rows(&mut self, a: TensorId, eps: f64) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "normalize_rows expects 2-D, got {:?}", sa);
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        let mut inv_stds = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            inv_stds[i] = inv_std;
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std;
            }
        }
        let yv = data.clone();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let mut gx = vec![0.0; r * c];
            let cf = c as f64;
            for i in 0..r {
                let y = &yv[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let g_mean: f64 = gr.iter().sum::<f64>() / cf;
                let gy_mean: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum::<f64>() / cf;
                for j in 0..c {
                    gx[i * c + j] = inv_stds[i] * (gr[j] - g_mean - y[j] * gy_mean);
                }
            }
            vec![(a, gx)]
        });
        self.push(sa, data, na, Some(back))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().sum();
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a, vec![g[0]; n])]);
        self.push(vec![1], vec![s], na, Some(back))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a, vec![g[0] / n as f64; n])]);
        self.push(vec![1], vec![s], na, Some(back))
    }

    /// Column means of a matrix: `[r,c] -> [c]`.
    pub fn mean_rows(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "mean_rows expects 2-D, got {:?}", sa);
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let na = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j] / r as f64;
                }
            }
            vec![(a, gx)]
        });
        self.push(vec![c], data, na, Some(back))
    }

    /// Euclidean distance between two same-shape tensors, as a scalar.
    pub fn l2_distance(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa, sb, "l2_distance: shape mismatch {:?} vs {:?}", sa, sb);
        let diff: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: BackFn = Box::new(move |g| {
            let mut out = Vec::new();
            if dist < 1e-12 {
                // gradient of the norm is undefined at zero; use zero subgradient
                if na {
                    out.push((a, vec![0.0; diff.len()]));
                }
                if nb {
                    out.push((b, vec![0.0; diff.len()]));
                }
                return out;
            }
            let scale = g[0] / dist;
            if na {
                out.push((a, diff.iter().map(|d| d * scale).collect()));
            }
            if nb {
                out.push((b, diff.iter().map(|d| -d * scale).collect()));
            }
            out
        });
        self.push(vec![1], vec![dist], na || nb, Some(back))
    }

    /// Mean cross-entropy of row logits against class labels, with
    /// log-sum-exp stabilization.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> TensorId {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2, "cross_entropy expects [batch, classes], got {:?}", s);
        let (b, c) = (s[0], s[1]);
        assert_eq!(labels.len(), b, "cross_entropy: {} labels for batch {}", labels.len(), b);
        for &l in labels {
            assert!(l < c, "cross_entropy: label {} out of range for {} classes", l, c);
        }
        let lv = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            loss -= row[label] - lse;
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        let nl = self.needs(logits);
        let back: BackFn = Box::new(move |g| {
            let mut gx = vec![0.0; b * c];
            for (i, &label) in labels.iter().enumerate() {
                let row = &lv[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..c {
                    let p = exps[j] / sum;
                    let target = if j == label { 1.0 } else { 0.0 };
                    gx[i * c + j] = g[0] * (p - target) / b as f64;
                }
            }
            vec![(logits, gx)]
        });
        self.push(vec![1], vec![loss], nl, Some(back))
    }

    // ── Fused image ops (recorded here, built in `nn`) ─────────────

    pub(crate) fn push_op(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        back: BackFn,
    ) -> TensorId {
        self.push(shape, data, requires_grad, Some(back))
    }

    pub(crate) fn input_needs(&self, id: TensorId) -> bool {
        self.needs(id)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate `grad` on every `requires_grad` node reachable from `loss`.
    /// Calling again without clearing accumulates, matching gradient
    /// accumulation over multiple losses.
    pub fn backward(&mut self, loss: TensorId) {
        {
            let v = &self.nodes[loss.0].value;
            assert!(
                v.is_scalar(),
                "backward requires a scalar loss, got shape {:?}",
                v.shape
            );
        }
        let mut pass: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        pass.resize_with(loss.0 + 1, || None);
        pass[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            {
                let node = &mut self.nodes[i];
                if node.value.requires_grad {
                    let acc = node.value.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
            if let Some(back) = &self.nodes[i].back {
                for (id, contrib) in back(&g) {
                    debug_assert!(id.0 < i, "tape order violated: {} -> {}", i, id.0);
                    match &mut pass[id.0] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&contrib) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }
    }
}
