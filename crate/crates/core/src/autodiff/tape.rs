//! Define-by-run reverse-mode tape.
//!
//! Every forward pass records its primitives on a fresh [`Tape`]; nodes are
//! appended in execution order, so the node vector is already topologically
//! sorted and [`Tape::backward`] simply walks it in reverse.
//!
//! Shape errors inside primitives are programming errors and panic with a
//! message naming the op. Data-dependent failures (out-of-range indices or
//! labels) are returned as [`Error`]s.

use std::collections::HashMap;

use super::gemm::gemm;
use super::tensor::{Param, ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1D convolution over channels-last `(B, L, C)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    pub fn symmetric(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
            pad_left: padding,
            pad_right: padding,
        }
    }

    /// Left-padded convolution: output position `t` only sees inputs `≤ t`.
    pub fn causal(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation,
            pad_left: dilation * (kernel - 1),
            pad_right: 0,
        }
    }

    /// `floor((L + pads − dilation·(kernel−1) − 1) / stride) + 1`, or `None`
    /// when the padded input is shorter than the receptive field.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + self.pad_left + self.pad_right;
        let span = self.dilation * (self.kernel - 1) + 1;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    Relu(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    StraightThrough(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a variable leaf, `None` when the loss does not reach it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Adds the recorded gradients into each parameter's `grad` slot.
    /// Parameters the loss does not reach are left untouched.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) {
        for p in params {
            if let Some(g) = self.params.get(&p.id()) {
                p.accumulate_grad(g);
            }
        }
    }
}

fn broadcast_suffix(op: &'static str, big: &[usize], small: &[usize]) {
    let ok = small.len() <= big.len() && big[big.len() - small.len()..] == *small;
    assert!(ok, "{op}: shape {small:?} does not broadcast onto {big:?}");
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn permuted_copy(src: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = src.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.numel());
    let mut idx = vec![0usize; nd];
    let data = src.data();
    for _ in 0..src.numel() {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves element count")
}

fn transpose_last2(src: &Tensor) -> Tensor {
    let nd = src.ndim();
    assert!(nd >= 2, "transpose needs at least 2 dims, got {:?}", src.shape());
    let (m, n) = (src.dim(nd - 2), src.dim(nd - 1));
    let batch = src.numel() / (m * n).max(1);
    let mut out = vec![0.0; src.numel()];
    let data = src.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = data[base + i * n + j];
            }
        }
    }
    let mut shape = src.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out).expect("transpose preserves element count")
}

/// Gathers convolution windows into a `(B·L_out, K·C_in)` matrix.
fn im2col(x: &Tensor, spec: &ConvSpec, l_out: usize) -> Vec<f64> {
    let (b, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    let k = spec.kernel;
    let row = k * c;
    let mut cols = vec![0.0; b * l_out * row];
    let data = x.data();
    for bi in 0..b {
        for t in 0..l_out {
            let dst = &mut cols[(bi * l_out + t) * row..(bi * l_out + t + 1) * row];
            for ki in 0..k {
                let pos = (t * spec.stride + ki * spec.dilation) as isize - spec.pad_left as isize;
                if pos >= 0 && (pos as usize) < l {
                    let src = (bi * l + pos as usize) * c;
                    dst[ki * c..(ki + 1) * c].copy_from_slice(&data[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], shape: &[usize], spec: &ConvSpec, l_out: usize) -> Tensor {
    let (b, l, c) = (shape[0], shape[1], shape[2]);
    let k = spec.kernel;
    let row = k * c;
    let mut dx = vec![0.0; b * l * c];
    for bi in 0..b {
        for t in 0..l_out {
            let src = &dcols[(bi * l_out + t) * row..(bi * l_out + t + 1) * row];
            for ki in 0..k {
                let pos = (t * spec.stride + ki * spec.dilation) as isize - spec.pad_left as isize;
                if pos >= 0 && (pos as usize) < l {
                    let dst = (bi * l + pos as usize) * c;
                    for ci in 0..c {
                        dx[dst + ci] += src[ki * c + ci];
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), dx).expect("col2im shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter; frozen parameters behave as constants.
    pub fn param(&mut self, p: &Param) -> Var {
        if p.requires_grad {
            self.push(p.value.clone(), Op::Param(p.id()), true)
        } else {
            self.constant(p.value.clone())
        }
    }

    /// Elementwise sum; the smaller operand may broadcast over leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = if self.value(a).ndim() >= self.value(b).ndim() {
            (a, b)
        } else {
            (b, a)
        };
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_suffix("add", va.shape(), vb.shape());
        let nb = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % nb])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Elementwise product; the smaller operand may broadcast over leading dims.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = if self.value(a).ndim() >= self.value(b).ndim() {
            (a, b)
        } else {
            (b, a)
        };
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_suffix("mul", va.shape(), vb.shape());
        let nb = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vb.data()[i % nb])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `(…, M, K) × (K, N)` with a shared right operand, or batched
    /// `(…, M, K) × (…, K, N)` with identical leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let sa = va.shape();
        let sb = vb.shape();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul: need ≥2 dims, got {sa:?} × {sb:?}");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul: inner dims {sa:?} × {sb:?}");
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let batch = va.numel() / (m * k).max(1);
        let mut out = vec![0.0; batch * m * n];
        if sb.len() == 2 {
            gemm(batch * m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        } else {
            assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul: batch dims");
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let out = Tensor::new(shape, out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose_last2(self.value(a));
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let nd = self.value(a).ndim();
        let mut seen = vec![false; nd];
        assert_eq!(perm.len(), nd, "permute: rank mismatch");
        for &p in perm {
            assert!(p < nd && !seen[p], "permute: invalid permutation {perm:?}");
            seen[p] = true;
        }
        let out = permuted_copy(self.value(a), perm);
        let ng = self.needs(a);
        self.push(out, Op::Permute(a, perm.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// 1D convolution of `x: (B, L, C_in)` with `w: (K·C_in, C_out)`, where
    /// weight row `k·C_in + c` multiplies input channel `c` at tap `k`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.ndim(), 3, "conv1d: input must be (B, L, C), got {:?}", vx.shape());
        let (b, l, c) = (vx.dim(0), vx.dim(1), vx.dim(2));
        assert_eq!(vw.ndim(), 2, "conv1d: weight must be 2D");
        assert_eq!(vw.dim(0), spec.kernel * c, "conv1d: weight rows {:?} vs K·C_in", vw.shape());
        let c_out = vw.dim(1);
        let l_out = spec
            .output_len(l)
            .unwrap_or_else(|| panic!("conv1d: input length {l} too short for {spec:?}"));
        let cols = im2col(vx, &spec, l_out);
        let mut out = vec![0.0; b * l_out * c_out];
        gemm(b * l_out, spec.kernel * c, c_out, &cols, false, vw.data(), false, &mut out, false);
        let out = Tensor::new(vec![b, l_out, c_out], out).unwrap();
        let ng = self.needs(x) || self.needs(w);
        self.push(out, Op::Conv1d { x, w, spec, cols }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// Normalizes each slice along the last dimension to zero mean and unit
    /// variance (biased estimator); no affine transform.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let width = *v.shape().last().expect("layer_norm on scalar");
        let mut out = vec![0.0; v.numel()];
        let mut rstd = Vec::with_capacity(v.numel() / width.max(1));
        for (row, dst) in v.data().chunks(width).zip(out.chunks_mut(width)) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (d, x) in dst.iter_mut().zip(row) {
                *d = (x - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(v.shape().to_vec(), out).unwrap();
        let ng = self.needs(a);
        self.push(out, Op::LayerNorm { x: a, rstd }, ng)
    }

    /// Softmax over the last dimension. With `causal`, the last two dims are
    /// a square `(S, S)` score matrix and entries above the diagonal get
    /// probability exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let v = self.value(a);
        let nd = v.ndim();
        let width = v.dim(nd - 1);
        if causal {
            assert_eq!(v.dim(nd - 2), width, "causal softmax needs square scores");
        }
        let mut out = vec![0.0; v.numel()];
        for (r, (row, dst)) in v.data().chunks(width).zip(out.chunks_mut(width)).enumerate() {
            let allowed = if causal { r % width + 1 } else { width };
            let max = row[..allowed].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..allowed {
                let e = (row[j] - max).exp();
                dst[j] = e;
                total += e;
            }
            for d in &mut dst[..allowed] {
                *d /= total;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out).unwrap();
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Mean cross-entropy of `labels` under `softmax(logits)` taken along
    /// the last dimension. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let classes = *v.shape().last().expect("cross_entropy on scalar");
        let rows = v.numel() / classes.max(1);
        if labels.len() != rows {
            return Err(Error::LengthMismatch {
                expected: rows,
                actual: labels.len(),
            });
        }
        if let Some((position, &value)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::TokenOutOfRange {
                position,
                value,
                limit: classes,
            });
        }
        let mut probs = vec![0.0; v.numel()];
        let mut loss = 0.0;
        for ((row, dst), &label) in v.data().chunks(classes).zip(probs.chunks_mut(classes)).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
            loss += max + total.ln() - row[label];
        }
        let out = Tensor::scalar(loss / rows as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.numel(), targets.len(), "bce_with_logits: target count");
        let n = targets.len() as f64;
        let loss: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss / n),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Row lookup in `table: (rows, D)`; output shape is `index_shape + [D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        assert_eq!(t.ndim(), 2, "embedding table must be 2D");
        let (rows, dim) = (t.dim(0), t.dim(1));
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::LengthMismatch {
                expected: index_shape.iter().product(),
                actual: indices.len(),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * dim);
        for (position, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(Error::TokenOutOfRange {
                    position,
                    value: i,
                    limit: rows,
                });
            }
            out.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        let out = Tensor::new(shape, out).unwrap();
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let ng = self.needs(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a);
        let shape = v.shape();
        assert!(axis < shape.len(), "mean_axis: axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &v.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in &mut out {
            *d /= len as f64;
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let out = Tensor::new(new_shape, out).unwrap();
        let ng = self.needs(a);
        self.push(out, Op::MeanAxis { x: a, axis }, ng)
    }

    /// Nearest-neighbour upsampling of `(B, L, C)` along `L`.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.ndim(), 3, "upsample expects (B, L, C)");
        let (b, l, c) = (v.dim(0), v.dim(1), v.dim(2));
        let mut out = Vec::with_capacity(v.numel() * factor);
        for bi in 0..b {
            for t in 0..l {
                let row = &v.data()[(bi * l + t) * c..(bi * l + t + 1) * c];
                for _ in 0..factor {
                    out.extend_from_slice(row);
                }
            }
        }
        let out = Tensor::new(vec![b, l * factor, c], out).unwrap();
        let ng = self.needs(a);
        self.push(out, Op::Upsample { x: a, factor }, ng)
    }

    /// Identity in the forward pass with no gradient flowing back.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.constant(out)
    }

    /// Forward value `replacement`; backward copies the incoming gradient
    /// unchanged onto `a`.
    pub fn straight_through(&mut self, a: Var, replacement: Tensor) -> Var {
        assert_eq!(
            self.value(a).shape(),
            replacement.shape(),
            "straight_through: shape mismatch"
        );
        let ng = self.needs(a);
        self.push(replacement, Op::StraightThrough(a), ng)
    }

    /// Scales each slice along the last dimension to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let width = *v.shape().last().expect("l2_normalize on scalar");
        let mut out = vec![0.0; v.numel()];
        let mut norms = Vec::with_capacity(v.numel() / width.max(1));
        for (row, dst) in v.data().chunks(width).zip(out.chunks_mut(width)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (d, x) in dst.iter_mut().zip(row) {
                *d = x / n;
            }
            norms.push(n);
        }
        let out = Tensor::new(v.shape().to_vec(), out).unwrap();
        let ng = self.needs(a);
        self.push(out, Op::L2Normalize { x: a, norms }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        let mut result = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    result.leaves.insert(i, g);
                }
                Op::Param(id) => match result.params.get_mut(id) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        result.params.insert(*id, g);
                    }
                },
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        let nb = self.value(*b).numel();
                        let mut gb = vec![0.0; nb];
                        for (j, x) in g.data().iter().enumerate() {
                            gb[j % nb] += x;
                        }
                        let gb = Tensor::new(self.value(*b).shape().to_vec(), gb).unwrap();
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let nb = vb.numel();
                    if self.needs(*a) {
                        let ga = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(j, x)| x * vb.data()[j % nb])
                            .collect();
                        accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), ga).unwrap());
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; nb];
                        for (j, (x, y)) in g.data().iter().zip(va.data()).enumerate() {
                            gb[j % nb] += x * y;
                        }
                        accumulate(&mut grads, *b, Tensor::new(vb.shape().to_vec(), gb).unwrap());
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let sa = va.shape();
                    let sb = vb.shape();
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = sb[sb.len() - 1];
                    let batch = va.numel() / (m * k).max(1);
                    let shared = sb.len() == 2;
                    if self.needs(*a) {
                        let mut ga = vec![0.0; va.numel()];
                        if shared {
                            gemm(batch * m, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                        } else {
                            for bi in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g.data()[bi * m * n..(bi + 1) * m * n],
                                    false,
                                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                                    true,
                                    &mut ga[bi * m * k..(bi + 1) * m * k],
                                    false,
                                );
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::new(sa.to_vec(), ga).unwrap());
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; vb.numel()];
                        if shared {
                            gemm(k, batch * m, n, va.data(), true, g.data(), false, &mut gb, false);
                        } else {
                            for bi in 0..batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &va.data()[bi * m * k..(bi + 1) * m * k],
                                    true,
                                    &g.data()[bi * m * n..(bi + 1) * m * n],
                                    false,
                                    &mut gb[bi * k * n..(bi + 1) * k * n],
                                    false,
                                );
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(sb.to_vec(), gb).unwrap());
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, transpose_last2(&g)),
                Op::Permute(a, perm) => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    accumulate(&mut grads, *a, permuted_copy(&g, &inverse));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape).unwrap());
                }
                Op::Conv1d { x, w, spec, cols } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (b, c) = (vx.dim(0), vx.dim(2));
                    let l_out = g.dim(1);
                    let c_out = vw.dim(1);
                    let kc = spec.kernel * c;
                    if self.needs(*w) {
                        let mut gw = vec![0.0; vw.numel()];
                        gemm(kc, b * l_out, c_out, cols, true, g.data(), false, &mut gw, false);
                        accumulate(&mut grads, *w, Tensor::new(vw.shape().to_vec(), gw).unwrap());
                    }
                    if self.needs(*x) {
                        let mut dcols = vec![0.0; b * l_out * kc];
                        gemm(b * l_out, c_out, kc, g.data(), false, vw.data(), true, &mut dcols, false);
                        accumulate(&mut grads, *x, col2im(&dcols, vx.shape(), spec, l_out));
                    }
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), data).unwrap());
                }
                Op::Abs(a) => {
                    let va = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(d, &x)| {
                            if x > 0.0 {
                                *d
                            } else if x < 0.0 {
                                -d
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), data).unwrap());
                }
                Op::LayerNorm { x, rstd } => {
                    let xhat = &node.value;
                    let width = *xhat.shape().last().unwrap();
                    let mut dx = vec![0.0; xhat.numel()];
                    for (r, ((gr, yr), dst)) in g
                        .data()
                        .chunks(width)
                        .zip(xhat.data().chunks(width))
                        .zip(dx.chunks_mut(width))
                        .enumerate()
                    {
                        let mean_g = gr.iter().sum::<f64>() / width as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = rstd[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xhat.shape().to_vec(), dx).unwrap());
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let width = *y.shape().last().unwrap();
                    let mut dx = vec![0.0; y.numel()];
                    for ((gr, yr), dst) in g.data().chunks(width).zip(y.data().chunks(width)).zip(dx.chunks_mut(width)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), dx).unwrap());
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let classes = *shape.last().unwrap();
                    let scale = g.item() / labels.len() as f64;
                    let mut dx = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        dx[r * classes + label] -= 1.0;
                    }
                    for d in &mut dx {
                        *d *= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(shape, dx).unwrap());
                }
                Op::BceWithLogits { logits, targets } => {
                    let v = self.value(*logits);
                    let scale = g.item() / targets.len() as f64;
                    let data = v
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (1.0 / (1.0 + (-z).exp()) - t) * scale)
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(v.shape().to_vec(), data).unwrap());
                }
                Op::Embedding { table, indices } => {
                    let t = self.value(*table);
                    let dim = t.dim(1);
                    let mut dt = vec![0.0; t.numel()];
                    for (row, &i) in g.data().chunks(dim).zip(indices) {
                        for (d, x) in dt[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::new(t.shape().to_vec(), dt).unwrap());
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, g.item()));
                }
                Op::Mean(a) => {
                    let v = self.value(*a);
                    let fill = g.item() / v.numel() as f64;
                    accumulate(&mut grads, *a, Tensor::full(v.shape(), fill));
                }
                Op::MeanAxis { x, axis } => {
                    let shape = self.value(*x).shape().to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let mut dx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            for (d, s) in dx[(o * len + j) * inner..(o * len + j + 1) * inner].iter_mut().zip(src) {
                                *d = s / len as f64;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx).unwrap());
                }
                Op::Upsample { x, factor } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (b, l, c) = (shape[0], shape[1], shape[2]);
                    let mut dx = vec![0.0; b * l * c];
                    for bi in 0..b {
                        for t in 0..l {
                            let dst = &mut dx[(bi * l + t) * c..(bi * l + t + 1) * c];
                            for f in 0..*factor {
                                let src = ((bi * l + t) * factor + f) * c;
                                for (d, s) in dst.iter_mut().zip(&g.data()[src..src + c]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx).unwrap());
                }
                Op::StraightThrough(a) => accumulate(&mut grads, *a, g),
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let width = *y.shape().last().unwrap();
                    let mut dx = vec![0.0; y.numel()];
                    for (r, ((gr, yr), dst)) in g
                        .data()
                        .chunks(width)
                        .zip(y.data().chunks(width))
                        .zip(dx.chunks_mut(width))
                        .enumerate()
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = (gi - yi * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
                }
            }
        }
        Ok(result)
    }
}
