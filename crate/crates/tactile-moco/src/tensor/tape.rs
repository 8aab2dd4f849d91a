//! Wengert tape: eager forward evaluation with recorded backward rules.
//!
//! Ops validate shapes, compute their output immediately, and push a node.
//! [`Tape::backward`] walks the nodes in reverse, applying each op's
//! vector-Jacobian rule, and returns the gradients of all leaves that were
//! registered with `requires_grad`. A tape is single-use: after backward it
//! is consumed and any further access is a state error.

use super::im2col::{col2im_acc, im2col, ConvGeom};
use super::{check_same_shape, gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use crate::{parallel, Error, Result};
use std::collections::HashMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<E: Scalar> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: E },
    AddScalar { a: usize },
    Relu { a: usize },
    Sqrt { a: usize },
    Linear { x: usize, w: usize, bias: usize },
    Conv2d { x: usize, k: usize, stride: usize, padding: usize },
    MaxPool2d { a: usize, argmax: Vec<u32> },
    GlobalAvgPool { a: usize },
    BroadcastSpatial { a: usize },
    UpsampleNearest2x { a: usize },
    Reshape { a: usize },
    L2NormalizeRows { a: usize, norms: Vec<E> },
    MatMulNT { a: usize, b: usize },
    BatchedKeyDots { q: usize, keys: usize },
    ConcatCols { a: usize, b: usize },
    LogSumExpRows { a: usize },
    GatherCols { a: usize, idx: Vec<usize> },
    GatherRows { a: usize, idx: Vec<usize> },
    SumRows { a: usize },
    Sum { a: usize },
    Mean { a: usize },
}

struct Node<E: Scalar> {
    op: Op<E>,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<E: Scalar> {
    grads: HashMap<usize, Vec<E>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, id: TensorId) -> Option<&[E]> {
        self.grads.get(&id.0).map(|v| v.as_slice())
    }
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a leaf, copying the tensor's buffer and grad flag.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Result<TensorId> {
        self.push_checked(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Register a constant leaf (never receives gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<E>) -> Result<TensorId> {
        self.push_checked(Op::Leaf, shape, data, false)
    }

    /// Register a gradient-tracked leaf from raw parts.
    pub fn var(&mut self, shape: Vec<usize>, data: Vec<E>) -> Result<TensorId> {
        self.push_checked(Op::Leaf, shape, data, true)
    }

    pub fn shape(&self, id: TensorId) -> Result<&[usize]> {
        self.node(id.0).map(|n| n.shape.as_slice())
    }

    /// Read a recorded value. Errors once the tape has been consumed.
    pub fn value(&self, id: TensorId) -> Result<&[E]> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        self.node(id.0).map(|n| n.data.as_slice())
    }

    pub fn scalar_value(&self, id: TensorId) -> Result<E> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got {} elements",
                v.len()
            )));
        }
        Ok(v[0])
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: E) -> Result<TensorId> {
        let an = self.node(a.0)?;
        let data: Vec<E> = an.data.iter().map(|&x| x * c).collect();
        let shape = an.shape.clone();
        let rg = an.requires_grad;
        self.push_checked(Op::Scale { a: a.0, c }, shape, data, rg)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: E) -> Result<TensorId> {
        let an = self.node(a.0)?;
        let data: Vec<E> = an.data.iter().map(|&x| x + c).collect();
        let shape = an.shape.clone();
        let rg = an.requires_grad;
        self.push_checked(Op::AddScalar { a: a.0 }, shape, data, rg)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let an = self.node(a.0)?;
        let data: Vec<E> = an
            .data
            .iter()
            .map(|&x| if x > E::zero() { x } else { E::zero() })
            .collect();
        let shape = an.shape.clone();
        let rg = an.requires_grad;
        self.push_checked(Op::Relu { a: a.0 }, shape, data, rg)
    }

    /// Elementwise square root. Requires non-negative input; the derivative
    /// at exactly 0 is defined as 0.
    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        let an = self.node(a.0)?;
        if an.data.iter().any(|&x| x < E::zero()) {
            return Err(Error::Contract("sqrt of negative value".into()));
        }
        let data: Vec<E> = an.data.iter().map(|&x| x.sqrt()).collect();
        let shape = an.shape.clone();
        let rg = an.requires_grad;
        self.push_checked(Op::Sqrt { a: a.0 }, shape, data, rg)
    }

    // ── dense layers ─────────────────────────────────────────────

    /// out[b,j] = sum_i x[b,i] * w[j,i] + bias[j]
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xs, ws, bs) = (
            self.node(x.0)?.shape.clone(),
            self.node(w.0)?.shape.clone(),
            self.node(bias.0)?.shape.clone(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::Dimension(format!(
                "linear expects x[B,Din], w[Dout,Din], bias[Dout]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (batch, din) = (xs[0], xs[1]);
        let (dout, win) = (ws[0], ws[1]);
        if din != win || bs[0] != dout {
            return Err(Error::Dimension(format!(
                "linear inner dims disagree: x[{batch},{din}], w[{dout},{win}], bias[{}]",
                bs[0]
            )));
        }
        let mut out = vec![E::zero(); batch * dout];
        gemm_nt(
            &mut out,
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            batch,
            din,
            dout,
        );
        let bias_data = &self.nodes[bias.0].data;
        for row in out.chunks_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(bias_data) {
                *o += bv;
            }
        }
        let rg = self.any_requires_grad(&[x.0, w.0, bias.0]);
        self.push_checked(
            Op::Linear {
                x: x.0,
                w: w.0,
                bias: bias.0,
            },
            vec![batch, dout],
            out,
            rg,
        )
    }

    /// 2-D cross-correlation of x[B,C,H,W] with k[F,C,kh,kw], no bias.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let geom = self.conv_geom(x, k, stride, padding)?;
        let xs = self.node(x.0)?.shape.clone();
        let batch = xs[0];
        let filters = self.node(k.0)?.shape[0];
        let (os, ckk) = (geom.out_spatial(), geom.kernel_cols());
        let in_plane = geom.channels * geom.height * geom.width;
        let out_plane = filters * os;
        let mut out = vec![E::zero(); batch * out_plane];
        let x_data = &self.nodes[x.0].data;
        let k_data = &self.nodes[k.0].data;
        parallel::for_each_chunk_mut(&mut out, out_plane, |b, out_b| {
            let mut cols = vec![E::zero(); ckk * os];
            im2col(&x_data[b * in_plane..(b + 1) * in_plane], &geom, &mut cols);
            gemm_nn(out_b, k_data, &cols, filters, ckk, os);
        });
        let rg = self.any_requires_grad(&[x.0, k.0]);
        self.push_checked(
            Op::Conv2d {
                x: x.0,
                k: k.0,
                stride,
                padding,
            },
            vec![batch, filters, geom.out_h, geom.out_w],
            out,
            rg,
        )
    }

    // ── pooling / spatial ────────────────────────────────────────

    pub fn max_pool2d(&mut self, a: TensorId, kernel: usize, stride: usize) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "max_pool2d expects [B,C,H,W], got {shape:?}"
            )));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::Contract("max_pool2d kernel/stride must be >= 1".into()));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if kernel > h || kernel > w {
            return Err(Error::Dimension(format!(
                "pool kernel {kernel} exceeds spatial dims {h}x{w}"
            )));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let data_in = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        let mut o = 0usize;
        for bi in 0..b {
            for ci in 0..c {
                let plane_off = (bi * c + ci) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0usize;
                        for di in 0..kernel {
                            for dj in 0..kernel {
                                let idx = plane_off + (i * stride + di) * w + (j * stride + dj);
                                if data_in[idx] > best {
                                    best = data_in[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx as u32;
                        o += 1;
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(
            Op::MaxPool2d { a: a.0, argmax },
            vec![b, c, oh, ow],
            out,
            rg,
        )
    }

    /// [B,C,H,W] -> [B,C] spatial mean.
    pub fn global_avg_pool(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects [B,C,H,W], got {shape:?}"
            )));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = E::from_f64(1.0 / hw as f64);
        let data_in = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); b * c];
        for (o, plane) in out.iter_mut().zip(data_in.chunks(hw)) {
            let mut acc = E::zero();
            for &v in plane {
                acc += v;
            }
            *o = acc * inv;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(Op::GlobalAvgPool { a: a.0 }, vec![b, c], out, rg)
    }

    /// [B,C] -> [B,C,h,w] by repeating each channel value spatially.
    pub fn broadcast_spatial(&mut self, a: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "broadcast_spatial expects [B,C], got {shape:?}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension("broadcast to zero-sized plane".into()));
        }
        let (b, c) = (shape[0], shape[1]);
        let data_in = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); b * c * h * w];
        for (plane, &v) in out.chunks_mut(h * w).zip(data_in.iter()) {
            plane.fill(v);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(
            Op::BroadcastSpatial { a: a.0 },
            vec![b, c, h, w],
            out,
            rg,
        )
    }

    pub fn upsample_nearest_2x(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "upsample expects [B,C,H,W], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let data_in = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); b * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for p in 0..b * c {
            let src = &data_in[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                let si = i / 2;
                for j in 0..ow {
                    dst[i * ow + j] = src[si * w + j / 2];
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(
            Op::UpsampleNearest2x { a: a.0 },
            vec![b, c, oh, ow],
            out,
            rg,
        )
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let n = self.node(a.0)?;
        let numel: usize = new_shape.iter().product();
        if numel != n.data.len() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {new_shape:?} changes element count",
                n.shape
            )));
        }
        let data = n.data.clone();
        let rg = n.requires_grad;
        self.push_checked(Op::Reshape { a: a.0 }, new_shape, data, rg)
    }

    // ── rows / similarity ────────────────────────────────────────

    /// Normalize each row of [B,D] to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "l2_normalize expects [B,D], got {shape:?}"
            )));
        }
        let d = shape[1];
        let data_in = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); data_in.len()];
        let mut norms = vec![E::zero(); shape[0]];
        let floor = E::from_f64(1e-12);
        for (r, row) in data_in.chunks(d).enumerate() {
            let mut sq = E::zero();
            for &v in row {
                sq = v.mul_add(v, sq);
            }
            let norm = sq.sqrt();
            if norm < floor {
                return Err(Error::DegenerateFeature(format!(
                    "row {r} has norm {norm} < 1e-12"
                )));
            }
            norms[r] = norm;
            let inv = E::one() / norm;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(Op::L2NormalizeRows { a: a.0, norms }, shape, out, rg)
    }

    /// out[M,N] = a[M,K] * b[N,K]^T
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (
            self.node(a.0)?.shape.clone(),
            self.node(b.0)?.shape.clone(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!(
                "matmul_nt expects [M,K] x [N,K]; got {sa:?}, {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![E::zero(); m * n];
        gemm_nt(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.any_requires_grad(&[a.0, b.0]);
        self.push_checked(Op::MatMulNT { a: a.0, b: b.0 }, vec![m, n], out, rg)
    }

    /// out[b,m] = dot(q[b,:], keys[b,m,:]) for per-row key sets.
    pub fn batched_key_dots(&mut self, q: TensorId, keys: TensorId) -> Result<TensorId> {
        let (sq, sk) = (
            self.node(q.0)?.shape.clone(),
            self.node(keys.0)?.shape.clone(),
        );
        if sq.len() != 2 || sk.len() != 3 || sq[0] != sk[0] || sq[1] != sk[2] {
            return Err(Error::Dimension(format!(
                "batched_key_dots expects q[B,D], keys[B,M,D]; got {sq:?}, {sk:?}"
            )));
        }
        let (b, d, m) = (sq[0], sq[1], sk[1]);
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[keys.0].data;
        let mut out = vec![E::zero(); b * m];
        for bi in 0..b {
            let qrow = &qd[bi * d..(bi + 1) * d];
            for mi in 0..m {
                let krow = &kd[(bi * m + mi) * d..(bi * m + mi + 1) * d];
                let mut acc = E::zero();
                for (&x, &y) in qrow.iter().zip(krow) {
                    acc = x.mul_add(y, acc);
                }
                out[bi * m + mi] = acc;
            }
        }
        let rg = self.any_requires_grad(&[q.0, keys.0]);
        self.push_checked(
            Op::BatchedKeyDots {
                q: q.0,
                keys: keys.0,
            },
            vec![b, m],
            out,
            rg,
        )
    }

    /// Column-wise concat of [B,Na] and [B,Nb].
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (
            self.node(a.0)?.shape.clone(),
            self.node(b.0)?.shape.clone(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!(
                "concat_cols expects matching batch; got {sa:?}, {sb:?}"
            )));
        }
        let (rows, na, nb) = (sa[0], sa[1], sb[1]);
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![E::zero(); rows * (na + nb)];
        for r in 0..rows {
            out[r * (na + nb)..r * (na + nb) + na].copy_from_slice(&ad[r * na..(r + 1) * na]);
            out[r * (na + nb) + na..(r + 1) * (na + nb)]
                .copy_from_slice(&bd[r * nb..(r + 1) * nb]);
        }
        let rg = self.any_requires_grad(&[a.0, b.0]);
        self.push_checked(
            Op::ConcatCols { a: a.0, b: b.0 },
            vec![rows, na + nb],
            out,
            rg,
        )
    }

    /// Row-wise log(sum(exp(x))), max-subtracted for stability. [B,N] -> [B]
    pub fn log_sum_exp_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "log_sum_exp expects [B,N], got {shape:?}"
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        let data_in = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); b];
        for (o, row) in out.iter_mut().zip(data_in.chunks(n)) {
            let mut mx = row[0];
            for &v in &row[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut acc = E::zero();
            for &v in row {
                acc += (v - mx).exp();
            }
            *o = mx + acc.ln();
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(Op::LogSumExpRows { a: a.0 }, vec![b], out, rg)
    }

    /// out[b] = x[b, idx[b]]
    pub fn gather_cols(&mut self, a: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 2 || idx.len() != shape[0] {
            return Err(Error::Dimension(format!(
                "gather_cols expects [B,N] with B indices; got {shape:?}, {} indices",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= shape[1]) {
            return Err(Error::Contract(format!(
                "gather_cols index {bad} out of range 0..{}",
                shape[1]
            )));
        }
        let n = shape[1];
        let data_in = &self.nodes[a.0].data;
        let out: Vec<E> = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| data_in[r * n + j])
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(Op::GatherCols { a: a.0, idx }, vec![shape[0]], out, rg)
    }

    /// out[r,:] = x[idx[r],:]
    pub fn gather_rows(&mut self, a: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "gather_rows expects [B,D], got {shape:?}"
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range 0..{}",
                shape[0]
            )));
        }
        let d = shape[1];
        let data_in = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); idx.len() * d];
        for (r, &src) in idx.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&data_in[src * d..(src + 1) * d]);
        }
        let rows = idx.len();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(Op::GatherRows { a: a.0, idx }, vec![rows, d], out, rg)
    }

    /// Row sums of [B,D] -> [B]
    pub fn sum_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.node(a.0)?.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "sum_rows expects [B,D], got {shape:?}"
            )));
        }
        let d = shape[1];
        let data_in = &self.nodes[a.0].data;
        let out: Vec<E> = data_in
            .chunks(d)
            .map(|row| {
                let mut acc = E::zero();
                for &v in row {
                    acc += v;
                }
                acc
            })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(Op::SumRows { a: a.0 }, vec![shape[0]], out, rg)
    }

    /// Sum of all elements -> scalar (shape []).
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.node(a.0)?;
        let mut acc = E::zero();
        for &v in &n.data {
            acc += v;
        }
        let rg = n.requires_grad;
        self.push_checked(Op::Sum { a: a.0 }, vec![], vec![acc], rg)
    }

    /// Mean of all elements -> scalar (shape []).
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.node(a.0)?;
        let count = n.data.len();
        let mut acc = E::zero();
        for &v in &n.data {
            acc += v;
        }
        let val = acc * E::from_f64(1.0 / count as f64);
        let rg = n.requires_grad;
        self.push_checked(Op::Mean { a: a.0 }, vec![], vec![val], rg)
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradients of all
    /// gradient-tracked leaves, then clears the tape; the tape cannot be
    /// used again.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients<E>> {
        if self.consumed {
            return Err(Error::State(
                "backward called on an already-consumed tape".into(),
            ));
        }
        let loss_node = self.node(loss.0)?;
        if loss_node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.apply_backward(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // keep leaf gradients for the result
            }
        }

        let mut out = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                    out.insert(i, g);
                }
            }
        }
        // release forward buffers; the tape is single-use
        for n in &mut self.nodes {
            n.data = Vec::new();
        }
        self.consumed = true;
        Ok(Gradients { grads: out })
    }

    fn apply_backward(
        &self,
        i: usize,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accumulate(grads, *a, |dst| {
                    for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(bd) {
                        *d = gv.mul_add(bv, *d);
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(ad) {
                        *d = gv.mul_add(av, *d);
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = gv.mul_add(c, *d);
                    }
                });
            }
            Op::AddScalar { a } => {
                self.accumulate(grads, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Relu { a } => {
                let xd = &self.nodes[*a].data;
                self.accumulate(grads, *a, |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                        if xv > E::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sqrt { a } => {
                let yd = &node.data;
                self.accumulate(grads, *a, |dst| {
                    let half = E::from_f64(0.5);
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(yd) {
                        if yv > E::zero() {
                            *d += gv * half / yv;
                        }
                    }
                });
            }
            Op::Linear { x, w, bias } => {
                let xs = &self.nodes[*x].shape;
                let ws = &self.nodes[*w].shape;
                let (batch, din, dout) = (xs[0], xs[1], ws[0]);
                let xd = &self.nodes[*x].data;
                let wd = &self.nodes[*w].data;
                self.accumulate(grads, *x, |dst| {
                    gemm_nn(dst, g, wd, batch, dout, din);
                });
                self.accumulate(grads, *w, |dst| {
                    gemm_tn(dst, g, xd, batch, dout, din);
                });
                self.accumulate(grads, *bias, |dst| {
                    for row in g.chunks(dout) {
                        for (d, &gv) in dst.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                self.conv2d_backward(*x, *k, *stride, *padding, g, grads)?;
            }
            Op::MaxPool2d { a, argmax } => {
                self.accumulate(grads, *a, |dst| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dst[src as usize] += gv;
                    }
                });
            }
            Op::GlobalAvgPool { a } => {
                let s = &self.nodes[*a].shape;
                let hw = s[2] * s[3];
                let inv = E::from_f64(1.0 / hw as f64);
                self.accumulate(grads, *a, |dst| {
                    for (plane, &gv) in dst.chunks_mut(hw).zip(g) {
                        let gshare = gv * inv;
                        for d in plane {
                            *d += gshare;
                        }
                    }
                });
            }
            Op::BroadcastSpatial { a } => {
                let hw = node.shape[2] * node.shape[3];
                self.accumulate(grads, *a, |dst| {
                    for (d, gplane) in dst.iter_mut().zip(g.chunks(hw)) {
                        let mut acc = E::zero();
                        for &gv in gplane {
                            acc += gv;
                        }
                        *d += acc;
                    }
                });
            }
            Op::UpsampleNearest2x { a } => {
                let s = &self.nodes[*a].shape;
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (2 * h, 2 * w);
                self.accumulate(grads, *a, |dst| {
                    for (p, plane) in dst.chunks_mut(h * w).enumerate() {
                        let gplane = &g[p * oh * ow..(p + 1) * oh * ow];
                        for i in 0..oh {
                            for j in 0..ow {
                                plane[(i / 2) * w + j / 2] += gplane[i * ow + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::L2NormalizeRows { a, norms } => {
                let d = node.shape[1];
                let yd = &node.data;
                self.accumulate(grads, *a, |dst| {
                    for (r, norm) in norms.iter().enumerate() {
                        let yrow = &yd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mut dot = E::zero();
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot = gv.mul_add(yv, dot);
                        }
                        let inv = E::one() / *norm;
                        let drow = &mut dst[r * d..(r + 1) * d];
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += (gv - yv * dot) * inv;
                        }
                    }
                });
            }
            Op::MatMulNT { a, b } => {
                let sa = &self.nodes[*a].shape;
                let sb = &self.nodes[*b].shape;
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                self.accumulate(grads, *a, |dst| {
                    gemm_nn(dst, g, bd, m, n, k);
                });
                self.accumulate(grads, *b, |dst| {
                    gemm_tn(dst, g, ad, m, n, k);
                });
            }
            Op::BatchedKeyDots { q, keys } => {
                let sq = &self.nodes[*q].shape;
                let sk = &self.nodes[*keys].shape;
                let (b, d, m) = (sq[0], sq[1], sk[1]);
                let qd = &self.nodes[*q].data;
                let kd = &self.nodes[*keys].data;
                self.accumulate(grads, *q, |dst| {
                    for bi in 0..b {
                        let drow = &mut dst[bi * d..(bi + 1) * d];
                        for mi in 0..m {
                            let gv = g[bi * m + mi];
                            let krow = &kd[(bi * m + mi) * d..(bi * m + mi + 1) * d];
                            for (dv, &kv) in drow.iter_mut().zip(krow) {
                                *dv = gv.mul_add(kv, *dv);
                            }
                        }
                    }
                });
                self.accumulate(grads, *keys, |dst| {
                    for bi in 0..b {
                        let qrow = &qd[bi * d..(bi + 1) * d];
                        for mi in 0..m {
                            let gv = g[bi * m + mi];
                            let drow = &mut dst[(bi * m + mi) * d..(bi * m + mi + 1) * d];
                            for (dv, &qv) in drow.iter_mut().zip(qrow) {
                                *dv = gv.mul_add(qv, *dv);
                            }
                        }
                    }
                });
            }
            Op::ConcatCols { a, b } => {
                let na = self.nodes[*a].shape[1];
                let nb = self.nodes[*b].shape[1];
                let rows = node.shape[0];
                self.accumulate(grads, *a, |dst| {
                    for r in 0..rows {
                        let grow = &g[r * (na + nb)..r * (na + nb) + na];
                        for (d, &gv) in dst[r * na..(r + 1) * na].iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for r in 0..rows {
                        let grow = &g[r * (na + nb) + na..(r + 1) * (na + nb)];
                        for (d, &gv) in dst[r * nb..(r + 1) * nb].iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LogSumExpRows { a } => {
                let n = self.nodes[*a].shape[1];
                let xd = &self.nodes[*a].data;
                let yd = &node.data;
                self.accumulate(grads, *a, |dst| {
                    for (r, (&gv, &lse)) in g.iter().zip(yd).enumerate() {
                        let xrow = &xd[r * n..(r + 1) * n];
                        let drow = &mut dst[r * n..(r + 1) * n];
                        for (d, &xv) in drow.iter_mut().zip(xrow) {
                            *d = gv.mul_add((xv - lse).exp(), *d);
                        }
                    }
                });
            }
            Op::GatherCols { a, idx } => {
                let n = self.nodes[*a].shape[1];
                self.accumulate(grads, *a, |dst| {
                    for (r, (&j, &gv)) in idx.iter().zip(g).enumerate() {
                        dst[r * n + j] += gv;
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let d = self.nodes[*a].shape[1];
                self.accumulate(grads, *a, |dst| {
                    for (r, &src) in idx.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        for (dv, &gv) in dst[src * d..(src + 1) * d].iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::SumRows { a } => {
                let d = self.nodes[*a].shape[1];
                self.accumulate(grads, *a, |dst| {
                    for (row, &gv) in dst.chunks_mut(d).zip(g) {
                        for dv in row {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let gv = g[0];
                self.accumulate(grads, *a, |dst| {
                    for d in dst {
                        *d += gv;
                    }
                });
            }
            Op::Mean { a } => {
                let count = self.nodes[*a].data.len();
                let gv = g[0] * E::from_f64(1.0 / count as f64);
                self.accumulate(grads, *a, |dst| {
                    for d in dst {
                        *d += gv;
                    }
                });
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: usize,
        k: usize,
        stride: usize,
        padding: usize,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) -> Result<()> {
        let xs = self.nodes[x].shape.clone();
        let ks = self.nodes[k].shape.clone();
        let (batch, filters) = (xs[0], ks[0]);
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            out_h: (xs[2] + 2 * padding - ks[2]) / stride + 1,
            out_w: (xs[3] + 2 * padding - ks[3]) / stride + 1,
        };
        let (os, ckk) = (geom.out_spatial(), geom.kernel_cols());
        let in_plane = geom.channels * geom.height * geom.width;
        let out_plane = filters * os;
        let x_data = &self.nodes[x].data;
        let k_data = &self.nodes[k].data;
        let need_dx = self.nodes[x].requires_grad;
        let need_dk = self.nodes[k].requires_grad;

        // Per-sample kernel gradients go into scratch, reduced in batch
        // order afterwards so accumulation is deterministic.
        let mut dk_scratch = if need_dk {
            vec![E::zero(); batch * filters * ckk]
        } else {
            Vec::new()
        };
        let mut dx_all = if need_dx {
            vec![E::zero(); batch * in_plane]
        } else {
            Vec::new()
        };

        {
            // split mutable scratch by sample; both loops write disjoint slices
            let dk_slices: Vec<&mut [E]> = dk_scratch.chunks_mut(filters * ckk).collect();
            let dx_slices: Vec<&mut [E]> = dx_all.chunks_mut(in_plane).collect();
            let mut jobs: Vec<(usize, Option<&mut [E]>, Option<&mut [E]>)> = Vec::new();
            let mut dk_iter = dk_slices.into_iter();
            let mut dx_iter = dx_slices.into_iter();
            for b in 0..batch {
                jobs.push((
                    b,
                    if need_dk { dk_iter.next() } else { None },
                    if need_dx { dx_iter.next() } else { None },
                ));
            }
            let worker = |job: &mut (usize, Option<&mut [E]>, Option<&mut [E]>)| {
                let b = job.0;
                let mut cols = vec![E::zero(); ckk * os];
                im2col(&x_data[b * in_plane..(b + 1) * in_plane], &geom, &mut cols);
                let g_b = &g[b * out_plane..(b + 1) * out_plane];
                if let Some(dk_b) = job.1.as_deref_mut() {
                    gemm_nt(dk_b, g_b, &cols, filters, os, ckk);
                }
                if let Some(dx_b) = job.2.as_deref_mut() {
                    let mut dcols = vec![E::zero(); ckk * os];
                    gemm_tn(&mut dcols, k_data, g_b, filters, ckk, os);
                    col2im_acc(&dcols, &geom, dx_b);
                }
            };
            if parallel::num_threads() > 1 && batch > 1 {
                use rayon::prelude::*;
                parallel::pool().install(|| jobs.par_iter_mut().for_each(|j| worker(j)));
            } else {
                for j in &mut jobs {
                    worker(j);
                }
            }
        }

        if need_dx {
            self.accumulate(grads, x, |dst| {
                for (d, &v) in dst.iter_mut().zip(&dx_all) {
                    *d += v;
                }
            });
        }
        if need_dk {
            self.accumulate(grads, k, |dst| {
                for chunk in dk_scratch.chunks(filters * ckk) {
                    for (d, &v) in dst.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
            });
        }
        Ok(())
    }

    /// Run `f` on the gradient buffer of node `target`, allocating it on
    /// first touch. Skips nodes that do not require gradient.
    fn accumulate(
        &self,
        grads: &mut [Option<Vec<E>>],
        target: usize,
        f: impl FnOnce(&mut Vec<E>),
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(vec![E::zero(); self.nodes[target].data.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    // ── internals ────────────────────────────────────────────────

    fn node(&self, i: usize) -> Result<&Node<E>> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        self.nodes
            .get(i)
            .ok_or_else(|| Error::Contract(format!("stale tensor id {i}")))
    }

    fn any_requires_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn push_checked(
        &mut self,
        op: Op<E>,
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn binary_elementwise(
        &mut self,
        name: &str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(E, E) -> E,
        make_op: impl Fn(usize, usize) -> Op<E>,
    ) -> Result<TensorId> {
        let (an, bn) = (self.node(a.0)?, self.node(b.0)?);
        check_same_shape(name, &an.shape, &bn.shape)?;
        let data: Vec<E> = an
            .data
            .iter()
            .zip(&bn.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = an.shape.clone();
        let rg = self.any_requires_grad(&[a.0, b.0]);
        self.push_checked(make_op(a.0, b.0), shape, data, rg)
    }

    fn conv_geom(&self, x: TensorId, k: TensorId, stride: usize, padding: usize) -> Result<ConvGeom> {
        let xs = self.node(x.0)?.shape.clone();
        let ks = self.node(k.0)?.shape.clone();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects x[B,C,H,W], k[F,C,kh,kw]; got {xs:?}, {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if stride < 1 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeom {
            channels: xs[1],
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape64() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn conv_all_ones_2x2() {
        let mut t = tape64();
        let x = t.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = t.constant(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.shape(y).unwrap(), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).unwrap(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv_identity_1x1() {
        let mut t = tape64();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 4.0).collect();
        let x = t.constant(vec![2, 1, 3, 3], data.clone()).unwrap();
        let k = t.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y).unwrap(), data.as_slice());
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut t = tape64();
        let x = t.constant(vec![1, 2, 3, 3], vec![0.0; 18]).unwrap();
        let k = t.constant(vec![1, 3, 2, 2], vec![0.0; 12]).unwrap();
        assert!(matches!(
            t.conv2d(x, k, 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut t = tape64();
        let x = t.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).unwrap(), &[1.0, 2.0]);

        let x2 = t.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let w2 = t.constant(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let b2 = t.constant(vec![1], vec![1.0]).unwrap();
        let y2 = t.linear(x2, w2, b2).unwrap();
        assert_eq!(t.value(y2).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_and_mean_forward() {
        let mut t = tape64();
        let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).unwrap(), &[0.0, 0.0, 2.0]);
        let m = t.constant(vec![2], vec![2.0, 4.0]).unwrap();
        let mv = t.mean(m).unwrap();
        assert_eq!(t.scalar_value(mv).unwrap(), 3.0);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut t = tape64();
        let x = t.var(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = t.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(t.value(y).unwrap(), &[4.0]);
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = tape64();
        let x = t.constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let y = t.l2_normalize_rows(x).unwrap();
        let v = t.value(y).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_unit_vector_unchanged() {
        let mut t = tape64();
        let x = t.constant(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = t.l2_normalize_rows(x).unwrap();
        assert_eq!(t.value(y).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn l2_normalize_zero_row_is_degenerate() {
        let mut t = tape64();
        let x = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            t.l2_normalize_rows(x),
            Err(Error::DegenerateFeature(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = tape64();
        let x = t.var(vec![2, 3], vec![0.5; 6]).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = tape64();
        let x = t.var(vec![2], vec![1.0, 2.0]).unwrap();
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = tape64();
        let x = t.var(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut t = tape64();
        let x = t.var(vec![2], vec![1.0, 2.0]).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn identity_chain_passes_gradient_exactly() {
        let mut t = tape64();
        let x = t.var(vec![2, 3], vec![0.25; 6]).unwrap();
        let mut y = x;
        for _ in 0..12 {
            y = t.reshape(y, vec![3, 2]).unwrap();
            y = t.reshape(y, vec![2, 3]).unwrap();
            y = t.scale(y, 1.0).unwrap();
        }
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn replay_gives_identical_gradients() {
        let run = || {
            let mut t = tape64();
            let x = t
                .var(vec![2, 2], vec![0.3, -0.7, 1.1, 0.05])
                .unwrap();
            let r = t.relu(x).unwrap();
            let m = t.mul(r, r).unwrap();
            let s = t.mean(m).unwrap();
            let g = t.backward(s).unwrap();
            g.get(x).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_and_concat_shapes() {
        let mut t = tape64();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(vec![2, 1], vec![9.0, 8.0]).unwrap();
        let c = t.concat_cols(a, b).unwrap();
        assert_eq!(t.value(c).unwrap(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let g = t.gather_cols(c, vec![2, 0]).unwrap();
        assert_eq!(t.value(g).unwrap(), &[9.0, 3.0]);
        let r = t.gather_rows(a, vec![1, 1, 0]).unwrap();
        assert_eq!(t.shape(r).unwrap(), &[3, 2]);
        assert_eq!(t.value(r).unwrap(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn log_sum_exp_is_stable_at_large_logits() {
        let mut t = tape64();
        let x = t.constant(vec![1, 3], vec![1000.0, 999.0, 998.0]).unwrap();
        let y = t.log_sum_exp_rows(x).unwrap();
        let v = t.value(y).unwrap()[0];
        let want = 1000.0 + (1.0f64 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((v - want).abs() < 1e-12);
    }
}
