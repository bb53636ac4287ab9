//! Wengert-list reverse-mode differentiation over the primitive set the
//! networks use.
//!
//! Every primitive records its output value on the tape together with what its
//! backward rule needs. Parameters are snapshotted into the tape when first
//! referenced, so a [`ParamStore`] may be updated while a tape is alive.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{col2im, gemm, im2col, Trans, Window};
use super::{compensated_sum, concat_sizes, lit, order_invariant_sum, split_axis, ParamStore, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
struct NormLayout {
    outer: usize,
    channels: usize,
    inner: usize,
    per_instance: bool,
}

impl NormLayout {
    fn groups(&self) -> usize {
        if self.per_instance {
            self.outer * self.channels
        } else {
            self.channels
        }
    }

    fn group_size(&self) -> usize {
        if self.per_instance {
            self.inner
        } else {
            self.outer * self.inner
        }
    }

    #[inline]
    fn group_of(&self, o: usize, c: usize) -> usize {
        if self.per_instance {
            o * self.channels + c
        } else {
            c
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatmul {
        a: Var,
        b: Var,
    },
    Norm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        layout: NormLayout,
        batch_stats: bool,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<T>),
    MaxReduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Log(Var),
    Clamp(Var, T, T),
    Mean(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Hash of every activation-kink decision taken during a forward pass
/// (ReLU signs, max-pool winners, clamp and abs branches).
#[derive(Clone, Copy, Debug, Default)]
struct KinkHasher {
    word: u64,
    bits: u32,
    hash: u64,
}

impl KinkHasher {
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn push_bit(&mut self, bit: bool) {
        self.word = (self.word << 1) | bit as u64;
        self.bits += 1;
        if self.bits == 64 {
            self.flush();
        }
    }

    fn push_word(&mut self, w: u64) {
        self.flush();
        self.hash = (self.hash ^ w).wrapping_mul(Self::PRIME);
    }

    fn flush(&mut self) {
        if self.bits > 0 {
            self.hash = (self.hash ^ self.word ^ ((self.bits as u64) << 58)).wrapping_mul(Self::PRIME);
            self.word = 0;
            self.bits = 0;
        }
    }

    fn finish(mut self) -> u64 {
        self.flush();
        self.hash
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    dropout_seed: u64,
    dropout_calls: u64,
    buffer_updates: Vec<(String, Tensor<T>)>,
    kinks: KinkHasher,
    clamp_events: usize,
}

impl<T: Real> Tape<T> {
    /// `dropout_seed` fixes every dropout mask drawn on this tape.
    pub fn new(dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            dropout_seed,
            dropout_calls: 0,
            buffer_updates: Vec::new(),
            kinks: KinkHasher {
                hash: 0xcbf2_9ce4_8422_2325,
                ..Default::default()
            },
            clamp_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Combined hash of all kink decisions so far. Two forward passes with the
    /// same signature took the same branch at every piecewise-linear point.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    /// Number of values clamped by [`Tape::clamp`] so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Running-statistics updates produced by batch norm layers in train mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Snapshot the parameter `path` onto the tape as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, path: &str) -> Result<Var> {
        let value = store.get(path)?.clone();
        let v = self.input(value, true);
        self.params.push((path.to_string(), v));
        Ok(v)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return shape_err("conv2d", format!("input {xs:?} weight {ws:?}"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if geom.stride == 0 || h + 2 * geom.pad < k || wd + 2 * geom.pad < k {
            return shape_err("conv2d", format!("kernel {k} too large for input {xs:?}"));
        }
        self.check_bias("conv2d", b, o)?;
        let win = Window {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride: geom.stride,
            pad: geom.pad,
            out_h: (h + 2 * geom.pad - k) / geom.stride + 1,
            out_w: (wd + 2 * geom.pad - k) / geom.stride + 1,
        };
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let mut cols = vec![T::zero(); n * rows * ncols];
        let mut out = vec![T::zero(); n * o * ncols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &win, col);
            gemm(
                Trans::No,
                Trans::No,
                o,
                ncols,
                rows,
                T::one(),
                wv,
                col,
                T::zero(),
                &mut out[s * o * ncols..(s + 1) * o * ncols],
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, ncols);
        }
        let value = Tensor::new(vec![n, o, win.out_h, win.out_w], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv2d { x, w, b, win, cols }, &inputs)
    }

    /// Transposed convolution; weight layout is `[in_channels, out_channels, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return shape_err("conv_transpose2d", format!("input {xs:?} weight {ws:?}"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[1], ws[2]);
        let (s, p) = (geom.stride, geom.pad);
        if s == 0 || (h - 1) * s + k <= 2 * p || (wd - 1) * s + k <= 2 * p {
            return shape_err("conv_transpose2d", format!("degenerate output for input {xs:?}"));
        }
        self.check_bias("conv_transpose2d", b, o)?;
        let (oh, ow) = ((h - 1) * s + k - 2 * p, (wd - 1) * s + k - 2 * p);
        let win = Window {
            channels: o,
            height: oh,
            width: ow,
            kernel: k,
            stride: s,
            pad: p,
            out_h: h,
            out_w: wd,
        };
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut out = vec![T::zero(); n * o * oh * ow];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for smp in 0..n {
            gemm(
                Trans::Yes,
                Trans::No,
                rows,
                ncols,
                c,
                T::one(),
                wv,
                &xv[smp * c * ncols..(smp + 1) * c * ncols],
                T::zero(),
                &mut cols,
            );
            col2im(&cols, &win, &mut out[smp * o * oh * ow..(smp + 1) * o * oh * ow]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, oh * ow);
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::ConvTranspose2d { x, w, b, win }, &inputs)
    }

    /// `x [m, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("input {xs:?} weight {ws:?}"));
        }
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        self.check_bias("linear", b, n)?;
        let mut out = vec![T::zero(); m * n];
        gemm(
            Trans::No,
            Trans::Yes,
            m,
            n,
            k,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    /// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] || as_[2] != bs[1] {
            return shape_err("batch_matmul", format!("{as_:?} x {bs:?}"));
        }
        let (bt, m, k, n) = (as_[0], as_[1], as_[2], bs[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..bt {
            gemm(
                Trans::No,
                Trans::No,
                m,
                n,
                k,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bt, m, n], out)?;
        self.push(value, Op::BatchMatmul { a, b }, &[a, b])
    }

    /// Batch normalization over every axis except axis 1.
    ///
    /// Train mode normalizes with batch statistics and queues a running
    /// statistics update (momentum 0.1) under `prefix/running_mean` and
    /// `prefix/running_var`; eval mode uses the stored running statistics.
    /// Batch statistics are summed in an order-independent way, so permuting
    /// the batch rows permutes the output rows bitwise.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        prefix: &str,
        train: bool,
    ) -> Result<Var> {
        let layout = self.norm_layout("batch_norm", x, false)?;
        let c = layout.channels;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("batch_norm", format!("affine parameters must have {c} entries"));
        }
        let xv = self.value(x).data();
        let m = layout.group_size();
        let (mut mean, mut var) = (vec![T::zero(); c], vec![T::zero(); c]);
        if train {
            let mut scratch = Vec::with_capacity(m);
            for ch in 0..c {
                scratch.clear();
                for o in 0..layout.outer {
                    let base = (o * c + ch) * layout.inner;
                    scratch.extend_from_slice(&xv[base..base + layout.inner]);
                }
                let mu = order_invariant_sum(&mut scratch) / lit(m as f64);
                for v in scratch.iter_mut() {
                    *v = (*v - mu) * (*v - mu);
                }
                mean[ch] = mu;
                var[ch] = order_invariant_sum(&mut scratch) / lit(m as f64);
            }
            let rm = store.buffer(&format!("{prefix}/running_mean"))?;
            let rv = store.buffer(&format!("{prefix}/running_var"))?;
            let mom: T = lit(BN_MOMENTUM);
            let unbias: T = if m > 1 { lit(m as f64 / (m as f64 - 1.0)) } else { T::one() };
            let new_mean = Tensor::new(
                vec![c],
                rm.data().iter().zip(&mean).map(|(&r, &mu)| (T::one() - mom) * r + mom * mu).collect(),
            )?;
            let new_var = Tensor::new(
                vec![c],
                rv.data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias)
                    .collect(),
            )?;
            self.buffer_updates.push((format!("{prefix}/running_mean"), new_mean));
            self.buffer_updates.push((format!("{prefix}/running_var"), new_var));
        } else {
            mean.copy_from_slice(store.buffer(&format!("{prefix}/running_mean"))?.data());
            var.copy_from_slice(store.buffer(&format!("{prefix}/running_var"))?.data());
        }
        self.normalize(x, Some(gamma), Some(beta), layout, &mean, &var, train)
    }

    /// Per-sample, per-channel normalization of an NCHW tensor, without affine
    /// parameters.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let layout = self.norm_layout("instance_norm", x, true)?;
        if self.shape(x).len() != 4 {
            return shape_err("instance_norm", format!("expects NCHW, got {:?}", self.shape(x)));
        }
        let xv = self.value(x).data();
        let groups = layout.groups();
        let hw = layout.inner;
        let (mut mean, mut var) = (vec![T::zero(); groups], vec![T::zero(); groups]);
        for g in 0..groups {
            let plane = &xv[g * hw..(g + 1) * hw];
            let mu = compensated_sum(plane.iter().copied()) / lit(hw as f64);
            let v = compensated_sum(plane.iter().map(|&p| (p - mu) * (p - mu))) / lit(hw as f64);
            mean[g] = mu;
            var[g] = v;
        }
        self.normalize(x, None, None, layout, &mean, &var, true)
    }

    fn norm_layout(&self, op: &'static str, x: Var, per_instance: bool) -> Result<NormLayout> {
        let s = self.shape(x);
        if s.len() < 2 {
            return shape_err(op, format!("needs at least 2 axes, got {s:?}"));
        }
        let (outer, channels, inner) = split_axis(s, 1);
        Ok(NormLayout {
            outer,
            channels,
            inner,
            per_instance,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        layout: NormLayout,
        mean: &[T],
        var: &[T],
        batch_stats: bool,
    ) -> Result<Var> {
        let eps: T = lit(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        for o in 0..layout.outer {
            for c in 0..layout.channels {
                let g = layout.group_of(o, c);
                let base = (o * layout.channels + c) * layout.inner;
                let scale = gv.as_ref().map_or(T::one(), |gv| gv[c]);
                let shift = bv.as_ref().map_or(T::zero(), |bv| bv[c]);
                for i in base..base + layout.inner {
                    let h = (xv[i] - mean[g]) * inv_std[g];
                    xhat[i] = h;
                    out[i] = h * scale + shift;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let value = xv.map(|v| if v > T::zero() { v } else { T::zero() });
        for &v in xv.data() {
            self.kinks.push_bit(v > T::zero());
        }
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let slope: T = lit(slope);
        let xv = &self.nodes[x.0].value;
        let value = xv.map(|v| if v > T::zero() { v } else { v * slope });
        for &v in xv.data() {
            self.kinks.push_bit(v > T::zero());
        }
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. The mask is a pure function of the tape seed and the call
    /// index, so replaying the same forward pass redraws the same masks.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param {
                field: "dropout.p",
                reason: format!("must lie in [0, 1), got {p}"),
            });
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        if p == 0.0 {
            return Ok(x);
        }
        let seed = self
            .dropout_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(call.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep: T = lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Dropout(x, mask), &[x])
    }

    /// Maximum along `axis`, removing that axis (a rank-1 input keeps shape `[1]`).
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return shape_err("max_reduce", format!("axis {axis} for shape {s:?}"));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xv[o * len * inner + i];
                let mut at = 0;
                for l in 1..len {
                    let v = xv[(o * len + l) * inner + i];
                    if v > best {
                        best = v;
                        at = l;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = at;
            }
        }
        for &a in &argmax {
            self.kinks.push_word(a as u64);
        }
        let mut shape: Vec<usize> = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::MaxReduce {
                x,
                outer,
                len,
                inner,
                argmax,
            },
            &[x],
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let sizes = concat_sizes(parts.iter().map(|t| t.shape()), axis)?;
        let value = Tensor::concat(&parts, axis)?;
        let (outer, _, inner) = split_axis(value.shape(), axis);
        self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                sizes,
                inner,
            },
            xs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x])
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c: T = lit(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c: T = lit(c);
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let value = xv.map(T::abs);
        for &v in xv.data() {
            self.kinks.push_bit(v >= T::zero());
        }
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite("log"));
        }
        let value = self.value(x).map(T::ln);
        self.push(value, Op::Log(x), &[x])
    }

    /// Clamp into `[lo, hi]`; clamped entries receive zero gradient and are
    /// counted in [`Tape::clamp_events`].
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi): (T, T) = (lit(lo), lit(hi));
        let xv = &self.nodes[x.0].value;
        let mut clamped = 0;
        let data: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| {
                if v < lo {
                    clamped += 1;
                    lo
                } else if v > hi {
                    clamped += 1;
                    hi
                } else {
                    v
                }
            })
            .collect();
        for &v in xv.data() {
            self.kinks.push_bit(v >= lo && v <= hi);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.clamp_events += clamped;
        self.push(value, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = compensated_sum(xv.data().iter().copied()) / lit(xv.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = compensated_sum(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, n: usize) -> Result<()> {
        match b {
            Some(b) if self.value(b).numel() != n => {
                shape_err(op, format!("bias has {} entries, expected {n}", self.value(b).numel()))
            }
            _ => Ok(()),
        }
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, win, cols } => {
                let n = node.value.dim(0);
                let o = node.value.dim(1);
                let (rows, nc) = (win.col_rows(), win.col_cols());
                let in_plane = win.channels * win.height * win.width;
                acc(*w, &mut |gw| {
                    for s in 0..n {
                        gemm(
                            Trans::No,
                            Trans::Yes,
                            o,
                            rows,
                            nc,
                            T::one(),
                            &gy[s * o * nc..(s + 1) * o * nc],
                            &cols[s * rows * nc..(s + 1) * rows * nc],
                            T::one(),
                            gw,
                        );
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| channel_sums(gy, n, o, nc, gb));
                }
                let wv = val(*w);
                acc(*x, &mut |gx| {
                    let mut dcols = vec![T::zero(); rows * nc];
                    for s in 0..n {
                        gemm(
                            Trans::Yes,
                            Trans::No,
                            rows,
                            nc,
                            o,
                            T::one(),
                            wv,
                            &gy[s * o * nc..(s + 1) * o * nc],
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(&dcols, win, &mut gx[s * in_plane..(s + 1) * in_plane]);
                    }
                });
            }
            Op::ConvTranspose2d { x, w, b, win } => {
                let n = node.value.dim(0);
                let o = win.channels;
                let out_plane = o * win.height * win.width;
                let c = nodes[x.0].value.dim(1);
                let (rows, nc) = (win.col_rows(), win.col_cols());
                let mut dcols = vec![T::zero(); n * rows * nc];
                for s in 0..n {
                    im2col(
                        &gy[s * out_plane..(s + 1) * out_plane],
                        win,
                        &mut dcols[s * rows * nc..(s + 1) * rows * nc],
                    );
                }
                let xv = val(*x);
                let wv = val(*w);
                acc(*w, &mut |gw| {
                    for s in 0..n {
                        gemm(
                            Trans::No,
                            Trans::Yes,
                            c,
                            rows,
                            nc,
                            T::one(),
                            &xv[s * c * nc..(s + 1) * c * nc],
                            &dcols[s * rows * nc..(s + 1) * rows * nc],
                            T::one(),
                            gw,
                        );
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| channel_sums(gy, n, o, win.height * win.width, gb));
                }
                acc(*x, &mut |gx| {
                    for s in 0..n {
                        gemm(
                            Trans::No,
                            Trans::No,
                            c,
                            nc,
                            rows,
                            T::one(),
                            wv,
                            &dcols[s * rows * nc..(s + 1) * rows * nc],
                            T::one(),
                            &mut gx[s * c * nc..(s + 1) * c * nc],
                        );
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (nodes[x.0].value.dim(0), nodes[x.0].value.dim(1));
                let n = nodes[w.0].value.dim(0);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |gx| gemm(Trans::No, Trans::No, m, k, n, T::one(), gy, wv, T::one(), gx));
                acc(*w, &mut |gw| gemm(Trans::Yes, Trans::No, n, k, m, T::one(), gy, xv, T::one(), gw));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in gy.chunks(n) {
                            for (g, &r) in gb.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                    });
                }
            }
            Op::BatchMatmul { a, b } => {
                let s = nodes[a.0].value.shape();
                let (bt, m, k) = (s[0], s[1], s[2]);
                let n = nodes[b.0].value.dim(2);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..bt {
                        gemm(
                            Trans::No,
                            Trans::Yes,
                            m,
                            k,
                            n,
                            T::one(),
                            &gy[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bt {
                        gemm(
                            Trans::Yes,
                            Trans::No,
                            k,
                            n,
                            m,
                            T::one(),
                            &av[i * m * k..(i + 1) * m * k],
                            &gy[i * m * n..(i + 1) * m * n],
                            T::one(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            } => {
                let l = *layout;
                let gv = gamma.map(|g| val(g));
                // dxhat, and per-group sums of dxhat and dxhat * xhat
                let groups = l.groups();
                let mut sum_d = vec![T::zero(); groups];
                let mut sum_dx = vec![T::zero(); groups];
                let mut dxhat = vec![T::zero(); gy.len()];
                for o in 0..l.outer {
                    for c in 0..l.channels {
                        let g = l.group_of(o, c);
                        let scale = gv.map_or(T::one(), |gv| gv[c]);
                        let base = (o * l.channels + c) * l.inner;
                        for i in base..base + l.inner {
                            let d = gy[i] * scale;
                            dxhat[i] = d;
                            sum_d[g] += d;
                            sum_dx[g] += d * xhat[i];
                        }
                    }
                }
                if let Some(gamma) = gamma {
                    acc(*gamma, &mut |gg| {
                        for o in 0..l.outer {
                            for c in 0..l.channels {
                                let base = (o * l.channels + c) * l.inner;
                                for i in base..base + l.inner {
                                    gg[c] += gy[i] * xhat[i];
                                }
                            }
                        }
                    });
                }
                if let Some(beta) = beta {
                    acc(*beta, &mut |gb| {
                        for o in 0..l.outer {
                            for c in 0..l.channels {
                                let base = (o * l.channels + c) * l.inner;
                                for i in base..base + l.inner {
                                    gb[c] += gy[i];
                                }
                            }
                        }
                    });
                }
                let m: T = lit(l.group_size() as f64);
                acc(*x, &mut |gx| {
                    for o in 0..l.outer {
                        for c in 0..l.channels {
                            let g = l.group_of(o, c);
                            let base = (o * l.channels + c) * l.inner;
                            for i in base..base + l.inner {
                                gx[i] += if *batch_stats {
                                    inv_std[g] / m * (m * dxhat[i] - sum_d[g] - xhat[i] * sum_dx[g])
                                } else {
                                    dxhat[i] * inv_std[g]
                                };
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((g, &v), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        if v > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((g, &v), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        *g += if v > T::zero() { d } else { d * *slope };
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                acc(*x, &mut |gx| {
                    for ((g, &y), &d) in gx.iter_mut().zip(yv).zip(gy) {
                        *g += d * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, &mut |gx| {
                    for ((g, &y), &d) in gx.iter_mut().zip(yv).zip(gy) {
                        *g += d * y * (T::one() - y);
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for ((g, &m), &d) in gx.iter_mut().zip(mask).zip(gy) {
                    *g += d * m;
                }
            }),
            Op::MaxReduce {
                x,
                outer,
                len,
                inner,
                argmax,
            } => acc(*x, &mut |gx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let j = o * inner + i;
                        gx[(o * len + argmax[j]) * inner + i] += gy[j];
                    }
                }
            }),
            Op::Concat {
                xs,
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (v, &size) in xs.iter().zip(sizes) {
                    acc(*v, &mut |gx| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * size * inner;
                            for (g, &d) in gx[dst..dst + size * inner].iter_mut().zip(&gy[src..src + size * inner]) {
                                *g += d;
                            }
                        }
                    });
                    offset += size;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, gy)),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gy));
                acc(*b, &mut |gb| add_into(gb, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gy));
                acc(*b, &mut |gb| {
                    for (g, &d) in gb.iter_mut().zip(gy) {
                        *g -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((g, &o), &d) in ga.iter_mut().zip(bv).zip(gy) {
                        *g += d * o;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((g, &o), &d) in gb.iter_mut().zip(av).zip(gy) {
                        *g += d * o;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (g, &d) in gx.iter_mut().zip(gy) {
                    *g += d * *c;
                }
            }),
            Op::AddScalar(x) => acc(*x, &mut |gx| add_into(gx, gy)),
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((g, &v), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        if v > T::zero() {
                            *g += d;
                        } else if v < T::zero() {
                            *g -= d;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((g, &v), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        *g += d / v;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((g, &v), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        if v >= *lo && v <= *hi {
                            *g += d;
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n: T = lit(nodes[x.0].value.numel() as f64);
                acc(*x, &mut |gx| {
                    let d = gy[0] / n;
                    for g in gx.iter_mut() {
                        *g += d;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for g in gx.iter_mut() {
                    *g += gy[0];
                }
            }),
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded value, `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter of `store` under `prefix`, summed over all
    /// tape snapshots of that parameter. Unreachable parameters get zeros.
    pub fn for_params(&self, store: &ParamStore<T>, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = store
            .params()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        for (path, var) in &self.params {
            if let (Some(slot), Some(g)) = (out.get_mut(path), self.wrt(*var)) {
                if slot.shape() == g.shape() {
                    add_into(slot.data_mut(), g.data());
                }
            }
        }
        out
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for v in &mut out[base..base + plane] {
                *v += bias[ch];
            }
        }
    }
}

fn channel_sums<T: Real>(gy: &[T], n: usize, c: usize, plane: usize, out: &mut [T]) {
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            out[ch] += gy[base..base + plane].iter().copied().sum::<T>();
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::Linear { .. } => "linear",
        Op::BatchMatmul { .. } => "batch_matmul",
        Op::Norm { .. } => "normalization",
        Op::Relu(_) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Dropout(..) => "dropout",
        Op::MaxReduce { .. } => "max_reduce",
        Op::Concat { .. } => "concat",
        Op::Reshape(_) => "reshape",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Abs(_) => "abs",
        Op::Log(_) => "log",
        Op::Clamp(..) => "clamp",
        Op::Mean(_) => "mean",
        Op::Sum(_) => "sum",
    }
}
