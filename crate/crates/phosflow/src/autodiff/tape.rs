//! Reverse-mode differentiation over a linear operation tape.
//!
//! Values live in an arena owned by the [`Tape`]; ops record the input ids
//! and whatever they need to replay the chain rule backwards. Gradients
//! accumulate additively when a value fans out. A tape is single use:
//! calling [`Tape::backward`] a second time is a contract error.

use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::ops::Range;
use std::sync::Arc;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vid(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Left operand is a single element.
    ScalarL,
    /// Right operand is a single element.
    ScalarR,
    /// Right operand is a vector matching the left's last axis.
    RowR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arith {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T: Real> {
    Leaf,
    Arith(Arith, Vid, Vid, Broadcast),
    Scale(Vid, T),
    AddScalar(Vid),
    Neg(Vid),
    Exp(Vid),
    Log(Vid),
    Atan(Vid),
    Square(Vid),
    Relu(Vid),
    Elu(Vid),
    Matmul {
        a: Vid,
        b: Vid,
        m: usize,
        k: usize,
        n: usize,
    },
    SumAll(Vid),
    MeanAll(Vid),
    SumRows {
        x: Vid,
        cols: usize,
    },
    SliceCols {
        x: Vid,
        cols: usize,
        range: Range<usize>,
    },
    ConcatCols {
        xs: Vec<(Vid, usize)>,
    },
    GatherCols {
        x: Vid,
        cols: usize,
        idx: Arc<Vec<usize>>,
    },
    MaxGroups {
        x: Vid,
        group: usize,
        argmax: Vec<u32>,
    },
    Reshape(Vid),
    Conv3x3 {
        x: Vid,
        w: Vid,
        bias: Vid,
        dims: (usize, usize, usize, usize, usize), // b, cin, h, w, cout
    },
    BatchNorm {
        x: Vid,
        gamma: Vid,
        beta: Vid,
        channels: usize,
        // (x - mean) * inv_std per channel; inference uses running stats.
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    CrossEntropyLogits {
        logits: Vid,
        labels: Arc<Vec<usize>>,
        softmax: Vec<T>,
    },
    MmdIq {
        a: Vid,
        b: Vid,
        widths: Vec<f64>,
        estimate: f64,
        dims: (usize, usize),
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    leaf: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    finished: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not request a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Vid {
        self.push(t, Op::Leaf, false, true)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn param(&mut self, t: Tensor<T>) -> Vid {
        self.push(t, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Vid) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after backward.
    pub fn grad(&self, v: Vid) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, leaf: bool) -> Vid {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            leaf,
        });
        Vid(self.nodes.len() - 1)
    }

    fn needs(&self, v: Vid) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise arithmetic ------------------------------------------

    fn broadcast_of(&self, a: Vid, b: Vid, ctx: &'static str) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if nb == 1 {
            Ok(Broadcast::ScalarR)
        } else if na == 1 {
            Ok(Broadcast::ScalarL)
        } else if sa.last() == Some(&nb) && self.value(b).shape().len() == 1 {
            Ok(Broadcast::RowR)
        } else {
            Err(Error::shape(ctx, sa, sb))
        }
    }

    fn arith(&mut self, kind: Arith, a: Vid, b: Vid) -> Result<Vid> {
        let ctx = match kind {
            Arith::Add => "add",
            Arith::Sub => "sub",
            Arith::Mul => "mul",
            Arith::Div => "div",
        };
        let bc = self.broadcast_of(a, b, ctx)?;
        let va = self.value(a);
        let vb = self.value(b);
        let f = |x: T, y: T| match kind {
            Arith::Add => x + y,
            Arith::Sub => x - y,
            Arith::Mul => x * y,
            Arith::Div => x / y,
        };
        let out_shape;
        let data: Vec<T> = match bc {
            Broadcast::Same => {
                out_shape = va.shape().to_vec();
                va.data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect()
            }
            Broadcast::ScalarR => {
                out_shape = va.shape().to_vec();
                let y = vb.data()[0];
                va.data().iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::ScalarL => {
                out_shape = vb.shape().to_vec();
                let x = va.data()[0];
                vb.data().iter().map(|&y| f(x, y)).collect()
            }
            Broadcast::RowR => {
                out_shape = va.shape().to_vec();
                let n = vb.numel();
                va.data()
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)))
                    .collect()
            }
        };
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Arith(kind, a, b, bc), needs, false))
    }

    pub fn add(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        self.arith(Arith::Add, a, b)
    }
    pub fn sub(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        self.arith(Arith::Sub, a, b)
    }
    pub fn mul(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        self.arith(Arith::Mul, a, b)
    }
    pub fn div(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        self.arith(Arith::Div, a, b)
    }

    pub fn scale(&mut self, a: Vid, c: f64) -> Vid {
        let c = T::c(c);
        let t = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, c), needs, false)
    }

    pub fn add_scalar(&mut self, a: Vid, c: f64) -> Vid {
        let c = T::c(c);
        let t = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(t, Op::AddScalar(a), needs, false)
    }

    pub fn neg(&mut self, a: Vid) -> Vid {
        let t = self.value(a).map(|x| -x);
        let needs = self.needs(a);
        self.push(t, Op::Neg(a), needs, false)
    }

    // ---- unary maps -------------------------------------------------------

    pub fn exp(&mut self, a: Vid) -> Vid {
        let t = self.value(a).map(|x| x.exp());
        let needs = self.needs(a);
        self.push(t, Op::Exp(a), needs, false)
    }

    pub fn log(&mut self, a: Vid) -> Vid {
        let t = self.value(a).map(|x| x.ln());
        let needs = self.needs(a);
        self.push(t, Op::Log(a), needs, false)
    }

    pub fn atan(&mut self, a: Vid) -> Vid {
        let t = self.value(a).map(|x| x.atan());
        let needs = self.needs(a);
        self.push(t, Op::Atan(a), needs, false)
    }

    pub fn square(&mut self, a: Vid) -> Vid {
        let t = self.value(a).map(|x| x * x);
        let needs = self.needs(a);
        self.push(t, Op::Square(a), needs, false)
    }

    /// max(x, 0); also serves as the clamp-at-zero stage.
    pub fn relu(&mut self, a: Vid) -> Vid {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(a);
        self.push(t, Op::Relu(a), needs, false)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Vid) -> Vid {
        let t = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x.exp() - T::one() });
        let needs = self.needs(a);
        self.push(t, Op::Elu(a), needs, false)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Matmul { a, b, m, k, n }, needs, false))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, a: Vid) -> Vid {
        let s: T = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs, false)
    }

    pub fn mean_all(&mut self, a: Vid) -> Vid {
        let n = self.value(a).numel();
        let s: T = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(
            Tensor::scalar(s / T::c(n as f64)),
            Op::MeanAll(a),
            needs,
            false,
        )
    }

    /// Sum over the last axis: [..., c] -> [...]
    pub fn sum_rows(&mut self, a: Vid) -> Result<Vid> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::contract("sum_rows needs rank >= 1"));
        }
        let cols = *shape.last().unwrap();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(cols)
            .map(|row| row.iter().copied().sum())
            .collect();
        let needs = self.needs(a);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::SumRows { x: a, cols }, needs, false))
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, a: Vid, shape: Vec<usize>) -> Result<Vid> {
        let t = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs, false))
    }

    /// Columns [range) of the last axis.
    pub fn slice_cols(&mut self, a: Vid, range: Range<usize>) -> Result<Vid> {
        let shape = self.value(a).shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::contract("slice_cols needs rank >= 1"))?;
        if range.end > cols || range.start > range.end {
            return Err(Error::contract(format!(
                "slice {:?} out of bounds for last axis {}",
                range, cols
            )));
        }
        let width = range.end - range.start;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = width;
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row[range.clone()].iter().copied())
            .collect();
        let needs = self.needs(a);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::SliceCols {
                x: a,
                cols,
                range,
            },
            needs,
            false,
        ))
    }

    /// Concatenate along the last axis; all inputs share leading extents.
    pub fn concat_cols(&mut self, xs: &[Vid]) -> Result<Vid> {
        if xs.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let lead = {
            let s = self.value(xs[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(xs[0]).shape(),
                    s,
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let needs = xs.iter().any(|&v| self.needs(v));
        let t = Tensor::new(out_shape, data)?;
        let pairs = xs.iter().copied().zip(widths).collect();
        Ok(self.push(t, Op::ConcatCols { xs: pairs }, needs, false))
    }

    /// out[..., j] = x[..., idx[j]]. Indices may repeat (gather); a bijection
    /// makes this a permutation of the last axis.
    pub fn gather_cols(&mut self, a: Vid, idx: Arc<Vec<usize>>) -> Result<Vid> {
        let shape = self.value(a).shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::contract("gather_cols needs rank >= 1"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::contract(format!(
                "gather index {} out of bounds for width {}",
                bad, cols
            )));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = idx.len();
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| idx.iter().map(move |&i| row[i]))
            .collect();
        let needs = self.needs(a);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::GatherCols { x: a, cols, idx }, needs, false))
    }

    /// View the last axis as consecutive groups of `group` elements and take
    /// the max of each; gradients flow to the argmax element.
    pub fn max_groups(&mut self, a: Vid, group: usize) -> Result<Vid> {
        let shape = self.value(a).shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::contract("max_groups needs rank >= 1"))?;
        if group == 0 || cols % group != 0 {
            return Err(Error::contract(format!(
                "last axis {} not divisible into groups of {}",
                cols, group
            )));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = cols / group;
        let src = self.value(a).data();
        let count = src.len() / group;
        let mut data = Vec::with_capacity(count);
        let mut argmax = Vec::with_capacity(count);
        for g in 0..count {
            let chunk = &src[g * group..(g + 1) * group];
            let (mut bi, mut bv) = (0u32, chunk[0]);
            for (i, &v) in chunk.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = i as u32;
                }
            }
            data.push(bv);
            argmax.push(bi);
        }
        let needs = self.needs(a);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::MaxGroups {
                x: a,
                group,
                argmax,
            },
            needs,
            false,
        ))
    }

    // ---- structured layers ---------------------------------------------------

    /// 3x3 stride-1 zero-padded convolution preserving spatial extent.
    pub fn conv3x3(&mut self, x: Vid, w: Vid, bias: Vid) -> Result<Vid> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[1] {
            return Err(Error::shape("conv3x3", &sx, &sw));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        if self.value(bias).numel() != cout {
            return Err(Error::shape("conv3x3 bias", self.value(bias).shape(), &sw));
        }
        let data = kernels::conv3x3(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            b,
            cin,
            h,
            wd,
            cout,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        let t = Tensor::new(vec![b, cout, h, wd], data)?;
        Ok(self.push(
            t,
            Op::Conv3x3 {
                x,
                w,
                bias,
                dims: (b, cin, h, wd, cout),
            },
            needs,
            false,
        ))
    }

    fn bn_channels(shape: &[usize]) -> Result<(usize, usize, usize)> {
        // Returns (channels, inner, outer): element (o, c, i) layout.
        match shape.len() {
            2 => Ok((shape[1], 1, shape[0])),
            4 => Ok((shape[1], shape[2] * shape[3], shape[0])),
            _ => Err(Error::contract(
                "batch_norm expects [batch, features] or [batch, c, h, w]",
            )),
        }
    }

    /// Batch normalization using batch statistics; returns the output id and
    /// the per-channel (mean, var) of this batch for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Vid,
        gamma: Vid,
        beta: Vid,
        eps: f64,
    ) -> Result<(Vid, Vec<T>, Vec<T>)> {
        let shape = self.value(x).shape().to_vec();
        let (c, inner, outer) = Self::bn_channels(&shape)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm affine", self.value(gamma).shape(), &shape));
        }
        if outer * inner < 2 {
            return Err(Error::contract("batch_norm needs at least 2 values per channel"));
        }
        let data = self.value(x).data();
        let count = T::c((outer * inner) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    s = s + data[base + i];
                }
            }
            let m = s / count;
            let mut v = T::zero();
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    let d = data[base + i] - m;
                    v = v + d * d;
                }
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::c(eps)).sqrt())
            .collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, c, inner, outer, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with frozen statistics (a pure affine map).
    pub fn batch_norm_infer(
        &mut self,
        x: Vid,
        gamma: Vid,
        beta: Vid,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Vid> {
        let shape = self.value(x).shape().to_vec();
        let (c, inner, outer) = Self::bn_channels(&shape)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::contract("running stats length mismatch"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::c(eps)).sqrt())
            .collect();
        self.bn_apply(
            x,
            gamma,
            beta,
            running_mean,
            &inv_std,
            c,
            inner,
            outer,
            false,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Vid,
        gamma: Vid,
        beta: Vid,
        mean: &[T],
        inv_std: &[T],
        c: usize,
        inner: usize,
        outer: usize,
        training: bool,
    ) -> Result<Vid> {
        let data = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let scale = g[ch] * inv_std[ch];
                let shift = bt[ch] - mean[ch] * scale;
                for i in 0..inner {
                    out[base + i] = data[base + i] * scale + shift;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels: c,
                mean: mean.to_vec(),
                inv_std: inv_std.to_vec(),
                training,
            },
            needs,
            false,
        ))
    }

    /// Mean softmax cross-entropy of row logits against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Vid, labels: Arc<Vec<usize>>) -> Result<Vid> {
        let shape = self.value(logits).shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::contract(format!(
                "cross_entropy: logits {:?} vs {} labels",
                shape,
                labels.len()
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::contract(format!("label {} out of range {}", bad, cols)));
        }
        let data = self.value(logits).data();
        let mut softmax = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                softmax[r * cols + j] = e;
                z = z + e;
            }
            for j in 0..cols {
                softmax[r * cols + j] = softmax[r * cols + j] / z;
            }
            total = total + z.ln() + m - row[labels[r]];
        }
        let needs = self.needs(logits);
        let loss = Tensor::scalar(total / T::c(rows as f64));
        Ok(self.push(
            loss,
            Op::CrossEntropyLogits {
                logits,
                labels,
                softmax,
            },
            needs,
            false,
        ))
    }

    /// Maximum mean discrepancy between two equal-count sample sets under the
    /// inverse multiquadric kernel, averaged over a width bank, clamped at
    /// zero and square-rooted.
    pub fn mmd_iq(&mut self, a: Vid, b: Vid, widths: &[f64]) -> Result<Vid> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa != sb {
            return Err(Error::shape("mmd sample sets", sa, sb));
        }
        if sa[0] == 0 {
            return Err(Error::contract("mmd needs at least one sample per set"));
        }
        if widths.is_empty() || widths.iter().any(|&w| w <= 0.0) {
            return Err(Error::parameter("kernel bank must be non-empty with positive widths"));
        }
        let (m, n) = (sa[0], sa[1]);
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let estimate = mmd_estimate(xa, xb, m, n, widths);
        let value = T::c(estimate.max(0.0).sqrt());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MmdIq {
                a,
                b,
                widths: widths.to_vec(),
                estimate,
                dims: (m, n),
            },
            needs,
            false,
        ))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss; accumulates gradients into leaves.
    pub fn backward(&mut self, loss: Vid) -> Result<()> {
        if self.finished {
            return Err(Error::contract(
                "backward called twice on the same tape without reset",
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.finished = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for j in (0..=loss.0).rev() {
            if !self.nodes[j].needs_grad {
                self.grads[j] = None;
                continue;
            }
            let Some(g) = self.grads[j].take() else {
                continue;
            };
            self.propagate(j, &g)?;
            if self.nodes[j].leaf {
                self.grads[j] = Some(g);
            } else {
                // Both the gradient and the forward value of an interior node
                // are dead once its backward has run.
                self.nodes[j].value = Tensor::zeros(vec![0]);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Vid, contrib: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + ci;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn acc_owned(&mut self, v: Vid, contrib: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + ci;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, j: usize, g: &[T]) -> Result<()> {
        // Values of the node's inputs are still alive; the node's own value
        // may be needed too (exp, relu) and is freed only after this returns.
        let op = std::mem::replace(&mut self.nodes[j].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Arith(kind, a, b, bc) => self.backward_arith(*kind, *a, *b, *bc, g)?,
            Op::Scale(a, c) => {
                let contrib: Vec<T> = g.iter().map(|&gi| gi * *c).collect();
                self.acc_owned(*a, contrib);
            }
            Op::AddScalar(a) => self.acc(*a, g),
            Op::Neg(a) => {
                let contrib: Vec<T> = g.iter().map(|&gi| -gi).collect();
                self.acc_owned(*a, contrib);
            }
            Op::Exp(a) => {
                // d exp = exp; use the stored output.
                let out = self.nodes[j].value.data();
                let contrib: Vec<T> = g.iter().zip(out).map(|(&gi, &y)| gi * y).collect();
                self.acc_owned(*a, contrib);
            }
            Op::Log(a) => {
                let x = self.nodes[a.0].value.data();
                let contrib: Vec<T> = g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect();
                self.acc_owned(*a, contrib);
            }
            Op::Atan(a) => {
                let x = self.nodes[a.0].value.data();
                let contrib: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi / (T::one() + xi * xi))
                    .collect();
                self.acc_owned(*a, contrib);
            }
            Op::Square(a) => {
                let x = self.nodes[a.0].value.data();
                let two = T::c(2.0);
                let contrib: Vec<T> = g.iter().zip(x).map(|(&gi, &xi)| gi * two * xi).collect();
                self.acc_owned(*a, contrib);
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                let contrib: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.acc_owned(*a, contrib);
            }
            Op::Elu(a) => {
                let x = self.nodes[a.0].value.data();
                let contrib: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * xi.exp() })
                    .collect();
                self.acc_owned(*a, contrib);
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a.0].needs_grad {
                    let db = self.nodes[b.0].value.data();
                    let da = kernels::matmul_abt(g, db, m, n, k);
                    self.acc_owned(a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let daa = self.nodes[a.0].value.data();
                    let dbv = kernels::matmul_atb(daa, g, m, k, n);
                    self.acc_owned(b, dbv);
                }
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                self.acc_owned(*a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                self.acc_owned(*a, vec![g[0] / T::c(n as f64); n]);
            }
            Op::SumRows { x, cols } => {
                let mut contrib = Vec::with_capacity(g.len() * cols);
                for &gi in g {
                    contrib.extend(std::iter::repeat(gi).take(*cols));
                }
                self.acc_owned(*x, contrib);
            }
            Op::SliceCols { x, cols, range } => {
                let rows = g.len() / (range.end - range.start);
                let width = range.end - range.start;
                let mut contrib = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    contrib[r * cols + range.start..r * cols + range.end]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.acc_owned(*x, contrib);
            }
            Op::ConcatCols { xs } => {
                let total: usize = xs.iter().map(|&(_, w)| w).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &(v, w) in xs {
                    if self.nodes[v.0].needs_grad {
                        let mut contrib = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            contrib.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.acc_owned(v, contrib);
                    }
                    offset += w;
                }
            }
            Op::GatherCols { x, cols, idx } => {
                let rows = g.len() / idx.len();
                let width = idx.len();
                let mut contrib = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for (jj, &src) in idx.iter().enumerate() {
                        contrib[r * cols + src] = contrib[r * cols + src] + g[r * width + jj];
                    }
                }
                self.acc_owned(*x, contrib);
            }
            Op::MaxGroups { x, group, argmax } => {
                let mut contrib = vec![T::zero(); g.len() * group];
                for (gidx, (&gi, &am)) in g.iter().zip(argmax.iter()).enumerate() {
                    contrib[gidx * group + am as usize] = gi;
                }
                self.acc_owned(*x, contrib);
            }
            Op::Reshape(a) => self.acc(*a, g),
            Op::Conv3x3 { x, w, bias, dims } => {
                let (b, cin, h, wd, cout) = *dims;
                let (dx, dw, dbias) = kernels::conv3x3_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    g,
                    b,
                    cin,
                    h,
                    wd,
                    cout,
                );
                let (x, w, bias) = (*x, *w, *bias);
                self.acc_owned(x, dx);
                self.acc_owned(w, dw);
                self.acc_owned(bias, dbias);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                channels,
                mean,
                inv_std,
                training,
            } => {
                self.backward_batch_norm(*x, *gamma, *beta, *channels, mean, inv_std, *training, g)?;
            }
            Op::CrossEntropyLogits {
                logits,
                labels,
                softmax,
            } => {
                let cols = softmax.len() / labels.len();
                let scale = g[0] / T::c(labels.len() as f64);
                let mut contrib = softmax.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    contrib[r * cols + lab] = contrib[r * cols + lab] - T::one();
                }
                for v in contrib.iter_mut() {
                    *v = *v * scale;
                }
                self.acc_owned(*logits, contrib);
            }
            Op::MmdIq {
                a,
                b,
                widths,
                estimate,
                dims,
            } => {
                if *estimate > 0.0 {
                    let chain = g[0].f64() / (2.0 * estimate.sqrt());
                    let (m, n) = *dims;
                    let (da, db) = mmd_backward(
                        self.nodes[a.0].value.data(),
                        self.nodes[b.0].value.data(),
                        m,
                        n,
                        widths,
                        chain,
                    );
                    let (a, b) = (*a, *b);
                    self.acc_owned(a, da);
                    self.acc_owned(b, db);
                }
            }
        }
        Ok(())
    }

    fn backward_arith(
        &mut self,
        kind: Arith,
        a: Vid,
        b: Vid,
        bc: Broadcast,
        g: &[T],
    ) -> Result<()> {
        let need_a = self.nodes[a.0].needs_grad;
        let need_b = self.nodes[b.0].needs_grad;
        // Raw per-element partials before broadcast reduction.
        let (da, db): (Option<Vec<T>>, Option<Vec<T>>) = {
            let va = self.nodes[a.0].value.data();
            let vb = self.nodes[b.0].value.data();
            let fetch_a = |i: usize| match bc {
                Broadcast::ScalarL => va[0],
                _ => va[i],
            };
            let fetch_b = |i: usize| match bc {
                Broadcast::ScalarR => vb[0],
                Broadcast::RowR => vb[i % vb.len()],
                _ => vb[i],
            };
            let da = need_a.then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| match kind {
                        Arith::Add | Arith::Sub => gi,
                        Arith::Mul => gi * fetch_b(i),
                        Arith::Div => gi / fetch_b(i),
                    })
                    .collect()
            });
            let db = need_b.then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| match kind {
                        Arith::Add => gi,
                        Arith::Sub => -gi,
                        Arith::Mul => gi * fetch_a(i),
                        Arith::Div => {
                            let bv = fetch_b(i);
                            -gi * fetch_a(i) / (bv * bv)
                        }
                    })
                    .collect()
            });
            (da, db)
        };
        if let Some(da) = da {
            let reduced = self.reduce_for(a, bc == Broadcast::ScalarL, false, da);
            self.acc_owned(a, reduced);
        }
        if let Some(db) = db {
            let reduced = self.reduce_for(
                b,
                bc == Broadcast::ScalarR,
                bc == Broadcast::RowR,
                db,
            );
            self.acc_owned(b, reduced);
        }
        Ok(())
    }

    /// Collapse a full-size partial back to the operand's broadcast shape.
    fn reduce_for(&self, v: Vid, to_scalar: bool, to_row: bool, partial: Vec<T>) -> Vec<T> {
        if to_scalar {
            vec![partial.iter().copied().sum()]
        } else if to_row {
            let n = self.nodes[v.0].value.numel();
            let mut out = vec![T::zero(); n];
            for (i, &p) in partial.iter().enumerate() {
                out[i % n] = out[i % n] + p;
            }
            out
        } else {
            partial
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batch_norm(
        &mut self,
        x: Vid,
        gamma: Vid,
        beta: Vid,
        c: usize,
        mean: &[T],
        inv_std: &[T],
        training: bool,
        g: &[T],
    ) -> Result<()> {
        let data = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data().to_vec();
        let total = data.len();
        let inner = total / c / (self.nodes[x.0].value.shape()[0]);
        let outer = self.nodes[x.0].value.shape()[0];
        let count = T::c((outer * inner) as f64);

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); total];
        for ch in 0..c {
            // First pass: sums of dout and dout*xhat for this channel.
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    let xhat = (data[base + i] - mean[ch]) * inv_std[ch];
                    sum_g = sum_g + g[base + i];
                    sum_gx = sum_gx + g[base + i] * xhat;
                }
            }
            dbeta[ch] = sum_g;
            dgamma[ch] = sum_gx;
            let scale = gv[ch] * inv_std[ch];
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    let idx = base + i;
                    dx[idx] = if training {
                        let xhat = (data[idx] - mean[ch]) * inv_std[ch];
                        scale * (g[idx] - sum_g / count - xhat * sum_gx / count)
                    } else {
                        scale * g[idx]
                    };
                }
            }
        }
        self.acc_owned(x, dx);
        self.acc_owned(gamma, dgamma);
        self.acc_owned(beta, dbeta);
        Ok(())
    }
}

#[inline]
fn rowslice<T>(s: &[T], i: usize, n: usize) -> &[T] {
    &s[i * n..(i + 1) * n]
}

#[inline]
fn dist2<T: Real>(u: &[T], v: &[T]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in u.iter().zip(v) {
        let d = x.f64() - y.f64();
        acc += d * d;
    }
    acc
}

/// Bank-averaged biased MMD estimate (pre-clamp, pre-sqrt), in f64.
///
/// Parallel over the first index with per-row partials summed in a fixed
/// order afterwards, so the result does not depend on the thread count.
fn mmd_estimate<T: Real>(a: &[T], b: &[T], m: usize, n: usize, widths: &[f64]) -> f64 {
    let partials: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for jj in 0..m {
                let daa = dist2(rowslice(a, i, n), rowslice(a, jj, n));
                let dab = dist2(rowslice(a, i, n), rowslice(b, jj, n));
                let dbb = dist2(rowslice(b, i, n), rowslice(b, jj, n));
                for &sigma in widths {
                    let s2 = sigma * sigma;
                    acc += 1.0 / (1.0 + daa / s2) - 2.0 / (1.0 + dab / s2)
                        + 1.0 / (1.0 + dbb / s2);
                }
            }
            acc
        })
        .collect();
    let m2 = (m * m) as f64;
    partials.iter().sum::<f64>() / m2 / widths.len() as f64
}

/// Gradients of the square-rooted MMD with the chain factor applied.
///
/// With k(u,v) = (1 + ||u-v||^2/s^2)^-1 the partial of k w.r.t. u is
/// kappa * (u - v) with kappa = -2 k^2 / s^2; symmetry of the within-set
/// sums doubles those terms.
fn mmd_backward<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    n: usize,
    widths: &[f64],
    chain: f64,
) -> (Vec<T>, Vec<T>) {
    let m2 = (m * m) as f64;
    let nw = widths.len() as f64;
    let kappa = |d2: f64| -> f64 {
        let mut acc = 0.0;
        for &sigma in widths {
            let s2 = sigma * sigma;
            let k = 1.0 / (1.0 + d2 / s2);
            acc += -2.0 * k * k / s2;
        }
        acc / nw
    };
    let base = chain / m2;
    let mut da = vec![T::zero(); m * n];
    da.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let ai = rowslice(a, i, n);
        for jj in 0..m {
            if jj != i {
                let aj = rowslice(a, jj, n);
                let c = 2.0 * base * kappa(dist2(ai, aj));
                for (o, (x, y)) in out.iter_mut().zip(ai.iter().zip(aj.iter())) {
                    *o = *o + T::c(c * (x.f64() - y.f64()));
                }
            }
            let bj = rowslice(b, jj, n);
            let c = -2.0 * base * kappa(dist2(ai, bj));
            for (o, (x, y)) in out.iter_mut().zip(ai.iter().zip(bj.iter())) {
                *o = *o + T::c(c * (x.f64() - y.f64()));
            }
        }
    });
    let mut db = vec![T::zero(); m * n];
    db.par_chunks_mut(n).enumerate().for_each(|(q, out)| {
        let bq = rowslice(b, q, n);
        for jj in 0..m {
            if jj != q {
                let bj = rowslice(b, jj, n);
                let c = 2.0 * base * kappa(dist2(bq, bj));
                for (o, (x, y)) in out.iter_mut().zip(bq.iter().zip(bj.iter())) {
                    *o = *o + T::c(c * (x.f64() - y.f64()));
                }
            }
            let aj = rowslice(a, jj, n);
            // d/d b_q of k(a_j, b_q) is kappa * (b_q - a_j)
            let c = -2.0 * base * kappa(dist2(aj, bq));
            for (o, (x, y)) in out.iter_mut().zip(bq.iter().zip(aj.iter())) {
                *o = *o + T::c(c * (x.f64() - y.f64()));
            }
        }
    });
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_of_squares() {
        // f = sum(x*x) at [1,2,3] -> grad [2,4,6]
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.square(x);
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.square(x);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn elu_matches_closed_form() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.elu(x);
        let got = tape.value(y).data().to_vec();
        assert!((got[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-12);
        assert!((got[0] + 0.6321205588285577).abs() < 1e-10);
        assert_eq!(got[1], 2.0);
    }

    #[test]
    fn concat_of_slices_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = tape.input(Tensor::new(vec![3, 4], data.clone()).unwrap());
        let l = tape.slice_cols(x, 0..2).unwrap();
        let r = tape.slice_cols(x, 2..4).unwrap();
        let back = tape.concat_cols(&[l, r]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
        assert_eq!(tape.value(back).shape(), &[3, 4]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::zeros(vec![2, 4]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn batch_norm_inference_is_affine() {
        // Compare against an explicit per-channel scale-and-shift.
        let mut tape = Tape::<f64>::new();
        let x_data: Vec<f64> = (0..8).map(|i| i as f64 * 0.7 - 2.0).collect();
        let x = tape.input(Tensor::new(vec![4, 2], x_data.clone()).unwrap());
        let gamma = tape.input(Tensor::new(vec![2], vec![1.5, 0.5]).unwrap());
        let beta = tape.input(Tensor::new(vec![2], vec![0.2, -0.1]).unwrap());
        let rm = [1.0, -1.0];
        let rv = [4.0, 0.25];
        let eps = 1e-5;
        let y = tape
            .batch_norm_infer(x, gamma, beta, &rm, &rv, eps)
            .unwrap();
        for r in 0..4 {
            for ch in 0..2 {
                let scale = [1.5, 0.5][ch] / (rv[ch] + eps).sqrt();
                let want = (x_data[r * 2 + ch] - rm[ch]) * scale + [0.2, -0.1][ch];
                let got = tape.value(y).data()[r * 2 + ch];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut tape = Tape::<f64>::new();
        let x_data: Vec<f64> = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0];
        let x = tape.input(Tensor::new(vec![4, 2], x_data).unwrap());
        let gamma = tape.input(Tensor::full(vec![2], 1.0));
        let beta = tape.input(Tensor::zeros(vec![2]));
        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-8).unwrap();
        assert!((mean[0] - 2.5).abs() < 1e-12);
        assert!((var[1] - 125.0).abs() < 1e-9);
        let out = tape.value(y).data();
        for ch in 0..2 {
            let m: f64 = (0..4).map(|r| out[r * 2 + ch]).sum::<f64>() / 4.0;
            let v: f64 = (0..4).map(|r| (out[r * 2 + ch] - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_groups_routes_gradient_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![1, 6], vec![1.0, 5.0, 2.0, -1.0, -3.0, -2.0]).unwrap());
        let m = tape.max_groups(x, 3).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, -1.0]);
        let s = tape.sum_all(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_cols_permutes_and_scatters_back() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let idx = Arc::new(vec![2usize, 0, 1]);
        let y = tape.gather_cols(x, idx).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]);
        let w = tape.input(Tensor::new(vec![2, 3], vec![1.0, 10.0, 100.0, 1.0, 10.0, 100.0]).unwrap());
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum_all(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[10.0, 100.0, 1.0, 10.0, 100.0, 1.0]);
    }
}
