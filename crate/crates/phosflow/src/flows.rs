//! Invertible network stack: per layer a frozen random permutation, a
//! two-sided Glow-style affine coupling block, and an activation
//! normalization. Couplings transform one half of the dimensions by a
//! scale-and-shift computed from the other half, so the Jacobian stays
//! triangular and its log-determinant is the sum of the (soft-clamped)
//! log-scales. Conditioning, when present, is projected to a fixed width
//! and concatenated into every coupling subnet input in both directions.

use crate::autodiff::{kernels, Real, Tape, Tensor, Vid};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::Stream;
use std::sync::Arc;

/// Width conditions are projected to before entering the subnets (9x9).
pub const COND_PROJECTED_WIDTH: usize = 81;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    /// Total invertible width D.
    pub dim: usize,
    /// Leading output width d treated as the supervised part; K = D - d
    /// latent dimensions remain. d = 0 makes the whole output latent.
    pub dim_out: usize,
    /// Raw condition width (0 for an unconditional flow).
    pub cond_raw: usize,
    /// Projected condition width fed to the subnets.
    pub cond_width: usize,
    pub depth: usize,
    pub hidden: usize,
    /// Soft-clamp scale: s-hat = alpha * (2/pi) * atan(s / alpha).
    pub clamp_alpha: f64,
}

impl FlowConfig {
    pub fn new(dim: usize, dim_out: usize, cond_raw: usize, depth: usize, hidden: usize) -> Self {
        FlowConfig {
            dim,
            dim_out,
            cond_raw,
            cond_width: COND_PROJECTED_WIDTH,
            depth,
            hidden,
            clamp_alpha: 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::parameter("flow dim must be at least 2"));
        }
        if self.dim_out > self.dim {
            return Err(Error::parameter(format!(
                "dim_out {} exceeds dim {}",
                self.dim_out, self.dim
            )));
        }
        if self.depth == 0 || self.hidden == 0 || self.clamp_alpha <= 0.0 {
            return Err(Error::parameter("degenerate flow configuration"));
        }
        Ok(())
    }
}

/// Two affine layers with a ReLU between; outputs s and t jointly.
#[derive(Debug, Clone)]
pub struct Subnet<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> Subnet<T> {
    /// The second layer starts at zero so the coupling begins as the
    /// identity map.
    fn init(input: usize, hidden: usize, output: usize, stream: &mut Stream) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Subnet {
            w1: Tensor::randn(vec![input, hidden], std, stream),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, output]),
            b2: Tensor::zeros(vec![output]),
        }
    }

    fn out_width(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Plain forward: relu(x w1 + b1) w2 + b2.
    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (rows, cols) = (x.rows(), x.cols());
        let hidden = self.w1.shape()[1];
        let mut h = kernels::matmul(x.data(), self.w1.data(), rows, cols, hidden);
        for r in 0..rows {
            for (j, v) in h[r * hidden..(r + 1) * hidden].iter_mut().enumerate() {
                let vv = *v + self.b1.data()[j];
                *v = if vv > T::zero() { vv } else { T::zero() };
            }
        }
        let out_w = self.out_width();
        let mut o = kernels::matmul(&h, self.w2.data(), rows, hidden, out_w);
        for r in 0..rows {
            for (j, v) in o[r * out_w..(r + 1) * out_w].iter_mut().enumerate() {
                *v = *v + self.b2.data()[j];
            }
        }
        Tensor::new(vec![rows, out_w], o).expect("subnet output dims")
    }

    fn eval_on_tape(&self, tape: &mut Tape<T>, vids: &SubnetVids, x: Vid) -> Result<Vid> {
        let h0 = tape.matmul(x, vids.w1)?;
        let h1 = tape.add(h0, vids.b1)?;
        let h = tape.relu(h1);
        let o0 = tape.matmul(h, vids.w2)?;
        tape.add(o0, vids.b2)
    }

    fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }
}

/// Per-dimension learnable scale and bias, data-dependently initialized.
#[derive(Debug, Clone)]
pub struct ActNorm<T> {
    pub scale: Tensor<T>,
    pub bias: Tensor<T>,
    pub initialized: bool,
}

impl<T: Real> ActNorm<T> {
    fn identity(dim: usize) -> Self {
        ActNorm {
            scale: Tensor::full(vec![dim], T::one()),
            bias: Tensor::zeros(vec![dim]),
            initialized: false,
        }
    }
}

/// One invertible layer: permutation, coupling, actnorm, applied in order.
#[derive(Debug, Clone)]
pub struct FlowLayer<T> {
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
    /// Subnet computing (s, t) for the second half from the first.
    pub net_b: Subnet<T>,
    /// Subnet computing (s, t) for the first half from the transformed second.
    pub net_a: Subnet<T>,
    pub actnorm: ActNorm<T>,
}

/// Learnable affine condition projection.
#[derive(Debug, Clone)]
pub struct CondProjection<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FlowModel<T> {
    pub config: FlowConfig,
    pub layers: Vec<FlowLayer<T>>,
    pub cond_proj: Option<CondProjection<T>>,
}

/// Tape leaf ids for one subnet.
struct SubnetVids {
    w1: Vid,
    b1: Vid,
    w2: Vid,
    b2: Vid,
}

/// Tape leaf ids for the whole model, in a fixed traversal order.
pub struct FlowVids {
    layers: Vec<(SubnetVids, SubnetVids, Vid, Vid)>, // net_b, net_a, scale, bias
    cond_proj: Option<(Vid, Vid)>,
    trainable: bool,
}

impl<T: Real> FlowModel<T> {
    pub fn new(config: FlowConfig, stream: &mut Stream) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let wa = d.div_ceil(2);
        let wb = d / 2;
        let cw = if config.cond_raw > 0 {
            config.cond_width
        } else {
            0
        };
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let mut perm: Vec<usize> = (0..d).collect();
            stream.shuffle(&mut perm);
            let mut inv_perm = vec![0usize; d];
            for (i, &p) in perm.iter().enumerate() {
                inv_perm[p] = i;
            }
            layers.push(FlowLayer {
                perm,
                inv_perm,
                net_b: Subnet::init(wa + cw, config.hidden, 2 * wb, stream),
                net_a: Subnet::init(wb + cw, config.hidden, 2 * wa, stream),
                actnorm: ActNorm::identity(d),
            });
        }
        let cond_proj = (config.cond_raw > 0).then(|| CondProjection {
            w: Tensor::randn(
                vec![config.cond_raw, config.cond_width],
                1.0 / (config.cond_raw as f64).sqrt(),
                stream,
            ),
            b: Tensor::zeros(vec![config.cond_width]),
        });
        Ok(FlowModel {
            config,
            layers,
            cond_proj,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Latent width K = D - d.
    pub fn dim_latent(&self) -> usize {
        self.config.dim - self.config.dim_out
    }

    fn split_widths(&self) -> (usize, usize) {
        (self.config.dim.div_ceil(2), self.config.dim / 2)
    }

    /// Total learnable parameter count (permutations are structural).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            n += l.net_b.param_count() + l.net_a.param_count();
            n += l.actnorm.scale.numel() + l.actnorm.bias.numel();
        }
        if let Some(cp) = &self.cond_proj {
            n += cp.w.numel() + cp.b.numel();
        }
        n
    }

    /// Perturb every parameter (including the zero-initialized final subnet
    /// layers); used to exercise invertibility and log-det identities at
    /// arbitrary parameter settings.
    pub fn randomize(&mut self, scale: f64, stream: &mut Stream) {
        for l in &mut self.layers {
            for t in [
                &mut l.net_b.w1,
                &mut l.net_b.b1,
                &mut l.net_b.w2,
                &mut l.net_b.b2,
                &mut l.net_a.w1,
                &mut l.net_a.b1,
                &mut l.net_a.w2,
                &mut l.net_a.b2,
                &mut l.actnorm.bias,
            ] {
                for v in t.data_mut() {
                    *v = *v + T::c(stream.normal() * scale);
                }
            }
            for v in l.actnorm.scale.data_mut() {
                *v = *v + T::c(stream.normal() * scale * 0.5);
            }
            l.actnorm.initialized = true;
        }
        if let Some(cp) = &mut self.cond_proj {
            for v in cp.w.data_mut() {
                *v = *v + T::c(stream.normal() * scale);
            }
            for v in cp.b.data_mut() {
                *v = *v + T::c(stream.normal() * scale);
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<usize> {
        if x.shape().len() != 2 || x.cols() != self.config.dim {
            return Err(Error::shape(
                "flow input",
                x.shape(),
                &[x.rows(), self.config.dim],
            ));
        }
        match (self.config.cond_raw, cond) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(Error::contract(
                    "condition passed to an unconditional flow",
                ))
            }
            (w, Some(c)) => {
                if c.shape() != [x.rows(), w] {
                    return Err(Error::shape("flow condition", c.shape(), &[x.rows(), w]));
                }
            }
            (_, None) => {
                return Err(Error::contract(
                    "conditional flow called without a condition",
                ))
            }
        }
        Ok(x.rows())
    }

    /// alpha * (2/pi) * atan(s / alpha), keeping log-scales bounded.
    fn soft_clamp(&self, s: T) -> T {
        let alpha = T::c(self.config.clamp_alpha);
        let two_over_pi = T::c(std::f64::consts::FRAC_2_PI);
        alpha * two_over_pi * (s / alpha).atan()
    }

    fn project_cond_plain(&self, cond: Option<&Tensor<T>>) -> Option<Tensor<T>> {
        let cp = self.cond_proj.as_ref()?;
        let c = cond?;
        let (rows, cw) = (c.rows(), cp.w.shape()[1]);
        let mut o = kernels::matmul(c.data(), cp.w.data(), rows, c.cols(), cw);
        for r in 0..rows {
            for (j, v) in o[r * cw..(r + 1) * cw].iter_mut().enumerate() {
                *v = *v + cp.b.data()[j];
            }
        }
        Some(Tensor::new(vec![rows, cw], o).expect("projection dims"))
    }

    /// Split (s, t) halves of a joint subnet output and soft-clamp s.
    fn split_st(&self, joint: &Tensor<T>, width: usize, layer: usize) -> Result<(Vec<T>, Vec<T>)> {
        if !joint.all_finite() {
            return Err(Error::Numeric(format!("coupling subnet output, layer {layer}")));
        }
        let rows = joint.rows();
        let cols = joint.cols();
        debug_assert_eq!(cols, 2 * width);
        let mut s = Vec::with_capacity(rows * width);
        let mut t = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let row = &joint.data()[r * cols..(r + 1) * cols];
            s.extend(row[..width].iter().map(|&v| self.soft_clamp(v)));
            t.extend_from_slice(&row[width..]);
        }
        Ok((s, t))
    }

    /// Forward pass: x -> [y_d, z_K], plus the per-sample log-determinant.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        cond: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let rows = self.check_input(x, cond)?;
        let (wa, wb) = self.split_widths();
        let d = self.config.dim;
        let cproj = self.project_cond_plain(cond);
        let mut cur = x.clone();
        let mut logdet = vec![T::zero(); rows];
        for (li, layer) in self.layers.iter().enumerate() {
            // permutation
            let mut permuted = vec![T::zero(); rows * d];
            for r in 0..rows {
                let src = &cur.data()[r * d..(r + 1) * d];
                let dst = &mut permuted[r * d..(r + 1) * d];
                for (j, &p) in layer.perm.iter().enumerate() {
                    dst[j] = src[p];
                }
            }
            // split
            let mut xa = Vec::with_capacity(rows * wa);
            let mut xb = Vec::with_capacity(rows * wb);
            for r in 0..rows {
                let row = &permuted[r * d..(r + 1) * d];
                xa.extend_from_slice(&row[..wa]);
                xb.extend_from_slice(&row[wa..]);
            }
            let xa = Tensor::new(vec![rows, wa], xa)?;
            let xb = Tensor::new(vec![rows, wb], xb)?;
            // side 1: transform B from A
            let in_b = concat_with_cond(&xa, cproj.as_ref());
            let (s_b, t_b) = self.split_st(&layer.net_b.eval(&in_b), wb, li)?;
            let mut zb = vec![T::zero(); rows * wb];
            for i in 0..rows * wb {
                zb[i] = xb.data()[i] * s_b[i].exp() + t_b[i];
                logdet[i / wb] = logdet[i / wb] + s_b[i];
            }
            let zb = Tensor::new(vec![rows, wb], zb)?;
            // side 2: transform A from the new B
            let in_a = concat_with_cond(&zb, cproj.as_ref());
            let (s_a, t_a) = self.split_st(&layer.net_a.eval(&in_a), wa, li)?;
            let mut za = vec![T::zero(); rows * wa];
            for i in 0..rows * wa {
                za[i] = xa.data()[i] * s_a[i].exp() + t_a[i];
                logdet[i / wa] = logdet[i / wa] + s_a[i];
            }
            // actnorm over the concatenated output
            let scale = layer.actnorm.scale.data();
            let bias = layer.actnorm.bias.data();
            let mut out = vec![T::zero(); rows * d];
            for r in 0..rows {
                for j in 0..wa {
                    out[r * d + j] = za[r * wa + j] * scale[j] + bias[j];
                }
                for j in 0..wb {
                    out[r * d + wa + j] = zb.data()[r * wb + j] * scale[wa + j] + bias[wa + j];
                }
            }
            let an_logdet: T = scale
                .iter()
                .map(|&s| (s * s).ln() * T::c(0.5))
                .sum();
            for ld in logdet.iter_mut() {
                *ld = *ld + an_logdet;
            }
            cur = Tensor::new(vec![rows, d], out)?;
        }
        Ok((cur, logdet))
    }

    /// Inverse pass: [y_d, z_K] -> x, plus the log-determinant of the
    /// inverse map (the negation of the forward log-det at the result).
    pub fn inverse(
        &self,
        z: &Tensor<T>,
        cond: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let rows = self.check_input(z, cond)?;
        let (wa, wb) = self.split_widths();
        let d = self.config.dim;
        let cproj = self.project_cond_plain(cond);
        let mut cur = z.clone();
        let mut logdet = vec![T::zero(); rows];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            // undo actnorm
            let scale = layer.actnorm.scale.data();
            let bias = layer.actnorm.bias.data();
            let mut un = vec![T::zero(); rows * d];
            for r in 0..rows {
                for j in 0..d {
                    un[r * d + j] = (cur.data()[r * d + j] - bias[j]) / scale[j];
                }
            }
            let an_logdet: T = scale
                .iter()
                .map(|&s| (s * s).ln() * T::c(0.5))
                .sum();
            for ld in logdet.iter_mut() {
                *ld = *ld - an_logdet;
            }
            // split
            let mut za = Vec::with_capacity(rows * wa);
            let mut zb = Vec::with_capacity(rows * wb);
            for r in 0..rows {
                let row = &un[r * d..(r + 1) * d];
                za.extend_from_slice(&row[..wa]);
                zb.extend_from_slice(&row[wa..]);
            }
            let za = Tensor::new(vec![rows, wa], za)?;
            let zb = Tensor::new(vec![rows, wb], zb)?;
            // undo side 2 first: A was transformed from the (unchanged) B
            let in_a = concat_with_cond(&zb, cproj.as_ref());
            let (s_a, t_a) = self.split_st(&layer.net_a.eval(&in_a), wa, li)?;
            let mut xa = vec![T::zero(); rows * wa];
            for i in 0..rows * wa {
                xa[i] = (za.data()[i] - t_a[i]) * (-s_a[i]).exp();
                logdet[i / wa] = logdet[i / wa] - s_a[i];
            }
            let xa = Tensor::new(vec![rows, wa], xa)?;
            // undo side 1
            let in_b = concat_with_cond(&xa, cproj.as_ref());
            let (s_b, t_b) = self.split_st(&layer.net_b.eval(&in_b), wb, li)?;
            let mut xb = vec![T::zero(); rows * wb];
            for i in 0..rows * wb {
                xb[i] = (zb.data()[i] - t_b[i]) * (-s_b[i]).exp();
                logdet[i / wb] = logdet[i / wb] - s_b[i];
            }
            // un-permute
            let mut out = vec![T::zero(); rows * d];
            for r in 0..rows {
                let dst = &mut out[r * d..(r + 1) * d];
                for j in 0..wa {
                    dst[layer.perm[j]] = xa.data()[r * wa + j];
                }
                for j in 0..wb {
                    dst[layer.perm[wa + j]] = xb[r * wb + j];
                }
            }
            cur = Tensor::new(vec![rows, d], out)?;
        }
        Ok((cur, logdet))
    }

    // ---- tape versions -----------------------------------------------------

    /// Push all learnable parameters onto a tape. `trainable` decides
    /// whether they are gradient leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> FlowVids {
        let push = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.input(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let nb = SubnetVids {
                    w1: push(tape, &l.net_b.w1),
                    b1: push(tape, &l.net_b.b1),
                    w2: push(tape, &l.net_b.w2),
                    b2: push(tape, &l.net_b.b2),
                };
                let na = SubnetVids {
                    w1: push(tape, &l.net_a.w1),
                    b1: push(tape, &l.net_a.b1),
                    w2: push(tape, &l.net_a.w2),
                    b2: push(tape, &l.net_a.b2),
                };
                let sc = push(tape, &l.actnorm.scale);
                let bi = push(tape, &l.actnorm.bias);
                (nb, na, sc, bi)
            })
            .collect();
        let cond_proj = self
            .cond_proj
            .as_ref()
            .map(|cp| (push(tape, &cp.w), push(tape, &cp.b)));
        FlowVids {
            layers,
            cond_proj,
            trainable,
        }
    }

    /// Parameter tensors in the same order as [`FlowModel::bind`] pushes them.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.net_b.w1);
            out.push(&mut l.net_b.b1);
            out.push(&mut l.net_b.w2);
            out.push(&mut l.net_b.b2);
            out.push(&mut l.net_a.w1);
            out.push(&mut l.net_a.b1);
            out.push(&mut l.net_a.w2);
            out.push(&mut l.net_a.b2);
            out.push(&mut l.actnorm.scale);
            out.push(&mut l.actnorm.bias);
        }
        if let Some(cp) = &mut self.cond_proj {
            out.push(&mut cp.w);
            out.push(&mut cp.b);
        }
        out
    }

    fn soft_clamp_on_tape(&self, tape: &mut Tape<T>, s: Vid) -> Vid {
        let alpha = self.config.clamp_alpha;
        let scaled = tape.scale(s, 1.0 / alpha);
        let a = tape.atan(scaled);
        tape.scale(a, alpha * std::f64::consts::FRAC_2_PI)
    }

    fn project_cond_on_tape(
        &self,
        tape: &mut Tape<T>,
        vids: &FlowVids,
        cond: Option<Vid>,
    ) -> Result<Option<Vid>> {
        match (&vids.cond_proj, cond) {
            (Some((w, b)), Some(c)) => {
                let p = tape.matmul(c, *w)?;
                Ok(Some(tape.add(p, *b)?))
            }
            (None, None) => Ok(None),
            _ => Err(Error::contract("condition binding mismatch")),
        }
    }

    fn coupling_side_on_tape(
        &self,
        tape: &mut Tape<T>,
        subnet: &Subnet<T>,
        svids: &SubnetVids,
        driver: Vid,
        target: Vid,
        cproj: Option<Vid>,
        layer: usize,
    ) -> Result<(Vid, Vid)> {
        let input = match cproj {
            Some(c) => tape.concat_cols(&[driver, c])?,
            None => driver,
        };
        let joint = subnet.eval_on_tape(tape, svids, input)?;
        if !tape.value(joint).all_finite() {
            return Err(Error::Numeric(format!("coupling subnet output, layer {layer}")));
        }
        let width = tape.value(target).cols();
        let s_raw = tape.slice_cols(joint, 0..width)?;
        let t = tape.slice_cols(joint, width..2 * width)?;
        let s_hat = self.soft_clamp_on_tape(tape, s_raw);
        let es = tape.exp(s_hat);
        let scaled = tape.mul(target, es)?;
        let out = tape.add(scaled, t)?;
        let ld = tape.sum_rows(s_hat)?;
        Ok((out, ld))
    }

    /// Forward pass on a tape; returns (output, per-sample logdet).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vids: &FlowVids,
        x: Vid,
        cond: Option<Vid>,
    ) -> Result<(Vid, Vid)> {
        let rows = tape.value(x).rows();
        let (wa, wb) = self.split_widths();
        let cproj = self.project_cond_on_tape(tape, vids, cond)?;
        let mut cur = x;
        let mut logdet = tape.input(Tensor::zeros(vec![rows]));
        for (li, (layer, lv)) in self.layers.iter().zip(&vids.layers).enumerate() {
            let permuted = tape.gather_cols(cur, Arc::new(layer.perm.clone()))?;
            let xa = tape.slice_cols(permuted, 0..wa)?;
            let xb = tape.slice_cols(permuted, wa..wa + wb)?;
            let (zb, ld_b) =
                self.coupling_side_on_tape(tape, &layer.net_b, &lv.0, xa, xb, cproj, li)?;
            let (za, ld_a) =
                self.coupling_side_on_tape(tape, &layer.net_a, &lv.1, zb, xa, cproj, li)?;
            logdet = tape.add(logdet, ld_b)?;
            logdet = tape.add(logdet, ld_a)?;
            let joined = tape.concat_cols(&[za, zb])?;
            let scaled = tape.mul(joined, lv.2)?;
            cur = tape.add(scaled, lv.3)?;
            let sq = tape.square(lv.2);
            let lg = tape.log(sq);
            let s_all = tape.sum_all(lg);
            let an_ld = tape.scale(s_all, 0.5);
            logdet = tape.add(logdet, an_ld)?;
        }
        Ok((cur, logdet))
    }

    /// Inverse pass on a tape; returns (output, per-sample logdet of the
    /// inverse map).
    pub fn inverse_on_tape(
        &self,
        tape: &mut Tape<T>,
        vids: &FlowVids,
        z: Vid,
        cond: Option<Vid>,
    ) -> Result<(Vid, Vid)> {
        let rows = tape.value(z).rows();
        let (wa, wb) = self.split_widths();
        let cproj = self.project_cond_on_tape(tape, vids, cond)?;
        let mut cur = z;
        let mut logdet = tape.input(Tensor::zeros(vec![rows]));
        for (li, (layer, lv)) in self.layers.iter().zip(&vids.layers).enumerate().rev() {
            // undo actnorm
            let shifted = tape.sub(cur, lv.3)?;
            let un = tape.div(shifted, lv.2)?;
            let sq = tape.square(lv.2);
            let lg = tape.log(sq);
            let s_all = tape.sum_all(lg);
            let an_ld = tape.scale(s_all, -0.5);
            logdet = tape.add(logdet, an_ld)?;
            let za = tape.slice_cols(un, 0..wa)?;
            let zb = tape.slice_cols(un, wa..wa + wb)?;
            // undo side 2
            let (xa, ld_a) = self.coupling_side_inverse_on_tape(
                tape,
                &layer.net_a,
                &lv.1,
                zb,
                za,
                cproj,
                li,
            )?;
            // undo side 1
            let (xb, ld_b) = self.coupling_side_inverse_on_tape(
                tape,
                &layer.net_b,
                &lv.0,
                xa,
                zb,
                cproj,
                li,
            )?;
            logdet = tape.add(logdet, ld_a)?;
            logdet = tape.add(logdet, ld_b)?;
            let joined = tape.concat_cols(&[xa, xb])?;
            cur = tape.gather_cols(joined, Arc::new(layer.inv_perm.clone()))?;
        }
        Ok((cur, logdet))
    }

    #[allow(clippy::too_many_arguments)]
    fn coupling_side_inverse_on_tape(
        &self,
        tape: &mut Tape<T>,
        subnet: &Subnet<T>,
        svids: &SubnetVids,
        driver: Vid,
        target: Vid,
        cproj: Option<Vid>,
        layer: usize,
    ) -> Result<(Vid, Vid)> {
        let input = match cproj {
            Some(c) => tape.concat_cols(&[driver, c])?,
            None => driver,
        };
        let joint = subnet.eval_on_tape(tape, svids, input)?;
        if !tape.value(joint).all_finite() {
            return Err(Error::Numeric(format!("coupling subnet output, layer {layer}")));
        }
        let width = tape.value(target).cols();
        let s_raw = tape.slice_cols(joint, 0..width)?;
        let t = tape.slice_cols(joint, width..2 * width)?;
        let s_hat = self.soft_clamp_on_tape(tape, s_raw);
        let neg_s = tape.neg(s_hat);
        let ens = tape.exp(neg_s);
        let shifted = tape.sub(target, t)?;
        let out = tape.mul(shifted, ens)?;
        let ld_pos = tape.sum_rows(s_hat)?;
        let ld = tape.neg(ld_pos);
        Ok((out, ld))
    }

    /// Data-dependent actnorm initialization on one batch: after this the
    /// per-dimension post-actnorm activations of the batch have mean 0 and
    /// variance 1. Returns the number of variance-floored dimensions.
    pub fn initialize_actnorm(
        &mut self,
        batch: &Tensor<T>,
        cond: Option<&Tensor<T>>,
    ) -> Result<usize> {
        let rows = self.check_input(batch, cond)?;
        if rows < 2 {
            return Err(Error::contract("actnorm init needs a batch of at least 2"));
        }
        let (wa, wb) = self.split_widths();
        let d = self.config.dim;
        let cproj = self.project_cond_plain(cond);
        let mut cur = batch.clone();
        let mut floored = 0usize;
        for li in 0..self.layers.len() {
            // permutation + coupling, as in forward
            let layer = &self.layers[li];
            let mut permuted = vec![T::zero(); rows * d];
            for r in 0..rows {
                let src = &cur.data()[r * d..(r + 1) * d];
                let dst = &mut permuted[r * d..(r + 1) * d];
                for (j, &p) in layer.perm.iter().enumerate() {
                    dst[j] = src[p];
                }
            }
            let mut xa = Vec::with_capacity(rows * wa);
            let mut xb = Vec::with_capacity(rows * wb);
            for r in 0..rows {
                let row = &permuted[r * d..(r + 1) * d];
                xa.extend_from_slice(&row[..wa]);
                xb.extend_from_slice(&row[wa..]);
            }
            let xa = Tensor::new(vec![rows, wa], xa)?;
            let xb = Tensor::new(vec![rows, wb], xb)?;
            let in_b = concat_with_cond(&xa, cproj.as_ref());
            let (s_b, t_b) = self.split_st(&layer.net_b.eval(&in_b), wb, li)?;
            let mut zb = vec![T::zero(); rows * wb];
            for i in 0..rows * wb {
                zb[i] = xb.data()[i] * s_b[i].exp() + t_b[i];
            }
            let zb = Tensor::new(vec![rows, wb], zb)?;
            let in_a = concat_with_cond(&zb, cproj.as_ref());
            let (s_a, t_a) = self.split_st(&layer.net_a.eval(&in_a), wa, li)?;
            let mut pre = vec![T::zero(); rows * d];
            for r in 0..rows {
                for j in 0..wa {
                    pre[r * d + j] = xa.data()[r * wa + j] * s_a[r * wa + j].exp() + t_a[r * wa + j];
                }
                for j in 0..wb {
                    pre[r * d + wa + j] = zb.data()[r * wb + j];
                }
            }
            // per-dimension statistics of the pre-actnorm activations
            let layer = &mut self.layers[li];
            let n = T::c(rows as f64);
            for j in 0..d {
                let mut mean = T::zero();
                for r in 0..rows {
                    mean = mean + pre[r * d + j];
                }
                mean = mean / n;
                let mut var = T::zero();
                for r in 0..rows {
                    let dv = pre[r * d + j] - mean;
                    var = var + dv * dv;
                }
                var = var / n;
                let mut std = var.sqrt();
                if std < T::c(1e-6) {
                    std = std + T::c(1e-6);
                    floored += 1;
                }
                let scale = T::one() / std;
                layer.actnorm.scale.data_mut()[j] = scale;
                layer.actnorm.bias.data_mut()[j] = -mean * scale;
            }
            layer.actnorm.initialized = true;
            // apply the freshly initialized actnorm and continue
            let scale = layer.actnorm.scale.data();
            let bias = layer.actnorm.bias.data();
            let mut out = vec![T::zero(); rows * d];
            for r in 0..rows {
                for j in 0..d {
                    out[r * d + j] = pre[r * d + j] * scale[j] + bias[j];
                }
            }
            cur = Tensor::new(vec![rows, d], out)?;
        }
        if floored > 0 {
            eprintln!("actnorm init: floored std on {floored} near-constant dimensions");
        }
        Ok(floored)
    }

    // ---- persistence ---------------------------------------------------------

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_scalar(&format!("{prefix}.dim"), self.config.dim as f64);
        ck.insert_scalar(&format!("{prefix}.dim_out"), self.config.dim_out as f64);
        ck.insert_scalar(&format!("{prefix}.cond_raw"), self.config.cond_raw as f64);
        ck.insert_scalar(&format!("{prefix}.cond_width"), self.config.cond_width as f64);
        ck.insert_scalar(&format!("{prefix}.depth"), self.config.depth as f64);
        ck.insert_scalar(&format!("{prefix}.hidden"), self.config.hidden as f64);
        ck.insert_scalar(&format!("{prefix}.clamp_alpha"), self.config.clamp_alpha);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            ck.insert_indices(&format!("{p}.perm"), &l.perm);
            ck.insert_tensor(&format!("{p}.net_b.w1"), &l.net_b.w1);
            ck.insert_tensor(&format!("{p}.net_b.b1"), &l.net_b.b1);
            ck.insert_tensor(&format!("{p}.net_b.w2"), &l.net_b.w2);
            ck.insert_tensor(&format!("{p}.net_b.b2"), &l.net_b.b2);
            ck.insert_tensor(&format!("{p}.net_a.w1"), &l.net_a.w1);
            ck.insert_tensor(&format!("{p}.net_a.b1"), &l.net_a.b1);
            ck.insert_tensor(&format!("{p}.net_a.w2"), &l.net_a.w2);
            ck.insert_tensor(&format!("{p}.net_a.b2"), &l.net_a.b2);
            ck.insert_tensor(&format!("{p}.actnorm.scale"), &l.actnorm.scale);
            ck.insert_tensor(&format!("{p}.actnorm.bias"), &l.actnorm.bias);
            ck.insert_scalar(
                &format!("{p}.actnorm.initialized"),
                if l.actnorm.initialized { 1.0 } else { 0.0 },
            );
        }
        if let Some(cp) = &self.cond_proj {
            ck.insert_tensor(&format!("{prefix}.cond_proj.w"), &cp.w);
            ck.insert_tensor(&format!("{prefix}.cond_proj.b"), &cp.b);
        }
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> { ck.get(&format!("{prefix}.{name}"))?.scalar() };
        let config = FlowConfig {
            dim: scalar("dim")? as usize,
            dim_out: scalar("dim_out")? as usize,
            cond_raw: scalar("cond_raw")? as usize,
            cond_width: scalar("cond_width")? as usize,
            depth: scalar("depth")? as usize,
            hidden: scalar("hidden")? as usize,
            clamp_alpha: scalar("clamp_alpha")?,
        };
        config.validate()?;
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("{prefix}.layer{i}");
            let perm = ck.get_indices(&format!("{p}.perm"))?;
            let mut inv_perm = vec![0usize; perm.len()];
            let mut seen = vec![false; perm.len()];
            for (j, &pp) in perm.iter().enumerate() {
                if pp >= perm.len() || seen[pp] {
                    return Err(Error::contract(format!(
                        "stored permutation in layer {i} is not a bijection"
                    )));
                }
                seen[pp] = true;
                inv_perm[pp] = j;
            }
            let t = |name: &str| -> Result<Tensor<T>> {
                ck.get(&format!("{p}.{name}"))?.tensor()
            };
            layers.push(FlowLayer {
                perm,
                inv_perm,
                net_b: Subnet {
                    w1: t("net_b.w1")?,
                    b1: t("net_b.b1")?,
                    w2: t("net_b.w2")?,
                    b2: t("net_b.b2")?,
                },
                net_a: Subnet {
                    w1: t("net_a.w1")?,
                    b1: t("net_a.b1")?,
                    w2: t("net_a.w2")?,
                    b2: t("net_a.b2")?,
                },
                actnorm: ActNorm {
                    scale: t("actnorm.scale")?,
                    bias: t("actnorm.bias")?,
                    initialized: ck
                        .get(&format!("{p}.actnorm.initialized"))?
                        .scalar()?
                        != 0.0,
                },
            });
        }
        let cond_proj = if config.cond_raw > 0 {
            Some(CondProjection {
                w: ck.get(&format!("{prefix}.cond_proj.w"))?.tensor()?,
                b: ck.get(&format!("{prefix}.cond_proj.b"))?.tensor()?,
            })
        } else {
            None
        };
        Ok(FlowModel {
            config,
            layers,
            cond_proj,
        })
    }
}

impl FlowVids {
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Leaf ids in the same order as [`FlowModel::params_mut`].
    pub fn param_vids(&self) -> Vec<Vid> {
        let mut out = Vec::new();
        for (nb, na, sc, bi) in &self.layers {
            out.extend([nb.w1, nb.b1, nb.w2, nb.b2]);
            out.extend([na.w1, na.b1, na.w2, na.b2]);
            out.push(*sc);
            out.push(*bi);
        }
        if let Some((w, b)) = &self.cond_proj {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

fn concat_with_cond<T: Real>(x: &Tensor<T>, cond: Option<&Tensor<T>>) -> Tensor<T> {
    match cond {
        None => x.clone(),
        Some(c) => {
            let rows = x.rows();
            let (wx, wc) = (x.cols(), c.cols());
            let mut data = Vec::with_capacity(rows * (wx + wc));
            for r in 0..rows {
                data.extend_from_slice(&x.data()[r * wx..(r + 1) * wx]);
                data.extend_from_slice(&c.data()[r * wc..(r + 1) * wc]);
            }
            Tensor::new(vec![rows, wx + wc], data).expect("concat dims")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn model<T: Real>(dim: usize, depth: usize, seed: u64) -> FlowModel<T> {
        let cfg = FlowConfig::new(dim, dim, 0, depth, 32);
        FlowModel::new(cfg, &mut Stream::new(seed)).unwrap()
    }

    #[test]
    fn untrained_model_is_a_permutation_with_zero_logdet() {
        let m = model::<f64>(7, 3, 1);
        let mut s = Stream::new(2);
        let x = Tensor::randn(vec![4, 7], 1.0, &mut s);
        let (y, logdet) = m.forward(&x, None).unwrap();
        assert!(logdet.iter().all(|&v| v == 0.0));
        // output is the composed permutation of the input rows
        for r in 0..4 {
            let mut a: Vec<f64> = x.data()[r * 7..(r + 1) * 7].to_vec();
            let mut b: Vec<f64> = y.data()[r * 7..(r + 1) * 7].to_vec();
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            b.sort_by(|p, q| p.partial_cmp(q).unwrap());
            assert_eq!(a, b);
        }
        let (back, _) = m.inverse(&y, None).unwrap();
        for (u, v) in back.data().iter().zip(x.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_log_scale_gives_width_times_sigma_logdet() {
        // Zeroed first layers keep the subnet output at b2, so setting the
        // s-half of b2 to a constant raw value gives a constant clamped
        // log-scale on that side.
        let mut m = model::<f64>(6, 1, 3);
        m.layers[0].perm = (0..6).collect();
        m.layers[0].inv_perm = (0..6).collect();
        let raw = 0.8;
        for v in m.layers[0].net_b.b2.data_mut()[..3].iter_mut() {
            *v = raw;
        }
        let sigma0 = 2.0 * std::f64::consts::FRAC_2_PI * (raw / 2.0).atan();
        let x = Tensor::zeros(vec![2, 6]);
        let (_, logdet) = m.forward(&x, None).unwrap();
        for &ld in &logdet {
            assert!((ld - 3.0 * sigma0).abs() < 1e-12, "{ld} vs {}", 3.0 * sigma0);
        }
    }

    #[test]
    fn round_trip_after_randomization() {
        let mut m = model::<f64>(9, 4, 5);
        m.randomize(0.15, &mut Stream::new(6));
        let mut s = Stream::new(7);
        let x = Tensor::randn(vec![64, 9], 1.0, &mut s);
        let (y, ld_f) = m.forward(&x, None).unwrap();
        let (back, ld_i) = m.inverse(&y, None).unwrap();
        let mut worst = 0.0f64;
        for (u, v) in back.data().iter().zip(x.data()) {
            worst = worst.max((u - v).abs());
        }
        assert!(worst < 1e-10, "round trip error {worst}");
        // inverse logdet is the negation of the forward logdet
        for (f, i) in ld_f.iter().zip(&ld_i) {
            assert!((f + i).abs() < 1e-9);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut m = model::<f64>(8, 3, 11);
        m.randomize(0.1, &mut Stream::new(12));
        let mut s = Stream::new(13);
        let x = Tensor::randn(vec![5, 8], 1.0, &mut s);
        let (y_plain, ld_plain) = m.forward(&x, None).unwrap();
        let mut tape = Tape::new();
        let vids = m.bind(&mut tape, false);
        let xv = tape.input(x.clone());
        let (yv, ldv) = m.forward_on_tape(&mut tape, &vids, xv, None).unwrap();
        for (a, b) in tape.value(yv).data().iter().zip(y_plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(ldv).data().iter().zip(&ld_plain) {
            assert!((a - b).abs() < 1e-12);
        }
        // inverse agreement too
        let (x_plain, ldi_plain) = m.inverse(&y_plain, None).unwrap();
        let mut tape = Tape::new();
        let vids = m.bind(&mut tape, false);
        let zv = tape.input(y_plain.clone());
        let (xv2, ldiv) = m.inverse_on_tape(&mut tape, &vids, zv, None).unwrap();
        for (a, b) in tape.value(xv2).data().iter().zip(x_plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(ldiv).data().iter().zip(&ldi_plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logdet_matches_finite_difference_jacobian() {
        // Assemble the full Jacobian by central differences and compare its
        // log |det| (via an LU oracle in test code) to the analytic value.
        for &dim in &[4usize, 6] {
            let mut m = model::<f64>(dim, 2, 17 + dim as u64);
            m.randomize(0.2, &mut Stream::new(18 + dim as u64));
            let mut s = Stream::new(19);
            let x = Tensor::randn(vec![1, dim], 1.0, &mut s);
            let (_, ld) = m.forward(&x, None).unwrap();
            let eps = 1e-6;
            let mut jac = vec![0.0f64; dim * dim];
            for j in 0..dim {
                let mut hi = x.clone();
                hi.data_mut()[j] += eps;
                let (yh, _) = m.forward(&hi, None).unwrap();
                let mut lo = x.clone();
                lo.data_mut()[j] -= eps;
                let (yl, _) = m.forward(&lo, None).unwrap();
                for i in 0..dim {
                    jac[i * dim + j] = (yh.data()[i] - yl.data()[i]) / (2.0 * eps);
                }
            }
            let want = log_abs_det(&mut jac, dim);
            assert!(
                (ld[0] - want).abs() / want.abs().max(1e-3) < 1e-3,
                "dim {dim}: analytic {} vs jacobian {want}",
                ld[0]
            );
        }
    }

    /// log|det| by Gaussian elimination with partial pivoting (test oracle).
    fn log_abs_det(a: &mut [f64], n: usize) -> f64 {
        let mut acc = 0.0;
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if a[r * n + col].abs() > a[piv * n + col].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                }
            }
            let d = a[col * n + col];
            acc += d.abs().ln();
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
            }
        }
        acc
    }

    #[test]
    fn actnorm_init_standardizes_the_batch() {
        let mut m = model::<f64>(10, 3, 23);
        // Couplings stay identity (zero final layers), so feeding a skewed
        // batch exercises the statistics directly.
        let mut s = Stream::new(24);
        let mut data = Vec::new();
        for _ in 0..256 {
            for j in 0..10 {
                let std = if j == 0 { 2.0 } else { 1.0 };
                data.push(s.normal() * std + j as f64);
            }
        }
        let batch = Tensor::new(vec![256, 10], data).unwrap();
        m.initialize_actnorm(&batch, None).unwrap();
        // dimension with variance 4 gets scale about 1/2 (identity couplings
        // and permutation move it around, so check through the output stats)
        let (y, _) = m.forward(&batch, None).unwrap();
        for j in 0..10 {
            let mut mean = 0.0;
            for r in 0..256 {
                mean += y.data()[r * 10 + j];
            }
            mean /= 256.0;
            let mut var = 0.0;
            for r in 0..256 {
                var += (y.data()[r * 10 + j] - mean).powi(2);
            }
            var /= 256.0;
            assert!(mean.abs() < 1e-5, "dim {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "dim {j} var {var}");
        }
        // already standardized batch: scale ~ 1, bias ~ 0
        let mut m2 = model::<f64>(10, 1, 25);
        let mut std_data = Vec::new();
        let mut s2 = Stream::new(26);
        for _ in 0..4096 {
            for _ in 0..10 {
                std_data.push(s2.normal());
            }
        }
        let std_batch = Tensor::new(vec![4096, 10], std_data).unwrap();
        m2.initialize_actnorm(&std_batch, None).unwrap();
        for &sc in m2.layers[0].actnorm.scale.data() {
            assert!((sc - 1.0).abs() < 0.05, "scale {sc}");
        }
        for &b in m2.layers[0].actnorm.bias.data() {
            assert!(b.abs() < 0.05, "bias {b}");
        }
    }

    #[test]
    fn conditioning_changes_the_inverse_output() {
        let cfg = FlowConfig {
            cond_width: 16,
            ..FlowConfig::new(8, 0, 5, 3, 32)
        };
        let mut m = FlowModel::<f64>::new(cfg, &mut Stream::new(31)).unwrap();
        m.randomize(0.2, &mut Stream::new(32));
        let z = Tensor::zeros(vec![1, 8]);
        let mut s = Stream::new(33);
        let c1 = Tensor::randn(vec![1, 5], 1.0, &mut s);
        let c2 = Tensor::randn(vec![1, 5], 1.0, &mut s);
        let (x1, _) = m.inverse(&z, Some(&c1)).unwrap();
        let (x2, _) = m.inverse(&z, Some(&c2)).unwrap();
        let diff: f64 = x1
            .data()
            .iter()
            .zip(x2.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "condition had no effect");
        // conditional round trip
        let mut s = Stream::new(34);
        let x = Tensor::randn(vec![16, 8], 1.0, &mut s);
        let (y, _) = m.forward(&x, Some(&Tensor::zeros(vec![16, 5]))).unwrap();
        let (back, _) = m.inverse(&y, Some(&Tensor::zeros(vec![16, 5]))).unwrap();
        for (u, v) in back.data().iter().zip(x.data()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn missing_condition_is_a_contract_error() {
        let cfg = FlowConfig::new(8, 0, 5, 2, 16);
        let m = FlowModel::<f64>::new(cfg, &mut Stream::new(41)).unwrap();
        let x = Tensor::zeros(vec![2, 8]);
        assert!(m.forward(&x, None).is_err());
        let m2 = model::<f64>(8, 2, 42);
        let c = Tensor::zeros(vec![2, 5]);
        assert!(m2.forward(&x, Some(&c)).is_err());
    }

    #[test]
    fn parameter_scaling_favors_conditioning() {
        // Growing the condition from 81 to 784 touches only the projection;
        // growing an unconditional flow's width touches every subnet.
        let mk = |dim: usize, cond: usize| -> usize {
            let cfg = FlowConfig::new(dim, if cond > 0 { 0 } else { dim }, cond, 9, 512);
            FlowModel::<f32>::new(cfg, &mut Stream::new(1)).unwrap().param_count()
        };
        let cinn_small = mk(81, 81);
        let cinn_large = mk(81, 784);
        let inn_small = mk(81, 0);
        let inn_large = mk(784, 0);
        let cinn_ratio = cinn_large as f64 / cinn_small as f64;
        let inn_ratio = inn_large as f64 / inn_small as f64;
        assert!(cinn_ratio < 1.5, "cinn ratio {cinn_ratio}");
        assert!(inn_ratio > 5.0, "inn ratio {inn_ratio}");
    }

    #[test]
    fn checkpoint_round_trip_reproduces_the_model() {
        let mut m = model::<f32>(9, 2, 55);
        m.randomize(0.1, &mut Stream::new(56));
        let mut ck = Checkpoint::new();
        m.write_checkpoint(&mut ck, "flow");
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let ck2 = Checkpoint::read_from(&buf[..]).unwrap();
        let m2 = FlowModel::<f32>::read_checkpoint(&ck2, "flow").unwrap();
        let mut s = Stream::new(57);
        let x = Tensor::randn(vec![3, 9], 1.0, &mut s);
        let (y1, ld1) = m.forward(&x, None).unwrap();
        let (y2, ld2) = m2.forward(&x, None).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_eq!(ld1, ld2);
    }
}
