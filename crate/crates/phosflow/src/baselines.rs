//! Non-flow encoders: learnable-gain downsampling, a single affine layer,
//! and a feed-forward convolutional network. All map a unit-range image
//! (percept during training, target at inference) to a 9x9 stimulus.

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Vid};
use crate::checkpoint::Checkpoint;
use crate::data::{area_resize, PairDataset};
use crate::error::{Error, Result};
use crate::phosim::{AxonMapGeometry, EffectMatrix, ELECTRODE_COUNT};
use crate::rng::Stream;

const CONV_CH: [usize; 3] = [32, 64, 32];
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Trivial downsampling with a single learnable gain factor.
#[derive(Debug, Clone)]
pub struct DownsampleEncoder {
    pub input_side: usize,
    pub gain: f32,
}

impl DownsampleEncoder {
    pub fn new(input_side: usize) -> Result<Self> {
        if input_side != 9 && input_side != 28 {
            return Err(Error::parameter(format!(
                "downsampling supports 9x9 or 28x28 targets, got {input_side}"
            )));
        }
        Ok(DownsampleEncoder {
            input_side,
            gain: 1.0,
        })
    }

    /// Area-resize to the electrode grid, then apply the gain.
    pub fn encode(&self, target: &[f32]) -> Result<Vec<f32>> {
        let px = self.input_side * self.input_side;
        if target.len() != px {
            return Err(Error::shape("downsample target", &[target.len()], &[px]));
        }
        let resized = area_resize(target, self.input_side, self.input_side, 9, 9);
        Ok(resized.iter().map(|&v| v * self.gain).collect())
    }

    /// Fit the gain by gradient descent on simulator-percept MSE through the
    /// differentiable effect-matrix render.
    ///
    /// `targets` are flattened unit-range images at the geometry resolution;
    /// `normalization` is the dataset constant the rendered percepts are
    /// divided by before comparison.
    pub fn fit_gain(
        &mut self,
        targets: &[f32],
        count: usize,
        geometry: &AxonMapGeometry,
        matrix: &EffectMatrix,
        normalization: f64,
        steps: usize,
    ) -> Result<f32> {
        let px = geometry.pixel_count();
        if targets.len() != count * px || count == 0 {
            return Err(Error::shape("fit_gain targets", &[targets.len()], &[count * px]));
        }
        let mut resized = Vec::with_capacity(count * ELECTRODE_COUNT);
        for i in 0..count {
            resized.extend(area_resize(
                &targets[i * px..(i + 1) * px],
                self.input_side,
                self.input_side,
                9,
                9,
            ));
        }
        let effect: Tensor<f32> = geometry.effect_matrix_tensor(matrix);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(1);
        let mut gain = vec![self.gain];
        for _ in 0..steps {
            let mut tape = Tape::<f32>::new();
            let g = tape.param(Tensor::new(vec![1], gain.clone())?);
            let base = tape.input(Tensor::new(vec![count, ELECTRODE_COUNT], resized.clone())?);
            let effect_v = tape.input(effect.clone());
            let stim = tape.mul(base, g)?;
            let field = tape.matmul(stim, effect_v)?;
            let grouped = tape.max_groups(field, matrix.segments_per_pixel)?;
            let percept = tape.relu(grouped);
            let scaled = tape.scale(percept, 1.0 / normalization);
            let tv = tape.input(Tensor::new(vec![count, px], targets.to_vec())?);
            let loss = crate::losses::mse_on_tape(&mut tape, scaled, tv)?;
            tape.backward(loss)?;
            let grad = tape.grad(g).expect("gain gradient").to_vec();
            adam_step(&mut gain, &grad, &mut state, &cfg)?;
        }
        self.gain = gain[0];
        Ok(self.gain)
    }
}

/// Single affine layer mapping an image to the stimulus.
#[derive(Debug, Clone)]
pub struct LinearEncoder {
    pub input_side: usize,
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl LinearEncoder {
    pub fn new(input_side: usize, stream: &mut Stream) -> Self {
        let d_in = input_side * input_side;
        LinearEncoder {
            input_side,
            w: Tensor::randn(vec![d_in, ELECTRODE_COUNT], 1.0 / (d_in as f64).sqrt(), stream),
            b: Tensor::zeros(vec![ELECTRODE_COUNT]),
        }
    }

    pub fn encode_batch(&self, inputs: &[f32], count: usize) -> Result<Vec<f32>> {
        let d_in = self.input_side * self.input_side;
        if inputs.len() != count * d_in {
            return Err(Error::shape("linear input", &[inputs.len()], &[count * d_in]));
        }
        let mut out = crate::autodiff::kernels::matmul(
            inputs,
            self.w.data(),
            count,
            d_in,
            ELECTRODE_COUNT,
        );
        for r in 0..count {
            for (j, v) in out[r * ELECTRODE_COUNT..(r + 1) * ELECTRODE_COUNT]
                .iter_mut()
                .enumerate()
            {
                *v += self.b.data()[j];
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// Feed-forward conv encoder: input affine to a 1-channel spatial map,
/// three 3x3 conv + batchnorm + ELU stages, output affine to 81.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub input_side: usize,
    pub w_in: Tensor<f32>,
    pub b_in: Tensor<f32>,
    pub conv_w: [Tensor<f32>; 3],
    pub conv_b: [Tensor<f32>; 3],
    pub bn_gamma: [Tensor<f32>; 3],
    pub bn_beta: [Tensor<f32>; 3],
    pub bn_mean: [Tensor<f32>; 3],
    pub bn_var: [Tensor<f32>; 3],
    pub w_out: Tensor<f32>,
    pub b_out: Tensor<f32>,
}

impl ConvEncoder {
    pub fn new(input_side: usize, stream: &mut Stream) -> Self {
        let px = input_side * input_side;
        let he = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let chans = [1, CONV_CH[0], CONV_CH[1]];
        let conv_w = std::array::from_fn(|i| {
            Tensor::randn(
                vec![CONV_CH[i], chans[i], 3, 3],
                he(9 * chans[i]),
                stream,
            )
        });
        let conv_b = std::array::from_fn(|i| Tensor::zeros(vec![CONV_CH[i]]));
        let bn_gamma = std::array::from_fn(|i| Tensor::full(vec![CONV_CH[i]], 1.0));
        let bn_beta = std::array::from_fn(|i| Tensor::zeros(vec![CONV_CH[i]]));
        let bn_mean = std::array::from_fn(|i| Tensor::zeros(vec![CONV_CH[i]]));
        let bn_var = std::array::from_fn(|i| Tensor::full(vec![CONV_CH[i]], 1.0));
        ConvEncoder {
            input_side,
            w_in: Tensor::randn(vec![px, px], he(px), stream),
            b_in: Tensor::zeros(vec![px]),
            conv_w,
            conv_b,
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
            w_out: Tensor::randn(
                vec![CONV_CH[2] * px, ELECTRODE_COUNT],
                he(CONV_CH[2] * px),
                stream,
            ),
            b_out: Tensor::zeros(vec![ELECTRODE_COUNT]),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out: Vec<&mut Tensor<f32>> = vec![&mut self.w_in, &mut self.b_in];
        out.extend(self.conv_w.iter_mut());
        out.extend(self.conv_b.iter_mut());
        out.extend(self.bn_gamma.iter_mut());
        out.extend(self.bn_beta.iter_mut());
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    /// Forward pass; `training` picks batch statistics (and reports them for
    /// running updates) versus frozen running statistics.
    fn forward_on_tape(
        &self,
        tape: &mut Tape<f32>,
        param_ids: &[Vid],
        x: Vid,
        training: bool,
    ) -> Result<(Vid, Vec<(Vec<f32>, Vec<f32>)>)> {
        let batch = tape.value(x).rows();
        let px = self.input_side * self.input_side;
        let (w_in, b_in) = (param_ids[0], param_ids[1]);
        let conv_w = &param_ids[2..5];
        let conv_b = &param_ids[5..8];
        let bn_g = &param_ids[8..11];
        let bn_b = &param_ids[11..14];
        let (w_out, b_out) = (param_ids[14], param_ids[15]);

        let h0 = tape.matmul(x, w_in)?;
        let h1 = tape.add(h0, b_in)?;
        let mut cur = tape.reshape(h1, vec![batch, 1, self.input_side, self.input_side])?;
        let mut batch_stats = Vec::new();
        for i in 0..3 {
            let c = tape.conv3x3(cur, conv_w[i], conv_b[i])?;
            let n = if training {
                let (y, mean, var) = tape.batch_norm_train(c, bn_g[i], bn_b[i], BN_EPS)?;
                batch_stats.push((mean, var));
                y
            } else {
                tape.batch_norm_infer(
                    c,
                    bn_g[i],
                    bn_b[i],
                    self.bn_mean[i].data(),
                    self.bn_var[i].data(),
                    BN_EPS,
                )?
            };
            cur = tape.elu(n);
        }
        let flat = tape.reshape(cur, vec![batch, CONV_CH[2] * px])?;
        let o0 = tape.matmul(flat, w_out)?;
        let out = tape.add(o0, b_out)?;
        Ok((out, batch_stats))
    }

    fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Vid> {
        let tensors: Vec<&Tensor<f32>> = {
            let mut v: Vec<&Tensor<f32>> = vec![&self.w_in, &self.b_in];
            v.extend(self.conv_w.iter());
            v.extend(self.conv_b.iter());
            v.extend(self.bn_gamma.iter());
            v.extend(self.bn_beta.iter());
            v.push(&self.w_out);
            v.push(&self.b_out);
            v
        };
        tensors
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.input(t.clone())
                }
            })
            .collect()
    }

    /// Deterministic inference with frozen batch-norm statistics.
    pub fn encode_batch(&self, inputs: &[f32], count: usize) -> Result<Vec<f32>> {
        let d_in = self.input_side * self.input_side;
        if inputs.len() != count * d_in {
            return Err(Error::shape("conv input", &[inputs.len()], &[count * d_in]));
        }
        let mut out = Vec::with_capacity(count * ELECTRODE_COUNT);
        for start in (0..count).step_by(512) {
            let chunk = (count - start).min(512);
            let mut tape = Tape::new();
            let ids = self.bind(&mut tape, false);
            let x = tape.input(Tensor::new(
                vec![chunk, d_in],
                inputs[start * d_in..(start + chunk) * d_in].to_vec(),
            )?);
            let (y, _) = self.forward_on_tape(&mut tape, &ids, x, false)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.w_in.numel() + self.b_in.numel();
        for i in 0..3 {
            n += self.conv_w[i].numel()
                + self.conv_b[i].numel()
                + self.bn_gamma[i].numel()
                + self.bn_beta[i].numel();
        }
        n + self.w_out.numel() + self.b_out.numel()
    }
}

/// Progress record for one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct TrainStep {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BaselineTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaselineTrainOptions {
    fn default() -> Self {
        BaselineTrainOptions {
            epochs: 20,
            batch: 1024,
            lr: 1e-3,
            seed: 7,
        }
    }
}

/// Iterate (normalized percept -> stimulus) minibatches in a seeded shuffle
/// order, calling `step` with the batch tensors.
fn run_epochs(
    pairs: &PairDataset,
    opts: &BaselineTrainOptions,
    mut step: impl FnMut(Tensor<f32>, Tensor<f32>, usize) -> Result<f64>,
) -> Result<Vec<TrainStep>> {
    if pairs.count == 0 {
        return Err(Error::contract("empty training dataset"));
    }
    let px = pairs.pixel_count();
    let norm = pairs.normalization as f32;
    let mut order: Vec<usize> = (0..pairs.count).collect();
    let mut shuffle_stream = Stream::new(opts.seed);
    let mut curve = Vec::new();
    let mut step_idx = 0usize;
    for _ in 0..opts.epochs {
        shuffle_stream.shuffle(&mut order);
        for ids in order.chunks(opts.batch) {
            let mut xb = Vec::with_capacity(ids.len() * px);
            let mut yb = Vec::with_capacity(ids.len() * ELECTRODE_COUNT);
            for &i in ids {
                xb.extend(pairs.percept_row(i).iter().map(|&v| v / norm));
                yb.extend_from_slice(pairs.stimulus_row(i));
            }
            let x = Tensor::new(vec![ids.len(), px], xb)?;
            let y = Tensor::new(vec![ids.len(), ELECTRODE_COUNT], yb)?;
            let loss = step(x, y, step_idx)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at step {step_idx}"
                )));
            }
            curve.push(TrainStep {
                step: step_idx,
                loss,
            });
            step_idx += 1;
        }
    }
    Ok(curve)
}

/// Fit the affine percept-to-stimulus map by Adam on MSE.
pub fn train_linear(
    pairs: &PairDataset,
    opts: &BaselineTrainOptions,
) -> Result<(LinearEncoder, Vec<TrainStep>)> {
    let mut stream = Stream::new(opts.seed);
    let mut model = LinearEncoder::new(pairs.resolution, &mut stream);
    let cfg = AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    };
    let mut st_w = AdamState::new(model.w.numel());
    let mut st_b = AdamState::new(model.b.numel());
    let curve = run_epochs(pairs, opts, |x, y, _| {
        let mut tape = Tape::new();
        let w = tape.param(model.w.clone());
        let b = tape.param(model.b.clone());
        let xv = tape.input(x);
        let yv = tape.input(y);
        let h = tape.matmul(xv, w)?;
        let pred = tape.add(h, b)?;
        let loss = crate::losses::mse_on_tape(&mut tape, pred, yv)?;
        let value = tape.value(loss).item() as f64;
        tape.backward(loss)?;
        let gw = tape.grad(w).expect("w grad").to_vec();
        let gb = tape.grad(b).expect("b grad").to_vec();
        adam_step(model.w.data_mut(), &gw, &mut st_w, &cfg)?;
        adam_step(model.b.data_mut(), &gb, &mut st_b, &cfg)?;
        Ok(value)
    })?;
    Ok((model, curve))
}

/// Fit the conv encoder by Adam on MSE, updating batch-norm running stats.
pub fn train_nn(
    pairs: &PairDataset,
    opts: &BaselineTrainOptions,
) -> Result<(ConvEncoder, Vec<TrainStep>)> {
    let mut stream = Stream::new(opts.seed);
    let mut model = ConvEncoder::new(pairs.resolution, &mut stream);
    let cfg = AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    };
    let mut states: Vec<AdamState<f32>> = model
        .params_mut()
        .iter()
        .map(|p| AdamState::new(p.numel()))
        .collect();
    let curve = run_epochs(pairs, opts, |x, y, _| {
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape, true);
        let xv = tape.input(x);
        let yv = tape.input(y);
        let (pred, stats) = model.forward_on_tape(&mut tape, &ids, xv, true)?;
        let loss = crate::losses::mse_on_tape(&mut tape, pred, yv)?;
        let value = tape.value(loss).item() as f64;
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = ids
            .iter()
            .map(|&v| tape.grad(v).expect("trainable leaf").to_vec())
            .collect();
        for ((p, st), g) in model.params_mut().into_iter().zip(&mut states).zip(&grads) {
            adam_step(p.data_mut(), g, st, &cfg)?;
        }
        for (i, (mean, var)) in stats.iter().enumerate() {
            for (r, &m) in model.bn_mean[i].data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, &v) in model.bn_var[i].data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(value)
    })?;
    Ok((model, curve))
}

// ---- unified wrapper -----------------------------------------------------------

/// Tagged baseline encoder, the unit stored in checkpoints.
#[derive(Debug, Clone)]
pub enum BaselineModel {
    Down(DownsampleEncoder),
    Linear(LinearEncoder),
    Conv(ConvEncoder),
}

impl BaselineModel {
    pub fn kind(&self) -> &'static str {
        match self {
            BaselineModel::Down(_) => "down",
            BaselineModel::Linear(_) => "linear",
            BaselineModel::Conv(_) => "nn",
        }
    }

    pub fn input_side(&self) -> usize {
        match self {
            BaselineModel::Down(m) => m.input_side,
            BaselineModel::Linear(m) => m.input_side,
            BaselineModel::Conv(m) => m.input_side,
        }
    }

    /// Encode a batch of flattened unit-range images into stimulus rows.
    pub fn encode_batch(&self, inputs: &[f32], count: usize) -> Result<Vec<f32>> {
        match self {
            BaselineModel::Down(m) => {
                let px = m.input_side * m.input_side;
                if inputs.len() != count * px {
                    return Err(Error::shape("encode input", &[inputs.len()], &[count * px]));
                }
                let mut out = Vec::with_capacity(count * ELECTRODE_COUNT);
                for i in 0..count {
                    out.extend(m.encode(&inputs[i * px..(i + 1) * px])?);
                }
                Ok(out)
            }
            BaselineModel::Linear(m) => m.encode_batch(inputs, count),
            BaselineModel::Conv(m) => m.encode_batch(inputs, count),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            BaselineModel::Down(_) => 1,
            BaselineModel::Linear(m) => m.param_count(),
            BaselineModel::Conv(m) => m.param_count(),
        }
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_scalar(
            &format!("{prefix}.kind"),
            match self {
                BaselineModel::Down(_) => 0.0,
                BaselineModel::Linear(_) => 1.0,
                BaselineModel::Conv(_) => 2.0,
            },
        );
        ck.insert_scalar(&format!("{prefix}.input_side"), self.input_side() as f64);
        match self {
            BaselineModel::Down(m) => {
                ck.insert_scalar(&format!("{prefix}.gain"), m.gain as f64);
            }
            BaselineModel::Linear(m) => {
                ck.insert_tensor(&format!("{prefix}.w"), &m.w);
                ck.insert_tensor(&format!("{prefix}.b"), &m.b);
            }
            BaselineModel::Conv(m) => {
                ck.insert_tensor(&format!("{prefix}.w_in"), &m.w_in);
                ck.insert_tensor(&format!("{prefix}.b_in"), &m.b_in);
                for i in 0..3 {
                    ck.insert_tensor(&format!("{prefix}.conv{i}.w"), &m.conv_w[i]);
                    ck.insert_tensor(&format!("{prefix}.conv{i}.b"), &m.conv_b[i]);
                    ck.insert_tensor(&format!("{prefix}.bn{i}.gamma"), &m.bn_gamma[i]);
                    ck.insert_tensor(&format!("{prefix}.bn{i}.beta"), &m.bn_beta[i]);
                    ck.insert_tensor(&format!("{prefix}.bn{i}.mean"), &m.bn_mean[i]);
                    ck.insert_tensor(&format!("{prefix}.bn{i}.var"), &m.bn_var[i]);
                }
                ck.insert_tensor(&format!("{prefix}.w_out"), &m.w_out);
                ck.insert_tensor(&format!("{prefix}.b_out"), &m.b_out);
            }
        }
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let kind = ck.get(&format!("{prefix}.kind"))?.scalar()?;
        let side = ck.get(&format!("{prefix}.input_side"))?.scalar()? as usize;
        match kind as u8 {
            0 => {
                let mut m = DownsampleEncoder::new(side)?;
                m.gain = ck.get(&format!("{prefix}.gain"))?.scalar()? as f32;
                Ok(BaselineModel::Down(m))
            }
            1 => Ok(BaselineModel::Linear(LinearEncoder {
                input_side: side,
                w: ck.get(&format!("{prefix}.w"))?.tensor()?,
                b: ck.get(&format!("{prefix}.b"))?.tensor()?,
            })),
            2 => {
                let t = |name: String| -> Result<Tensor<f32>> { ck.get(&name)?.tensor() };
                let g = |i: usize, part: &str| format!("{prefix}.conv{i}.{part}");
                let bn = |i: usize, part: &str| format!("{prefix}.bn{i}.{part}");
                Ok(BaselineModel::Conv(ConvEncoder {
                    input_side: side,
                    w_in: t(format!("{prefix}.w_in"))?,
                    b_in: t(format!("{prefix}.b_in"))?,
                    conv_w: [t(g(0, "w"))?, t(g(1, "w"))?, t(g(2, "w"))?],
                    conv_b: [t(g(0, "b"))?, t(g(1, "b"))?, t(g(2, "b"))?],
                    bn_gamma: [t(bn(0, "gamma"))?, t(bn(1, "gamma"))?, t(bn(2, "gamma"))?],
                    bn_beta: [t(bn(0, "beta"))?, t(bn(1, "beta"))?, t(bn(2, "beta"))?],
                    bn_mean: [t(bn(0, "mean"))?, t(bn(1, "mean"))?, t(bn(2, "mean"))?],
                    bn_var: [t(bn(0, "var"))?, t(bn(1, "var"))?, t(bn(2, "var"))?],
                    w_out: t(format!("{prefix}.w_out"))?,
                    b_out: t(format!("{prefix}.b_out"))?,
                }))
            }
            other => Err(Error::contract(format!("unknown baseline kind {other}"))),
        }
    }
}
