//! Training and evaluation orchestration.
//!
//! Two trainable flow pipelines share one loop: the conditional flow learns
//! p(stimulus | percept) by likelihood alone, while the unconditional flow
//! regresses percept -> [stimulus, z] with MSE plus an MMD that pushes z
//! toward a standard normal. Evaluation always goes target -> stimulus ->
//! simulator -> metrics.

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::baselines::{
    train_linear, train_nn, BaselineModel, BaselineTrainOptions, DownsampleEncoder, TrainStep,
};
use crate::checkpoint::Checkpoint;
use crate::data::{LabeledImageSet, PairDataset};
use crate::error::{Error, Result};
use crate::flows::{FlowConfig, FlowModel};
use crate::losses::{mmd_on_tape, mse_on_tape, nll_on_tape, KernelBank};
use crate::metrics::{evaluate, Classifier, MetricReport};
use crate::phosim::{AxonMapGeometry, EffectMatrix, ELECTRODE_COUNT};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Down,
    Linear,
    Nn,
    Inn,
    Cinn,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(ModelKind::Down),
            "linear" => Ok(ModelKind::Linear),
            "nn" => Ok(ModelKind::Nn),
            "inn" => Ok(ModelKind::Inn),
            "cinn" => Ok(ModelKind::Cinn),
            other => Err(Error::parameter(format!(
                "unknown model '{other}' (expected down|linear|nn|inn|cinn)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Down => "down",
            ModelKind::Linear => "linear",
            ModelKind::Nn => "nn",
            ModelKind::Inn => "inn",
            ModelKind::Cinn => "cinn",
        };
        write!(f, "{s}")
    }
}

/// Which mapping the unconditional flow treats as its forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnDirection {
    /// percept -> [stimulus, z] (the reported configuration)
    PerceptToStimulus,
    /// padded stimulus -> percept (the swapped configuration)
    StimulusToPercept,
}

fn default_kernel_widths() -> Vec<f64> {
    vec![0.1, 0.5, 2.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub resolution: usize,
    /// Dataset file; generated on demand when absent.
    pub dataset: Option<PathBuf>,
    pub pairs: usize,
    pub seed: u64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub depth: usize,
    pub hidden: usize,
    pub clamp_alpha: f64,
    pub kernel_widths: Vec<f64>,
    pub mmd_weight: f64,
    /// Optional percept-side MMD term for the unconditional flow.
    pub percept_mmd: bool,
    pub inn_direction: InnDirection,
    pub latent_steps: usize,
    pub latent_rate: f64,
    /// MNIST test images scored during evaluation.
    pub eval_count: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::Cinn,
            resolution: 28,
            dataset: None,
            pairs: 100_000,
            seed: 1,
            batch: 1024,
            epochs: 20,
            lr: 1e-3,
            depth: 9,
            hidden: 512,
            clamp_alpha: 2.0,
            kernel_widths: default_kernel_widths(),
            mmd_weight: 1.0,
            percept_mmd: false,
            inn_direction: InnDirection::PerceptToStimulus,
            latent_steps: 200,
            latent_rate: 0.05,
            eval_count: 1000,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::parameter("batch size must be at least 2"));
        }
        if self.resolution != 9 && self.resolution != 28 {
            return Err(Error::parameter(format!(
                "resolution must be 9 or 28, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Anything that turns target images into stimuli.
#[derive(Debug, Clone)]
pub enum TrainedEncoder {
    Baseline(BaselineModel),
    /// Unconditional flow with its forward direction.
    Inn(FlowModel<f32>, InnDirection),
    Cinn(FlowModel<f32>),
}

impl TrainedEncoder {
    pub fn kind(&self) -> String {
        match self {
            TrainedEncoder::Baseline(b) => b.kind().to_string(),
            TrainedEncoder::Inn(..) => "inn".to_string(),
            TrainedEncoder::Cinn(_) => "cinn".to_string(),
        }
    }

    /// Stimuli (count x 81) for flattened unit-range targets.
    pub fn encode(&self, targets: &[f32], count: usize, px: usize) -> Result<Vec<f32>> {
        match self {
            TrainedEncoder::Baseline(b) => b.encode_batch(targets, count),
            TrainedEncoder::Inn(flow, dir) => {
                if *dir != InnDirection::PerceptToStimulus {
                    // The swapped flow maps stimulus -> percept; inverting it
                    // reconstructs the (padded) stimulus from a percept.
                    let z = Tensor::new(vec![count, px], targets.to_vec())?;
                    let (x, _) = flow.inverse(&z, None)?;
                    let mut out = Vec::with_capacity(count * ELECTRODE_COUNT);
                    for r in 0..count {
                        out.extend_from_slice(
                            &x.data()[r * px..r * px + ELECTRODE_COUNT],
                        );
                    }
                    return Ok(out);
                }
                let x = Tensor::new(vec![count, px], targets.to_vec())?;
                let (y, _) = flow.forward(&x, None)?;
                let mut out = Vec::with_capacity(count * ELECTRODE_COUNT);
                for r in 0..count {
                    out.extend_from_slice(&y.data()[r * px..r * px + ELECTRODE_COUNT]);
                }
                Ok(out)
            }
            TrainedEncoder::Cinn(flow) => {
                // Evaluation path: z = 0 conditioned on the target.
                let z = Tensor::zeros(vec![count, flow.dim()]);
                let cond = Tensor::new(vec![count, px], targets.to_vec())?;
                let (x, _) = flow.inverse(&z, Some(&cond))?;
                Ok(x.data().to_vec())
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TrainedEncoder::Baseline(b) => b.param_count(),
            TrainedEncoder::Inn(f, _) | TrainedEncoder::Cinn(f) => f.param_count(),
        }
    }
}

// ---- flow training -----------------------------------------------------------

struct FlowTrainer {
    states: Vec<AdamState<f32>>,
    cfg: AdamConfig,
}

impl FlowTrainer {
    fn new(model: &mut FlowModel<f32>, lr: f64) -> Self {
        FlowTrainer {
            states: model
                .params_mut()
                .iter()
                .map(|p| AdamState::new(p.numel()))
                .collect(),
            cfg: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        }
    }

    fn apply(&mut self, model: &mut FlowModel<f32>, grads: &[Vec<f32>]) -> Result<()> {
        for ((p, st), g) in model
            .params_mut()
            .into_iter()
            .zip(&mut self.states)
            .zip(grads)
        {
            adam_step(p.data_mut(), g, st, &self.cfg)?;
        }
        Ok(())
    }
}

fn batch_tensors(
    pairs: &PairDataset,
    ids: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let px = pairs.pixel_count();
    let norm = pairs.normalization as f32;
    let mut stims = Vec::with_capacity(ids.len() * ELECTRODE_COUNT);
    let mut percs = Vec::with_capacity(ids.len() * px);
    for &i in ids {
        stims.extend_from_slice(pairs.stimulus_row(i));
        percs.extend(pairs.percept_row(i).iter().map(|&v| v / norm));
    }
    Ok((
        Tensor::new(vec![ids.len(), ELECTRODE_COUNT], stims)?,
        Tensor::new(vec![ids.len(), px], percs)?,
    ))
}

/// Per-epoch summary of a flow training run.
#[derive(Debug, Clone, Copy)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub struct FlowTrainResult {
    pub model: FlowModel<f32>,
    pub steps: Vec<TrainStep>,
    pub epochs: Vec<EpochStat>,
}

/// Train the conditional flow by likelihood: x = stimulus, c = the stored
/// simulator percept of that stimulus.
pub fn train_cinn(cfg: &ExperimentConfig, pairs: &PairDataset) -> Result<FlowTrainResult> {
    cfg.validate()?;
    let px = pairs.pixel_count();
    let mut stream = Stream::new(cfg.seed);
    let flow_cfg = FlowConfig {
        clamp_alpha: cfg.clamp_alpha,
        ..FlowConfig::new(ELECTRODE_COUNT, 0, px, cfg.depth, cfg.hidden)
    };
    let mut model = FlowModel::new(flow_cfg, &mut stream)?;
    let mut trainer = FlowTrainer::new(&mut model, cfg.lr);
    let mut order: Vec<usize> = (0..pairs.count).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut last_good = model.clone();
    let mut step_idx = 0usize;
    for epoch in 0..cfg.epochs {
        stream.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for ids in order.chunks(cfg.batch) {
            if ids.len() < 2 {
                continue;
            }
            let (stims, percs) = batch_tensors(pairs, ids)?;
            if !model.layers[0].actnorm.initialized {
                model.initialize_actnorm(&stims, Some(&percs))?;
            }
            let mut tape = Tape::new();
            let vids = model.bind(&mut tape, true);
            let x = tape.input(stims);
            let c = tape.input(percs);
            let (z, logdet) = model.forward_on_tape(&mut tape, &vids, x, Some(c))?;
            let loss = nll_on_tape(&mut tape, z, logdet)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return abort_with_checkpoint(cfg, &last_good, step_idx, "cinn");
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vids
                .param_vids()
                .iter()
                .map(|&v| tape.grad(v).expect("trainable leaf").to_vec())
                .collect();
            drop(tape);
            trainer.apply(&mut model, &grads)?;
            steps.push(TrainStep {
                step: step_idx,
                loss: value,
            });
            epoch_sum += value;
            epoch_batches += 1;
            step_idx += 1;
        }
        epochs.push(EpochStat {
            epoch,
            mean_loss: epoch_sum / epoch_batches.max(1) as f64,
        });
        last_good = model.clone();
    }
    Ok(FlowTrainResult {
        model,
        steps,
        epochs,
    })
}

fn abort_with_checkpoint<T>(
    cfg: &ExperimentConfig,
    last_good: &FlowModel<f32>,
    step: usize,
    tag: &str,
) -> Result<T> {
    std::fs::create_dir_all(&cfg.out_dir).ok();
    let path = cfg.out_dir.join(format!("{tag}-last-good.pfck"));
    let mut ck = Checkpoint::new();
    last_good.write_checkpoint(&mut ck, "flow");
    ck.save(&path).ok();
    Err(Error::Training(format!(
        "loss diverged at step {step}; last good checkpoint written to {}",
        path.display()
    )))
}

/// Train the unconditional flow: supervised MSE on the leading output block
/// plus MMD pulling the latent block toward a standard normal (skipped when
/// there is no latent block).
pub fn train_inn_mmd(cfg: &ExperimentConfig, pairs: &PairDataset) -> Result<FlowTrainResult> {
    cfg.validate()?;
    let px = pairs.pixel_count();
    let bank = KernelBank::new(cfg.kernel_widths.clone())?;
    let mut stream = Stream::new(cfg.seed);
    let (dim, dim_out) = match cfg.inn_direction {
        InnDirection::PerceptToStimulus => (px, ELECTRODE_COUNT),
        InnDirection::StimulusToPercept => (px, px),
    };
    let latent = dim - dim_out;
    let flow_cfg = FlowConfig {
        clamp_alpha: cfg.clamp_alpha,
        ..FlowConfig::new(dim, dim_out, 0, cfg.depth, cfg.hidden)
    };
    let mut model = FlowModel::new(flow_cfg, &mut stream)?;
    let mut trainer = FlowTrainer::new(&mut model, cfg.lr);
    let mut order: Vec<usize> = (0..pairs.count).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut last_good = model.clone();
    let mut step_idx = 0usize;
    for epoch in 0..cfg.epochs {
        stream.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for ids in order.chunks(cfg.batch) {
            if ids.len() < 2 {
                continue;
            }
            let (stims, percs) = batch_tensors(pairs, ids)?;
            let rows = ids.len();
            let (input, target) = match cfg.inn_direction {
                InnDirection::PerceptToStimulus => (percs, stims),
                InnDirection::StimulusToPercept => {
                    // zero-pad the stimulus up to the invertible width
                    let mut padded = vec![0.0f32; rows * px];
                    for r in 0..rows {
                        padded[r * px..r * px + ELECTRODE_COUNT]
                            .copy_from_slice(&stims.data()[r * ELECTRODE_COUNT..(r + 1) * ELECTRODE_COUNT]);
                    }
                    (Tensor::new(vec![rows, px], padded)?, percs)
                }
            };
            if !model.layers[0].actnorm.initialized {
                model.initialize_actnorm(&input, None)?;
            }
            let mut tape = Tape::new();
            let vids = model.bind(&mut tape, true);
            let x = tape.input(input.clone());
            let (out, _logdet) = model.forward_on_tape(&mut tape, &vids, x, None)?;
            let y_pred = tape.slice_cols(out, 0..dim_out)?;
            let y_true = tape.input(target);
            let mut loss = mse_on_tape(&mut tape, y_pred, y_true)?;
            if latent > 0 {
                let z_pred = tape.slice_cols(out, dim_out..dim)?;
                let draws =
                    Tensor::<f32>::randn(vec![rows, latent], 1.0, &mut stream);
                let z_ref = tape.input(draws);
                let m = mmd_on_tape(&mut tape, z_pred, z_ref, &bank)?;
                let weighted = tape.scale(m, cfg.mmd_weight);
                loss = tape.add(loss, weighted)?;
            }
            if cfg.percept_mmd {
                // Optional input-side MMD: reconstruct inputs from the true
                // outputs with fresh latent draws and match the input set.
                let mut zcat = Vec::with_capacity(rows * dim);
                {
                    let yt = tape.value(y_true.to_owned()).clone();
                    for r in 0..rows {
                        zcat.extend_from_slice(&yt.data()[r * dim_out..(r + 1) * dim_out]);
                        for _ in 0..latent {
                            zcat.push(stream.normal() as f32);
                        }
                    }
                }
                let z_mix = tape.input(Tensor::new(vec![rows, dim], zcat)?);
                let (x_rec, _) = model.inverse_on_tape(&mut tape, &vids, z_mix, None)?;
                let x_orig = tape.input(input);
                let m = mmd_on_tape(&mut tape, x_rec, x_orig, &bank)?;
                let weighted = tape.scale(m, cfg.mmd_weight);
                loss = tape.add(loss, weighted)?;
            }
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return abort_with_checkpoint(cfg, &last_good, step_idx, "inn");
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vids
                .param_vids()
                .iter()
                .map(|&v| tape.grad(v).expect("trainable leaf").to_vec())
                .collect();
            drop(tape);
            trainer.apply(&mut model, &grads)?;
            steps.push(TrainStep {
                step: step_idx,
                loss: value,
            });
            epoch_sum += value;
            epoch_batches += 1;
            step_idx += 1;
        }
        epochs.push(EpochStat {
            epoch,
            mean_loss: epoch_sum / epoch_batches.max(1) as f64,
        });
        last_good = model.clone();
    }
    Ok(FlowTrainResult {
        model,
        steps,
        epochs,
    })
}

/// Supervised MSE of the percept->stimulus mapping on a slice of the
/// dataset. For the swapped direction the mapping runs through the inverse.
pub fn held_out_stimulus_mse(
    model: &FlowModel<f32>,
    direction: InnDirection,
    pairs: &PairDataset,
    range: std::ops::Range<usize>,
) -> Result<f64> {
    let px = pairs.pixel_count();
    let ids: Vec<usize> = range.collect();
    let (stims, percs) = batch_tensors(pairs, &ids)?;
    let pred = match direction {
        InnDirection::PerceptToStimulus => {
            let (out, _) = model.forward(&percs, None)?;
            let mut p = Vec::with_capacity(ids.len() * ELECTRODE_COUNT);
            for r in 0..ids.len() {
                p.extend_from_slice(&out.data()[r * px..r * px + ELECTRODE_COUNT]);
            }
            p
        }
        InnDirection::StimulusToPercept => {
            let (out, _) = model.inverse(&percs, None)?;
            let mut p = Vec::with_capacity(ids.len() * ELECTRODE_COUNT);
            for r in 0..ids.len() {
                p.extend_from_slice(&out.data()[r * px..r * px + ELECTRODE_COUNT]);
            }
            p
        }
    };
    crate::losses::mse(
        &Tensor::new(vec![ids.len(), ELECTRODE_COUNT], pred)?,
        &stims,
    )
}

// ---- evaluation ----------------------------------------------------------------

pub struct EvalArtifacts {
    pub report: MetricReport,
    pub stimuli: Vec<f32>,
    pub percepts: Vec<f32>,
}

/// Render-and-score loop: encoder -> simulator -> metrics, plus PGM
/// triptychs for the first 16 samples when an output directory is given.
pub fn evaluate_model(
    encoder: &TrainedEncoder,
    eval_set: &LabeledImageSet,
    geometry: &AxonMapGeometry,
    matrix: &EffectMatrix,
    normalization: f64,
    classifier: &Classifier,
    out_dir: Option<&Path>,
) -> Result<EvalArtifacts> {
    let side = eval_set.side;
    let px = side * side;
    if geometry.resolution != side {
        return Err(Error::contract(format!(
            "geometry resolution {} does not match evaluation images {}",
            geometry.resolution, side
        )));
    }
    if classifier.side != side {
        return Err(Error::contract(format!(
            "classifier resolution {} does not match evaluation images {}",
            classifier.side, side
        )));
    }
    let count = eval_set.count;
    let stimuli = encoder.encode(&eval_set.images, count, px)?;
    debug_assert_eq!(stimuli.len(), count * ELECTRODE_COUNT);
    let stim_f64: Vec<f64> = stimuli.iter().map(|&v| v as f64).collect();
    let raw = geometry.render_batch(&stim_f64, count, matrix);
    // Normalized percepts saturate at the dataset constant.
    let percepts: Vec<f32> = raw
        .iter()
        .map(|&v| ((v / normalization) as f32).min(1.0))
        .collect();
    let report = evaluate(&percepts, &eval_set.images, &eval_set.labels, side, classifier)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for i in 0..count.min(16) {
            let target = &eval_set.images[i * px..(i + 1) * px];
            let stim = &stimuli[i * ELECTRODE_COUNT..(i + 1) * ELECTRODE_COUNT];
            let percept = &percepts[i * px..(i + 1) * px];
            // stimulus panel upscaled visually by the strip writer's own
            // min-max scaling; height must match, so render at native 9x9
            // only when the target is 9x9 as well.
            if side == 9 {
                crate::pgm::write_strip(
                    dir.join(format!("triptych-{i:02}.pgm")),
                    &[(target, 9), (stim, 9), (percept, 9)],
                    9,
                )?;
            } else {
                // pad the 9x9 stimulus into a 28-tall panel
                let mut panel = vec![0.0f32; 9 * side];
                for y in 0..9 {
                    panel[(y + (side - 9) / 2) * 9..(y + (side - 9) / 2) * 9 + 9]
                        .copy_from_slice(&stim[y * 9..(y + 1) * 9]);
                }
                crate::pgm::write_strip(
                    dir.join(format!("triptych-{i:02}.pgm")),
                    &[(target, side), (&panel, 9), (percept, side)],
                    side,
                )?;
            }
        }
    }
    Ok(EvalArtifacts {
        report,
        stimuli,
        percepts,
    })
}

// ---- latent optimization ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LatentOptResult {
    pub sample_index: usize,
    pub old_mse: f64,
    pub new_mse: f64,
    /// Accepted-step log-likelihood trace (includes the Gaussian constant).
    pub trace: Vec<f64>,
}

/// Gradient ascent on log p(stimulus) w.r.t. the latent z for the worst
/// (highest percept-vs-target MSE at z = 0) samples of the evaluation set.
pub fn optimize_latent(
    flow: &FlowModel<f32>,
    eval_set: &LabeledImageSet,
    geometry: &AxonMapGeometry,
    matrix: &EffectMatrix,
    normalization: f64,
    worst_k: usize,
    steps: usize,
    rate: f64,
) -> Result<Vec<LatentOptResult>> {
    let side = eval_set.side;
    let px = side * side;
    let dim = flow.dim();
    let count = eval_set.count;
    // Baseline MSE with z = 0.
    let encoder = TrainedEncoder::Cinn(flow.clone());
    let stimuli = encoder.encode(&eval_set.images, count, px)?;
    let stim_f64: Vec<f64> = stimuli.iter().map(|&v| v as f64).collect();
    let raw = geometry.render_batch(&stim_f64, count, matrix);
    let mut base_mse: Vec<(usize, f64)> = (0..count)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..px {
                let p = ((raw[i * px + j] / normalization) as f32).min(1.0) as f64;
                let d = p - eval_set.images[i * px + j] as f64;
                acc += d * d;
            }
            (i, acc / px as f64)
        })
        .collect();
    base_mse.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    base_mse.truncate(worst_k);

    let gauss_const = dim as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
    let mut results = Vec::with_capacity(base_mse.len());
    for &(idx, old_mse) in &base_mse {
        let cond_data: Vec<f32> = eval_set.images[idx * px..(idx + 1) * px].to_vec();
        let mut z = vec![0.0f32; dim];
        let mut trace = Vec::with_capacity(steps + 1);

        // log p(x) = -n/2 log 2pi - ||z||^2/2 + logdet_fwd, where the
        // forward log-det at x equals minus the inverse-pass log-det at z.
        let likelihood_and_grad = |z_data: &[f32],
                                   with_grad: bool|
         -> Result<(f64, Option<Vec<f32>>)> {
            let mut tape = Tape::new();
            let vids = flow.bind(&mut tape, false);
            let zt = Tensor::new(vec![1, dim], z_data.to_vec())?;
            let zv = if with_grad {
                tape.param(zt)
            } else {
                tape.input(zt)
            };
            let cv = tape.input(Tensor::new(vec![1, px], cond_data.clone())?);
            let (_x, logdet_inv) = flow.inverse_on_tape(&mut tape, &vids, zv, Some(cv))?;
            let sq = tape.square(zv);
            let ssq = tape.sum_rows(sq)?;
            let half = tape.scale(ssq, -0.5);
            let neg_ld = tape.neg(logdet_inv);
            let obj = tape.add(half, neg_ld)?;
            let value = tape.value(obj).data()[0] as f64 - gauss_const;
            if !with_grad {
                return Ok((value, None));
            }
            let mean = tape.mean_all(obj);
            tape.backward(mean)?;
            let g = tape.grad(zv).expect("latent grad").to_vec();
            Ok((value, Some(g)))
        };

        let mut aborted = false;
        match likelihood_and_grad(&z, false) {
            Ok((l0, _)) if l0.is_finite() => trace.push(l0),
            _ => aborted = true,
        }
        if !aborted {
            'ascent: for _ in 0..steps {
                let (current, grad) = match likelihood_and_grad(&z, true) {
                    Ok((v, Some(g))) if v.is_finite() => (v, g),
                    _ => {
                        aborted = true;
                        break 'ascent;
                    }
                };
                // Backtracking: halve the step until the likelihood does not
                // decrease; skip the step entirely if it keeps decreasing.
                let mut step_rate = rate;
                let mut accepted = false;
                for _ in 0..12 {
                    let candidate: Vec<f32> = z
                        .iter()
                        .zip(&grad)
                        .map(|(&zi, &gi)| zi + (step_rate * gi as f64) as f32)
                        .collect();
                    match likelihood_and_grad(&candidate, false) {
                        Ok((lc, _)) if lc.is_finite() && lc >= current => {
                            z = candidate;
                            trace.push(lc);
                            accepted = true;
                            break;
                        }
                        Ok(_) => step_rate *= 0.5,
                        Err(_) => {
                            aborted = true;
                            break 'ascent;
                        }
                    }
                }
                if !accepted {
                    break 'ascent;
                }
            }
        }

        if aborted {
            results.push(LatentOptResult {
                sample_index: idx,
                old_mse,
                new_mse: old_mse,
                trace,
            });
            continue;
        }
        // Re-render and re-score with the optimized latent.
        let zt = Tensor::new(vec![1, dim], z)?;
        let ct = Tensor::new(vec![1, px], cond_data)?;
        let (x, _) = flow.inverse(&zt, Some(&ct))?;
        let amps: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let percept = geometry.render_with_matrix(&amps, matrix)?;
        let mut acc = 0.0;
        for j in 0..px {
            let p = ((percept[j] / normalization) as f32).min(1.0) as f64;
            let d = p - eval_set.images[idx * px + j] as f64;
            acc += d * d;
        }
        results.push(LatentOptResult {
            sample_index: idx,
            old_mse,
            new_mse: acc / px as f64,
            trace,
        });
    }
    Ok(results)
}

// ---- likelihood scan ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScanRow {
    pub kind: &'static str,
    pub sample_index: usize,
    pub logdet: f64,
    pub mse: f64,
}

/// For each sample: forward log|det J| of the optimized stimulus at z = 0
/// plus the percept-vs-target MSE.
pub fn likelihood_mse_scan(
    flow: &FlowModel<f32>,
    targets: &LabeledImageSet,
    random_conditions: &PairDataset,
    random_count: usize,
    geometry: &AxonMapGeometry,
    matrix: &EffectMatrix,
    normalization: f64,
) -> Result<Vec<ScanRow>> {
    let px = geometry.pixel_count();
    let mut rows = Vec::new();
    let mut scan = |kind: &'static str, conds: Vec<f32>, count: usize| -> Result<()> {
        let z = Tensor::zeros(vec![count, flow.dim()]);
        let cond = Tensor::new(vec![count, px], conds.clone())?;
        let (x, logdet_inv) = flow.inverse(&z, Some(&cond))?;
        let stim_f64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let raw = geometry.render_batch(&stim_f64, count, matrix);
        for i in 0..count {
            let mut acc = 0.0;
            for j in 0..px {
                let p = ((raw[i * px + j] / normalization) as f32).min(1.0) as f64;
                let d = p - conds[i * px + j] as f64;
                acc += d * d;
            }
            rows.push(ScanRow {
                kind,
                sample_index: i,
                logdet: -logdet_inv[i] as f64,
                mse: acc / px as f64,
            });
        }
        Ok(())
    };
    scan("mnist", targets.images.clone(), targets.count)?;
    let rc = random_count.min(random_conditions.count);
    let mut conds = Vec::with_capacity(rc * px);
    for i in 0..rc {
        conds.extend(random_conditions.normalized_percept_row(i));
    }
    scan("random", conds, rc)?;
    Ok(rows)
}

pub fn write_scan_csv(mut w: impl Write, rows: &[ScanRow]) -> Result<()> {
    writeln!(w, "kind,sample_index,logdet,mse")?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{:.8}", r.kind, r.sample_index, r.logdet, r.mse)?;
    }
    Ok(())
}

pub fn write_loss_csv(mut w: impl Write, steps: &[TrainStep]) -> Result<()> {
    writeln!(w, "step,loss")?;
    for s in steps {
        writeln!(w, "{},{:.8}", s.step, s.loss)?;
    }
    Ok(())
}

// ---- run persistence -------------------------------------------------------------

/// Everything needed to evaluate a trained encoder later.
pub struct RunCheckpoint {
    pub encoder: TrainedEncoder,
    pub geometry: AxonMapGeometry,
    pub normalization: f64,
}

pub fn save_run(path: impl AsRef<Path>, run: &RunCheckpoint) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.insert_scalar("run.normalization", run.normalization);
    run.geometry.write_checkpoint(&mut ck, "geometry");
    match &run.encoder {
        TrainedEncoder::Baseline(b) => {
            ck.insert_scalar("run.kind", 0.0);
            b.write_checkpoint(&mut ck, "baseline");
        }
        TrainedEncoder::Inn(f, dir) => {
            ck.insert_scalar("run.kind", 1.0);
            ck.insert_scalar(
                "run.inn_direction",
                match dir {
                    InnDirection::PerceptToStimulus => 0.0,
                    InnDirection::StimulusToPercept => 1.0,
                },
            );
            f.write_checkpoint(&mut ck, "flow");
        }
        TrainedEncoder::Cinn(f) => {
            ck.insert_scalar("run.kind", 2.0);
            f.write_checkpoint(&mut ck, "flow");
        }
    }
    ck.save(path)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RunCheckpoint> {
    let ck = Checkpoint::load(path)?;
    let geometry = AxonMapGeometry::read_checkpoint(&ck, "geometry")?;
    let normalization = ck.get("run.normalization")?.scalar()?;
    let encoder = match ck.get("run.kind")?.scalar()? as u8 {
        0 => TrainedEncoder::Baseline(BaselineModel::read_checkpoint(&ck, "baseline")?),
        1 => {
            let dir = if ck.get("run.inn_direction")?.scalar()? == 0.0 {
                InnDirection::PerceptToStimulus
            } else {
                InnDirection::StimulusToPercept
            };
            TrainedEncoder::Inn(FlowModel::read_checkpoint(&ck, "flow")?, dir)
        }
        2 => TrainedEncoder::Cinn(FlowModel::read_checkpoint(&ck, "flow")?),
        other => return Err(Error::contract(format!("unknown run kind {other}"))),
    };
    Ok(RunCheckpoint {
        encoder,
        geometry,
        normalization,
    })
}

/// Train whichever encoder the config selects. Baselines need the dataset;
/// downsampling additionally fits its gain against MNIST-style targets.
pub fn train_encoder(
    cfg: &ExperimentConfig,
    pairs: &PairDataset,
    gain_targets: Option<&LabeledImageSet>,
    geometry: &AxonMapGeometry,
    matrix: &EffectMatrix,
) -> Result<(TrainedEncoder, Vec<TrainStep>)> {
    cfg.validate()?;
    let opts = BaselineTrainOptions {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
    };
    match cfg.model {
        ModelKind::Down => {
            let mut enc = DownsampleEncoder::new(cfg.resolution)?;
            let targets = gain_targets
                .ok_or_else(|| Error::contract("downsampling needs gain-fit targets"))?;
            let fit = targets.take(1024.min(targets.count));
            enc.fit_gain(
                &fit.images,
                fit.count,
                geometry,
                matrix,
                pairs.normalization,
                200,
            )?;
            Ok((TrainedEncoder::Baseline(BaselineModel::Down(enc)), vec![]))
        }
        ModelKind::Linear => {
            let (m, curve) = train_linear(pairs, &opts)?;
            Ok((TrainedEncoder::Baseline(BaselineModel::Linear(m)), curve))
        }
        ModelKind::Nn => {
            let (m, curve) = train_nn(pairs, &opts)?;
            Ok((TrainedEncoder::Baseline(BaselineModel::Conv(m)), curve))
        }
        ModelKind::Inn => {
            let r = train_inn_mmd(cfg, pairs)?;
            Ok((TrainedEncoder::Inn(r.model, cfg.inn_direction), r.steps))
        }
        ModelKind::Cinn => {
            let r = train_cinn(cfg, pairs)?;
            Ok((TrainedEncoder::Cinn(r.model), r.steps))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phosim::default_geometry;

    fn tiny_cfg(model: ModelKind) -> ExperimentConfig {
        ExperimentConfig {
            model,
            resolution: 9,
            pairs: 256,
            seed: 3,
            batch: 64,
            epochs: 2,
            depth: 2,
            hidden: 32,
            eval_count: 8,
            latent_steps: 3,
            ..ExperimentConfig::default()
        }
    }

    fn digit_like_set(count: usize, side: usize, seed: u64) -> LabeledImageSet {
        let mut s = Stream::new(seed);
        let px = side * side;
        let mut images = vec![0.0f32; count * px];
        for i in 0..count {
            // a bright blob at a random location
            let cx = s.below(side);
            let cy = s.below(side);
            for y in 0..side {
                for x in 0..side {
                    let d2 = ((x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2))
                        / (side as f64);
                    images[i * px + y * side + x] = (-d2).exp() as f32;
                }
            }
        }
        LabeledImageSet {
            count,
            side,
            images,
            labels: (0..count).map(|i| (i % 10) as u8).collect(),
        }
    }

    #[test]
    fn cinn_training_reduces_nll_on_tiny_data() {
        let geo = default_geometry(9).unwrap();
        let pairs = PairDataset::generate(256, &geo, 5).unwrap();
        let cfg = ExperimentConfig {
            epochs: 4,
            ..tiny_cfg(ModelKind::Cinn)
        };
        let r = train_cinn(&cfg, &pairs).unwrap();
        let first = r.epochs.first().unwrap().mean_loss;
        let last = r.epochs.last().unwrap().mean_loss;
        assert!(last < first, "nll did not decrease: {first} -> {last}");
        // evaluation path produces 81-wide stimuli
        let eval = digit_like_set(4, 9, 6);
        let enc = TrainedEncoder::Cinn(r.model);
        let stims = enc.encode(&eval.images, 4, 81).unwrap();
        assert_eq!(stims.len(), 4 * 81);
        assert!(stims.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inn_training_runs_in_both_directions() {
        let geo = default_geometry(9).unwrap();
        let pairs = PairDataset::generate(256, &geo, 7).unwrap();
        // 9x9: K = 0, pure MSE
        let cfg = tiny_cfg(ModelKind::Inn);
        let r = train_inn_mmd(&cfg, &pairs).unwrap();
        let first = r.epochs.first().unwrap().mean_loss;
        let last = r.epochs.last().unwrap().mean_loss;
        assert!(last < first, "mse did not decrease: {first} -> {last}");
        // swapped direction trains too
        let cfg_swap = ExperimentConfig {
            inn_direction: InnDirection::StimulusToPercept,
            ..tiny_cfg(ModelKind::Inn)
        };
        let r2 = train_inn_mmd(&cfg_swap, &pairs).unwrap();
        assert!(r2.epochs.last().unwrap().mean_loss.is_finite());
        // held-out MSE helper works for both
        let a = held_out_stimulus_mse(&r.model, InnDirection::PerceptToStimulus, &pairs, 200..256)
            .unwrap();
        let b = held_out_stimulus_mse(&r2.model, InnDirection::StimulusToPercept, &pairs, 200..256)
            .unwrap();
        assert!(a.is_finite() && b.is_finite());
    }

    #[test]
    fn evaluate_model_is_deterministic_and_emits_artifacts() {
        let geo = default_geometry(9).unwrap();
        let matrix = geo.effect_matrix();
        let pairs = PairDataset::generate(128, &geo, 9).unwrap();
        let mut s = Stream::new(11);
        let clf = Classifier::new(9, &mut s);
        let eval = digit_like_set(6, 9, 12);
        let enc = TrainedEncoder::Baseline(BaselineModel::Down({
            let mut d = DownsampleEncoder::new(9).unwrap();
            d.gain = 2.0;
            d
        }));
        let dir = tempfile::tempdir().unwrap();
        let a1 = evaluate_model(
            &enc,
            &eval,
            &geo,
            &matrix,
            pairs.normalization,
            &clf,
            Some(dir.path()),
        )
        .unwrap();
        let a2 = evaluate_model(&enc, &eval, &geo, &matrix, pairs.normalization, &clf, None)
            .unwrap();
        assert_eq!(a1.report.mse, a2.report.mse);
        assert_eq!(a1.report.acc, a2.report.acc);
        assert!(dir.path().join("triptych-00.pgm").is_file());
        assert_eq!(a1.stimuli.len(), 6 * 81);
        assert_eq!(a1.percepts.len(), 6 * 81);
    }

    #[test]
    fn latent_ascent_with_zero_steps_is_a_no_op() {
        let geo = default_geometry(9).unwrap();
        let matrix = geo.effect_matrix();
        let pairs = PairDataset::generate(128, &geo, 13).unwrap();
        let cfg = tiny_cfg(ModelKind::Cinn);
        let r = train_cinn(&cfg, &pairs).unwrap();
        let eval = digit_like_set(6, 9, 14);
        let results = optimize_latent(
            &r.model,
            &eval,
            &geo,
            &matrix,
            pairs.normalization,
            3,
            0,
            0.05,
        )
        .unwrap();
        assert_eq!(results.len(), 3);
        for res in &results {
            assert_eq!(res.old_mse, res.new_mse);
        }
    }

    #[test]
    fn latent_ascent_trace_is_non_decreasing() {
        let geo = default_geometry(9).unwrap();
        let matrix = geo.effect_matrix();
        let pairs = PairDataset::generate(256, &geo, 15).unwrap();
        let cfg = ExperimentConfig {
            epochs: 3,
            ..tiny_cfg(ModelKind::Cinn)
        };
        let r = train_cinn(&cfg, &pairs).unwrap();
        let eval = digit_like_set(4, 9, 16);
        let results = optimize_latent(
            &r.model,
            &eval,
            &geo,
            &matrix,
            pairs.normalization,
            2,
            10,
            0.05,
        )
        .unwrap();
        for res in &results {
            for w in res.trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9,
                    "likelihood decreased along accepted steps: {:?}",
                    res.trace
                );
            }
        }
    }

    #[test]
    fn likelihood_scan_labels_populations() {
        let geo = default_geometry(9).unwrap();
        let matrix = geo.effect_matrix();
        let pairs = PairDataset::generate(64, &geo, 17).unwrap();
        let cfg = tiny_cfg(ModelKind::Cinn);
        let r = train_cinn(&cfg, &pairs).unwrap();
        let eval = digit_like_set(5, 9, 18);
        let rows = likelihood_mse_scan(
            &r.model,
            &eval,
            &pairs,
            7,
            &geo,
            &matrix,
            pairs.normalization,
        )
        .unwrap();
        assert_eq!(rows.len(), 5 + 7);
        assert_eq!(rows.iter().filter(|r| r.kind == "mnist").count(), 5);
        assert_eq!(rows.iter().filter(|r| r.kind == "random").count(), 7);
        let mut buf = Vec::new();
        write_scan_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("kind,"));
    }

    #[test]
    fn run_checkpoints_round_trip_through_disk() {
        let geo = default_geometry(9).unwrap();
        let pairs = PairDataset::generate(64, &geo, 19).unwrap();
        let cfg = tiny_cfg(ModelKind::Cinn);
        let r = train_cinn(&cfg, &pairs).unwrap();
        let run = RunCheckpoint {
            encoder: TrainedEncoder::Cinn(r.model),
            geometry: geo,
            normalization: pairs.normalization,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.pfck");
        save_run(&path, &run).unwrap();
        let back = load_run(&path).unwrap();
        assert_eq!(back.encoder.kind(), "cinn");
        assert_eq!(back.normalization, run.normalization);
        let eval = digit_like_set(3, 9, 20);
        let s1 = run.encoder.encode(&eval.images, 3, 81).unwrap();
        let s2 = back.encoder.encode(&eval.images, 3, 81).unwrap();
        assert_eq!(s1, s2);
    }
}
