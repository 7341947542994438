//! Reconstruction-quality metrics and the pre-trained digit classifier.
//!
//! MAE/MSE are pixel-level, SSIM/PSNR fidelity-oriented, and ACC semantic:
//! a small convolutional classifier labels the rendered percepts and is
//! scored against the true digit labels.

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Vid};
use crate::checkpoint::Checkpoint;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::rng::Stream;
use std::io::Write;
use std::sync::Arc;

// SSIM constants: 7x7 Gaussian window, sigma 1.5, K1/K2 on unit data range.
const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// PSNR reported for identical images (mse = 0).
const PSNR_CAP_DB: f64 = 100.0;

/// Mean absolute difference.
pub fn mae(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mae", &[a.len()], &[b.len()]));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.len() as f64)
}

/// Mean squared difference.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mse", &[a.len()], &[b.len()]));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// 10 log10(1 / mse) on unit-range images, capped at 100 dB.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filtering at positions where the full window fits.
fn filter_valid(img: &[f64], side: usize) -> Vec<f64> {
    let w = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let out_side = side - 2 * half;
    // horizontal pass
    let mut tmp = vec![0.0f64; side * out_side];
    for y in 0..side {
        for x in 0..out_side {
            let mut acc = 0.0;
            for (k, &wk) in w.iter().enumerate() {
                acc += wk * img[y * side + x + k];
            }
            tmp[y * out_side + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; out_side * out_side];
    for y in 0..out_side {
        for x in 0..out_side {
            let mut acc = 0.0;
            for (k, &wk) in w.iter().enumerate() {
                acc += wk * tmp[(y + k) * out_side + x];
            }
            out[y * out_side + x] = acc;
        }
    }
    out
}

/// Mean local SSIM over valid window positions; symmetric in its arguments.
pub fn ssim(a: &[f32], b: &[f32], side: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != side * side {
        return Err(Error::shape("ssim", &[a.len()], &[b.len()]));
    }
    if side < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {side}x{side}"
        )));
    }
    let ax: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bx: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let a2: Vec<f64> = ax.iter().map(|v| v * v).collect();
    let b2: Vec<f64> = bx.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = ax.iter().zip(&bx).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&ax, side);
    let mu_b = filter_valid(&bx, side);
    let m_a2 = filter_valid(&a2, side);
    let m_b2 = filter_valid(&b2, side);
    let m_ab = filter_valid(&ab, side);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_a2[i] - ma * ma;
        let vb = m_b2[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

// ---- classifier -------------------------------------------------------------

const CONV1_CH: usize = 8;
const CONV2_CH: usize = 16;
const FC_HIDDEN: usize = 128;
const CLASSES: usize = 10;

/// Small convolutional digit classifier: two conv+ELU stages, then two
/// affine layers.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub side: usize,
    pub w_conv1: Tensor<f32>,
    pub b_conv1: Tensor<f32>,
    pub w_conv2: Tensor<f32>,
    pub b_conv2: Tensor<f32>,
    pub w_fc1: Tensor<f32>,
    pub b_fc1: Tensor<f32>,
    pub w_fc2: Tensor<f32>,
    pub b_fc2: Tensor<f32>,
}

struct ClassifierVids {
    ids: Vec<Vid>,
}

impl Classifier {
    pub fn new(side: usize, stream: &mut Stream) -> Self {
        let px = side * side;
        let he = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Classifier {
            side,
            w_conv1: Tensor::randn(vec![CONV1_CH, 1, 3, 3], he(9), stream),
            b_conv1: Tensor::zeros(vec![CONV1_CH]),
            w_conv2: Tensor::randn(vec![CONV2_CH, CONV1_CH, 3, 3], he(9 * CONV1_CH), stream),
            b_conv2: Tensor::zeros(vec![CONV2_CH]),
            w_fc1: Tensor::randn(vec![CONV2_CH * px, FC_HIDDEN], he(CONV2_CH * px), stream),
            b_fc1: Tensor::zeros(vec![FC_HIDDEN]),
            w_fc2: Tensor::randn(vec![FC_HIDDEN, CLASSES], he(FC_HIDDEN), stream),
            b_fc2: Tensor::zeros(vec![CLASSES]),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        vec![
            &mut self.w_conv1,
            &mut self.b_conv1,
            &mut self.w_conv2,
            &mut self.b_conv2,
            &mut self.w_fc1,
            &mut self.b_fc1,
            &mut self.w_fc2,
            &mut self.b_fc2,
        ]
    }

    fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> ClassifierVids {
        let tensors = [
            &self.w_conv1,
            &self.b_conv1,
            &self.w_conv2,
            &self.b_conv2,
            &self.w_fc1,
            &self.b_fc1,
            &self.w_fc2,
            &self.b_fc2,
        ];
        let ids = tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param((*t).clone())
                } else {
                    tape.input((*t).clone())
                }
            })
            .collect();
        ClassifierVids { ids }
    }

    fn logits_on_tape(&self, tape: &mut Tape<f32>, v: &ClassifierVids, x: Vid) -> Result<Vid> {
        let batch = tape.value(x).rows();
        let img = tape.reshape(x, vec![batch, 1, self.side, self.side])?;
        let c1 = tape.conv3x3(img, v.ids[0], v.ids[1])?;
        let a1 = tape.elu(c1);
        let c2 = tape.conv3x3(a1, v.ids[2], v.ids[3])?;
        let a2 = tape.elu(c2);
        let flat = tape.reshape(a2, vec![batch, CONV2_CH * self.side * self.side])?;
        let h0 = tape.matmul(flat, v.ids[4])?;
        let h1 = tape.add(h0, v.ids[5])?;
        let h = tape.elu(h1);
        let o0 = tape.matmul(h, v.ids[6])?;
        tape.add(o0, v.ids[7])
    }

    /// Predicted labels for a batch of flattened unit-range images.
    pub fn predict(&self, images: &[f32], count: usize) -> Result<Vec<u8>> {
        let px = self.side * self.side;
        if images.len() != count * px {
            return Err(Error::shape("classifier input", &[images.len()], &[count * px]));
        }
        let mut out = Vec::with_capacity(count);
        for chunk_start in (0..count).step_by(512) {
            let chunk = (count - chunk_start).min(512);
            let mut tape = Tape::new();
            let v = self.bind(&mut tape, false);
            let x = tape.input(Tensor::new(
                vec![chunk, px],
                images[chunk_start * px..(chunk_start + chunk) * px].to_vec(),
            )?);
            let logits = self.logits_on_tape(&mut tape, &v, x)?;
            let lv = tape.value(logits);
            for r in 0..chunk {
                let row = &lv.data()[r * CLASSES..(r + 1) * CLASSES];
                let mut best = 0usize;
                for (j, &val) in row.iter().enumerate() {
                    if val > row[best] {
                        best = j;
                    }
                }
                out.push(best as u8);
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, set: &LabeledImageSet) -> Result<f64> {
        let preds = self.predict(&set.images, set.count)?;
        let hits = preds
            .iter()
            .zip(&set.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f64 / set.count as f64)
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_scalar(&format!("{prefix}.side"), self.side as f64);
        ck.insert_tensor(&format!("{prefix}.w_conv1"), &self.w_conv1);
        ck.insert_tensor(&format!("{prefix}.b_conv1"), &self.b_conv1);
        ck.insert_tensor(&format!("{prefix}.w_conv2"), &self.w_conv2);
        ck.insert_tensor(&format!("{prefix}.b_conv2"), &self.b_conv2);
        ck.insert_tensor(&format!("{prefix}.w_fc1"), &self.w_fc1);
        ck.insert_tensor(&format!("{prefix}.b_fc1"), &self.b_fc1);
        ck.insert_tensor(&format!("{prefix}.w_fc2"), &self.w_fc2);
        ck.insert_tensor(&format!("{prefix}.b_fc2"), &self.b_fc2);
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let t = |name: &str| -> Result<Tensor<f32>> {
            ck.get(&format!("{prefix}.{name}"))?.tensor()
        };
        Ok(Classifier {
            side: ck.get(&format!("{prefix}.side"))?.scalar()? as usize,
            w_conv1: t("w_conv1")?,
            b_conv1: t("b_conv1")?,
            w_conv2: t("w_conv2")?,
            b_conv2: t("b_conv2")?,
            w_fc1: t("w_fc1")?,
            b_fc1: t("b_fc1")?,
            w_fc2: t("w_fc2")?,
            b_fc2: t("b_fc2")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Required evaluation accuracy; training reports failure below it.
    pub floor: f64,
}

impl ClassifierTrainOptions {
    pub fn for_resolution(side: usize) -> Self {
        ClassifierTrainOptions {
            epochs: 4,
            batch: 256,
            seed: 1234,
            floor: if side >= 28 { 0.97 } else { 0.95 },
        }
    }
}

/// Train the digit classifier at `side` resolution and verify it reaches
/// the accuracy floor on `eval`.
pub fn train_classifier(
    train: &LabeledImageSet,
    eval: &LabeledImageSet,
    side: usize,
    opts: ClassifierTrainOptions,
) -> Result<(Classifier, f64)> {
    let train = train.at_resolution(side);
    let eval = eval.at_resolution(side);
    let mut stream = Stream::new(opts.seed);
    let mut clf = Classifier::new(side, &mut stream);
    let cfg = AdamConfig::default();
    let mut states: Vec<AdamState<f32>> = clf
        .params_mut()
        .iter()
        .map(|p| AdamState::new(p.numel()))
        .collect();
    let px = side * side;
    let mut order: Vec<usize> = (0..train.count).collect();
    for _epoch in 0..opts.epochs {
        stream.shuffle(&mut order);
        for batch_ids in order.chunks(opts.batch) {
            let mut xb = Vec::with_capacity(batch_ids.len() * px);
            let mut yb = Vec::with_capacity(batch_ids.len());
            for &i in batch_ids {
                xb.extend_from_slice(train.image(i));
                yb.push(train.labels[i] as usize);
            }
            let mut tape = Tape::new();
            let vids = clf.bind(&mut tape, true);
            let x = tape.input(Tensor::new(vec![batch_ids.len(), px], xb)?);
            let logits = clf.logits_on_tape(&mut tape, &vids, x)?;
            let loss = tape.cross_entropy_logits(logits, Arc::new(yb))?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Training("classifier loss diverged".into()));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vids
                .ids
                .iter()
                .map(|&v| tape.grad(v).expect("trainable leaf").to_vec())
                .collect();
            for ((p, st), g) in clf.params_mut().into_iter().zip(&mut states).zip(&grads) {
                adam_step(p.data_mut(), g, st, &cfg)?;
            }
        }
    }
    let acc = clf.accuracy(&eval)?;
    if acc < opts.floor {
        return Err(Error::Training(format!(
            "classifier reached {acc:.4} accuracy at {side}x{side}, below the {:.2} floor",
            opts.floor
        )));
    }
    Ok((clf, acc))
}

// ---- evaluation report -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub count: usize,
    pub mae: f64,
    pub mse: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub acc: f64,
    pub per_sample: Vec<SampleMetrics>,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleMetrics {
    pub mae: f64,
    pub mse: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub correct: bool,
}

/// Score percepts against targets. Percepts and targets are flattened
/// unit-range images of `side x side`; ACC compares classifier predictions
/// on the percepts with the true labels.
pub fn evaluate(
    percepts: &[f32],
    targets: &[f32],
    labels: &[u8],
    side: usize,
    classifier: &Classifier,
) -> Result<MetricReport> {
    let px = side * side;
    if percepts.len() != targets.len() || percepts.len() % px != 0 {
        return Err(Error::shape("evaluate", &[percepts.len()], &[targets.len()]));
    }
    let count = percepts.len() / px;
    if labels.len() != count {
        return Err(Error::shape("evaluate labels", &[labels.len()], &[count]));
    }
    if classifier.side != side {
        return Err(Error::contract(format!(
            "classifier resolution {} does not match images {}",
            classifier.side, side
        )));
    }
    let preds = classifier.predict(percepts, count)?;
    let mut per_sample = Vec::with_capacity(count);
    for i in 0..count {
        let p = &percepts[i * px..(i + 1) * px];
        let t = &targets[i * px..(i + 1) * px];
        per_sample.push(SampleMetrics {
            mae: mae(p, t)?,
            mse: mse(p, t)?,
            ssim: ssim(p, t, side)?,
            psnr_db: psnr(p, t)?,
            correct: preds[i] == labels[i],
        });
    }
    let n = count as f64;
    Ok(MetricReport {
        count,
        mae: per_sample.iter().map(|s| s.mae).sum::<f64>() / n,
        mse: per_sample.iter().map(|s| s.mse).sum::<f64>() / n,
        ssim: per_sample.iter().map(|s| s.ssim).sum::<f64>() / n,
        psnr_db: per_sample.iter().map(|s| s.psnr_db).sum::<f64>() / n,
        acc: per_sample.iter().filter(|s| s.correct).count() as f64 / n,
        per_sample,
    })
}

pub fn csv_header() -> &'static str {
    "model,resolution,mae,mse,ssim,psnr_db,acc,count"
}

pub fn csv_row(model: &str, resolution: usize, r: &MetricReport) -> String {
    format!(
        "{model},{resolution},{:.6},{:.6},{:.6},{:.4},{:.4},{}",
        r.mae, r.mse, r.ssim, r.psnr_db, r.acc, r.count
    )
}

pub fn write_per_sample_csv(mut w: impl Write, r: &MetricReport) -> Result<()> {
    writeln!(w, "index,mae,mse,ssim,psnr_db,correct")?;
    for (i, s) in r.per_sample.iter().enumerate() {
        writeln!(
            w,
            "{i},{:.6},{:.6},{:.6},{:.4},{}",
            s.mae, s.mse, s.ssim, s.psnr_db, s.correct as u8
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = vec![0.0f32; 100];
        let mut b = vec![0.0f32; 100];
        assert_eq!(psnr(&a, &b).unwrap(), 100.0);
        // mse 0.01 -> 20 dB
        for v in b.iter_mut() {
            *v = 0.1;
        }
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        // mse 1 -> 0 dB
        for v in b.iter_mut() {
            *v = 1.0;
        }
        assert!(psnr(&a, &b).unwrap().abs() < 1e-9);
    }

    #[test]
    fn psnr_is_monotone_in_mse() {
        let a = vec![0.0f32; 64];
        let mut last = f64::INFINITY;
        for step in 1..10 {
            let b = vec![0.05f32 * step as f32; 64];
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let mut s = Stream::new(8);
        let img: Vec<f32> = (0..28 * 28).map(|_| s.uniform01() as f32).collect();
        let v = ssim(&img, &img, 28).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn ssim_of_inverted_half_plane_is_low() {
        let side = 28;
        let mut img = vec![0.0f32; side * side];
        for y in 0..side {
            for x in 0..side / 2 {
                img[y * side + x] = 1.0;
            }
        }
        let inv: Vec<f32> = img.iter().map(|&v| 1.0 - v).collect();
        let v = ssim(&img, &inv, side).unwrap();
        assert!(v < 0.1, "ssim {v}");
    }

    /// Direct nested-loop SSIM over every valid window (test oracle,
    /// independent of the separable-filter implementation).
    fn ssim_direct(a: &[f32], b: &[f32], side: usize) -> f64 {
        let w = gaussian_window();
        let half = SSIM_WINDOW / 2;
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        let mut count = 0usize;
        for cy in half..side - half {
            for cx in half..side - half {
                let (mut ma, mut mb, mut ea2, mut eb2, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let weight = w[dy] * w[dx];
                        let av = a[(cy + dy - half) * side + cx + dx - half] as f64;
                        let bv = b[(cy + dy - half) * side + cx + dx - half] as f64;
                        ma += weight * av;
                        mb += weight * bv;
                        ea2 += weight * av * av;
                        eb2 += weight * bv * bv;
                        eab += weight * av * bv;
                    }
                }
                let va = ea2 - ma * ma;
                let vb = eb2 - mb * mb;
                let cov = eab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let mut s = Stream::new(123);
        for trial in 0..50 {
            let img_a: Vec<f32> = (0..28 * 28).map(|_| s.uniform01() as f32).collect();
            let img_b: Vec<f32> = (0..28 * 28).map(|_| s.uniform01() as f32).collect();
            let fast = ssim(&img_a, &img_b, 28).unwrap();
            let slow = ssim_direct(&img_a, &img_b, 28);
            assert!((fast - slow).abs() < 1e-4, "trial {trial}: {fast} vs {slow}");
            // symmetry
            let rev = ssim(&img_b, &img_a, 28).unwrap();
            assert!((fast - rev).abs() < 1e-9);
        }
    }

    #[test]
    fn untrained_classifier_outputs_valid_labels() {
        let mut s = Stream::new(3);
        let clf = Classifier::new(9, &mut s);
        let noise: Vec<f32> = (0..81).map(|_| s.uniform01() as f32).collect();
        let pred = clf.predict(&noise, 1).unwrap();
        assert!(pred[0] < 10);
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let mut s = Stream::new(4);
        let clf = Classifier::new(9, &mut s);
        let mut ck = Checkpoint::new();
        clf.write_checkpoint(&mut ck, "clf");
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Classifier::read_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap(), "clf")
            .unwrap();
        let img: Vec<f32> = (0..81).map(|i| (i % 7) as f32 / 7.0).collect();
        assert_eq!(
            clf.predict(&img, 1).unwrap(),
            back.predict(&img, 1).unwrap()
        );
    }

    #[test]
    fn evaluate_identical_images_is_perfect() {
        let mut s = Stream::new(5);
        // 9x9 images still admit a 3x3 valid SSIM region
        let clf = Classifier::new(9, &mut s);
        let count = 12;
        let imgs: Vec<f32> = (0..count * 81).map(|_| s.uniform01() as f32).collect();
        let preds = clf.predict(&imgs, count).unwrap();
        let report = evaluate(&imgs, &imgs, &preds, 9, &clf).unwrap();
        assert!((report.ssim - 1.0).abs() < 1e-9);
        let clf = Classifier::new(28, &mut s);
        let imgs: Vec<f32> = (0..count * 784).map(|_| s.uniform01() as f32).collect();
        let preds = clf.predict(&imgs, count).unwrap();
        let report = evaluate(&imgs, &imgs, &preds, 28, &clf).unwrap();
        assert_eq!(report.mae, 0.0);
        assert_eq!(report.mse, 0.0);
        assert!((report.ssim - 1.0).abs() < 1e-9);
        assert_eq!(report.psnr_db, 100.0);
        // labels straight from the classifier means ACC is its clean accuracy
        assert_eq!(report.acc, 1.0);
    }

    #[test]
    fn evaluate_rejects_misaligned_counts() {
        let mut s = Stream::new(6);
        let clf = Classifier::new(28, &mut s);
        let imgs = vec![0.0f32; 2 * 784];
        let labels = vec![0u8; 3];
        assert!(evaluate(&imgs, &imgs, &labels, 28, &clf).is_err());
    }

    #[test]
    fn evaluate_aggregates_are_order_invariant() {
        let mut s = Stream::new(7);
        let clf = Classifier::new(28, &mut s);
        let count = 10;
        let a: Vec<f32> = (0..count * 784).map(|_| s.uniform01() as f32).collect();
        let b: Vec<f32> = (0..count * 784).map(|_| s.uniform01() as f32).collect();
        let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
        let r1 = evaluate(&a, &b, &labels, 28, &clf).unwrap();
        // reversed sample order
        let rev = |v: &[f32]| -> Vec<f32> {
            let mut out = Vec::with_capacity(v.len());
            for i in (0..count).rev() {
                out.extend_from_slice(&v[i * 784..(i + 1) * 784]);
            }
            out
        };
        let labels_rev: Vec<u8> = labels.iter().rev().copied().collect();
        let r2 = evaluate(&rev(&a), &rev(&b), &labels_rev, 28, &clf).unwrap();
        assert!((r1.mae - r2.mae).abs() < 1e-12);
        assert!((r1.mse - r2.mse).abs() < 1e-12);
        assert!((r1.ssim - r2.ssim).abs() < 1e-12);
        assert!((r1.acc - r2.acc).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let img = vec![0.0f32; 25];
        assert!(ssim(&img, &img, 5).is_err());
    }
}
