//! Dataset generation and persistence.
//!
//! Training pairs are (stimulus, percept) rows produced by the simulator
//! from per-sample seeded draws: an activation fraction, a uniformly chosen
//! electrode subset, and amplitudes uniform in [-3, +3]. Because every
//! sample owns an independent generator derived from (master seed, index),
//! regeneration is bit-identical for any worker thread count.

use crate::error::{Error, Result};
use crate::phosim::{AxonMapGeometry, ELECTRODE_COUNT};
use crate::rng::{sub_seed, Stream};
use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const DATASET_MAGIC: &[u8; 4] = b"PFDS";
pub const DATASET_VERSION: u32 = 1;
/// Generation proceeds in shards to bound per-worker temporary memory.
pub const SHARD_SIZE: usize = 8192;
/// Training stimulus amplitude range.
pub const AMP_RANGE: f64 = 3.0;

/// Random stimulus-percept pairs plus the metadata needed to reproduce them.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub resolution: usize,
    pub count: usize,
    pub seed: u64,
    /// 99.9th-percentile percept intensity of this set; dividing by it puts
    /// percepts on a [0, ~1] scale comparable to unit-range targets.
    pub normalization: f64,
    pub fingerprint: [u8; 32],
    /// count x 81, row-major, generated values within [-3, +3].
    pub stimuli: Vec<f32>,
    /// count x resolution^2, raw (un-normalized) renders, nonnegative.
    pub percepts: Vec<f32>,
}

impl PairDataset {
    /// Generate `n` pairs for `geometry` from `master_seed`.
    pub fn generate(n: usize, geometry: &AxonMapGeometry, master_seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::parameter("pair count must be at least 1"));
        }
        let px = geometry.pixel_count();
        let matrix = geometry.effect_matrix();
        let mut stimuli = vec![0.0f32; n * ELECTRODE_COUNT];
        let mut percepts = vec![0.0f32; n * px];
        let shards = stimuli
            .chunks_mut(SHARD_SIZE * ELECTRODE_COUNT)
            .zip(percepts.chunks_mut(SHARD_SIZE * px))
            .enumerate();
        for (shard_idx, (stim_block, perc_block)) in shards {
            let base = shard_idx * SHARD_SIZE;
            stim_block
                .par_chunks_mut(ELECTRODE_COUNT)
                .zip(perc_block.par_chunks_mut(px))
                .enumerate()
                .for_each(|(offset, (stim_row, perc_row))| {
                    let i = base + offset;
                    let mut stream = Stream::new(sub_seed(master_seed, i as u64));
                    let mut amps = [0.0f64; ELECTRODE_COUNT];
                    let fraction = stream.uniform01();
                    let active = (fraction * ELECTRODE_COUNT as f64).round() as usize;
                    for e in stream.choose_k(ELECTRODE_COUNT, active) {
                        amps[e] = stream.uniform(-AMP_RANGE, AMP_RANGE);
                    }
                    let percept = geometry
                        .render_with_matrix(&amps, &matrix)
                        .expect("valid generated stimulus");
                    for (dst, &a) in stim_row.iter_mut().zip(&amps) {
                        *dst = a as f32;
                    }
                    for (dst, &p) in perc_row.iter_mut().zip(&percept) {
                        *dst = p as f32;
                    }
                });
        }
        let normalization = percentile_999(&percepts);
        Ok(PairDataset {
            resolution: geometry.resolution,
            count: n,
            seed: master_seed,
            normalization,
            fingerprint: geometry.fingerprint(),
            stimuli,
            percepts,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn stimulus_row(&self, i: usize) -> &[f32] {
        &self.stimuli[i * ELECTRODE_COUNT..(i + 1) * ELECTRODE_COUNT]
    }

    pub fn percept_row(&self, i: usize) -> &[f32] {
        let px = self.pixel_count();
        &self.percepts[i * px..(i + 1) * px]
    }

    /// Percept row divided by the dataset normalization constant.
    pub fn normalized_percept_row(&self, i: usize) -> Vec<f32> {
        let c = self.normalization as f32;
        self.percept_row(i).iter().map(|&v| v / c).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        w.write_u16::<LittleEndian>(self.resolution as u16)?;
        w.write_u16::<LittleEndian>(self.resolution as u16)?;
        w.write_u64::<LittleEndian>(self.count as u64)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_f64::<LittleEndian>(self.normalization)?;
        w.write_all(&self.fingerprint)?;
        for &v in &self.stimuli {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &v in &self.percepts {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected {:?}", magic, DATASET_MAGIC),
            ));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DATASET_VERSION {
            return Err(Error::format(
                4,
                format!(
                    "dataset version {} unsupported (expected {}); regenerate with gen-data",
                    version, DATASET_VERSION
                ),
            ));
        }
        let res_w = r.read_u16::<LittleEndian>()? as usize;
        let res_h = r.read_u16::<LittleEndian>()? as usize;
        if res_w != res_h {
            return Err(Error::format(8, "non-square percept resolution".to_string()));
        }
        let count = r.read_u64::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let normalization = r.read_f64::<LittleEndian>()?;
        let mut fingerprint = [0u8; 32];
        r.read_exact(&mut fingerprint)?;
        let mut stimuli = vec![0.0f32; count * ELECTRODE_COUNT];
        for v in stimuli.iter_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
        let mut percepts = vec![0.0f32; count * res_w * res_h];
        for v in percepts.iter_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
        Ok(PairDataset {
            resolution: res_w,
            count,
            seed,
            normalization,
            fingerprint,
            stimuli,
            percepts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)
    }

    /// Load and, when a geometry is supplied, reject stale files whose
    /// fingerprint does not match it.
    pub fn load(path: impl AsRef<Path>, geometry: Option<&AxonMapGeometry>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        let ds = Self::read_from(std::io::BufReader::new(f))?;
        if let Some(g) = geometry {
            if ds.fingerprint != g.fingerprint() {
                return Err(Error::Stale(format!(
                    "{}: dataset was generated for a different geometry; regenerate with gen-data",
                    path.as_ref().display()
                )));
            }
        }
        Ok(ds)
    }
}

/// k-th largest with k = ceil(0.001 * len): the value that 0.1% of entries
/// reach or exceed. Exact selection, so the constant is order-independent.
fn percentile_999(values: &[f32]) -> f64 {
    let k = ((values.len() as f64 * 0.001).ceil() as usize).clamp(1, values.len());
    let mut copy = values.to_vec();
    let idx = copy.len() - k;
    let (_, v, _) = copy.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
    let v = *v as f64;
    if v > 1e-9 {
        v
    } else {
        1.0
    }
}

// ---- MNIST ----------------------------------------------------------------

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;

/// Images in [0, 1] (raw byte / 255 exactly) with integer labels.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub count: usize,
    pub side: usize,
    /// count x side x side, row-major.
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledImageSet {
    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.side * self.side;
        &self.images[i * px..(i + 1) * px]
    }

    /// Area-interpolated copy at another square resolution.
    pub fn at_resolution(&self, side: usize) -> LabeledImageSet {
        if side == self.side {
            return self.clone();
        }
        let px = side * side;
        let mut images = vec![0.0f32; self.count * px];
        images
            .par_chunks_mut(px)
            .enumerate()
            .for_each(|(i, dst)| {
                let resized = area_resize(self.image(i), self.side, self.side, side, side);
                dst.copy_from_slice(&resized);
            });
        LabeledImageSet {
            count: self.count,
            side,
            images,
            labels: self.labels.clone(),
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> LabeledImageSet {
        let n = n.min(self.count);
        let px = self.side * self.side;
        LabeledImageSet {
            count: n,
            side: self.side,
            images: self.images[..n * px].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Parse big-endian IDX image + label files.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let img_bytes = std::fs::read(images_path.as_ref())?;
    let lab_bytes = std::fs::read(labels_path.as_ref())?;
    let mut r = &img_bytes[..];
    let magic = r.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            0,
            format!("image magic {magic}, expected {IDX_IMAGE_MAGIC}"),
        ));
    }
    let count = r.read_u32::<BigEndian>()? as usize;
    let rows = r.read_u32::<BigEndian>()? as usize;
    let cols = r.read_u32::<BigEndian>()? as usize;
    if rows != cols {
        return Err(Error::format(8, format!("non-square images {rows}x{cols}")));
    }
    let expected = count * rows * cols;
    if r.len() < expected {
        return Err(Error::format(
            16,
            format!("image payload truncated: {} bytes, need {}", r.len(), expected),
        ));
    }
    let images: Vec<f32> = r[..expected].iter().map(|&b| b as f32 / 255.0).collect();

    let mut r = &lab_bytes[..];
    let magic = r.read_u32::<BigEndian>()?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            0,
            format!("label magic {magic}, expected {IDX_LABEL_MAGIC}"),
        ));
    }
    let lab_count = r.read_u32::<BigEndian>()? as usize;
    if lab_count != count {
        return Err(Error::format(
            4,
            format!("label count {lab_count} does not match image count {count}"),
        ));
    }
    if r.len() < count {
        return Err(Error::format(8, "label payload truncated".to_string()));
    }
    let labels = r[..count].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::format(8, format!("label {bad} out of range 0-9")));
    }
    Ok(LabeledImageSet {
        count,
        side: rows,
        images,
        labels,
    })
}

/// Standard MNIST file names under a directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: &str) -> Result<LabeledImageSet> {
    let dir = dir.as_ref();
    let (img, lab) = match split {
        "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test" => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        other => {
            return Err(Error::parameter(format!(
                "unknown split '{other}', expected train or test"
            )))
        }
    };
    load_mnist(dir.join(img), dir.join(lab))
}

/// Locate the MNIST directory: $PHOSFLOW_MNIST_DIR, then ./data/mnist
/// relative to the current and the workspace directory.
pub fn find_mnist_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("PHOSFLOW_MNIST_DIR") {
        let p = PathBuf::from(dir);
        if p.is_dir() {
            return Some(p);
        }
    }
    for candidate in ["data/mnist", "../data/mnist", "../../data/mnist"] {
        let p = PathBuf::from(candidate);
        if p.join("t10k-images-idx3-ubyte").is_file() {
            return Some(p);
        }
    }
    None
}

/// Area interpolation with fractional pixel overlap weights. Exact for
/// constant images and equal resolutions.
pub fn area_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    assert_eq!(src.len(), sh * sw);
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let overlaps = |s: usize, d: usize| -> Vec<Vec<(usize, f64)>> {
        // For each destination cell, the source cells it covers with weights
        // summing to 1.
        let scale = s as f64 / d as f64;
        (0..d)
            .map(|i| {
                let lo = i as f64 * scale;
                let hi = (i + 1) as f64 * scale;
                let mut ws = Vec::new();
                let mut c = lo.floor() as usize;
                while (c as f64) < hi && c < s {
                    let cover = (hi.min((c + 1) as f64) - lo.max(c as f64)).max(0.0);
                    if cover > 0.0 {
                        ws.push((c, cover / scale));
                    }
                    c += 1;
                }
                ws
            })
            .collect()
    };
    let row_w = overlaps(sh, dh);
    let col_w = overlaps(sw, dw);
    let mut out = vec![0.0f32; dh * dw];
    for (di, rws) in row_w.iter().enumerate() {
        for (dj, cws) in col_w.iter().enumerate() {
            let mut acc = 0.0f64;
            for &(si, rw) in rws {
                for &(sj, cw) in cws {
                    acc += rw * cw * src[si * sw + sj] as f64;
                }
            }
            out[di * dw + dj] = acc as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phosim::default_geometry;

    #[test]
    fn single_pair_with_zero_fraction_behavior() {
        // n = 1 sanity: whatever the drawn fraction, an inactive stimulus
        // must render to a zero percept; find a seed whose fraction rounds
        // to zero and check the chain end to end.
        let geo = default_geometry(9).unwrap();
        let mut zero_seed = None;
        for seed in 0..200u64 {
            let mut s = Stream::new(sub_seed(seed, 0));
            if (s.uniform01() * 81.0).round() as usize == 0 {
                zero_seed = Some(seed);
                break;
            }
        }
        let seed = zero_seed.expect("some seed draws an empty activation");
        let ds = PairDataset::generate(1, &geo, seed).unwrap();
        assert!(ds.stimulus_row(0).iter().all(|&v| v == 0.0));
        assert!(ds.percept_row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generated_amplitudes_are_in_range_and_sparse() {
        let geo = default_geometry(9).unwrap();
        let ds = PairDataset::generate(256, &geo, 7).unwrap();
        assert!(ds.stimuli.iter().all(|&v| (-3.0..=3.0).contains(&v)));
        assert!(ds.percepts.iter().all(|&v| v >= 0.0));
        let zeros = ds.stimuli.iter().filter(|&&v| v == 0.0).count();
        // expect roughly half the entries inactive under a uniform fraction
        let frac = zeros as f64 / ds.stimuli.len() as f64;
        assert!((0.3..0.7).contains(&frac), "inactive fraction {frac}");
    }

    #[test]
    fn active_amplitudes_pass_ks_test_against_uniform() {
        // Kolmogorov-Smirnov oracle at p > 0.01 over 1e5 active entries.
        let geo = default_geometry(9).unwrap();
        let ds = PairDataset::generate(3000, &geo, 11).unwrap();
        let mut active: Vec<f64> = ds
            .stimuli
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|&v| (v as f64 + 3.0) / 6.0)
            .collect();
        active.truncate(100_000);
        assert!(active.len() >= 100_000, "need 1e5 active entries");
        active.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = active.len() as f64;
        let mut d = 0.0f64;
        for (i, &u) in active.iter().enumerate() {
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d = d.max((u - lo).abs()).max((hi - u).abs());
        }
        // Asymptotic Kolmogorov p-value.
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..101 {
            let kf = k as f64;
            p += 2.0 * (-1.0f64).powi(k as i32 - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        }
        assert!(p > 0.01, "KS p-value {p}, D {d}");
    }

    #[test]
    fn generation_is_thread_count_invariant() {
        let geo = default_geometry(9).unwrap();
        let gen_with = |threads: usize| -> Vec<u8> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let ds = pool.install(|| PairDataset::generate(500, &geo, 42).unwrap());
            let mut buf = Vec::new();
            ds.write_to(&mut buf).unwrap();
            buf
        };
        let one = gen_with(1);
        let eight = gen_with(8);
        assert_eq!(one, eight, "dataset bytes differ across thread counts");
    }

    #[test]
    fn save_load_round_trip_and_staleness() {
        let geo = default_geometry(9).unwrap();
        let ds = PairDataset::generate(64, &geo, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.pfds");
        ds.save(&path).unwrap();
        let back = PairDataset::load(&path, Some(&geo)).unwrap();
        assert_eq!(back.stimuli, ds.stimuli);
        assert_eq!(back.percepts, ds.percepts);
        assert_eq!(back.normalization, ds.normalization);
        assert_eq!(back.seed, 3);
        // a different geometry must be rejected as stale
        let other = crate::phosim::build_geometry(
            575.0,
            2300.0,
            9,
            500.0,
            1550.0,
            crate::phosim::AxonParams::default(),
        )
        .unwrap();
        let err = PairDataset::load(&path, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::Stale(_)));
    }

    #[test]
    fn version_bump_is_rejected_with_hint() {
        let geo = default_geometry(9).unwrap();
        let ds = PairDataset::generate(4, &geo, 3).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        buf[4] = 99; // bump version field
        let err = PairDataset::read_from(&buf[..]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("regenerate"), "{msg}");
        // truncated payload
        let mut short = Vec::new();
        ds.write_to(&mut short).unwrap();
        short.truncate(short.len() - 3);
        assert!(PairDataset::read_from(&short[..]).is_err());
    }

    #[test]
    fn stored_percepts_match_rerenders() {
        let geo = default_geometry(9).unwrap();
        let ds = PairDataset::generate(100, &geo, 13).unwrap();
        let m = geo.effect_matrix();
        for i in 0..ds.count {
            let amps: Vec<f64> = ds.stimulus_row(i).iter().map(|&v| v as f64).collect();
            let percept = geo.render_with_matrix(&amps, &m).unwrap();
            for (a, &b) in percept.iter().zip(ds.percept_row(i)) {
                assert!(
                    (a - b as f64).abs() <= 1e-6 * a.abs().max(1.0),
                    "row {i}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn area_resize_identities() {
        // equal resolution is the identity
        let img: Vec<f32> = (0..81).map(|i| i as f32).collect();
        assert_eq!(area_resize(&img, 9, 9, 9, 9), img);
        // constant image stays constant under 28 -> 9
        let c = vec![0.37f32; 28 * 28];
        let small = area_resize(&c, 28, 28, 9, 9);
        for v in small {
            assert!((v - 0.37).abs() < 1e-6);
        }
        // mean is preserved (weights sum to 1 per cell)
        let mut s = crate::rng::Stream::new(1);
        let img: Vec<f32> = (0..784).map(|_| s.uniform01() as f32).collect();
        let down = area_resize(&img, 28, 28, 9, 9);
        let m1: f64 = img.iter().map(|&v| v as f64).sum::<f64>() / 784.0;
        let m2: f64 = down.iter().map(|&v| v as f64).sum::<f64>() / 81.0;
        assert!((m1 - m2).abs() < 1e-6);
    }

    #[test]
    fn idx_loader_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        // magic 2052 instead of 2051
        let mut bytes = vec![];
        bytes.extend(2052u32.to_be_bytes());
        bytes.extend(1u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend([0u8; 4]);
        std::fs::write(&img, &bytes).unwrap();
        std::fs::write(&lab, b"x").unwrap();
        let err = load_mnist(&img, &lab).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2052") && msg.contains("2051"), "{msg}");
    }

    #[test]
    fn idx_loader_parses_synthetic_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        let mut bytes = vec![];
        bytes.extend(IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend([0u8, 128, 255, 64, 1, 2, 3, 4]);
        std::fs::write(&img, &bytes).unwrap();
        let mut lbytes = vec![];
        lbytes.extend(IDX_LABEL_MAGIC.to_be_bytes());
        lbytes.extend(2u32.to_be_bytes());
        lbytes.extend([7u8, 3]);
        std::fs::write(&lab, &lbytes).unwrap();
        let set = load_mnist(&img, &lab).unwrap();
        assert_eq!(set.count, 2);
        assert_eq!(set.side, 2);
        assert_eq!(set.labels, vec![7, 3]);
        // byte 255 -> exactly 1.0; byte 128 -> 128/255 exactly
        assert_eq!(set.images[2], 1.0);
        assert_eq!(set.images[1], 128.0 / 255.0);
    }

    #[test]
    fn real_mnist_checksums_when_available() {
        // Reference pixel/label sums computed independently from the
        // canonical files; skips when the dataset is not on disk.
        let Some(dir) = find_mnist_dir() else {
            eprintln!("skipping: MNIST not found");
            return;
        };
        let test = load_mnist_dir(&dir, "test").unwrap();
        assert_eq!(test.count, 10_000);
        assert_eq!(test.labels.len(), 10_000);
        assert_eq!(test.side, 28);
        let pixel_sum: u64 = test
            .images
            .iter()
            .map(|&v| (v * 255.0).round() as u64)
            .sum();
        assert_eq!(pixel_sum, 264_923_200);
        let label_sum: u64 = test.labels.iter().map(|&l| l as u64).sum();
        assert_eq!(label_sum, 44_434);
        assert_eq!(&test.labels[..10], &[7, 2, 1, 0, 4, 1, 4, 9, 5, 9]);

        let train = load_mnist_dir(&dir, "train").unwrap();
        assert_eq!(train.count, 60_000);
        let pixel_sum: u64 = train
            .images
            .iter()
            .map(|&v| (v * 255.0).round() as u64)
            .sum();
        assert_eq!(pixel_sum, 1_567_298_545);
        let label_sum: u64 = train.labels.iter().map(|&l| l as u64).sum();
        assert_eq!(label_sum, 267_236);
    }

    #[test]
    fn downsampled_percepts_correlate_with_native_renders() {
        // Consistency of the two resolutions: area-averaged 28x28 percepts
        // against native 9x9 renders, Pearson r > 0.95 on random stimuli.
        let g28 = default_geometry(28).unwrap();
        let g9 = default_geometry(9).unwrap();
        let m28 = g28.effect_matrix();
        let m9 = g9.effect_matrix();
        let mut s = Stream::new(77);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..64 {
            let amps: Vec<f64> = (0..81)
                .map(|_| if s.uniform01() < 0.5 { s.uniform(-3.0, 3.0) } else { 0.0 })
                .collect();
            let p28 = g28.render_with_matrix(&amps, &m28).unwrap();
            let p9 = g9.render_with_matrix(&amps, &m9).unwrap();
            let p28f: Vec<f32> = p28.iter().map(|&v| v as f32).collect();
            let down = area_resize(&p28f, 28, 28, 9, 9);
            xs.extend(down.iter().map(|&v| v as f64));
            ys.extend(p9.iter().copied());
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            cov += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        let r = cov / (vx.sqrt() * vy.sqrt());
        assert!(r > 0.95, "Pearson r {r}");
    }
}
