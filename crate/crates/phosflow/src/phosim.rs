//! Axon map forward model: renders a 9x9 electrode stimulus into a percept.
//!
//! Brightness at a pixel is carried by the retinal ganglion cell whose soma
//! sits at that pixel. Electrode current reaches any point of the cell's
//! axon, attenuated by a Gaussian of scale rho in distance to the electrode;
//! sensitivity falls off along the axon with scale lambda in arc length from
//! the soma. Signed electrode contributions add linearly per axon segment,
//! the segment maximum is taken, and the result is clamped at zero, so
//! negative amplitudes suppress phosphene elongation.

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub const ELECTRODE_SIDE: usize = 9;
pub const ELECTRODE_COUNT: usize = ELECTRODE_SIDE * ELECTRODE_SIDE;
/// Electrode pitch in micrometers.
pub const DEFAULT_SPACING_UM: f64 = 575.0;
/// Half-width of the pixel field in micrometers (matches the 9x9 grid span).
pub const DEFAULT_EXTENT_UM: f64 = 2300.0;
pub const DEFAULT_RHO_UM: f64 = 400.0;
pub const DEFAULT_LAMBDA_UM: f64 = 1550.0;

/// Optic disc location the axon bundles emanate from, in micrometers.
const OPTIC_DISC_UM: [f64; 2] = [4000.0, 0.0];
/// Radial range of the bundle spirals around the optic disc.
const BUNDLE_R_MIN_UM: f64 = 50.0;
const BUNDLE_R_MAX_UM: f64 = 9000.0;
/// Angular half-width of the bundle fan around the field direction.
const BUNDLE_FAN_RAD: f64 = 1.5;

/// Axon trajectory generator knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxonParams {
    /// Angular drift of a bundle over its full extent, in radians. Zero
    /// degenerates to straight radial lines toward the optic disc.
    pub curvature: f64,
    /// Number of bundles in the fan.
    pub bundles: usize,
    /// Discretization points along one bundle.
    pub bundle_points: usize,
    /// Segment points per per-pixel trajectory after resampling.
    pub segments: usize,
}

impl Default for AxonParams {
    fn default() -> Self {
        AxonParams {
            curvature: 0.5,
            bundles: 181,
            bundle_points: 161,
            segments: 41,
        }
    }
}

/// Electrode/pixel coordinates plus per-pixel axon trajectories.
#[derive(Debug, Clone)]
pub struct AxonMapGeometry {
    pub resolution: usize,
    pub rho: f64,
    pub lambda: f64,
    pub spacing: f64,
    pub extent: f64,
    pub params: AxonParams,
    /// 81 electrode centers, row-major on the 9x9 grid, in micrometers.
    pub electrodes: Vec<[f64; 2]>,
    /// resolution^2 pixel centers, row-major, in micrometers.
    pub pixels: Vec<[f64; 2]>,
    /// Per-pixel trajectories, flattened: pixel p owns
    /// trajectories[p*segments .. (p+1)*segments], ordered soma first.
    pub trajectories: Vec<[f64; 2]>,
    /// Cumulative arc length from the soma for each trajectory point.
    pub arcs: Vec<f64>,
}

/// Per-segment electrode weight table: row e holds
/// exp(-d(q,e)^2/2rho^2) * exp(-arc(q)^2/2lambda^2) for every segment q.
#[derive(Debug, Clone)]
pub struct EffectMatrix {
    /// [ELECTRODE_COUNT x segment_total], row-major by electrode.
    pub weights: Vec<f64>,
    pub segment_total: usize,
    pub segments_per_pixel: usize,
    pub pixel_count: usize,
}

/// Deterministic geometry for the virtual implant.
pub fn build_geometry(
    grid_spacing_um: f64,
    field_extent_um: f64,
    resolution: usize,
    rho: f64,
    lambda: f64,
    params: AxonParams,
) -> Result<AxonMapGeometry> {
    if grid_spacing_um <= 0.0 || field_extent_um <= 0.0 {
        return Err(Error::parameter(format!(
            "spacing and extent must be positive, got {grid_spacing_um}, {field_extent_um}"
        )));
    }
    if rho <= 0.0 || lambda <= 0.0 {
        return Err(Error::parameter(format!(
            "rho and lambda must be positive, got {rho}, {lambda}"
        )));
    }
    if resolution != 9 && resolution != 28 {
        return Err(Error::parameter(format!(
            "percept resolution must be 9 or 28, got {resolution}"
        )));
    }
    if params.segments == 0 || params.bundles == 0 || params.bundle_points < 2 {
        return Err(Error::parameter("degenerate axon parameters"));
    }

    let mut electrodes = Vec::with_capacity(ELECTRODE_COUNT);
    let half = (ELECTRODE_SIDE as f64 - 1.0) / 2.0;
    for row in 0..ELECTRODE_SIDE {
        for col in 0..ELECTRODE_SIDE {
            electrodes.push([
                (col as f64 - half) * grid_spacing_um,
                (row as f64 - half) * grid_spacing_um,
            ]);
        }
    }

    let mut pixels = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        for col in 0..resolution {
            let t = |i: usize| {
                if resolution == 1 {
                    0.0
                } else {
                    -field_extent_um + 2.0 * field_extent_um * i as f64 / (resolution - 1) as f64
                }
            };
            pixels.push([t(col), t(row)]);
        }
    }

    let bundles = bundle_fan(&params);
    let mut trajectories = Vec::with_capacity(pixels.len() * params.segments);
    let mut arcs = Vec::with_capacity(pixels.len() * params.segments);
    for p in &pixels {
        let (traj, arc) = pixel_trajectory(*p, &bundles, &params);
        trajectories.extend(traj);
        arcs.extend(arc);
    }

    Ok(AxonMapGeometry {
        resolution,
        rho,
        lambda,
        spacing: grid_spacing_um,
        extent: field_extent_um,
        params,
        electrodes,
        pixels,
        trajectories,
        arcs,
    })
}

/// Default geometry at the paper's decay constants.
pub fn default_geometry(resolution: usize) -> Result<AxonMapGeometry> {
    build_geometry(
        DEFAULT_SPACING_UM,
        DEFAULT_EXTENT_UM,
        resolution,
        DEFAULT_RHO_UM,
        DEFAULT_LAMBDA_UM,
        AxonParams::default(),
    )
}

/// The fan of log-spiral bundle polylines, ordered by initial angle.
///
/// Bundles are parameterized by their angular offset `delta` from the
/// field direction and drift by `curvature * u` away from the horizontal
/// meridian, mirror-symmetrically: the bundle at -delta is the y-reflection
/// of the bundle at +delta, and the meridian bundle stays straight. Each
/// bundle carries its drift sign for nearest-bundle branch assignment.
fn bundle_fan(params: &AxonParams) -> Vec<(Vec<[f64; 2]>, f64)> {
    let mut fan = Vec::with_capacity(params.bundles);
    for b in 0..params.bundles {
        let frac = if params.bundles == 1 {
            0.5
        } else {
            b as f64 / (params.bundles - 1) as f64
        };
        let delta = -BUNDLE_FAN_RAD + 2.0 * BUNDLE_FAN_RAD * frac;
        let side = if delta > 0.0 {
            1.0
        } else if delta < 0.0 {
            -1.0
        } else {
            0.0
        };
        let mut path = Vec::with_capacity(params.bundle_points);
        for i in 0..params.bundle_points {
            let u = i as f64 / (params.bundle_points - 1) as f64;
            let r = BUNDLE_R_MIN_UM * (BUNDLE_R_MAX_UM / BUNDLE_R_MIN_UM).powf(u);
            let psi = std::f64::consts::PI + delta + params.curvature * u * side;
            path.push([
                OPTIC_DISC_UM[0] + r * psi.cos(),
                OPTIC_DISC_UM[1] + r * psi.sin(),
            ]);
        }
        fan.push((path, side));
    }
    fan
}

/// Soma-first trajectory for one pixel.
///
/// The nearest bundle in the fan assigns the pixel its curvature branch
/// (drift direction); the trajectory itself is the spiral of that branch
/// passing exactly through the pixel, walked toward the disc and resampled
/// to `segments` points at equal arc spacing. With zero curvature this is
/// the straight radial line from the soma to the optic disc.
fn pixel_trajectory(
    pixel: [f64; 2],
    fan: &[(Vec<[f64; 2]>, f64)],
    params: &AxonParams,
) -> (Vec<[f64; 2]>, Vec<f64>) {
    let mut best = (0usize, f64::INFINITY);
    for (bi, (path, _)) in fan.iter().enumerate() {
        for q in path.iter() {
            let d2 = (q[0] - pixel[0]).powi(2) + (q[1] - pixel[1]).powi(2);
            if d2 < best.1 {
                best = (bi, d2);
            }
        }
    }
    let side = fan[best.0].1;
    let v = [pixel[0] - OPTIC_DISC_UM[0], pixel[1] - OPTIC_DISC_UM[1]];
    let r_p = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let theta = v[1].atan2(v[0]);
    let log_span = (BUNDLE_R_MAX_UM / BUNDLE_R_MIN_UM).ln();
    let u_p = (r_p / BUNDLE_R_MIN_UM).ln() / log_span;

    let raw = (4 * params.segments).max(2);
    let mut poly = Vec::with_capacity(raw);
    poly.push(pixel);
    for k in 1..raw {
        let u = u_p * (1.0 - k as f64 / (raw - 1) as f64);
        let r = BUNDLE_R_MIN_UM * (log_span * u).exp();
        let psi = theta + params.curvature * (u - u_p) * side;
        poly.push([
            OPTIC_DISC_UM[0] + r * psi.cos(),
            OPTIC_DISC_UM[1] + r * psi.sin(),
        ]);
    }
    resample_polyline(&poly, params.segments)
}

/// Equal-arc-length resampling that keeps both endpoints.
fn resample_polyline(poly: &[[f64; 2]], n: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    let mut cum = Vec::with_capacity(poly.len());
    cum.push(0.0);
    for w in poly.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let mut points = Vec::with_capacity(n);
    let mut arcs = Vec::with_capacity(n);
    if total == 0.0 {
        // Degenerate trajectory collapsed onto the soma.
        for _ in 0..n {
            points.push(poly[0]);
            arcs.push(0.0);
        }
        return (points, arcs);
    }
    let mut seg = 0usize;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let t = if span > 0.0 { (target - cum[seg]) / span } else { 0.0 };
        points.push([
            poly[seg][0] + t * (poly[seg + 1][0] - poly[seg][0]),
            poly[seg][1] + t * (poly[seg + 1][1] - poly[seg][1]),
        ]);
        arcs.push(target);
    }
    (points, arcs)
}

impl AxonMapGeometry {
    pub fn pixel_count(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn segment_total(&self) -> usize {
        self.pixel_count() * self.params.segments
    }

    /// SHA-256 over a canonical serialization; identifies the geometry in
    /// dataset headers.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut put = |v: f64| h.update(v.to_le_bytes());
        put(self.resolution as f64);
        put(self.rho);
        put(self.lambda);
        put(self.spacing);
        put(self.extent);
        put(self.params.curvature);
        put(self.params.bundles as f64);
        put(self.params.bundle_points as f64);
        put(self.params.segments as f64);
        for p in self.electrodes.iter().chain(&self.pixels).chain(&self.trajectories) {
            put(p[0]);
            put(p[1]);
        }
        for &a in &self.arcs {
            put(a);
        }
        h.finalize().into()
    }

    /// Precompute the per-segment electrode weight table.
    ///
    /// Rendering through the table is elementwise-equal to direct Eq-style
    /// evaluation up to float rounding; the table just hoists the
    /// exponentials out of the per-sample loop.
    pub fn effect_matrix(&self) -> EffectMatrix {
        let s_total = self.segment_total();
        let two_rho2 = 2.0 * self.rho * self.rho;
        let two_lambda2 = 2.0 * self.lambda * self.lambda;
        let mut weights = vec![0.0f64; ELECTRODE_COUNT * s_total];
        weights
            .par_chunks_mut(s_total)
            .enumerate()
            .for_each(|(e, row)| {
                let ep = self.electrodes[e];
                for q in 0..s_total {
                    let t = self.trajectories[q];
                    let d2 = (t[0] - ep[0]).powi(2) + (t[1] - ep[1]).powi(2);
                    let arc = self.arcs[q];
                    row[q] = (-d2 / two_rho2).exp() * (-(arc * arc) / two_lambda2).exp();
                }
            });
        EffectMatrix {
            weights,
            segment_total: s_total,
            segments_per_pixel: self.params.segments,
            pixel_count: self.pixel_count(),
        }
    }

    /// Per-segment pre-clamp contributions by direct evaluation.
    pub fn segment_field(&self, amps: &[f64]) -> Result<Vec<f64>> {
        self.check_stimulus(amps)?;
        let two_rho2 = 2.0 * self.rho * self.rho;
        let two_lambda2 = 2.0 * self.lambda * self.lambda;
        let s_total = self.segment_total();
        let mut field = vec![0.0f64; s_total];
        field.par_iter_mut().enumerate().for_each(|(q, out)| {
            let t = self.trajectories[q];
            let mut bracket = 0.0;
            for (e, &amp) in amps.iter().enumerate() {
                if amp != 0.0 {
                    let ep = self.electrodes[e];
                    let d2 = (t[0] - ep[0]).powi(2) + (t[1] - ep[1]).powi(2);
                    bracket += amp * (-d2 / two_rho2).exp();
                }
            }
            let arc = self.arcs[q];
            *out = bracket * (-(arc * arc) / two_lambda2).exp();
        });
        Ok(field)
    }

    /// Percept by direct evaluation: per pixel the segment maximum of the
    /// linear electrode combination, clamped at zero.
    pub fn render(&self, amps: &[f64]) -> Result<Vec<f64>> {
        let field = self.segment_field(amps)?;
        Ok(clamp_max_per_pixel(
            &field,
            self.params.segments,
            self.pixel_count(),
        ))
    }

    /// Percept through the precomputed table.
    pub fn render_with_matrix(&self, amps: &[f64], m: &EffectMatrix) -> Result<Vec<f64>> {
        self.check_stimulus(amps)?;
        let mut field = vec![0.0f64; m.segment_total];
        for (e, &amp) in amps.iter().enumerate() {
            if amp != 0.0 {
                let row = &m.weights[e * m.segment_total..(e + 1) * m.segment_total];
                for (f, &w) in field.iter_mut().zip(row) {
                    *f += amp * w;
                }
            }
        }
        Ok(clamp_max_per_pixel(
            &field,
            m.segments_per_pixel,
            m.pixel_count,
        ))
    }

    /// Batch render through the table, parallel over samples. Rows of
    /// `stims` are 81-wide; the output rows are pixel_count wide.
    pub fn render_batch(&self, stims: &[f64], count: usize, m: &EffectMatrix) -> Vec<f64> {
        let px = m.pixel_count;
        let mut out = vec![0.0f64; count * px];
        out.par_chunks_mut(px)
            .zip(stims.par_chunks(ELECTRODE_COUNT))
            .for_each(|(orow, amps)| {
                let mut field = vec![0.0f64; m.segment_total];
                for (e, &amp) in amps.iter().enumerate() {
                    if amp != 0.0 {
                        let row = &m.weights[e * m.segment_total..(e + 1) * m.segment_total];
                        for (f, &w) in field.iter_mut().zip(row) {
                            *f += amp * w;
                        }
                    }
                }
                let clamped = clamp_max_per_pixel(&field, m.segments_per_pixel, px);
                orow.copy_from_slice(&clamped);
            });
        out
    }

    /// The effect matrix as a [81, segment_total] tensor for differentiable
    /// rendering on a tape (matmul, then max over segment groups, then
    /// clamp at zero).
    pub fn effect_matrix_tensor<T: Real>(&self, m: &EffectMatrix) -> Tensor<T> {
        Tensor::from_f64(vec![ELECTRODE_COUNT, m.segment_total], &m.weights)
            .expect("consistent table dims")
    }

    /// Store the generating parameters; trajectories rebuild deterministically.
    pub fn write_checkpoint(&self, ck: &mut crate::checkpoint::Checkpoint, prefix: &str) {
        ck.insert_scalar(&format!("{prefix}.resolution"), self.resolution as f64);
        ck.insert_scalar(&format!("{prefix}.rho"), self.rho);
        ck.insert_scalar(&format!("{prefix}.lambda"), self.lambda);
        ck.insert_scalar(&format!("{prefix}.spacing"), self.spacing);
        ck.insert_scalar(&format!("{prefix}.extent"), self.extent);
        ck.insert_scalar(&format!("{prefix}.curvature"), self.params.curvature);
        ck.insert_scalar(&format!("{prefix}.bundles"), self.params.bundles as f64);
        ck.insert_scalar(
            &format!("{prefix}.bundle_points"),
            self.params.bundle_points as f64,
        );
        ck.insert_scalar(&format!("{prefix}.segments"), self.params.segments as f64);
        let fp: Vec<f64> = self.fingerprint().iter().map(|&b| b as f64).collect();
        ck.insert_tensor(
            &format!("{prefix}.fingerprint"),
            &Tensor::<f64>::new(vec![32], fp).expect("fingerprint dims"),
        );
    }

    pub fn read_checkpoint(
        ck: &crate::checkpoint::Checkpoint,
        prefix: &str,
    ) -> Result<AxonMapGeometry> {
        let scalar = |name: &str| -> Result<f64> { ck.get(&format!("{prefix}.{name}"))?.scalar() };
        let geo = build_geometry(
            scalar("spacing")?,
            scalar("extent")?,
            scalar("resolution")? as usize,
            scalar("rho")?,
            scalar("lambda")?,
            AxonParams {
                curvature: scalar("curvature")?,
                bundles: scalar("bundles")? as usize,
                bundle_points: scalar("bundle_points")? as usize,
                segments: scalar("segments")? as usize,
            },
        )?;
        let stored = ck.get(&format!("{prefix}.fingerprint"))?;
        let rebuilt = geo.fingerprint();
        let matches = stored
            .data
            .iter()
            .zip(rebuilt.iter())
            .all(|(&a, &b)| a as u8 == b);
        if !matches {
            return Err(Error::Stale(
                "stored geometry fingerprint does not match the rebuilt geometry".into(),
            ));
        }
        Ok(geo)
    }

    fn check_stimulus(&self, amps: &[f64]) -> Result<()> {
        if amps.len() != ELECTRODE_COUNT {
            return Err(Error::shape(
                "stimulus electrode count",
                &[amps.len()],
                &[ELECTRODE_COUNT],
            ));
        }
        if amps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("stimulus amplitudes".into()));
        }
        Ok(())
    }
}

fn clamp_max_per_pixel(field: &[f64], segments: usize, pixels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels);
    for p in 0..pixels {
        let chunk = &field[p * segments..(p + 1) * segments];
        let mut best = f64::NEG_INFINITY;
        for &v in chunk {
            if v > best {
                best = v;
            }
        }
        out.push(best.max(0.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geometry() -> AxonMapGeometry {
        default_geometry(9).unwrap()
    }

    #[test]
    fn build_geometry_has_81_electrodes_and_pixels() {
        let g = small_geometry();
        assert_eq!(g.electrodes.len(), 81);
        assert_eq!(g.pixels.len(), 81);
        assert_eq!(g.rho, 400.0);
        assert_eq!(g.lambda, 1550.0);
        assert_eq!(g.trajectories.len(), 81 * 41);
        // 9x9 pixel centers coincide with the electrode grid.
        for (p, e) in g.pixels.iter().zip(&g.electrodes) {
            assert!((p[0] - e[0]).abs() < 1e-9 && (p[1] - e[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(build_geometry(0.0, 2300.0, 9, 400.0, 1550.0, AxonParams::default()).is_err());
        assert!(build_geometry(575.0, -1.0, 9, 400.0, 1550.0, AxonParams::default()).is_err());
        assert!(build_geometry(575.0, 2300.0, 9, 0.0, 1550.0, AxonParams::default()).is_err());
        assert!(build_geometry(575.0, 2300.0, 10, 400.0, 1550.0, AxonParams::default()).is_err());
    }

    #[test]
    fn zero_curvature_gives_radial_trajectories() {
        let params = AxonParams {
            curvature: 0.0,
            ..AxonParams::default()
        };
        let g = build_geometry(575.0, 2300.0, 9, 400.0, 1550.0, params).unwrap();
        // Every trajectory point should be collinear with soma and disc.
        for p in 0..g.pixel_count() {
            let soma = g.pixels[p];
            let to_disc = [OPTIC_DISC_UM[0] - soma[0], OPTIC_DISC_UM[1] - soma[1]];
            for s in 1..g.params.segments {
                let q = g.trajectories[p * g.params.segments + s];
                let v = [q[0] - soma[0], q[1] - soma[1]];
                let cross = to_disc[0] * v[1] - to_disc[1] * v[0];
                let scale = (to_disc[0].powi(2) + to_disc[1].powi(2)).sqrt()
                    * (v[0].powi(2) + v[1].powi(2)).sqrt().max(1.0);
                assert!(
                    cross.abs() / scale < 2e-2,
                    "pixel {p} segment {s} off-radial: {}",
                    cross.abs() / scale
                );
            }
        }
    }

    #[test]
    fn mirrored_pixels_have_mirrored_trajectories() {
        let g = small_geometry();
        let seg = g.params.segments;
        // Pixel (row, col) mirrors to (8 - row, col) across the horizontal
        // meridian; skip the meridian row itself.
        for row in 0..4 {
            for col in 0..9 {
                let p = row * 9 + col;
                let q = (8 - row) * 9 + col;
                for s in 0..seg {
                    let a = g.trajectories[p * seg + s];
                    let b = g.trajectories[q * seg + s];
                    assert!(
                        (a[0] - b[0]).abs() < 1e-6 && (a[1] + b[1]).abs() < 1e-6,
                        "pixel {p}/{q} segment {s}: {a:?} vs {b:?}"
                    );
                    let aa = g.arcs[p * seg + s];
                    let ab = g.arcs[q * seg + s];
                    assert!((aa - ab).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_stimulus_renders_zero_percept() {
        let g = small_geometry();
        let percept = g.render(&[0.0; 81]).unwrap();
        assert!(percept.iter().all(|&v| v == 0.0));
        let m = g.effect_matrix();
        let percept = g.render_with_matrix(&[0.0; 81], &m).unwrap();
        assert!(percept.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_amp_at_coincident_segment_gives_unit_intensity() {
        // Center electrode 40 coincides with pixel 40's soma on the 9x9 grid,
        // where both exponents vanish.
        let g = small_geometry();
        let mut amps = [0.0; 81];
        amps[40] = 1.0;
        let percept = g.render(&amps).unwrap();
        assert!(
            (percept[40] - 1.0).abs() < 1e-12,
            "center intensity {}",
            percept[40]
        );
        // No pixel can exceed the stimulating amplitude for a single electrode.
        assert!(percept.iter().all(|&v| v <= 1.0 + 1e-12));
    }

    #[test]
    fn all_negative_stimulus_renders_zero() {
        let g = small_geometry();
        let mut s = crate::rng::Stream::new(9);
        let amps: Vec<f64> = (0..81).map(|_| -s.uniform(0.0, 3.0) - 1e-6).collect();
        let percept = g.render(&amps).unwrap();
        assert!(percept.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn electrode_count_mismatch_is_conformance_error() {
        let g = small_geometry();
        assert!(g.render(&[1.0; 80]).is_err());
        assert!(g.render(&[f64::NAN; 81]).is_err());
    }

    #[test]
    fn matrix_render_matches_direct_render() {
        let g = default_geometry(28).unwrap();
        let m = g.effect_matrix();
        let mut s = crate::rng::Stream::new(33);
        for _ in 0..20 {
            let amps: Vec<f64> = (0..81).map(|_| s.uniform(-3.0, 3.0)).collect();
            let direct = g.render(&amps).unwrap();
            let tabled = g.render_with_matrix(&amps, &m).unwrap();
            for (d, t) in direct.iter().zip(&tabled) {
                let denom = d.abs().max(1e-12);
                assert!((d - t).abs() / denom < 1e-9, "{d} vs {t}");
            }
        }
    }

    #[test]
    fn preclamp_segment_field_is_linear() {
        let g = small_geometry();
        let mut s = crate::rng::Stream::new(5);
        let x: Vec<f64> = (0..81).map(|_| s.uniform(-3.0, 3.0)).collect();
        let y: Vec<f64> = (0..81).map(|_| s.uniform(-3.0, 3.0)).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(&xv, &yv)| a * xv + b * yv).collect();
        let fx = g.segment_field(&x).unwrap();
        let fy = g.segment_field(&y).unwrap();
        let fmix = g.segment_field(&mix).unwrap();
        for i in 0..fx.len() {
            let want = a * fx[i] + b * fy[i];
            let denom = want.abs().max(1e-9);
            assert!(
                (fmix[i] - want).abs() / denom < 1e-9,
                "segment {i}: {} vs {want}",
                fmix[i]
            );
        }
    }

    #[test]
    fn doubling_nonnegative_stimulus_doubles_preclamp_contributions() {
        let g = small_geometry();
        let mut s = crate::rng::Stream::new(6);
        let x: Vec<f64> = (0..81).map(|_| s.uniform(0.0, 3.0)).collect();
        let x2: Vec<f64> = x.iter().map(|&v| 2.0 * v).collect();
        let f1 = g.segment_field(&x).unwrap();
        let f2 = g.segment_field(&x2).unwrap();
        for (a, b) in f1.iter().zip(&f2) {
            assert!((2.0 * a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn fingerprint_tracks_geometry_changes() {
        let a = default_geometry(9).unwrap().fingerprint();
        let b = default_geometry(9).unwrap().fingerprint();
        assert_eq!(a, b);
        let c = build_geometry(575.0, 2300.0, 9, 410.0, 1550.0, AxonParams::default())
            .unwrap()
            .fingerprint();
        assert_ne!(a, c);
    }
}
