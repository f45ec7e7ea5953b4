//! Fourier shell correlation, resolution estimates, pose errors and gauge
//! alignment of reconstructions.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode_to_rotation_batch, EncoderConfig, EncoderError, EncoderWeights};
use crate::fft::{self, signed_freq};
use crate::physics::{volume_fft, Volume};
use crate::sim::ParticleStack;
use crate::so3::{self, Mat3, RotationMatrix, So3Error, UnitQuaternion};

pub const DEFAULT_FSC_THRESHOLD: f64 = 0.143;

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsError {
    GridMismatch { a: usize, b: usize },
    PixelSizeMismatch { a: f64, b: f64 },
    Poses(So3Error),
    Encoder(EncoderError),
    EmptySplit,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::GridMismatch { a, b } => write!(f, "volumes have different grids ({a}^3 vs {b}^3)"),
            MetricsError::PixelSizeMismatch { a, b } => {
                write!(f, "volumes have different pixel sizes ({a} vs {b} A)")
            }
            MetricsError::Poses(e) => write!(f, "{e}"),
            MetricsError::Encoder(e) => write!(f, "{e}"),
            MetricsError::EmptySplit => f.write_str("no images to evaluate"),
        }
    }
}

impl core::error::Error for MetricsError {}

impl From<EncoderError> for MetricsError {
    fn from(e: EncoderError) -> Self {
        MetricsError::Encoder(e)
    }
}

impl From<So3Error> for MetricsError {
    fn from(e: So3Error) -> Self {
        MetricsError::Poses(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FscShell {
    /// Shell index: frequencies whose magnitude rounds to this many grid units.
    pub radius: usize,
    /// Cycles per pixel, `radius / n`.
    pub freq: f64,
    /// `n * pixel_size / radius` in angstrom (infinite for the DC shell).
    pub resolution: f64,
    pub fsc: f64,
    /// Number of Fourier coefficients in the shell.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FscCurve {
    pub n: usize,
    pub pixel_size: f64,
    /// Shells `0..=n/2` in increasing radius.
    pub shells: Vec<FscShell>,
}

impl FscCurve {
    pub fn values(&self) -> Vec<f64> {
        self.shells.iter().map(|s| s.fsc).collect()
    }

    pub fn resolution(&self, threshold: f64) -> f64 {
        resolution_from_values(&self.values(), self.n, self.pixel_size, threshold)
    }
}

fn check_pair(a: &Volume, b: &Volume) -> Result<(), MetricsError> {
    if a.n() != b.n() {
        return Err(MetricsError::GridMismatch { a: a.n(), b: b.n() });
    }
    if a.pixel_size() != b.pixel_size() {
        return Err(MetricsError::PixelSizeMismatch { a: a.pixel_size(), b: b.pixel_size() });
    }
    Ok(())
}

/// Shell index of every coefficient of an unshifted `n^3` spectrum, `None`
/// beyond the Nyquist sphere.
fn shell_indices(n: usize) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(n * n * n);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let (x, y, z) = (signed_freq(ix, n), signed_freq(iy, n), signed_freq(iz, n));
                let r = libm::round(libm::sqrt((x * x + y * y + z * z) as f64)) as usize;
                out.push((r <= n / 2).then_some(r));
            }
        }
    }
    out
}

/// Per-shell `Re(sum F1 conj(F2)) / sqrt(sum |F1|^2 sum |F2|^2)`; shells
/// where either map has no power report 0.
pub fn fsc(a: &Volume, b: &Volume) -> Result<FscCurve, MetricsError> {
    check_pair(a, b)?;
    let n = a.n();
    let (fa, fb) = (volume_fft(a, 1), volume_fft(b, 1));
    let (fa, fb) = (fa.tensor().as_complex(), fb.tensor().as_complex());
    let shells = n / 2 + 1;
    let (mut cross, mut pa, mut pb) = (vec![0.0; shells], vec![0.0; shells], vec![0.0; shells]);
    let mut count = vec![0usize; shells];
    for ((s, x), y) in shell_indices(n).into_iter().zip(fa).zip(fb) {
        let Some(r) = s else { continue };
        cross[r] += (x * y.conj()).re;
        pa[r] += x.norm_sqr();
        pb[r] += y.norm_sqr();
        count[r] += 1;
    }
    let shells = (0..shells)
        .filter(|&r| count[r] > 0)
        .map(|r| {
            let den = libm::sqrt(pa[r] * pb[r]);
            let v = if den > 0.0 { cross[r] / den } else { 0.0 };
            debug_assert!(v.abs() <= 1.0 + 1e-12, "fsc outside [-1, 1]: {v}");
            FscShell {
                radius: r,
                freq: r as f64 / n as f64,
                resolution: if r == 0 { f64::INFINITY } else { n as f64 * a.pixel_size() / r as f64 },
                fsc: v.clamp(-1.0, 1.0),
                count: count[r],
            }
        })
        .collect();
    Ok(FscCurve { n, pixel_size: a.pixel_size(), shells })
}

/// Resolution in angstrom where a curve sampled at shells `0, 1, ...` first
/// drops to `threshold` or below (searching from shell 1), with linear
/// interpolation of the crossing radius. A curve that never crosses gives
/// the Nyquist resolution `2 * pixel_size`; one already at or below the
/// threshold at shell 0 gives infinity.
pub fn resolution_from_values(values: &[f64], n: usize, pixel_size: f64, threshold: f64) -> f64 {
    if values.first().is_some_and(|&f0| f0 <= threshold) {
        return f64::INFINITY;
    }
    for r in 1..values.len() {
        if values[r] <= threshold {
            let (a, b) = (values[r - 1], values[r]);
            let radius = (r - 1) as f64 + (a - threshold) / (a - b);
            return n as f64 * pixel_size / radius;
        }
    }
    2.0 * pixel_size
}

pub fn resolution_at_threshold(curve: &FscCurve, threshold: f64) -> f64 {
    curve.resolution(threshold)
}

/// Global ambiguity between a reconstruction and the ground truth: poses
/// satisfy `gt ~ est' * rotation`, where `est' = est` or its mirror
/// conjugate when `flip` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gauge {
    pub rotation: RotationMatrix,
    pub flip: bool,
}

impl Gauge {
    pub const IDENTITY: Gauge = Gauge { rotation: RotationMatrix::IDENTITY, flip: false };

    /// Matrix `M` such that the aligned map is `A(s) = V_est(M s)`.
    pub fn volume_map(&self) -> Mat3 {
        let mut m = *self.rotation.matrix();
        if self.flip {
            for v in &mut m[2] {
                *v = -*v;
            }
        }
        m
    }

    /// Rotation that, applied to the estimated map as `V(Q^T s)`, aligns it
    /// (meaningful when `flip` is false).
    pub fn applied_rotation(&self) -> RotationMatrix {
        self.rotation.transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseReport {
    pub raw_mae_deg: f64,
    pub aligned_mae_deg: f64,
    pub gauge: Gauge,
}

/// Raw and gauge-aligned mean geodesic errors; alignment tries both
/// handedness options and keeps the better.
pub fn evaluate_poses(est: &[RotationMatrix], gt: &[RotationMatrix]) -> Result<PoseReport, MetricsError> {
    let raw = so3::mean_error_deg(est, gt, &RotationMatrix::IDENTITY);
    let (g, mae) = so3::align_pose_sets(est, gt)?;
    let mirrored: Vec<RotationMatrix> = est.iter().map(so3::mirror_conjugate).collect();
    let (gf, mae_f) = so3::align_pose_sets(&mirrored, gt)?;
    let (gauge, aligned) = if mae_f < mae {
        (Gauge { rotation: gf, flip: true }, mae_f)
    } else {
        (Gauge { rotation: g, flip: false }, mae)
    };
    Ok(PoseReport { raw_mae_deg: raw, aligned_mae_deg: aligned, gauge })
}

/// Encodes the images `indices` of `stack` and scores the predicted poses
/// against the recorded ones.
pub fn evaluate_encoder(
    stack: &ParticleStack,
    indices: core::ops::Range<usize>,
    config: &EncoderConfig,
    weights: &EncoderWeights,
) -> Result<PoseReport, MetricsError> {
    if indices.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    const BATCH: usize = 64;
    let mut est = Vec::with_capacity(indices.len());
    let idx: Vec<usize> = indices.collect();
    for chunk in idx.chunks(BATCH) {
        let images: Vec<&[f64]> = chunk.iter().map(|&i| stack.image(i)).collect();
        est.extend(encode_to_rotation_batch(config, weights, &images)?.into_iter().map(|p| p.rotation));
    }
    let gt: Vec<RotationMatrix> = idx.iter().map(|&i| stack.meta[i].rotation_matrix()).collect();
    evaluate_poses(&est, &gt)
}

/// Pearson correlation of two equally long samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / libm::sqrt(saa * sbb)
}

/// `A(s) = V(M s)` for an orthogonal `M`, resampled in Fourier space from
/// a transform zero-padded by `oversample`.
pub fn rotate_volume(v: &Volume, map: &Mat3, oversample: usize) -> Volume {
    let n = v.n();
    let fv = volume_fft(v, oversample);
    let s = oversample as f64;
    // A^(k) = F(M k) for orthogonal M.
    let mut coords = Vec::with_capacity(3 * n * n * n);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let k = [signed_freq(ix, n) as f64, signed_freq(iy, n) as f64, signed_freq(iz, n) as f64];
                let mk = so3::apply3(map, k);
                coords.extend(mk.map(|c| c * s));
            }
        }
    }
    let mut spec: Vec<Complex64> =
        crate::autodiff::kernels::gather_forward(fv.tensor().as_complex(), fv.grid(), &coords);
    fft::fft_last_axes(&mut spec, &[n, n, n], 3, true);
    let re: Vec<f64> = spec.iter().map(|z| z.re).collect();
    Volume::new(n, v.pixel_size(), fft::roll_half(&re, &[n, n, n], 3)).expect("finite resampled volume")
}

/// `A(s) = V(M s)` by trilinear interpolation in real space.
pub fn rotate_volume_trilinear(v: &Volume, map: &Mat3) -> Volume {
    Volume::from_fn(v.n(), v.pixel_size(), |p| v.sample(so3::apply3(map, p))).expect("finite resampled volume")
}

/// Points (relative to the center) at which alignment scores are evaluated.
fn score_points(n: usize, stride: usize) -> Vec<[f64; 3]> {
    let c = (n / 2) as f64;
    let mut out = Vec::new();
    for z in (0..n).step_by(stride) {
        for y in (0..n).step_by(stride) {
            for x in (0..n).step_by(stride) {
                out.push([x as f64 - c, y as f64 - c, z as f64 - c]);
            }
        }
    }
    out
}

struct Scorer<'a> {
    est: &'a Volume,
    points: Vec<[f64; 3]>,
    target: Vec<f64>,
}

impl<'a> Scorer<'a> {
    fn new(est: &'a Volume, gt: &Volume, stride: usize) -> Self {
        let points = score_points(est.n(), stride);
        let target = points.iter().map(|&p| gt.sample(p)).collect();
        Scorer { est, points, target }
    }

    fn score(&self, map: &Mat3) -> f64 {
        let vals: Vec<f64> = self.points.iter().map(|&p| self.est.sample(so3::apply3(map, p))).collect();
        correlation(&vals, &self.target)
    }
}

fn gauge_score(s: &Scorer<'_>, g: &Gauge) -> f64 {
    s.score(&g.volume_map())
}

/// Hill climbing over small right-multiplied rotations of the gauge.
fn refine(s: &Scorer<'_>, start: Gauge) -> (Gauge, f64) {
    let mut best = start;
    let mut best_score = gauge_score(s, &best);
    for step_deg in [8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.1] {
        let step = step_deg * core::f64::consts::PI / 180.0;
        loop {
            let mut improved = false;
            for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
                for sign in [-1.0, 1.0] {
                    let d = so3::quaternion_to_matrix(&UnitQuaternion::from_axis_angle(axis, sign * step));
                    let cand = Gauge { rotation: d.compose(&best.rotation), flip: best.flip };
                    let sc = gauge_score(s, &cand);
                    if sc > best_score {
                        best = cand;
                        best_score = sc;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    (best, best_score)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeAlignment {
    pub volume: Volume,
    pub gauge: Gauge,
    /// Real-space correlation of the returned map with the reference.
    pub correlation: f64,
    pub unaligned_correlation: f64,
}

/// Number of Haar samples per handedness in the global search.
const COARSE_CANDIDATES: usize = 3000;

/// Brings `est` into the frame of `gt`. Starts from `init` when given (for
/// example the pose-derived gauge), otherwise from the best of a coarse
/// global search over both handedness options; then refines locally by
/// maximizing real-space correlation. Never returns a map that correlates
/// worse than the unaligned one.
pub fn align_volumes(est: &Volume, gt: &Volume, init: Option<Gauge>) -> Result<VolumeAlignment, MetricsError> {
    check_pair(est, gt)?;
    let fine = Scorer::new(est, gt, 1);
    let starts: Vec<Gauge> = match init {
        Some(g) => vec![g, Gauge::IDENTITY],
        None => {
            let coarse = Scorer::new(est, gt, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let mut scored: Vec<(f64, Gauge)> = Vec::with_capacity(2 * COARSE_CANDIDATES + 2);
            for flip in [false, true] {
                scored.push((gauge_score(&coarse, &Gauge { rotation: RotationMatrix::IDENTITY, flip }), Gauge {
                    rotation: RotationMatrix::IDENTITY,
                    flip,
                }));
                for _ in 0..COARSE_CANDIDATES {
                    let g = Gauge { rotation: so3::sample_uniform_rotation(&mut rng), flip };
                    scored.push((gauge_score(&coarse, &g), g));
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            scored.into_iter().take(4).map(|(_, g)| g).collect()
        }
    };
    let (gauge, _) = starts
        .into_iter()
        .map(|g| refine(&fine, g))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one start");
    let unaligned = correlation(est.data(), gt.data());
    let volume = rotate_volume(est, &gauge.volume_map(), 2);
    let corr = correlation(volume.data(), gt.data());
    if corr >= unaligned {
        Ok(VolumeAlignment { volume, gauge, correlation: corr, unaligned_correlation: unaligned })
    } else {
        Ok(VolumeAlignment { volume: est.clone(), gauge: Gauge::IDENTITY, correlation: unaligned, unaligned_correlation: unaligned })
    }
}
