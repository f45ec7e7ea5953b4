//! Synthetic particle stacks from Gaussian-blob phantoms.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::physics::{CtfParams, Decoder, DecoderConfig, ImagingParams, OpticsConfig, PhysicsError, Volume};
use crate::so3::{self, RotationMatrix, UnitQuaternion};

#[derive(Clone, Debug, PartialEq)]
pub enum SimError {
    ConstantImage,
    InvalidPhantom(&'static str),
    InvalidDataset(&'static str),
    Physics(PhysicsError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::ConstantImage => f.write_str("cannot set an SNR on a constant image"),
            SimError::InvalidPhantom(m) => write!(f, "invalid phantom: {m}"),
            SimError::InvalidDataset(m) => write!(f, "invalid dataset config: {m}"),
            SimError::Physics(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SimError {}

impl From<PhysicsError> for SimError {
    fn from(e: PhysicsError) -> Self {
        SimError::Physics(e)
    }
}

/// Isotropic Gaussian `amplitude * exp(-|r - c|^2 / (2 sigma^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    /// Center as a fraction of the box along (x, y, z); 0.5 is the center voxel.
    pub center: [f64; 3],
    /// Standard deviation in voxels.
    pub sigma: f64,
    pub amplitude: f64,
}

impl BlobSpec {
    /// Analytic integral over all space, in voxel units.
    pub fn mass(&self) -> f64 {
        self.amplitude * libm::pow(2.0 * PI, 1.5) * self.sigma * self.sigma * self.sigma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub n: usize,
    pub pixel_size: f64,
    pub blobs: Vec<BlobSpec>,
    /// Seed the blob layout was drawn from, when it was drawn at random.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Layout of the default phantom on a 32-voxel box: offsets from the center
/// in voxels, sigma in voxels, amplitude. No two blobs share a radius, so no
/// proper rotation maps the arrangement to itself.
const DEFAULT_BLOBS: [([f64; 3], f64, f64); 5] = [
    ([0.0, 0.0, 0.0], 2.0, 1.0),
    ([5.0, 0.0, 0.0], 1.5, 0.8),
    ([0.0, 4.0, 1.0], 1.5, 0.6),
    ([-3.0, -2.0, 4.0], 1.2, 0.9),
    ([1.0, -4.0, -3.0], 1.8, 0.5),
];

impl PhantomSpec {
    /// The default asymmetric five-blob phantom, scaled with the box.
    pub fn five_blob(n: usize, pixel_size: f64) -> Self {
        let s = n as f64 / 32.0;
        let blobs = DEFAULT_BLOBS
            .iter()
            .map(|&(c, sigma, amplitude)| BlobSpec {
                center: c.map(|v| 0.5 + v * s / n as f64),
                sigma: sigma * s,
                amplitude,
            })
            .collect();
        PhantomSpec { n, pixel_size, blobs, seed: None }
    }

    /// `count` blobs with centers within 0.2 of the box center, sigma in
    /// [1, 2] voxels (scaled with the box) and amplitude in [0.5, 1].
    pub fn random(n: usize, pixel_size: f64, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = n as f64 / 32.0;
        let blobs = (0..count)
            .map(|_| BlobSpec {
                center: core::array::from_fn(|_| 0.5 + rng.gen_range(-0.2..0.2)),
                sigma: rng.gen_range(1.0..2.0) * s,
                amplitude: rng.gen_range(0.5..1.0),
            })
            .collect();
        PhantomSpec { n, pixel_size, blobs, seed: Some(seed) }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.n.is_power_of_two() || self.n < 4 {
            return Err(SimError::InvalidPhantom("box size must be a power of two >= 4"));
        }
        if !(self.pixel_size > 0.0) {
            return Err(SimError::InvalidPhantom("pixel size must be positive"));
        }
        if self.blobs.is_empty() {
            return Err(SimError::InvalidPhantom("at least one blob is required"));
        }
        for b in &self.blobs {
            if !b.center.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(SimError::InvalidPhantom("blob centers must lie inside the box"));
            }
            if !(b.sigma > 0.5) {
                return Err(SimError::InvalidPhantom("blob sigma must exceed 0.5 voxel"));
            }
            if !b.amplitude.is_finite() {
                return Err(SimError::InvalidPhantom("blob amplitude must be finite"));
            }
        }
        Ok(())
    }

    /// Continuous density at a point given in voxels from the center voxel.
    pub fn density(&self, p: [f64; 3]) -> f64 {
        let n = self.n as f64;
        let half = (self.n / 2) as f64;
        self.blobs
            .iter()
            .map(|b| {
                let d2: f64 = (0..3).map(|i| (p[i] - (b.center[i] * n - half)).powi(2)).sum();
                b.amplitude * libm::exp(-d2 / (2.0 * b.sigma * b.sigma))
            })
            .sum()
    }

    /// Largest sampled value, a proxy for the density scale.
    pub fn peak(&self) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let half = (self.n / 2) as f64;
                self.density(b.center.map(|c| c * self.n as f64 - half))
            })
            .fold(0.0, f64::max)
    }
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume, SimError> {
    spec.validate()?;
    Ok(Volume::from_fn(spec.n, spec.pixel_size, |p| spec.density(p))?)
}

/// Adds white Gaussian noise with variance `Var(img) / 10^(snr_db / 10)`;
/// returns the noisy image and the noise standard deviation.
pub fn add_noise_to_snr<R: Rng + ?Sized>(img: &[f64], snr_db: f64, rng: &mut R) -> Result<(Vec<f64>, f64), SimError> {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(SimError::ConstantImage);
    }
    let sigma = libm::sqrt(var / libm::pow(10.0, snr_db / 10.0));
    let noisy = img
        .iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect();
    Ok((noisy, sigma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub n: usize,
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Defocus range in micrometres; each image draws one defocus uniformly
    /// (no astigmatism).
    #[serde(default)]
    pub ctf_range_um: Option<(f64, f64)>,
    /// Standard deviation of Gaussian in-plane shifts, in pixels.
    #[serde(default)]
    pub shift_sigma_px: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default = "simulation_decoder")]
    pub decoder: DecoderConfig,
}

fn default_train_fraction() -> f64 {
    0.9
}

/// Projector settings used to synthesize data: the CTF is applied on a
/// twice-padded image.
pub fn simulation_decoder() -> DecoderConfig {
    DecoderConfig { oversample: 2, ctf_pad: 2 }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_images == 0 {
            return Err(SimError::InvalidDataset("n_images must be positive"));
        }
        if let Some((lo, hi)) = self.ctf_range_um {
            if !(lo > 0.0 && lo <= hi) {
                return Err(SimError::InvalidDataset("ctf_range_um needs 0 < lo <= hi"));
            }
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return Err(SimError::InvalidDataset("snr_db must be finite"));
            }
        }
        if !(self.shift_sigma_px >= 0.0) {
            return Err(SimError::InvalidDataset("shift_sigma_px must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(SimError::InvalidDataset("train_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Number of leading images assigned to the training split.
    pub fn n_train(&self) -> usize {
        libm::round(self.n_images as f64 * self.train_fraction) as usize
    }
}

/// Ground truth and acquisition record of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParticleMeta {
    pub index: usize,
    pub rotation: UnitQuaternion,
    pub shift: [f64; 2],
    pub ctf: Option<CtfParams>,
    /// Noise standard deviation (0 for clean images).
    pub sigma: f64,
    pub snr_db: Option<f64>,
}

impl ParticleMeta {
    pub fn rotation_matrix(&self) -> RotationMatrix {
        so3::quaternion_to_matrix(&self.rotation)
    }

    pub fn imaging(&self) -> ImagingParams {
        ImagingParams { rotation: self.rotation_matrix(), shift: self.shift, ctf: self.ctf }
    }
}

/// Images `[count, n, n]` with one metadata row each; the first `n_train`
/// images form the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleStack {
    pub n: usize,
    pub pixel_size: f64,
    pub images: Vec<f64>,
    pub meta: Vec<ParticleMeta>,
    pub n_train: usize,
}

impl ParticleStack {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let px = self.n * self.n;
        &self.images[i * px..(i + 1) * px]
    }

    pub fn train_indices(&self) -> core::ops::Range<usize> {
        0..self.n_train
    }

    pub fn test_indices(&self) -> core::ops::Range<usize> {
        self.n_train..self.len()
    }
}

/// Random stream for image `index`, independent of every other index.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Draw {
    meta: ParticleMeta,
    noise_rng: ChaCha8Rng,
}

fn draw(cfg: &DatasetConfig, index: usize) -> Draw {
    let mut rng = image_rng(cfg.seed, index);
    let rotation = so3::sample_uniform_rotation(&mut rng).to_quaternion();
    let shift = if cfg.shift_sigma_px > 0.0 {
        let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        [a * cfg.shift_sigma_px, b * cfg.shift_sigma_px]
    } else {
        [0.0, 0.0]
    };
    let ctf = cfg.ctf_range_um.map(|(lo, hi)| {
        let d = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        CtfParams { d1_um: d, d2_um: d, alpha_rad: 0.0 }
    });
    let meta = ParticleMeta { index, rotation, shift, ctf, sigma: 0.0, snr_db: cfg.snr_db };
    Draw { meta, noise_rng: rng }
}

pub fn generate_dataset(vol: &Volume, cfg: &DatasetConfig, optics: &OpticsConfig) -> Result<ParticleStack, SimError> {
    cfg.validate()?;
    if vol.n() != cfg.n {
        return Err(SimError::InvalidDataset("volume size differs from image size"));
    }
    let decoder = Decoder::new(cfg.n, cfg.decoder, *optics)?;
    let fv = decoder.transform(vol);
    let px = cfg.n * cfg.n;
    let mut images = Vec::with_capacity(cfg.n_images * px);
    let mut meta = Vec::with_capacity(cfg.n_images);
    const CHUNK: usize = 64;
    for start in (0..cfg.n_images).step_by(CHUNK) {
        let draws: Vec<Draw> = (start..(start + CHUNK).min(cfg.n_images)).map(|i| draw(cfg, i)).collect();
        let params: Vec<ImagingParams> = draws.iter().map(|d| d.meta.imaging()).collect();
        let clean = decoder.project_fourier(&fv, &params);
        for (mut d, img) in draws.into_iter().zip(clean) {
            match cfg.snr_db {
                Some(snr) => {
                    let (noisy, sigma) = add_noise_to_snr(&img, snr, &mut d.noise_rng)?;
                    d.meta.sigma = sigma;
                    images.extend(noisy);
                }
                None => images.extend(img),
            }
            meta.push(d.meta);
        }
    }
    Ok(ParticleStack { n: cfg.n, pixel_size: vol.pixel_size(), images, meta, n_train: cfg.n_train() })
}

/// Problem size of a preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 32^3 box, 1 A pixels, 2,000 training and 200 test images.
    Desk,
    /// 128^3 box, 0.8 A pixels, 9,000 training and 1,000 test images.
    Paper,
}

impl Scale {
    pub fn n(self) -> usize {
        match self {
            Scale::Desk => 32,
            Scale::Paper => 128,
        }
    }

    pub fn pixel_size(self) -> f64 {
        match self {
            Scale::Desk => 1.0,
            Scale::Paper => 0.8,
        }
    }

    /// Total images and training images.
    pub fn counts(self) -> (usize, usize) {
        match self {
            Scale::Desk => (2_200, 2_000),
            Scale::Paper => (10_000, 9_000),
        }
    }
}

/// Dataset rows A-G: A is clean, B-F add noise at 10, 5, 0, -5 and -10 dB,
/// G combines 0 dB noise with defocus drawn from [0.4, 1.2] um.
pub fn table_row(row: char, scale: Scale, seed: u64) -> Option<DatasetConfig> {
    let (snr_db, ctf_range_um) = match row.to_ascii_uppercase() {
        'A' => (None, None),
        'B' => (Some(10.0), None),
        'C' => (Some(5.0), None),
        'D' => (Some(0.0), None),
        'E' => (Some(-5.0), None),
        'F' => (Some(-10.0), None),
        'G' => (Some(0.0), Some((0.4, 1.2))),
        _ => return None,
    };
    let (total, train) = scale.counts();
    Some(DatasetConfig {
        n_images: total,
        n: scale.n(),
        snr_db,
        ctf_range_um,
        shift_sigma_px: 0.0,
        train_fraction: train as f64 / total as f64,
        seed,
        decoder: simulation_decoder(),
    })
}
