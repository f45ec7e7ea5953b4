//! Fourier-slice image formation: volume transform, central slices, shift
//! phase ramps, the weak-phase CTF, and a differentiable batch projector.
//!
//! Layout conventions:
//! * volumes are `[z][y][x]` with the real-space origin at voxel `n/2`;
//! * images are `[y][x]` with the origin at pixel `n/2`;
//! * Fourier arrays are stored unshifted (frequency `k` at index `k mod n`).

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Var};
use crate::fft::{self, signed_freq};
use crate::so3::RotationMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum PhysicsError {
    NotPowerOfTwo(usize),
    WrongLength { expected: usize, found: usize },
    NonFinite,
    InvalidOptics(&'static str),
    InvalidDefocus { d1_um: f64, d2_um: f64 },
    InvalidDecoder(&'static str),
}

impl fmt::Display for PhysicsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhysicsError::NotPowerOfTwo(n) => write!(f, "grid size {n} is not a power of two"),
            PhysicsError::WrongLength { expected, found } => {
                write!(f, "expected {expected} values, found {found}")
            }
            PhysicsError::NonFinite => f.write_str("volume contains non-finite values"),
            PhysicsError::InvalidOptics(why) => write!(f, "invalid optics: {why}"),
            PhysicsError::InvalidDefocus { d1_um, d2_um } => {
                write!(f, "defocus must be positive, got ({d1_um}, {d2_um}) um")
            }
            PhysicsError::InvalidDecoder(why) => write!(f, "invalid decoder settings: {why}"),
        }
    }
}

impl core::error::Error for PhysicsError {}

/// Real density on a cubic power-of-two grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    n: usize,
    pixel_size: f64,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(n: usize, pixel_size: f64, data: Vec<f64>) -> Result<Self, PhysicsError> {
        if !n.is_power_of_two() || n < 2 {
            return Err(PhysicsError::NotPowerOfTwo(n));
        }
        if data.len() != n * n * n {
            return Err(PhysicsError::WrongLength { expected: n * n * n, found: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(PhysicsError::NonFinite);
        }
        Ok(Volume { n, pixel_size, data })
    }

    pub fn zeros(n: usize, pixel_size: f64) -> Result<Self, PhysicsError> {
        Self::new(n, pixel_size, vec![0.0; n * n * n])
    }

    /// Samples `f` at voxel offsets from the center, `(x, y, z) - n/2`.
    pub fn from_fn(n: usize, pixel_size: f64, f: impl Fn([f64; 3]) -> f64) -> Result<Self, PhysicsError> {
        let c = (n / 2) as f64;
        let mut data = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    data.push(f([x as f64 - c, y as f64 - c, z as f64 - c]));
                }
            }
        }
        Self::new(n, pixel_size, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::real(&[self.n; 3], self.data.clone())
    }

    /// Trilinear value at a point given relative to the center voxel; zero
    /// outside the grid.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let n = self.n as i64;
        let c = (self.n / 2) as f64;
        let q = [p[0] + c, p[1] + c, p[2] + c];
        let f = [libm::floor(q[0]), libm::floor(q[1]), libm::floor(q[2])];
        let fr = [q[0] - f[0], q[1] - f[1], q[2] - f[2]];
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let i = [f[0] as i64 + o[0] as i64, f[1] as i64 + o[1] as i64, f[2] as i64 + o[2] as i64];
            if i.iter().any(|&v| v < 0 || v >= n) {
                continue;
            }
            let w = (0..3).map(|a| if o[a] == 1 { fr[a] } else { 1.0 - fr[a] }).product::<f64>();
            acc += w * self.data[((i[2] * n + i[1]) * n + i[0]) as usize];
        }
        acc
    }
}

/// Microscope constants shared by every image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    pub voltage_kv: f64,
    pub cs_mm: f64,
    pub amplitude_contrast: f64,
    pub pixel_size: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        OpticsConfig { voltage_kv: 300.0, cs_mm: 2.7, amplitude_contrast: 0.1, pixel_size: 1.0 }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.voltage_kv > 0.0) {
            return Err(PhysicsError::InvalidOptics("voltage must be positive"));
        }
        if !(self.cs_mm > 0.0) {
            return Err(PhysicsError::InvalidOptics("spherical aberration must be positive"));
        }
        if !(0.0..=1.0).contains(&self.amplitude_contrast) {
            return Err(PhysicsError::InvalidOptics("amplitude contrast must lie in [0, 1]"));
        }
        if !(self.pixel_size > 0.0) {
            return Err(PhysicsError::InvalidOptics("pixel size must be positive"));
        }
        Ok(())
    }

    /// Relativistic electron wavelength in angstrom.
    pub fn wavelength(&self) -> f64 {
        let v = self.voltage_kv * 1e3;
        12.264_259 / libm::sqrt(v + 0.978_466e-6 * v * v)
    }

    /// Phase aberration at spatial frequency `k` (1/angstrom) for defocus
    /// `dz_um` (positive = underfocus).
    pub fn chi(&self, dz_um: f64, k: f64) -> f64 {
        let lam = self.wavelength();
        let dz = dz_um * 1e4;
        let cs = self.cs_mm * 1e7;
        let k2 = k * k;
        PI * lam * dz * k2 - 0.5 * PI * cs * lam * lam * lam * k2 * k2
    }
}

/// Astigmatic defocus: major and minor defocus in micrometres and the
/// major-axis angle from +x in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    pub d1_um: f64,
    pub d2_um: f64,
    pub alpha_rad: f64,
}

impl CtfParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if self.d1_um > 0.0 && self.d2_um > 0.0 && self.alpha_rad.is_finite() {
            Ok(())
        } else {
            Err(PhysicsError::InvalidDefocus { d1_um: self.d1_um, d2_um: self.d2_um })
        }
    }

    /// Defocus along the in-plane direction `phi`.
    pub fn defocus_at(&self, phi: f64) -> f64 {
        0.5 * (self.d1_um + self.d2_um) + 0.5 * (self.d1_um - self.d2_um) * libm::cos(2.0 * (phi - self.alpha_rad))
    }
}

/// Per-image parameters of the forward model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagingParams {
    pub rotation: RotationMatrix,
    /// In-plane translation in pixels; positive values move content towards
    /// larger indices.
    pub shift: [f64; 2],
    pub ctf: Option<CtfParams>,
}

impl ImagingParams {
    pub fn from_rotation(rotation: RotationMatrix) -> Self {
        ImagingParams { rotation, shift: [0.0, 0.0], ctf: None }
    }
}

/// CTF value at frequency `(kx, ky)` in 1/angstrom.
pub fn ctf_value(optics: &OpticsConfig, ctf: &CtfParams, kx: f64, ky: f64) -> f64 {
    let k = libm::sqrt(kx * kx + ky * ky);
    let phi = libm::atan2(ky, kx);
    let chi = optics.chi(ctf.defocus_at(phi), k);
    let w = optics.amplitude_contrast;
    -libm::sqrt(1.0 - w * w) * libm::sin(chi) - w * libm::cos(chi)
}

/// `n x n` CTF in unshifted Fourier layout `[ky][kx]`.
pub fn ctf_image(ctf: &CtfParams, optics: &OpticsConfig, n: usize) -> Vec<f64> {
    let scale = 1.0 / (n as f64 * optics.pixel_size);
    let mut out = Vec::with_capacity(n * n);
    for iy in 0..n {
        let ky = signed_freq(iy, n) as f64 * scale;
        for ix in 0..n {
            out.push(ctf_value(optics, ctf, signed_freq(ix, n) as f64 * scale, ky));
        }
    }
    out
}

/// Phase ramp `exp(-2 pi i (kx t1 + ky t2) / n)` in unshifted layout.
pub fn shift_phase(n: usize, t: [f64; 2]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(n * n);
    for iy in 0..n {
        let ky = signed_freq(iy, n) as f64;
        for ix in 0..n {
            let kx = signed_freq(ix, n) as f64;
            out.push(Complex64::from_polar(1.0, -2.0 * PI * (kx * t[0] + ky * t[1]) / n as f64));
        }
    }
    out
}

pub fn apply_shift(img_f: &[Complex64], n: usize, t: [f64; 2]) -> Vec<Complex64> {
    img_f.iter().zip(shift_phase(n, t)).map(|(a, b)| a * b).collect()
}

/// Settings of the projector that do not depend on the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Zero-padding factor applied to the volume before its transform, so
    /// slices interpolate a finer frequency grid.
    pub oversample: usize,
    /// Real-space padding factor of each projection before the CTF is
    /// applied (1 = multiply directly on the `n x n` spectrum).
    pub ctf_pad: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { oversample: 2, ctf_pad: 1 }
    }
}

/// Transform of a volume, zero-padded by `oversample`, in unshifted layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierVolume {
    n: usize,
    oversample: usize,
    pixel_size: f64,
    data: Tensor,
}

impl FourierVolume {
    /// Side of the (padded) Fourier grid.
    pub fn grid(&self) -> usize {
        self.n * self.oversample
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn oversample(&self) -> usize {
        self.oversample
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Coefficient at signed integer frequency on the padded grid.
    pub fn at(&self, k: [i64; 3]) -> Complex64 {
        let m = self.grid() as i64;
        let i = k.map(|v| v.rem_euclid(m) as usize);
        self.data.as_complex()[(i[2] * self.grid() + i[1]) * self.grid() + i[0]]
    }
}

pub fn volume_fft(vol: &Volume, oversample: usize) -> FourierVolume {
    let mut g = Graph::new();
    let x = g.constant(vol.tensor());
    let f = fourier_volume(&mut g, x, oversample);
    FourierVolume { n: vol.n, oversample, pixel_size: vol.pixel_size, data: g.value(f).clone() }
}

/// Graph form of [`volume_fft`] for an `[n, n, n]` real node.
pub fn fourier_volume(g: &mut Graph, volume: Var, oversample: usize) -> Var {
    let n = g.shape(volume)[0];
    let padded = if oversample > 1 { g.pad_center(volume, n * oversample, 3) } else { volume };
    let rolled = g.roll_half(padded, 3);
    let c = g.to_complex(rolled);
    g.fft3(c)
}

/// Central slice orthogonal to the viewing axis of `r`: the image frequency
/// `(kx, ky)` is read from the volume at `r^T (kx, ky, 0)`.
pub fn extract_central_slice(fv: &FourierVolume, r: &RotationMatrix) -> Vec<Complex64> {
    let coords = slice_coords(fv.n, fv.oversample, r);
    kernels::gather_forward(fv.data.as_complex(), fv.grid(), &coords)
}

fn slice_grid(n: usize, oversample: usize) -> Vec<f64> {
    let s = oversample as f64;
    let mut out = Vec::with_capacity(3 * n * n);
    for iy in 0..n {
        for ix in 0..n {
            out.extend([signed_freq(ix, n) as f64 * s, signed_freq(iy, n) as f64 * s, 0.0]);
        }
    }
    out
}

fn slice_coords(n: usize, oversample: usize, r: &RotationMatrix) -> Vec<f64> {
    let m = r.matrix();
    let grid = slice_grid(n, oversample);
    let mut out = Vec::with_capacity(grid.len());
    for p in grid.chunks_exact(3) {
        for j in 0..3 {
            out.push(p[0] * m[0][j] + p[1] * m[1][j] + p[2] * m[2][j]);
        }
    }
    out
}

/// Per-batch constant filters for [`Decoder::project`].
pub struct Filters {
    shift: Option<Tensor>,
    ctf: Option<Tensor>,
}

/// Differentiable projector for a fixed image size and optics.
#[derive(Clone, Debug)]
pub struct Decoder {
    n: usize,
    config: DecoderConfig,
    optics: OpticsConfig,
    grid: Tensor,
}

impl Decoder {
    pub fn new(n: usize, config: DecoderConfig, optics: OpticsConfig) -> Result<Self, PhysicsError> {
        if !n.is_power_of_two() || n < 2 {
            return Err(PhysicsError::NotPowerOfTwo(n));
        }
        if !config.oversample.is_power_of_two() {
            return Err(PhysicsError::InvalidDecoder("oversample must be a power of two"));
        }
        if !config.ctf_pad.is_power_of_two() {
            return Err(PhysicsError::InvalidDecoder("ctf_pad must be a power of two"));
        }
        optics.validate()?;
        let grid = Tensor::real(&[n * n, 3], slice_grid(n, config.oversample));
        Ok(Decoder { n, config, optics, grid })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn optics(&self) -> &OpticsConfig {
        &self.optics
    }

    pub fn fourier_volume(&self, g: &mut Graph, volume: Var) -> Var {
        assert_eq!(g.shape(volume), [self.n; 3], "decoder: volume shape");
        fourier_volume(g, volume, self.config.oversample)
    }

    pub fn transform(&self, vol: &Volume) -> FourierVolume {
        assert_eq!(vol.n, self.n, "decoder: volume size");
        volume_fft(vol, self.config.oversample)
    }

    /// Shift and CTF filters for a batch; `None` parts are skipped entirely.
    pub fn filters(&self, params: &[ImagingParams]) -> Filters {
        let n = self.n;
        let b = params.len();
        let shift = params.iter().any(|p| p.shift != [0.0, 0.0]).then(|| {
            let mut data = Vec::with_capacity(b * n * n);
            for p in params {
                data.extend(shift_phase(n, p.shift));
            }
            Tensor::complex(&[b, n, n], data)
        });
        let ctf = params.iter().any(|p| p.ctf.is_some()).then(|| {
            let m = n * self.config.ctf_pad;
            let mut data = Vec::with_capacity(b * m * m);
            for p in params {
                match &p.ctf {
                    Some(c) => data.extend(ctf_image(c, &self.optics, m).into_iter().map(|v| Complex64::new(v, 0.0))),
                    None => data.extend(core::iter::repeat(Complex64::new(1.0, 0.0)).take(m * m)),
                }
            }
            Tensor::complex(&[b, m, m], data)
        });
        Filters { shift, ctf }
    }

    /// Images `[B, n, n]` of the transformed volume `fvol` seen through the
    /// rotations `rot` (`[B, 3, 3]`), differentiable in both.
    pub fn project(&self, g: &mut Graph, fvol: Var, rot: Var, filters: &Filters) -> Var {
        let n = self.n;
        let b = g.shape(rot)[0];
        let grid = g.constant(self.grid.clone());
        let coords = g.matmul(grid, rot);
        let slices = g.gather_trilinear(fvol, coords);
        let mut spec = g.reshape(slices, &[b, n, n]);
        if let Some(s) = &filters.shift {
            let s = g.constant(s.clone());
            spec = g.mul(spec, s);
        }
        let pad = self.config.ctf_pad;
        if let (Some(c), 1) = (&filters.ctf, pad) {
            let c = g.constant(c.clone());
            spec = g.mul(spec, c);
        }
        let img = g.ifft2(spec);
        let img = g.real_part(img);
        let mut img = g.roll_half(img, 2);
        if let (Some(c), true) = (&filters.ctf, pad > 1) {
            let big = g.pad_center(img, n * pad, 2);
            let big = g.roll_half(big, 2);
            let big = g.to_complex(big);
            let f = g.fft2(big);
            let c = g.constant(c.clone());
            let f = g.mul(f, c);
            let big = g.ifft2(f);
            let big = g.real_part(big);
            let big = g.roll_half(big, 2);
            img = g.crop_center(big, n, 2);
        }
        img
    }

    /// Noiseless images for a batch of parameters.
    pub fn project_fourier(&self, fv: &FourierVolume, params: &[ImagingParams]) -> Vec<Vec<f64>> {
        assert_eq!((fv.n, fv.oversample), (self.n, self.config.oversample), "decoder: transform geometry");
        if params.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let f = g.constant(fv.data.clone());
        let rot = g.constant(rotation_tensor(params.iter().map(|p| &p.rotation)));
        let filters = self.filters(params);
        let img = self.project(&mut g, f, rot, &filters);
        g.value(img).as_real().chunks_exact(self.n * self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn forward_project(&self, vol: &Volume, params: &ImagingParams) -> Vec<f64> {
        let fv = self.transform(vol);
        self.project_fourier(&fv, core::slice::from_ref(params)).pop().expect("one image")
    }
}

/// Stacks rotations into a `[B, 3, 3]` tensor.
pub fn rotation_tensor<'a>(rots: impl IntoIterator<Item = &'a RotationMatrix>) -> Tensor {
    let data: Vec<f64> = rots.into_iter().flat_map(|r| r.matrix().iter().flatten().copied()).collect();
    let b = data.len() / 9;
    Tensor::real(&[b, 3, 3], data)
}

/// Real-space projector: rotates the density field `f` (given relative to
/// the center) by `r` and sums along z over the `n^3` sample points, so
/// pixel `(x, y)` is `sum_z f(r^T (x, y, z))`.
pub fn rotate_and_sum_with(n: usize, r: &RotationMatrix, f: impl Fn([f64; 3]) -> f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let rt = r.transpose();
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for z in 0..n {
                acc += f(rt.apply([x as f64 - c, y as f64 - c, z as f64 - c]));
            }
            out[y * n + x] = acc;
        }
    }
    out
}

/// [`rotate_and_sum_with`] over the trilinearly interpolated volume.
pub fn rotate_and_sum(vol: &Volume, r: &RotationMatrix) -> Vec<f64> {
    rotate_and_sum_with(vol.n, r, |p| vol.sample(p))
}

/// Sum along z of a volume: its projection at the identity pose.
pub fn z_projection(vol: &Volume) -> Vec<f64> {
    let n = vol.n;
    let mut out = vec![0.0; n * n];
    for slab in vol.data.chunks_exact(n * n) {
        for (o, v) in out.iter_mut().zip(slab) {
            *o += v;
        }
    }
    out
}

/// Inverse-transforms an unshifted `n x n` spectrum to a centered real image.
pub fn spectrum_to_image(spec: &[Complex64], n: usize) -> Vec<f64> {
    let mut buf = spec.to_vec();
    fft::fft_last_axes(&mut buf, &[n, n], 2, true);
    let re: Vec<f64> = buf.iter().map(|z| z.re).collect();
    fft::roll_half(&re, &[n, n], 2)
}

/// Forward transform of a centered real image to an unshifted spectrum.
pub fn image_spectrum(img: &[f64], n: usize) -> Vec<Complex64> {
    let rolled = fft::roll_half(img, &[n, n], 2);
    let mut buf: Vec<Complex64> = rolled.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft::fft_last_axes(&mut buf, &[n, n], 2, false);
    buf
}
