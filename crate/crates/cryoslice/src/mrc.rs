//! MRC2014 reader and writer for little-endian mode 2 (float32) data.
//!
//! Data are stored with x fastest, then y, then section, which matches the
//! `[z][y][x]` layout of volumes and the `[image][y][x]` layout of stacks.

use std::fmt;
use std::io;
use std::path::Path;

use crate::fsio;

pub const HEADER_LEN: usize = 1024;
pub const MODE_FLOAT32: i32 = 2;
const MAP_STAMP: &[u8; 4] = b"MAP ";
/// Little-endian machine stamp.
const MACHINE_STAMP: [u8; 4] = [0x44, 0x44, 0x00, 0x00];
const NVERSION: i32 = 20140;

#[derive(Debug)]
pub enum MrcError {
    Io(io::Error),
    Truncated { expected: usize, found: usize },
    BadStamp,
    BigEndian,
    UnsupportedMode(i32),
    BadDimensions { nx: i32, ny: i32, nz: i32 },
    ExtendedHeader(i32),
    NotCubic { nx: usize, ny: usize, nz: usize },
}

impl fmt::Display for MrcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MrcError::Io(e) => write!(f, "{e}"),
            MrcError::Truncated { expected, found } => {
                write!(f, "file holds {found} bytes, header promises {expected}")
            }
            MrcError::BadStamp => f.write_str("missing \"MAP \" stamp at byte 208"),
            MrcError::BigEndian => f.write_str("big-endian files are not supported"),
            MrcError::UnsupportedMode(m) => write!(f, "MODE {m} is not supported (only 2, float32)"),
            MrcError::BadDimensions { nx, ny, nz } => write!(f, "invalid dimensions {nx} x {ny} x {nz}"),
            MrcError::ExtendedHeader(n) => write!(f, "extended headers are not supported (NSYMBT = {n})"),
            MrcError::NotCubic { nx, ny, nz } => write!(f, "expected a cubic volume, found {nx} x {ny} x {nz}"),
        }
    }
}

impl std::error::Error for MrcError {}

impl From<io::Error> for MrcError {
    fn from(e: io::Error) -> Self {
        MrcError::Io(e)
    }
}

/// Fields of the 1024-byte header that this crate reads or writes.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcHeader {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub mode: i32,
    /// Cell edge lengths in Angstrom; pixel size is `cell[0] / nx`.
    pub cell: [f32; 3],
    /// Space group: 0 for image stacks, 1 for volumes.
    pub ispg: i32,
    pub dmin: f32,
    pub dmax: f32,
    pub dmean: f32,
    pub rms: f32,
}

impl MrcHeader {
    pub fn pixel_size(&self) -> f64 {
        self.cell[0] as f64 / self.nx as f64
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        let mut put_i = |word: usize, v: i32| h[4 * word..4 * word + 4].copy_from_slice(&v.to_le_bytes());
        put_i(0, self.nx as i32);
        put_i(1, self.ny as i32);
        put_i(2, self.nz as i32);
        put_i(3, self.mode);
        put_i(7, self.nx as i32);
        put_i(8, self.ny as i32);
        put_i(9, self.nz as i32);
        put_i(16, 1);
        put_i(17, 2);
        put_i(18, 3);
        put_i(22, self.ispg);
        put_i(27, NVERSION);
        let mut put_f = |word: usize, v: f32| h[4 * word..4 * word + 4].copy_from_slice(&v.to_le_bytes());
        put_f(10, self.cell[0]);
        put_f(11, self.cell[1]);
        put_f(12, self.cell[2]);
        put_f(13, 90.0);
        put_f(14, 90.0);
        put_f(15, 90.0);
        put_f(19, self.dmin);
        put_f(20, self.dmax);
        put_f(21, self.dmean);
        put_f(54, self.rms);
        h[208..212].copy_from_slice(MAP_STAMP);
        h[212..216].copy_from_slice(&MACHINE_STAMP);
        h
    }

    fn decode(h: &[u8; HEADER_LEN]) -> Result<Self, MrcError> {
        let get_i = |word: usize| i32::from_le_bytes(h[4 * word..4 * word + 4].try_into().unwrap());
        let get_f = |word: usize| f32::from_le_bytes(h[4 * word..4 * word + 4].try_into().unwrap());
        if &h[208..212] != MAP_STAMP {
            return Err(MrcError::BadStamp);
        }
        if h[212] & 0xf0 == 0x10 {
            return Err(MrcError::BigEndian);
        }
        let (nx, ny, nz) = (get_i(0), get_i(1), get_i(2));
        if nx <= 0 || ny <= 0 || nz <= 0 {
            return Err(MrcError::BadDimensions { nx, ny, nz });
        }
        let mode = get_i(3);
        if mode != MODE_FLOAT32 {
            return Err(MrcError::UnsupportedMode(mode));
        }
        if get_i(23) != 0 {
            return Err(MrcError::ExtendedHeader(get_i(23)));
        }
        Ok(MrcHeader {
            nx: nx as usize,
            ny: ny as usize,
            nz: nz as usize,
            mode,
            cell: [get_f(10), get_f(11), get_f(12)],
            ispg: get_i(22),
            dmin: get_f(19),
            dmax: get_f(20),
            dmean: get_f(21),
            rms: get_f(54),
        })
    }
}

/// Header and float32 payload widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcData {
    pub header: MrcHeader,
    pub data: Vec<f64>,
}

/// Header describing `data` (already rounded to float32) on an
/// `nx x ny x nz` grid with the given pixel size.
fn header_for(nx: usize, ny: usize, nz: usize, pixel_size: f64, ispg: i32, data: &[f32]) -> MrcHeader {
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in data {
        let v = v as f64;
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    let count = data.len().max(1) as f64;
    let mean = sum / count;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;
    let cell = |k: usize| (k as f64 * pixel_size) as f32;
    MrcHeader {
        nx,
        ny,
        nz,
        mode: MODE_FLOAT32,
        cell: [cell(nx), cell(ny), cell(nz)],
        ispg,
        dmin: lo as f32,
        dmax: hi as f32,
        dmean: mean as f32,
        rms: var.sqrt() as f32,
    }
}

/// Serializes `data`, laid out x fastest, as a complete MRC file.
pub fn encode(nx: usize, ny: usize, nz: usize, pixel_size: f64, ispg: i32, data: &[f64]) -> Vec<u8> {
    assert_eq!(data.len(), nx * ny * nz, "mrc::encode: payload length");
    let narrow: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    let header = header_for(nx, ny, nz, pixel_size, ispg, &narrow);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * narrow.len());
    out.extend_from_slice(&header.encode());
    for v in narrow {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<MrcData, MrcError> {
    if bytes.len() < HEADER_LEN {
        return Err(MrcError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let header = MrcHeader::decode(bytes[..HEADER_LEN].try_into().unwrap())?;
    let expected = HEADER_LEN + 4 * header.voxel_count();
    if bytes.len() != expected {
        return Err(MrcError::Truncated { expected, found: bytes.len() });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(MrcData { header, data })
}

pub fn read(path: &Path) -> Result<MrcData, MrcError> {
    decode(&std::fs::read(path)?)
}

/// Reads a cubic volume and returns `(n, pixel_size, data)`.
pub fn read_volume(path: &Path) -> Result<(usize, f64, Vec<f64>), MrcError> {
    let m = read(path)?;
    let h = &m.header;
    if h.nx != h.ny || h.ny != h.nz {
        return Err(MrcError::NotCubic { nx: h.nx, ny: h.ny, nz: h.nz });
    }
    Ok((h.nx, h.pixel_size(), m.data))
}

pub fn write_volume(path: &Path, n: usize, pixel_size: f64, data: &[f64]) -> io::Result<()> {
    fsio::write_atomic(path, &encode(n, n, n, pixel_size, 1, data))
}

/// Writes `count` images of `n x n` pixels as a stack.
pub fn write_stack(path: &Path, n: usize, count: usize, pixel_size: f64, data: &[f64]) -> io::Result<()> {
    fsio::write_atomic(path, &encode(n, n, count, pixel_size, 0, data))
}
