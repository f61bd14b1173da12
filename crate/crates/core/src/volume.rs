//! 3D scalar and label volumes, the RVOL file format, intensity
//! normalization and isotropic Gaussian smoothing.
//!
//! RVOL layout: one UTF-8 header line `RVOL1 nx ny nz sx sy sz dtype\n`
//! (`dtype` is `f32` or `u32`) followed by `nx*ny*nz` little-endian values,
//! x fastest, then y, then z.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad RVOL header: {0}")]
    Header(String),
    #[error("payload holds {actual} bytes, expected {expected}")]
    Payload { expected: usize, actual: usize },
    #[error("expected dtype {expected}, file has {actual}")]
    Dtype { expected: &'static str, actual: String },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("volume and mask geometries differ")]
    GeometryMismatch,
    #[error("mask has no foreground voxels")]
    EmptyForeground,
    #[error("foreground mean is zero")]
    ZeroForegroundMean,
    #[error("fwhm must be positive, got {0}")]
    Fwhm(f64),
}

/// Grid shape and voxel size shared by scalar and label volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Voxel size in mm along x, y, z.
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::Geometry(format!("dims {dims:?} must be positive")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::Geometry(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        Ok(Geometry { dims, spacing })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Physical position of voxel `i` in mm (index times spacing).
    pub fn position(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = f64> {
    pub geometry: Geometry,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVolume {
    pub geometry: Geometry,
    /// 0 is background.
    pub labels: Vec<u32>,
}

impl Eq for Geometry {}

impl std::hash::Hash for Geometry {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.dims.hash(state);
        for s in self.spacing {
            s.to_bits().hash(state);
        }
    }
}

impl<T: Real> Volume<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self, VolumeError> {
        if data.len() != geometry.len() {
            return Err(VolumeError::Payload {
                expected: geometry.len(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: T) -> Self {
        Volume {
            geometry,
            data: vec![value; geometry.len()],
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold(
            (T::infinity(), T::neg_infinity()),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u32>) -> Result<Self, VolumeError> {
        if labels.len() != geometry.len() {
            return Err(VolumeError::Payload {
                expected: geometry.len(),
                actual: labels.len(),
            });
        }
        Ok(LabelVolume { geometry, labels })
    }

    /// Distinct nonzero labels, ascending.
    pub fn label_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

const MAGIC: &str = "RVOL1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn header_line(g: &Geometry, dtype: &str) -> String {
    let [nx, ny, nz] = g.dims;
    let [sx, sy, sz] = g.spacing;
    // `{:?}` on f64 prints the shortest string that parses back to the same bits
    format!("{MAGIC} {nx} {ny} {nz} {sx:?} {sy:?} {sz:?} {dtype}\n")
}

fn parse_header(line: &str) -> Result<(Geometry, String), VolumeError> {
    let parts: Vec<&str> = line.split_ascii_whitespace().collect();
    if parts.len() != 8 || parts[0] != MAGIC {
        return Err(VolumeError::Header(line.trim_end().to_string()));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| VolumeError::Header(format!("bad dimension {s:?}")))
    };
    let sp = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| VolumeError::Header(format!("bad spacing {s:?}")))
    };
    let g = Geometry::new(
        [dim(parts[1])?, dim(parts[2])?, dim(parts[3])?],
        [sp(parts[4])?, sp(parts[5])?, sp(parts[6])?],
    )?;
    Ok((g, parts[7].to_string()))
}

fn read_raw(
    mut reader: impl BufRead,
    expected_dtype: &'static str,
) -> Result<(Geometry, Vec<[u8; 4]>), VolumeError> {
    let mut header = Vec::new();
    reader
        .read_until(b'\n', &mut header)
        .map_err(|e| VolumeError::Header(e.to_string()))?;
    if header.last() != Some(&b'\n') {
        return Err(VolumeError::Header("missing header line".into()));
    }
    let header = String::from_utf8(header).map_err(|_| VolumeError::Header("not UTF-8".into()))?;
    let (geometry, dtype) = parse_header(&header)?;
    if dtype != expected_dtype {
        return Err(VolumeError::Dtype {
            expected: expected_dtype,
            actual: dtype,
        });
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| VolumeError::Header(e.to_string()))?;
    let expected = geometry.len() * 4;
    if payload.len() != expected {
        return Err(VolumeError::Payload {
            expected,
            actual: payload.len(),
        });
    }
    let words = payload
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    Ok((geometry, words))
}

/// Decodes an `f32` RVOL stream.
pub fn decode_volume<T: Real>(reader: impl Read) -> Result<Volume<T>, VolumeError> {
    let (geometry, words) = read_raw(BufReader::new(reader), "f32")?;
    let data = words
        .into_iter()
        .map(|w| T::of(f32::from_le_bytes(w) as f64))
        .collect();
    Volume::new(geometry, data)
}

/// Encodes as `f32`. Values must be finite after narrowing.
pub fn encode_volume<T: Real>(v: &Volume<T>, mut out: impl Write) -> std::io::Result<()> {
    let mut buf = header_line(&v.geometry, "f32").into_bytes();
    buf.reserve(v.data.len() * 4);
    for &x in &v.data {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn decode_labels(reader: impl Read) -> Result<LabelVolume, VolumeError> {
    let (geometry, words) = read_raw(BufReader::new(reader), "u32")?;
    LabelVolume::new(geometry, words.into_iter().map(u32::from_le_bytes).collect())
}

pub fn encode_labels(v: &LabelVolume, mut out: impl Write) -> std::io::Result<()> {
    let mut buf = header_line(&v.geometry, "u32").into_bytes();
    buf.reserve(v.labels.len() * 4);
    for &l in &v.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>, VolumeError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    decode_volume(file)
}

/// Writes `v` as an `f32` RVOL file. `f32` volumes round-trip bit-exactly;
/// wider scalars are rounded to `f32`.
pub fn write_volume<T: Real>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    if let Some(i) = v
        .data
        .iter()
        .position(|x| !(x.as_f64() as f32).is_finite())
    {
        return Err(VolumeError::NonFinite(i));
    }
    let mut buf = Vec::new();
    encode_volume(v, &mut buf).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    decode_labels(file)
}

pub fn write_labels(v: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode_labels(v, &mut buf).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

/// Scales `v` so that the mean over voxels with a nonzero mask label is one.
pub fn normalize_foreground_mean<T: Real>(
    v: &Volume<T>,
    mask: &LabelVolume,
) -> Result<Volume<T>, VolumeError> {
    if v.geometry != mask.geometry {
        return Err(VolumeError::GeometryMismatch);
    }
    let (sum, n) = v
        .data
        .iter()
        .zip(&mask.labels)
        .filter(|(_, &l)| l != 0)
        .fold((T::zero(), 0usize), |(s, n), (&x, _)| (s + x, n + 1));
    if n == 0 {
        return Err(VolumeError::EmptyForeground);
    }
    let mean = sum / T::of_usize(n);
    if mean == T::zero() {
        return Err(VolumeError::ZeroForegroundMean);
    }
    Ok(v.map(|x| x / mean))
}

/// `fwhm / (2 sqrt(2 ln 2))`.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Gaussian taps for offsets `-r..=r`, `r = ceil(4 sigma)`, unit sum.
pub fn gaussian_kernel(sigma_voxels: f64) -> Vec<f64> {
    if sigma_voxels <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma_voxels).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma_voxels * sigma_voxels)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|w| w / total).collect()
}

/// Separable isotropic Gaussian smoothing with the given FWHM in mm.
///
/// Near the grid boundary the kernel is renormalized over its in-bounds
/// taps, so every output voxel is a convex combination of inputs.
pub fn gaussian_smooth<T: Real>(v: &Volume<T>, fwhm_mm: f64) -> Result<Volume<T>, VolumeError> {
    if !(fwhm_mm.is_finite() && fwhm_mm > 0.0) {
        return Err(VolumeError::Fwhm(fwhm_mm));
    }
    let g = v.geometry;
    let sigma = fwhm_to_sigma(fwhm_mm);
    let mut data = v.data.clone();
    let mut scratch = vec![T::zero(); data.len()];
    for axis in 0..3 {
        let kernel: Vec<T> = gaussian_kernel(sigma / g.spacing[axis])
            .into_iter()
            .map(T::of)
            .collect();
        if kernel.len() > 1 {
            convolve_axis(&data, &mut scratch, g.dims, axis, &kernel);
            std::mem::swap(&mut data, &mut scratch);
        }
    }
    Ok(Volume { geometry: g, data })
}

fn convolve_axis<T: Real>(src: &[T], dst: &mut [T], dims: [usize; 3], axis: usize, kernel: &[T]) {
    let radius = (kernel.len() / 2) as isize;
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    // offset of every line start along `axis`
    let line_starts: Vec<usize> = (0..src.len())
        .filter(|&i| (i / stride) % dims[axis] == 0)
        .collect();
    for start in line_starts {
        for i in 0..n {
            let lo = (i - radius).max(0);
            let hi = (i + radius).min(n - 1);
            let mut acc = T::zero();
            let mut wsum = T::zero();
            for j in lo..=hi {
                let w = kernel[(j - i + radius) as usize];
                acc = acc + w * src[start + j as usize * stride];
                wsum = wsum + w;
            }
            dst[start + i as usize * stride] = acc / wsum;
        }
    }
}
