//! Volumes, masks, and the preprocessing pipeline: SRV and NIfTI-1
//! ingestion, left/right mask fusion, ROI-centered cropping, intensity
//! normalization, and probability binarization.
//!
//! Grids are row-major with the X index fastest: `index = x + X·(y + Y·z)`.
//! That matches the tensor layout `(1, 1, Z, Y, X)`, so a volume buffer is
//! reinterpreted as a network input without copying or reordering.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ioutil::atomic_write;

/// 3D scalar image with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f32, f32, f32),
    pub data: Vec<f32>,
}

/// 3D binary label grid; one byte per voxel, values 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: (usize, usize, usize),
    pub data: Vec<u8>,
}

/// Inclusive per-axis index ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self, axis: usize) -> usize {
        self.hi[axis] - self.lo[axis] + 1
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }
}

#[derive(Debug)]
pub enum VolumeError {
    DimMismatch {
        op: &'static str,
        lhs: (usize, usize, usize),
        rhs: (usize, usize, usize),
    },
    InvalidDims {
        op: &'static str,
        detail: String,
    },
    EmptyMask {
        op: &'static str,
    },
    NonBinaryMask {
        op: &'static str,
    },
    /// Bad magic, truncated payload, unsupported datatype, and similar.
    Format {
        detail: String,
    },
    /// Requested crop target exceeds the volume on some axis.
    TargetTooLarge {
        axis: &'static str,
        target: usize,
        dim: usize,
    },
    /// Mask bounding box plus margins does not fit in the crop target.
    CropTooSmall {
        axis: &'static str,
        required: usize,
        target: usize,
    },
    BadThreshold {
        value: f64,
    },
    Io(io::Error),
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimMismatch { op, lhs, rhs } => {
                write!(f, "{op}: dims {lhs:?} vs {rhs:?}")
            }
            Self::InvalidDims { op, detail } => write!(f, "{op}: {detail}"),
            Self::EmptyMask { op } => write!(f, "{op}: mask has no set voxels"),
            Self::NonBinaryMask { op } => write!(f, "{op}: mask values must be 0 or 1"),
            Self::Format { detail } => write!(f, "format error: {detail}"),
            Self::TargetTooLarge { axis, target, dim } => {
                write!(f, "crop target {target} exceeds volume extent {dim} on axis {axis}")
            }
            Self::CropTooSmall {
                axis,
                required,
                target,
            } => write!(
                f,
                "axis {axis} needs {required} voxels (bounding box plus margins) but target is {target}"
            ),
            Self::BadThreshold { value } => {
                write!(f, "threshold {value} outside (0, 1)")
            }
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for VolumeError {}

impl From<io::Error> for VolumeError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

/// Row-major linear index with X fastest.
#[inline]
pub fn linear(dims: (usize, usize, usize), x: usize, y: usize, z: usize) -> usize {
    x + dims.0 * (y + dims.1 * z)
}

fn check_dims(op: &'static str, dims: (usize, usize, usize)) -> Result<(), VolumeError> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(VolumeError::InvalidDims {
            op,
            detail: format!("zero extent in {dims:?}"),
        });
    }
    Ok(())
}

impl Volume {
    /// Reinterprets the grid as a `(1, 1, Z, Y, X)` network input. The
    /// buffer layouts agree (X fastest), so this is a straight cast.
    pub fn to_tensor<E: crate::tensor::Element>(&self) -> crate::tensor::Tensor<E> {
        crate::tensor::Tensor {
            shape: vec![1, 1, self.dims.2, self.dims.1, self.dims.0],
            data: self.data.iter().map(|&v| E::from_f64(v as f64)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Inverse of [`Volume::to_tensor`] for a `(1, 1, Z, Y, X)` buffer.
    pub fn from_tensor<E: crate::tensor::Element>(
        data: &[E],
        dims: (usize, usize, usize),
        spacing_mm: (f32, f32, f32),
    ) -> Result<Self, VolumeError> {
        Self::new(
            dims,
            spacing_mm,
            data.iter().map(|&v| v.as_f64() as f32).collect(),
        )
    }

    pub fn new(
        dims: (usize, usize, usize),
        spacing_mm: (f32, f32, f32),
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        check_dims("volume", dims)?;
        if spacing_mm.0 <= 0.0 || spacing_mm.1 <= 0.0 || spacing_mm.2 <= 0.0 {
            return Err(VolumeError::InvalidDims {
                op: "volume",
                detail: format!("non-positive spacing {spacing_mm:?}"),
            });
        }
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(VolumeError::InvalidDims {
                op: "volume",
                detail: format!(
                    "dims {:?} imply {} voxels, buffer has {}",
                    dims,
                    dims.0 * dims.1 * dims.2,
                    data.len()
                ),
            });
        }
        Ok(Self {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear(self.dims, x, y, z)]
    }
}

impl Mask {
    /// Binary `(1, 1, Z, Y, X)` tensor view of the mask.
    pub fn to_tensor<E: crate::tensor::Element>(&self) -> crate::tensor::Tensor<E> {
        crate::tensor::Tensor {
            shape: vec![1, 1, self.dims.2, self.dims.1, self.dims.0],
            data: self
                .data
                .iter()
                .map(|&v| if v != 0 { E::one() } else { E::zero() })
                .collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn new(dims: (usize, usize, usize), data: Vec<u8>) -> Result<Self, VolumeError> {
        check_dims("mask", dims)?;
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(VolumeError::InvalidDims {
                op: "mask",
                detail: format!("dims {:?} vs buffer length {}", dims, data.len()),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(VolumeError::NonBinaryMask { op: "mask" });
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: (usize, usize, usize)) -> Result<Self, VolumeError> {
        check_dims("mask", dims)?;
        Ok(Self {
            dims,
            data: vec![0; dims.0 * dims.1 * dims.2],
        })
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[linear(self.dims, x, y, z)] != 0
    }

    pub fn set_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

// ── SRV format ──────────────────────────────────────────────────────
// Magic "SRV1", one JSON header line, newline, raw little-endian payload.

const SRV_MAGIC: &[u8; 4] = b"SRV1";

#[derive(Debug, Serialize, Deserialize)]
struct SrvHeader {
    dims: [usize; 3],
    spacing_mm: [f32; 3],
    dtype: String,
}

/// What an SRV file may hold.
#[derive(Debug, Clone, PartialEq)]
pub enum SrvObject {
    Volume(Volume),
    Mask(Mask),
}

impl SrvObject {
    pub fn into_volume(self) -> Result<Volume, VolumeError> {
        match self {
            Self::Volume(v) => Ok(v),
            Self::Mask(_) => Err(VolumeError::Format {
                detail: "expected f32 volume, file holds a u8 mask".into(),
            }),
        }
    }

    pub fn into_mask(self) -> Result<Mask, VolumeError> {
        match self {
            Self::Mask(m) => Ok(m),
            Self::Volume(_) => Err(VolumeError::Format {
                detail: "expected u8 mask, file holds an f32 volume".into(),
            }),
        }
    }
}

pub fn write_srv_volume(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    let header = SrvHeader {
        dims: [v.dims.0, v.dims.1, v.dims.2],
        spacing_mm: [v.spacing_mm.0, v.spacing_mm.1, v.spacing_mm.2],
        dtype: "f32".into(),
    };
    let head = serde_json::to_string(&header).expect("header serializes");
    atomic_write(path, |w| {
        w.write_all(SRV_MAGIC)?;
        w.write_all(head.as_bytes())?;
        w.write_all(b"\n")?;
        for &f in &v.data {
            w.write_all(&f.to_le_bytes())?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Masks carry no spacing; the header records 1 mm per axis.
pub fn write_srv_mask(m: &Mask, path: &Path) -> Result<(), VolumeError> {
    let header = SrvHeader {
        dims: [m.dims.0, m.dims.1, m.dims.2],
        spacing_mm: [1.0, 1.0, 1.0],
        dtype: "u8".into(),
    };
    let head = serde_json::to_string(&header).expect("header serializes");
    atomic_write(path, |w| {
        w.write_all(SRV_MAGIC)?;
        w.write_all(head.as_bytes())?;
        w.write_all(b"\n")?;
        w.write_all(&m.data)?;
        Ok(())
    })?;
    Ok(())
}

pub fn read_srv(path: &Path) -> Result<SrvObject, VolumeError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != SRV_MAGIC {
        return Err(VolumeError::Format {
            detail: format!("{}: bad SRV magic", path.display()),
        });
    }
    let nl = bytes[4..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| VolumeError::Format {
            detail: "missing header line terminator".into(),
        })?;
    let header: SrvHeader =
        serde_json::from_slice(&bytes[4..4 + nl]).map_err(|e| VolumeError::Format {
            detail: format!("bad SRV header: {e}"),
        })?;
    let payload = &bytes[4 + nl + 1..];
    let voxels = header.dims[0] * header.dims[1] * header.dims[2];
    let dims = (header.dims[0], header.dims[1], header.dims[2]);
    match header.dtype.as_str() {
        "f32" => {
            let expected = voxels * 4;
            if payload.len() != expected {
                return Err(VolumeError::Format {
                    detail: format!(
                        "payload length {} bytes, expected {expected}",
                        payload.len()
                    ),
                });
            }
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(SrvObject::Volume(Volume::new(
                dims,
                (
                    header.spacing_mm[0],
                    header.spacing_mm[1],
                    header.spacing_mm[2],
                ),
                data,
            )?))
        }
        "u8" => {
            if payload.len() != voxels {
                return Err(VolumeError::Format {
                    detail: format!("payload length {} bytes, expected {voxels}", payload.len()),
                });
            }
            Ok(SrvObject::Mask(Mask::new(dims, payload.to_vec())?))
        }
        other => Err(VolumeError::Format {
            detail: format!("unknown dtype {other:?}"),
        }),
    }
}

// ── NIfTI-1 read ────────────────────────────────────────────────────

/// Reads a single-file NIfTI-1 volume (`.nii`, or `.nii.gz` when the file
/// is gzip-compressed). Supported datatypes: uint8, int16, float32; the
/// grid must be 3-D. `scl_slope`/`scl_inter` are applied when the slope is
/// nonzero. Orientation matrices are ignored: data is returned in stored
/// voxel order.
pub fn read_nifti(path: &Path) -> Result<Volume, VolumeError> {
    let raw = fs::read(path)?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| VolumeError::Format {
                detail: format!("gzip: {e}"),
            })?;
        out
    } else {
        raw
    };
    parse_nifti(&bytes)
}

fn parse_nifti(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < 348 {
        return Err(VolumeError::Format {
            detail: format!("NIfTI header needs 348 bytes, file has {}", bytes.len()),
        });
    }
    let i32_at = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let i16_at = |o: usize| i16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());

    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(VolumeError::Format {
            detail: format!("bad NIfTI magic {magic:?}, want \"n+1\\0\""),
        });
    }
    let sizeof_hdr = i32_at(0);
    if sizeof_hdr != 348 {
        if sizeof_hdr.swap_bytes() == 348 {
            return Err(VolumeError::Format {
                detail: "byte-swapped (big-endian) NIfTI not supported".into(),
            });
        }
        return Err(VolumeError::Format {
            detail: format!("sizeof_hdr {sizeof_hdr}, want 348"),
        });
    }

    let rank = i16_at(40);
    if !(3..=7).contains(&rank) {
        return Err(VolumeError::Format {
            detail: format!("unsupported dimensionality {rank}"),
        });
    }
    let dim = |i: usize| i16_at(40 + 2 * i) as usize;
    for extra in 4..=rank as usize {
        if dim(extra) > 1 {
            return Err(VolumeError::Format {
                detail: format!("unsupported dimensionality: dim[{extra}] = {}", dim(extra)),
            });
        }
    }
    let dims = (dim(1), dim(2), dim(3));
    check_dims("nifti", dims).map_err(|_| VolumeError::Format {
        detail: format!("degenerate dims {dims:?}"),
    })?;

    let datatype = i16_at(70);
    let pix = |i: usize| {
        let p = f32_at(76 + 4 * i).abs();
        if p > 0.0 {
            p
        } else {
            1.0
        }
    };
    let spacing = (pix(1), pix(2), pix(3));
    let vox_offset = f32_at(108) as usize;
    let slope = f32_at(112);
    let inter = f32_at(116);
    if vox_offset < 348 || vox_offset > bytes.len() {
        return Err(VolumeError::Format {
            detail: format!("vox_offset {vox_offset} out of range"),
        });
    }
    let payload = &bytes[vox_offset..];
    let voxels = dims.0 * dims.1 * dims.2;

    let mut data: Vec<f32> = match datatype {
        2 => {
            // uint8
            if payload.len() < voxels {
                return Err(VolumeError::Format {
                    detail: format!("uint8 payload {} bytes, need {voxels}", payload.len()),
                });
            }
            payload[..voxels].iter().map(|&b| b as f32).collect()
        }
        4 => {
            // int16
            if payload.len() < voxels * 2 {
                return Err(VolumeError::Format {
                    detail: format!("int16 payload {} bytes, need {}", payload.len(), voxels * 2),
                });
            }
            payload[..voxels * 2]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect()
        }
        16 => {
            // float32
            if payload.len() < voxels * 4 {
                return Err(VolumeError::Format {
                    detail: format!(
                        "float32 payload {} bytes, need {}",
                        payload.len(),
                        voxels * 4
                    ),
                });
            }
            payload[..voxels * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        other => {
            return Err(VolumeError::Format {
                detail: format!("unsupported NIfTI datatype {other}"),
            })
        }
    };
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in data.iter_mut() {
            *v = *v * slope + inter;
        }
    }
    Volume::new(dims, spacing, data)
}

// ── Preprocessing ops ───────────────────────────────────────────────

/// Voxelwise OR of two masks of equal dims.
pub fn fuse_masks(left: &Mask, right: &Mask) -> Result<Mask, VolumeError> {
    if left.dims != right.dims {
        return Err(VolumeError::DimMismatch {
            op: "fuse_masks",
            lhs: left.dims,
            rhs: right.dims,
        });
    }
    let data: Vec<u8> = left
        .data
        .iter()
        .zip(&right.data)
        .map(|(&a, &b)| (a | b) & 1)
        .collect();
    Ok(Mask {
        dims: left.dims,
        data,
    })
}

/// Tightest per-axis index ranges containing every set voxel.
pub fn bounding_box(m: &Mask) -> Result<BoundingBox, VolumeError> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let (nx, ny, _) = m.dims;
    for (i, &v) in m.data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let p = [i % nx, (i / nx) % ny, i / (nx * ny)];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if lo[0] == usize::MAX {
        return Err(VolumeError::EmptyMask { op: "bounding_box" });
    }
    Ok(BoundingBox { lo, hi })
}

/// Crops volume and mask to an exactly `target`-sized window centered on
/// the mask's bounding box, clamped to the volume bounds. The window always
/// contains the bounding box, plus `margin` voxels per side where the
/// margin fits inside the original volume.
pub fn crop_centered(
    v: &Volume,
    m: &Mask,
    target: (usize, usize, usize),
    margin: usize,
) -> Result<(Volume, Mask, BoundingBox), VolumeError> {
    if v.dims != m.dims {
        return Err(VolumeError::DimMismatch {
            op: "crop_centered",
            lhs: v.dims,
            rhs: m.dims,
        });
    }
    check_dims("crop_centered", target)?;
    let dims = [v.dims.0, v.dims.1, v.dims.2];
    let tgt = [target.0, target.1, target.2];
    const AXES: [&str; 3] = ["x", "y", "z"];
    for a in 0..3 {
        if tgt[a] > dims[a] {
            return Err(VolumeError::TargetTooLarge {
                axis: AXES[a],
                target: tgt[a],
                dim: dims[a],
            });
        }
    }
    let bbox = bounding_box(m)?;
    for a in 0..3 {
        let required = bbox.extent(a) + 2 * margin;
        if required > tgt[a] {
            return Err(VolumeError::CropTooSmall {
                axis: AXES[a],
                required,
                target: tgt[a],
            });
        }
    }

    let mut start = [0usize; 3];
    for a in 0..3 {
        let center = (bbox.lo[a] + bbox.hi[a]) / 2;
        let half = tgt[a] / 2;
        let lo = center.saturating_sub(half).min(dims[a] - tgt[a]);
        start[a] = lo;
    }

    let mut vout = vec![0.0f32; tgt[0] * tgt[1] * tgt[2]];
    let mut mout = vec![0u8; tgt[0] * tgt[1] * tgt[2]];
    let out_dims = (tgt[0], tgt[1], tgt[2]);
    for z in 0..tgt[2] {
        for y in 0..tgt[1] {
            let src = linear(v.dims, start[0], start[1] + y, start[2] + z);
            let dst = linear(out_dims, 0, y, z);
            vout[dst..dst + tgt[0]].copy_from_slice(&v.data[src..src + tgt[0]]);
            mout[dst..dst + tgt[0]].copy_from_slice(&m.data[src..src + tgt[0]]);
        }
    }
    let window = BoundingBox {
        lo: start,
        hi: [start[0] + tgt[0] - 1, start[1] + tgt[1] - 1, start[2] + tgt[2] - 1],
    };
    Ok((
        Volume {
            dims: out_dims,
            spacing_mm: v.spacing_mm,
            data: vout,
        },
        Mask {
            dims: out_dims,
            data: mout,
        },
        window,
    ))
}

/// Standardizes intensities to mean 0, standard deviation 1 (population
/// moments, f64 accumulation). A constant volume maps to all zeros.
pub fn zscore_normalize(v: &Volume) -> Volume {
    let n = v.data.len() as f64;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    let mut sum = 0.0f64;
    for &x in &v.data {
        lo = lo.min(x);
        hi = hi.max(x);
        sum += x as f64;
    }
    if lo == hi {
        return Volume {
            dims: v.dims,
            spacing_mm: v.spacing_mm,
            data: vec![0.0; v.data.len()],
        };
    }
    let mean = sum / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var.sqrt() + 1e-12);
    Volume {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        data: v
            .data
            .iter()
            .map(|&x| ((x as f64 - mean) * inv) as f32)
            .collect(),
    }
}

/// Thresholds a probability volume into a mask; voxels `>= threshold` set.
pub fn binarize(prob: &Volume, threshold: f64) -> Result<Mask, VolumeError> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(VolumeError::BadThreshold { value: threshold });
    }
    Ok(Mask {
        dims: prob.dims,
        data: prob
            .data
            .iter()
            .map(|&p| if (p as f64) >= threshold { 1 } else { 0 })
            .collect(),
    })
}
