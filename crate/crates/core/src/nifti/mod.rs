//! NIfTI-1 single-file reading and writing, plus atlas handling.
//!
//! Only `.nii` / `.nii.gz` payloads with magic `n+1\0` are accepted. Voxel
//! data is decoded into `f64` with `scl_slope`/`scl_inter` applied, and the
//! voxel-to-world affine is resolved sform > qform > pixdim diagonal.

pub mod affine;
mod atlas;

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

pub use affine::Affine;
pub use atlas::{
    read_roi_table, read_roi_table_file, resample_labels_nn, write_roi_table, AtlasParcellation,
    RoiEntry,
};

use crate::error::{Error, NiftiError, Result};

pub const HEADER_SIZE: usize = 348;
/// Default data offset for single-file NIfTI-1: header plus 4 extension bytes.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::Uint8),
            4 => Some(Datatype::Int16),
            8 => Some(Datatype::Int32),
            16 => Some(Datatype::Float32),
            64 => Some(Datatype::Float64),
            _ => None,
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Int32 | Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Datatype::Float32 | Datatype::Float64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endianness {
    Little,
    Big,
}

/// Where the voxel-to-world transform came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffineSource {
    Sform,
    Qform,
    Pixdim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    /// Axis lengths after squeezing a singleton 4th dimension.
    pub dims: [usize; 3],
    pub datatype: Datatype,
    pub voxel_sizes: [f64; 3],
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub affine: Affine,
    pub affine_source: AffineSource,
    pub vox_offset: usize,
    pub endianness: Endianness,
    pub description: String,
}

impl NiftiHeader {
    /// Float32 header for a grid with the given affine; voxel sizes are
    /// taken from the affine column norms.
    pub fn for_grid(dims: [usize; 3], affine: Affine) -> Self {
        let mut voxel_sizes = [0.0; 3];
        for (j, vs) in voxel_sizes.iter_mut().enumerate() {
            *vs = (0..3).map(|i| affine[i][j].powi(2)).sum::<f64>().sqrt();
        }
        NiftiHeader {
            dims,
            datatype: Datatype::Float32,
            voxel_sizes,
            scl_slope: 1.0,
            scl_inter: 0.0,
            affine,
            affine_source: AffineSource::Sform,
            vox_offset: DEFAULT_VOX_OFFSET,
            endianness: Endianness::Little,
            description: String::new(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// A 3D scalar volume, x fastest: `index = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
    pub affine: Affine,
}

impl VolumeGrid {
    pub fn new(shape: [usize; 3], data: Vec<f64>, affine: Affine) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(NiftiError::ShapeMismatch {
                data: data.len(),
                header: n,
            }
            .into());
        }
        Ok(VolumeGrid {
            shape,
            data,
            affine,
        })
    }

    pub fn zeros(shape: [usize; 3], affine: Affine) -> Self {
        VolumeGrid {
            shape,
            data: vec![0.0; shape.iter().product()],
            affine,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endianness,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endianness::Little => LittleEndian::read_i16(&self.buf[off..]),
            Endianness::Big => BigEndian::read_i16(&self.buf[off..]),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endianness::Little => LittleEndian::read_f32(&self.buf[off..]),
            Endianness::Big => BigEndian::read_f32(&self.buf[off..]),
        }
    }

    fn i32(&self, off: usize) -> i32 {
        match self.endian {
            Endianness::Little => LittleEndian::read_i32(&self.buf[off..]),
            Endianness::Big => BigEndian::read_i32(&self.buf[off..]),
        }
    }

    fn f64(&self, off: usize) -> f64 {
        match self.endian {
            Endianness::Little => LittleEndian::read_f64(&self.buf[off..]),
            Endianness::Big => BigEndian::read_f64(&self.buf[off..]),
        }
    }
}

/// Decodes a complete `.nii` payload, gunzipping first when needed.
pub fn parse_nifti(bytes: &[u8]) -> Result<(NiftiHeader, VolumeGrid)> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| NiftiError::Gzip(e.to_string()))?;
        parse_raw(&raw)
    } else {
        parse_raw(bytes)
    }
}

fn parse_raw(buf: &[u8]) -> Result<(NiftiHeader, VolumeGrid)> {
    if buf.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE,
            available: buf.len(),
        }
        .into());
    }
    let endian = match LittleEndian::read_i32(buf) {
        348 => Endianness::Little,
        other => {
            if BigEndian::read_i32(buf) == 348 {
                Endianness::Big
            } else {
                return Err(NiftiError::BadHeaderSize(other).into());
            }
        }
    };
    let r = Reader { buf, endian };

    let magic: [u8; 4] = buf[344..348].try_into().unwrap();
    if &magic == MAGIC_PAIR {
        return Err(NiftiError::HeaderPairUnsupported.into());
    }
    if &magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(magic).into());
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16(40 + 2 * i);
    }
    let ndim = dim[0];
    if !(3..=4).contains(&ndim) {
        return Err(NiftiError::BadDimensions(format!("dim[0] = {ndim}, expected 3 or 4")).into());
    }
    if ndim == 4 && dim[4] != 1 {
        return Err(NiftiError::BadDimensions(format!(
            "4th dimension has length {}; only singleton 4D volumes are accepted",
            dim[4]
        ))
        .into());
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(NiftiError::BadDimensions(format!(
            "spatial dims {:?} must all be >= 1",
            &dim[1..4]
        ))
        .into());
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let code = r.i16(70);
    let datatype = Datatype::from_code(code).ok_or(NiftiError::UnsupportedDatatype(code))?;

    let mut pixdim = [0f64; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(76 + 4 * i) as f64;
    }
    let vox_offset_raw = r.f32(108);
    if !vox_offset_raw.is_finite() || vox_offset_raw < DEFAULT_VOX_OFFSET as f32 {
        return Err(NiftiError::BadVoxOffset(vox_offset_raw).into());
    }
    let vox_offset = vox_offset_raw as usize;

    let mut scl_slope = r.f32(112) as f64;
    let mut scl_inter = r.f32(116) as f64;
    if scl_slope == 0.0 || !scl_slope.is_finite() {
        scl_slope = 1.0;
        scl_inter = 0.0;
    }
    if !scl_inter.is_finite() {
        scl_inter = 0.0;
    }

    let descrip_bytes = &buf[148..228];
    let end = descrip_bytes.iter().position(|&b| b == 0).unwrap_or(80);
    let description = String::from_utf8_lossy(&descrip_bytes[..end]).into_owned();

    let voxel_sizes = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    let qform_code = r.i16(252);
    let sform_code = r.i16(254);
    let (affine, affine_source) = resolve_affine(&r, qform_code, sform_code, &pixdim);

    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| NiftiError::BadDimensions("voxel count overflows".into()))?;
    let needed = n
        .checked_mul(datatype.size())
        .and_then(|v| v.checked_add(vox_offset))
        .ok_or_else(|| NiftiError::BadDimensions("payload size overflows".into()))?;
    if buf.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            available: buf.len(),
        }
        .into());
    }

    let payload = Reader {
        buf: &buf[vox_offset..needed],
        endian,
    };
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let raw = match datatype {
            Datatype::Uint8 => payload.buf[i] as f64,
            Datatype::Int16 => payload.i16(2 * i) as f64,
            Datatype::Int32 => payload.i32(4 * i) as f64,
            Datatype::Float32 => payload.f32(4 * i) as f64,
            Datatype::Float64 => payload.f64(8 * i),
        };
        let v = raw * scl_slope + scl_inter;
        if !v.is_finite() {
            return Err(NiftiError::NonFinite(i).into());
        }
        data.push(v);
    }

    let header = NiftiHeader {
        dims,
        datatype,
        voxel_sizes,
        scl_slope,
        scl_inter,
        affine,
        affine_source,
        vox_offset,
        endianness: endian,
        description,
    };
    let volume = VolumeGrid {
        shape: dims,
        data,
        affine,
    };
    Ok((header, volume))
}

fn resolve_affine(
    r: &Reader<'_>,
    qform_code: i16,
    sform_code: i16,
    pixdim: &[f64; 8],
) -> (Affine, AffineSource) {
    if sform_code > 0 {
        let mut m = affine::identity();
        for (row, base) in [280usize, 296, 312].iter().enumerate() {
            for (col, v) in m[row].iter_mut().enumerate() {
                *v = r.f32(base + 4 * col) as f64;
            }
        }
        if m.iter().flatten().all(|v| v.is_finite()) && affine::invert(&m).is_some() {
            return (m, AffineSource::Sform);
        }
    }
    if qform_code > 0 {
        let q: Vec<f64> = (0..6).map(|i| r.f32(256 + 4 * i) as f64).collect();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let zooms = [pixdim[1], pixdim[2], pixdim[3]];
        if q.iter().chain(zooms.iter()).all(|v| v.is_finite()) {
            let m = affine::from_quaternion(q[0], q[1], q[2], [q[3], q[4], q[5]], zooms, qfac);
            if m.iter().flatten().all(|v| v.is_finite()) && affine::invert(&m).is_some() {
                return (m, AffineSource::Qform);
            }
        }
    }
    let zoom = |v: f64| {
        if v.is_finite() && v != 0.0 {
            v.abs()
        } else {
            1.0
        }
    };
    (
        affine::diagonal(zoom(pixdim[1]), zoom(pixdim[2]), zoom(pixdim[3])),
        AffineSource::Pixdim,
    )
}

/// Encodes a volume little-endian with the header's datatype and scaling.
/// The affine is written as an sform (code 2) and mirrored in pixdim.
pub fn write_nifti(header: &NiftiHeader, volume: &VolumeGrid, compress: bool) -> Result<Vec<u8>> {
    let n = header.voxel_count();
    if volume.shape != header.dims || volume.data.len() != n {
        return Err(NiftiError::ShapeMismatch {
            data: volume.data.len(),
            header: n,
        }
        .into());
    }
    let vox_offset = header.vox_offset.max(DEFAULT_VOX_OFFSET);
    let mut buf = vec![0u8; vox_offset + n * header.datatype.size()];
    LittleEndian::write_i32(&mut buf[0..], HEADER_SIZE as i32);
    buf[38] = b'r';
    let dim: [i16; 8] = [
        3,
        header.dims[0] as i16,
        header.dims[1] as i16,
        header.dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    if header.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(
            NiftiError::BadDimensions(format!("cannot encode dims {:?}", header.dims)).into(),
        );
    }
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut buf[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut buf[70..], header.datatype.code());
    LittleEndian::write_i16(&mut buf[72..], (header.datatype.size() * 8) as i16);
    let pixdim = [
        1.0,
        header.voxel_sizes[0],
        header.voxel_sizes[1],
        header.voxel_sizes[2],
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut buf[76 + 4 * i..], *p as f32);
    }
    LittleEndian::write_f32(&mut buf[108..], vox_offset as f32);
    LittleEndian::write_f32(&mut buf[112..], header.scl_slope as f32);
    LittleEndian::write_f32(&mut buf[116..], header.scl_inter as f32);
    buf[123] = 2; // mm
    let desc = header.description.as_bytes();
    let len = desc.len().min(79);
    buf[148..148 + len].copy_from_slice(&desc[..len]);
    LittleEndian::write_i16(&mut buf[252..], 0);
    LittleEndian::write_i16(&mut buf[254..], 2);
    for (row, base) in [280usize, 296, 312].iter().enumerate() {
        for col in 0..4 {
            LittleEndian::write_f32(&mut buf[base + 4 * col..], volume.affine[row][col] as f32);
        }
    }
    buf[344..348].copy_from_slice(MAGIC_SINGLE);

    let slope = if header.scl_slope == 0.0 {
        1.0
    } else {
        header.scl_slope
    };
    let inter = if header.scl_slope == 0.0 {
        0.0
    } else {
        header.scl_inter
    };
    let payload = &mut buf[vox_offset..];
    for (i, &v) in volume.data.iter().enumerate() {
        let raw = (v - inter) / slope;
        let raw = if header.datatype.is_float() {
            raw
        } else {
            raw.round()
        };
        match header.datatype {
            Datatype::Uint8 => payload[i] = raw.clamp(0.0, 255.0) as u8,
            Datatype::Int16 => LittleEndian::write_i16(&mut payload[2 * i..], raw as i16),
            Datatype::Int32 => LittleEndian::write_i32(&mut payload[4 * i..], raw as i32),
            Datatype::Float32 => LittleEndian::write_f32(&mut payload[4 * i..], raw as f32),
            Datatype::Float64 => LittleEndian::write_f64(&mut payload[8 * i..], raw),
        }
    }

    if compress {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&buf)?;
        Ok(enc.finish()?)
    } else {
        Ok(buf)
    }
}

pub fn read_nifti_file(path: &Path) -> Result<(NiftiHeader, VolumeGrid)> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_nifti(&bytes).map_err(|e| e.in_file(path))
}

/// Writes `volume` to `path`, gzip-compressing when the name ends in `.gz`.
pub fn write_nifti_file(path: &Path, header: &NiftiHeader, volume: &VolumeGrid) -> Result<()> {
    let compress = path.extension().is_some_and(|e| e == "gz");
    let bytes = write_nifti(header, volume, compress)?;
    std::fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
}
