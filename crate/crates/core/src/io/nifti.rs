//! Minimal NIfTI-1 single-file codec.

use std::io::{Read, Write};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::{read::GzDecoder, write::GzEncoder, Compression};

use super::{decode_payload, encode_payload, AnyGrid, DType, Element};
use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing, VoxelGrid};

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn datatype_code(d: DType) -> i16 {
    match d {
        DType::U8 => DT_UINT8,
        DType::I16 => DT_INT16,
        DType::F32 => DT_FLOAT32,
        DType::F64 => DT_FLOAT64,
    }
}

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        field,
        detail: detail.into(),
    }
}

pub fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Decode a `.nii` or `.nii.gz` byte stream (gzip is sniffed).
pub fn decode(bytes: &[u8]) -> Result<AnyGrid> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| fmt_err("gzip", e.to_string()))?;
        return decode_plain(&raw);
    }
    decode_plain(bytes)
}

struct Header {
    big_endian: bool,
    dims: Dims,
    spacing: Spacing,
    dtype: DType,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_SIZE {
        return Err(fmt_err(
            "sizeof_hdr",
            format!("stream has {} bytes, header needs {HEADER_SIZE}", b.len()),
        ));
    }
    let big_endian = if LittleEndian::read_i32(&b[0..4]) == HEADER_SIZE as i32 {
        false
    } else if BigEndian::read_i32(&b[0..4]) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(fmt_err(
            "sizeof_hdr",
            format!("expected 348, found {}", LittleEndian::read_i32(&b[0..4])),
        ));
    };
    let i16_at = |o: usize| {
        if big_endian {
            BigEndian::read_i16(&b[o..o + 2])
        } else {
            LittleEndian::read_i16(&b[o..o + 2])
        }
    };
    let f32_at = |o: usize| {
        if big_endian {
            BigEndian::read_f32(&b[o..o + 4])
        } else {
            LittleEndian::read_f32(&b[o..o + 4])
        }
    };

    match &b[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(fmt_err("magic", "two-file (.hdr/.img) NIfTI is not supported")),
        m => return Err(fmt_err("magic", format!("expected \"n+1\\0\", found {m:?}"))),
    }

    let dim: Vec<i16> = (0..8).map(|i| i16_at(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(fmt_err("dim", format!("dim[0] = {ndim} outside 1..=7")));
    }
    let mut extent = [1usize; 3];
    for i in 1..=ndim as usize {
        let n = dim[i];
        if n < 1 {
            return Err(fmt_err("dim", format!("dim[{i}] = {n}")));
        }
        if i <= 3 {
            extent[i - 1] = n as usize;
        } else if n != 1 {
            return Err(fmt_err("dim", format!("dim[{i}] = {n}; only 3D volumes are supported")));
        }
    }
    // NIfTI stores (nx, ny, nz) with x fastest; ours is (depth, height, width).
    let dims = Dims::new(extent[2], extent[1], extent[0]);

    let dtype = match i16_at(70) {
        DT_UINT8 => DType::U8,
        DT_INT16 => DType::I16,
        DT_FLOAT32 => DType::F32,
        DT_FLOAT64 => DType::F64,
        other => return Err(fmt_err("datatype", format!("unsupported code {other}"))),
    };
    let bitpix = i16_at(72);
    if bitpix as usize != dtype.size() * 8 {
        return Err(fmt_err(
            "bitpix",
            format!("{bitpix} does not match datatype {dtype:?}"),
        ));
    }

    let mut sp = [0f64; 3];
    for (i, s) in sp.iter_mut().enumerate() {
        let v = f32_at(76 + 4 * (i + 1)).abs() as f64;
        if !(v.is_finite() && v > 0.0) {
            return Err(fmt_err("pixdim", format!("pixdim[{}] = {v}", i + 1)));
        }
        *s = v;
    }
    let spacing = Spacing::new(sp[2], sp[1], sp[0]);

    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(fmt_err("vox_offset", format!("{vox_offset}")));
    }

    Ok(Header {
        big_endian,
        dims,
        spacing,
        dtype,
        vox_offset: vox_offset as usize,
        scl_slope: f32_at(112),
        scl_inter: f32_at(116),
    })
}

fn decode_plain(b: &[u8]) -> Result<AnyGrid> {
    let h = parse_header(b)?;
    if b.len() < h.vox_offset {
        return Err(Error::Size(format!(
            "vox_offset {} beyond end of stream ({} bytes)",
            h.vox_offset,
            b.len()
        )));
    }
    let grid = decode_payload(h.dtype, &b[h.vox_offset..], h.dims, h.spacing, h.big_endian)?;
    let slope = h.scl_slope;
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || h.scl_inter != 0.0) {
        let (m, c) = (slope as f64, h.scl_inter as f64);
        let scaled = grid.to_f64().map(|&v| (v * m + c) as f32);
        return Ok(AnyGrid::F32(scaled));
    }
    Ok(grid)
}

/// Encode a grid as NIfTI-1 (little-endian), optionally gzip-compressed.
pub fn encode<T: Element>(grid: &VoxelGrid<T>, gzip: bool) -> Result<Vec<u8>> {
    let d = grid.dims();
    for (name, n) in [("width", d.width), ("height", d.height), ("depth", d.depth)] {
        if n == 0 || n > i16::MAX as usize {
            return Err(Error::Size(format!("{name} = {n} not representable in NIfTI-1")));
        }
    }
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim = [3, d.width, d.height, d.depth, 1, 1, 1, 1];
    for (i, v) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *v as i16);
    }
    LittleEndian::write_i16(&mut h[70..], datatype_code(T::DTYPE));
    LittleEndian::write_i16(&mut h[72..], (T::DTYPE.size() * 8) as i16);
    let s = grid.spacing();
    let pixdim = [1.0f32, s.x as f32, s.y as f32, s.z as f32, 1.0, 0.0, 0.0, 0.0];
    for (i, v) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *v);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // xyzt_units: mm
    let descrip = b"infilmap";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    // sform: axis-aligned scaling only
    LittleEndian::write_i16(&mut h[254..], 1);
    LittleEndian::write_f32(&mut h[280..], s.x as f32);
    LittleEndian::write_f32(&mut h[296 + 4..], s.y as f32);
    LittleEndian::write_f32(&mut h[312 + 8..], s.z as f32);
    h[344..348].copy_from_slice(b"n+1\0");

    h.extend_from_slice(&encode_payload(grid.data()));
    if !gzip {
        return Ok(h);
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&h)
        .and_then(|_| enc.finish())
        .map_err(|e| Error::io("<gzip buffer>", e))
}
