//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! Volume axis 0 is stored as NIfTI `k`, axis 2 as `i`, so the voxel
//! buffer order is identical on both sides. Label tables travel as a JSON
//! comment extension (ecode 6).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::{Compression, GzBuilder};

use crate::volume::{Geometry, LabelVolume, ScalarVolume};
use crate::{Error, Result};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;
const ECODE_COMMENT: i32 = 6;
const LABEL_KEY: &str = "label_table";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl DataType {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            256 => DataType::I8,
            512 => DataType::U16,
            768 => DataType::U32,
            _ => return None,
        })
    }

    fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
            DataType::I8 => 256,
            DataType::U16 => 512,
            DataType::U32 => 768,
        }
    }

    fn bytes(self) -> usize {
        match self {
            DataType::U8 | DataType::I8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::I32 | DataType::U32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

struct Raw {
    geom: Geometry,
    dtype: DataType,
    big_endian: bool,
    slope: f64,
    inter: f64,
    payload: Vec<u8>,
    comments: Vec<String>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    big: bool,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[at..at + N].try_into().unwrap();
        if self.big {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    let mut reader = BufReader::new(file);
    if is_gz(path) {
        GzDecoder::new(reader).read_to_end(&mut buf)
    } else {
        reader.read_to_end(&mut buf)
    }
    .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn parse(path: &Path, buf: &[u8]) -> Result<Raw> {
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if buf.len() < HEADER_LEN {
        return Err(bad("file shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes(buf[0..4].try_into().unwrap());
    let big = match le {
        348 => false,
        _ if i32::from_be_bytes(buf[0..4].try_into().unwrap()) == 348 => true,
        _ => return Err(bad("not a NIfTI-1 file (sizeof_hdr != 348)")),
    };
    if &buf[344..347] != b"n+1" {
        return Err(bad("only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let c = Cursor { buf, big };
    let ndim = c.i16(40);
    if !(3..=4).contains(&ndim) || (ndim == 4 && c.i16(48) > 1) {
        return Err(bad("expected a 3D volume"));
    }
    let dim = |i: usize| c.i16(40 + 2 * i);
    if (1..=3).any(|i| dim(i) < 1) {
        return Err(bad("non-positive dimension"));
    }
    let dtype = DataType::from_code(c.i16(70)).ok_or_else(|| bad("unsupported datatype"))?;
    let pix = |i: usize| c.f32(76 + 4 * i) as f64;
    let shape = [dim(3) as usize, dim(2) as usize, dim(1) as usize];
    let spacing = [pix(3).abs(), pix(2).abs(), pix(1).abs()];
    let origin = if c.i16(254) > 0 {
        [c.f32(312 + 12) as f64, c.f32(296 + 12) as f64, c.f32(280 + 12) as f64]
    } else {
        [c.f32(276) as f64, c.f32(272) as f64, c.f32(268) as f64]
    };
    let geom = Geometry::with_origin(shape, spacing, origin).map_err(|e| bad(&e.to_string()))?;
    let vox_offset = c.f32(108) as usize;
    let mut comments = Vec::new();
    if buf.len() >= DATA_OFFSET && buf[348] != 0 {
        let mut at = DATA_OFFSET;
        while at + 8 <= vox_offset.min(buf.len()) {
            let esize = c.i32(at) as usize;
            let ecode = c.i32(at + 4);
            if esize < 8 || at + esize > buf.len() {
                break;
            }
            if ecode == ECODE_COMMENT {
                let body = &buf[at + 8..at + esize];
                let end = body.iter().position(|b| *b == 0).unwrap_or(body.len());
                comments.push(String::from_utf8_lossy(&body[..end]).into_owned());
            }
            at += esize;
        }
    }
    let need = geom.len() * dtype.bytes();
    if buf.len() < vox_offset + need {
        return Err(bad("voxel data truncated"));
    }
    let slope = c.f32(112) as f64;
    let inter = c.f32(116) as f64;
    Ok(Raw {
        geom,
        dtype,
        big_endian: big,
        slope,
        inter,
        payload: buf[vox_offset..vox_offset + need].to_vec(),
        comments,
    })
}

fn decode(raw: &Raw) -> Vec<f64> {
    let w = raw.dtype.bytes();
    raw.payload
        .chunks_exact(w)
        .map(|chunk| {
            let mut b = [0u8; 8];
            b[..w].copy_from_slice(chunk);
            if raw.big_endian {
                b[..w].reverse();
            }
            match raw.dtype {
                DataType::U8 => b[0] as f64,
                DataType::I8 => b[0] as i8 as f64,
                DataType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
                DataType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
                DataType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                DataType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                DataType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                DataType::F64 => f64::from_le_bytes(b),
            }
        })
        .collect()
}

pub fn read_scalar(path: &Path) -> Result<ScalarVolume> {
    let buf = read_all(path)?;
    let raw = parse(path, &buf)?;
    let scaled = raw.slope != 0.0 && !(raw.slope == 1.0 && raw.inter == 0.0);
    let data = decode(&raw)
        .into_iter()
        .map(|v| if scaled { (v * raw.slope + raw.inter) as f32 } else { v as f32 })
        .collect();
    let vol = ScalarVolume::new(raw.geom, data)?;
    if !vol.all_finite() {
        return Err(Error::Data(format!("{}: non-finite voxel values", path.display())));
    }
    Ok(vol)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let buf = read_all(path)?;
    let raw = parse(path, &buf)?;
    let mut data = Vec::with_capacity(raw.geom.len());
    for v in decode(&raw) {
        if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
            return Err(Error::Data(format!("{}: label value {v} is not a nonnegative integer", path.display())));
        }
        data.push(v as u16);
    }
    let mut table = BTreeMap::new();
    for comment in &raw.comments {
        if let Ok(serde_json::Value::Object(obj)) = serde_json::from_str::<serde_json::Value>(comment) {
            if let Some(t) = obj.get(LABEL_KEY) {
                table = serde_json::from_value(t.clone())
                    .map_err(|e| Error::Data(format!("{}: bad label table: {e}", path.display())))?;
            }
        }
    }
    Ok(LabelVolume::new(raw.geom, data)?.with_table(table))
}

fn header(geom: &Geometry, dtype: DataType, vox_offset: usize, descrip: &str) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_LEN];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    put(&mut h, 38, b"r");
    let [d0, d1, d2] = geom.shape;
    for (i, v) in [3i16, d2 as i16, d1 as i16, d0 as i16, 1, 1, 1, 1].iter().enumerate() {
        put(&mut h, 40 + 2 * i, &v.to_le_bytes());
    }
    put(&mut h, 70, &dtype.code().to_le_bytes());
    put(&mut h, 72, &((dtype.bytes() * 8) as i16).to_le_bytes());
    let [s0, s1, s2] = geom.spacing_mm.map(|v| v as f32);
    for (i, v) in [1.0f32, s2, s1, s0, 0.0, 0.0, 0.0, 0.0].iter().enumerate() {
        put(&mut h, 76 + 4 * i, &v.to_le_bytes());
    }
    put(&mut h, 108, &(vox_offset as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    put(&mut h, 123, &[2u8]); // mm
    let text = descrip.as_bytes();
    put(&mut h, 148, &text[..text.len().min(79)]);
    put(&mut h, 252, &1i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    let [o0, o1, o2] = geom.origin_mm.map(|v| v as f32);
    put(&mut h, 268, &o2.to_le_bytes());
    put(&mut h, 272, &o1.to_le_bytes());
    put(&mut h, 276, &o0.to_le_bytes());
    let rows = [[s2, 0.0, 0.0, o2], [0.0, s1, 0.0, o1], [0.0, 0.0, s0, o0]];
    for (r, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            put(&mut h, 280 + 16 * r + 4 * j, &v.to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");
    h
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if is_gz(path) {
        // fixed mtime so identical volumes produce identical files
        let mut gz = GzBuilder::new().mtime(0).write(w, Compression::fast());
        gz.write_all(bytes).and_then(|_| gz.finish().map(|_| ())).map_err(|e| Error::io(path, e))
    } else {
        w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

pub fn write_scalar(path: &Path, vol: &ScalarVolume) -> Result<()> {
    let mut out = header(vol.geometry(), DataType::F32, DATA_OFFSET, "lnsynth image");
    out.extend_from_slice(&[0; 4]);
    out.reserve(vol.data().len() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn write_labels(path: &Path, vol: &LabelVolume) -> Result<()> {
    let wide = vol.max_label() > u8::MAX as u16;
    let dtype = if wide { DataType::U16 } else { DataType::U8 };
    let mut ext = Vec::new();
    if !vol.label_table.is_empty() {
        let json = serde_json::json!({ LABEL_KEY: vol.label_table }).to_string();
        let mut body = json.into_bytes();
        body.push(0);
        let esize = (8 + body.len()).div_ceil(16) * 16;
        body.resize(esize - 8, 0);
        ext.extend_from_slice(&(esize as i32).to_le_bytes());
        ext.extend_from_slice(&ECODE_COMMENT.to_le_bytes());
        ext.extend_from_slice(&body);
    }
    let mut out = header(vol.geometry(), dtype, DATA_OFFSET + ext.len(), "lnsynth labels");
    out.extend_from_slice(&[!ext.is_empty() as u8, 0, 0, 0]);
    out.extend_from_slice(&ext);
    for v in vol.data() {
        if wide {
            out.extend_from_slice(&v.to_le_bytes());
        } else {
            out.push(*v as u8);
        }
    }
    write_file(path, &out)
}
