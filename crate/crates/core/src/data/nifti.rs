//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only what the BraTS layout needs: 3-D scalar volumes, common integer and
//! float datatypes, either byte order on read, little-endian on write. On
//! disk `x` varies fastest; in memory the grid is row-major `(h, w, d)` with
//! `h = x`, so the axes are transposed on the way in and out.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    I32,
    F32,
    F64,
    I8,
    U16,
    U32,
}

impl DataType {
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

    fn size(self) -> usize {
        match self {
            DataType::U8 | DataType::I8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::I32 | DataType::U32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Row-major `(h, w, d)` values with scaling applied.
    pub data: Vec<f64>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: msg.into(),
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read(path: &Path) -> Result<NiftiVolume> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    parse(path, &bytes)
}

fn parse(path: &Path, bytes: &[u8]) -> Result<NiftiVolume> {
    if bytes.len() < HEADER_SIZE {
        return Err(format_err(path, "file shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
    if !le && !be {
        return Err(format_err(path, "not a NIfTI-1 file (bad sizeof_hdr)"));
    }
    let i16_at = |o: usize| {
        let b: [u8; 2] = bytes[o..o + 2].try_into().unwrap();
        if le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    if &bytes[344..347] != b"n+1" {
        return Err(format_err(path, "only single-file NIfTI-1 (n+1) is supported"));
    }
    let ndim = i16_at(40);
    if !(3..=7).contains(&ndim) {
        return Err(format_err(path, format!("unsupported dimensionality {ndim}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = i16_at(42 + 2 * i);
        if v <= 0 {
            return Err(format_err(path, format!("invalid dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    for i in 3..ndim as usize {
        if i16_at(42 + 2 * i) > 1 {
            return Err(format_err(path, "only 3-D scalar volumes are supported"));
        }
    }
    let dtype = DataType::from_code(i16_at(70))
        .ok_or_else(|| format_err(path, format!("unsupported datatype {}", i16_at(70))))?;
    let spacing = [f32_at(80) as f64, f32_at(84) as f64, f32_at(88) as f64]
        .map(|s| if s > 0.0 { s } else { 1.0 });
    let offset = f32_at(108) as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let (slope, inter) = if slope == 0.0 { (1.0, 0.0) } else { (slope, inter) };

    let n: usize = dims.iter().product();
    let size = dtype.size();
    let payload = bytes
        .get(offset..offset + n * size)
        .ok_or_else(|| format_err(path, "truncated voxel data"))?;
    let raw = |i: usize| -> f64 {
        let b = &payload[i * size..(i + 1) * size];
        macro_rules! num {
            ($t:ty) => {{
                let a = b.try_into().unwrap();
                (if le { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        match dtype {
            DataType::U8 => b[0] as f64,
            DataType::I8 => b[0] as i8 as f64,
            DataType::I16 => num!(i16),
            DataType::U16 => num!(u16),
            DataType::I32 => num!(i32),
            DataType::U32 => num!(u32),
            DataType::F32 => num!(f32),
            DataType::F64 => num!(f64),
        }
    };
    let [nx, ny, nz] = dims;
    let mut data = vec![0.0; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let file_idx = (z * ny + y) * nx + x;
                data[(x * ny + y) * nz + z] = raw(file_idx) * slope + inter;
            }
        }
    }
    Ok(NiftiVolume { dims, spacing, data })
}

/// Writes a volume; the output is a pure function of the inputs (gzip
/// header carries no timestamp).
pub fn write(path: &Path, vol: &NiftiVolume, dtype: DataType) -> Result<()> {
    let [nx, ny, nz] = vol.dims;
    let mut header = vec![0u8; VOX_OFFSET];
    header[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let put_i16 = |h: &mut Vec<u8>, o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    put_i16(&mut header, 40, 3);
    put_i16(&mut header, 42, nx as i16);
    put_i16(&mut header, 44, ny as i16);
    put_i16(&mut header, 46, nz as i16);
    for i in 4..8 {
        put_i16(&mut header, 40 + 2 * i, 1);
    }
    put_i16(&mut header, 70, dtype.code());
    put_i16(&mut header, 72, (dtype.size() * 8) as i16);
    let put_f32 = |h: &mut Vec<u8>, o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    put_f32(&mut header, 76, 1.0);
    for (i, s) in vol.spacing.iter().enumerate() {
        put_f32(&mut header, 80 + 4 * i, *s as f32);
    }
    put_f32(&mut header, 108, VOX_OFFSET as f32);
    put_f32(&mut header, 112, 1.0);
    header[123] = 10; // xyzt_units: mm, s
    header[344..348].copy_from_slice(b"n+1\0");

    let n: usize = vol.dims.iter().product();
    let mut body = Vec::with_capacity(n * dtype.size());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = vol.data[(x * ny + y) * nz + z];
                match dtype {
                    DataType::U8 => body.push(v as u8),
                    DataType::I8 => body.push(v as i8 as u8),
                    DataType::I16 => body.extend_from_slice(&(v as i16).to_le_bytes()),
                    DataType::U16 => body.extend_from_slice(&(v as u16).to_le_bytes()),
                    DataType::I32 => body.extend_from_slice(&(v as i32).to_le_bytes()),
                    DataType::U32 => body.extend_from_slice(&(v as u32).to_le_bytes()),
                    DataType::F32 => body.extend_from_slice(&(v as f32).to_le_bytes()),
                    DataType::F64 => body.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&header)?;
        enc.write_all(&body)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(&header)?;
        file.write_all(&body)?;
        file.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_axis_order() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [3, 4, 5];
        let data: Vec<f64> = (0..60).map(|i| i as f64 * 0.5).collect();
        let vol = NiftiVolume {
            dims,
            spacing: [1.0, 1.0, 2.0],
            data,
        };
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write(&p, &vol, DataType::F32).unwrap();
            let back = read(&p).unwrap();
            assert_eq!(back, vol);
        }
        // x fastest on disk: the second stored voxel is (h=1, w=0, d=0).
        let p = dir.path().join("v.nii");
        let bytes = std::fs::read(&p).unwrap();
        let second = f32::from_le_bytes(bytes[VOX_OFFSET + 4..VOX_OFFSET + 8].try_into().unwrap());
        assert_eq!(second as f64, vol.data[4 * 5]);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, vec![7u8; 400]).unwrap();
        assert!(matches!(read(&p), Err(Error::Format { .. })));
    }
}
