//! Volume files.
//!
//! Two formats are supported:
//!
//! * single-file NIfTI-1 (`.nii`), uncompressed, either byte order; read as
//!   uint8 / int16 / uint16 / int32 / float32 / float64 with the
//!   `scl_slope` / `scl_inter` scaling applied, written as float32.
//! * raw little-endian float32 (`.raw`) with a JSON sidecar next to it
//!   (same stem, `.json`): `{"dims": [d, h, w], "spacing": [..], "dtype": "float32"}`.
//!
//! NIfTI `dim[1..=3]` maps to `(w, h, d)`, i.e. x runs fastest in both.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};

const NIFTI_HEADER: usize = 348;
const NIFTI_DATA_OFFSET: usize = 352;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub dtype: String,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn is_nifti(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    if is_nifti(path) {
        read_nifti(path)
    } else if path.to_string_lossy().ends_with(".nii.gz") {
        Err(Error::Format(format!("{}: compressed NIfTI is not supported", path.display())))
    } else {
        read_raw(path)
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    if is_nifti(path) {
        write_nifti(path, v)
    } else {
        write_raw(path, v)
    }
}

pub fn write_raw(path: &Path, v: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = RawHeader {
        dims: v.dims,
        spacing: unit_spacing(),
        dtype: "float32".into(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&header).expect("header serializes")).map_err(|e| Error::io(&side, e))
}

pub fn read_raw(path: &Path) -> Result<Volume> {
    let side = sidecar_path(path);
    let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let header: RawHeader =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    if header.dtype != "float32" {
        return Err(Error::Format(format!("{}: unsupported dtype {}", side.display(), header.dtype)));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for dims {:?}, found {}",
            path.display(),
            n * 4,
            header.dims,
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume::new(header.dims, data)
}

pub fn write_nifti(path: &Path, v: &Volume) -> Result<()> {
    let [d, h, w] = v.dims;
    let mut hdr = vec![0u8; NIFTI_DATA_OFFSET];
    hdr[0..4].copy_from_slice(&(NIFTI_HEADER as i32).to_le_bytes());
    let dims: [i16; 8] = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, x) in dims.iter().enumerate() {
        hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&x.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&16i16.to_le_bytes()); // float32
    hdr[72..74].copy_from_slice(&32i16.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    for (i, x) in pixdim.iter().enumerate() {
        hdr[76 + 4 * i..80 + 4 * i].copy_from_slice(&x.to_le_bytes());
    }
    hdr[108..112].copy_from_slice(&(NIFTI_DATA_OFFSET as f32).to_le_bytes());
    hdr[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    hdr[344..348].copy_from_slice(b"n+1\0");
    let mut bytes = hdr;
    bytes.reserve(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < NIFTI_HEADER {
        return Err(bad("file shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4")) == NIFTI_HEADER as i32;
    let be = i32::from_be_bytes(bytes[0..4].try_into().expect("4")) == NIFTI_HEADER as i32;
    if !le && !be {
        return Err(bad("sizeof_hdr is not 348"));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(bad("not a single-file NIfTI-1 volume"));
    }
    let i16_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1]];
        if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    };
    let f32_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
        if le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    };
    let ndim = i16_at(40);
    if !(3..=7).contains(&ndim) {
        return Err(bad(&format!("unsupported dimensionality {ndim}")));
    }
    for i in 4..=ndim as usize {
        if i16_at(40 + 2 * i) > 1 {
            return Err(bad("only single 3D volumes are supported"));
        }
    }
    let (w, h, d) = (i16_at(42), i16_at(44), i16_at(46));
    if w <= 0 || h <= 0 || d <= 0 {
        return Err(bad("non-positive dimension"));
    }
    let (w, h, d) = (w as usize, h as usize, d as usize);
    let datatype = i16_at(70);
    let offset = f32_at(108) as usize;
    let (slope, inter) = (f32_at(112), f32_at(116));
    let n = w * h * d;
    let width = match datatype {
        2 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(bad(&format!("unsupported datatype code {other}"))),
    };
    let payload = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| bad("truncated voxel data"))?;
    let decode = |c: &[u8]| -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let arr = c.try_into().expect("width");
                (if le { <$t>::from_le_bytes(arr) } else { <$t>::from_be_bytes(arr) }) as f64
            }};
        }
        match datatype {
            2 => c[0] as f64,
            4 => num!(i16),
            512 => num!(u16),
            8 => num!(i32),
            16 => num!(f32),
            _ => num!(f64),
        }
    };
    let scale = slope != 0.0 && slope.is_finite();
    let data = payload
        .chunks_exact(width)
        .map(|c| {
            let v = decode(c);
            (if scale { v * slope as f64 + inter as f64 } else { v }) as f32
        })
        .collect();
    Volume::new([d, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        Volume::from_fn([4, 5, 6], |z, y, x| z as f32 * 100.0 + y as f32 * 10.0 + x as f32 - 0.25)
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        write_volume(&p, &sample()).unwrap();
        assert!(sidecar_path(&p).exists());
        assert_eq!(read_volume(&p).unwrap(), sample());
    }

    #[test]
    fn nifti_round_trip_keeps_axis_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        write_volume(&p, &sample()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // x runs fastest: the second stored voxel is (0, 0, 1)
        let second = f32::from_le_bytes(bytes[356..360].try_into().unwrap());
        assert_eq!(second, sample().get(0, 0, 1));
        assert_eq!(read_volume(&p).unwrap(), sample());
    }

    #[test]
    fn int16_nifti_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        write_nifti(&p, &Volume::zeros([2, 2, 2])).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(NIFTI_DATA_OFFSET);
        bytes[70..72].copy_from_slice(&4i16.to_le_bytes());
        bytes[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        for i in 0..8i16 {
            bytes.extend_from_slice(&(i * 2).to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.data, (0..8).map(|i| i as f32 + 1.0).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_raw_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        write_volume(&p, &sample()).unwrap();
        std::fs::write(&p, [0u8; 12]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format(_))));
    }
}
