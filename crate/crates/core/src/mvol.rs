//! MVOL: a minimal little-endian container for intensity volumes and label
//! maps.
//!
//! ```text
//! offset  size  field
//! 0       6     magic "MVOL1\0"
//! 6       1     dtype (1 = f32 intensities, 2 = u8 labels)
//! 7       1     class count C (0 for intensities)
//! 8       12    nx, ny, nz as u32
//! 20      12    dx, dy, dz as f32 (mm)
//! 32      ...   payload, x-fastest
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::volume::{Dims, LabelMap, Spacing, Volume, VoxelError};

pub const MAGIC: &[u8; 6] = b"MVOL1\0";
pub const HEADER_LEN: usize = 32;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U8: u8 = 2;

#[derive(Debug, Error)]
pub enum MvolError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 6]),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("zero dimension in header ({0}, {1}, {2})")]
    ZeroDims(u32, u32, u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("trailing data: expected {expected} bytes, found {found}")]
    TrailingData { expected: usize, found: usize },
    #[error("expected {expected} file, found dtype {found}")]
    WrongKind { expected: &'static str, found: u8 },
    #[error("invalid contents: {0}")]
    Invalid(#[from] VoxelError),
}

/// Contents of an MVOL file.
#[derive(Debug, Clone, PartialEq)]
pub enum MvolData {
    Volume(Volume),
    Labels(LabelMap),
}

fn header(dtype: u8, classes: u8, dims: Dims, spacing: Spacing) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + dims.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(dtype);
    buf.push(classes);
    for d in dims.as_array() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in [spacing.dx, spacing.dy, spacing.dz] {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut buf = header(DTYPE_F32, 0, v.dims(), v.spacing());
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let mut buf = header(DTYPE_U8, l.num_classes() as u8, l.dims(), l.spacing());
    buf.extend_from_slice(l.labels());
    buf
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4-byte slice"))
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode(bytes: &[u8]) -> Result<MvolData, MvolError> {
    if bytes.len() < 6 || &bytes[..6] != MAGIC {
        let mut m = [0u8; 6];
        let k = bytes.len().min(6);
        m[..k].copy_from_slice(&bytes[..k]);
        return Err(MvolError::BadMagic(m));
    }
    if bytes.len() < HEADER_LEN {
        return Err(MvolError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let dtype = bytes[6];
    let classes = bytes[7];
    let (nx, ny, nz) = (u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16));
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(MvolError::ZeroDims(nx, ny, nz));
    }
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(MvolError::UnknownDtype(other)),
    };
    let dims = Dims::new(nx as usize, ny as usize, nz as usize);
    let spacing = Spacing::new(f32_at(bytes, 20), f32_at(bytes, 24), f32_at(bytes, 28))?;
    let expected = HEADER_LEN + dims.len() * elem;
    if bytes.len() < expected {
        return Err(MvolError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(MvolError::TrailingData { expected, found: bytes.len() });
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(match dtype {
        DTYPE_F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            MvolData::Volume(Volume::new(dims, spacing, data)?)
        }
        _ => MvolData::Labels(LabelMap::new(dims, spacing, usize::from(classes), payload.to_vec())?),
    })
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<MvolData, MvolError> {
    decode(&fs::read(path)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, MvolError> {
    match read_mvol(path)? {
        MvolData::Volume(v) => Ok(v),
        MvolData::Labels(_) => Err(MvolError::WrongKind { expected: "intensity", found: DTYPE_U8 }),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap, MvolError> {
    match read_mvol(path)? {
        MvolData::Labels(l) => Ok(l),
        MvolData::Volume(_) => Err(MvolError::WrongKind { expected: "label", found: DTYPE_F32 }),
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<(), MvolError> {
    Ok(fs::write(path, encode_volume(v))?)
}

pub fn write_labels(path: impl AsRef<Path>, l: &LabelMap) -> Result<(), MvolError> {
    Ok(fs::write(path, encode_labels(l))?)
}

pub fn write_mvol(path: impl AsRef<Path>, data: &MvolData) -> Result<(), MvolError> {
    match data {
        MvolData::Volume(v) => write_volume(path, v),
        MvolData::Labels(l) => write_labels(path, l),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_volume() -> Volume {
        let dims = Dims::new(4, 4, 4);
        let data = (0..64).map(|i| i as f32 * 0.25 - 3.0).collect();
        Volume::new(dims, Spacing::default(), data).unwrap()
    }

    #[test]
    fn file_length_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        write_volume(&path, &sample_volume()).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 288);
        assert_eq!(read_volume(&path).unwrap(), sample_volume());
    }

    #[test]
    fn header_fields() {
        let l = LabelMap::new(Dims::new(2, 3, 1), Spacing::default(), 5, vec![0, 1, 2, 3, 4, 0]).unwrap();
        let b = encode_labels(&l);
        assert_eq!(&b[..6], MAGIC);
        assert_eq!(b[6], DTYPE_U8);
        assert_eq!(b[7], 5);
        assert_eq!(u32_at(&b, 8), 2);
        assert_eq!(u32_at(&b, 12), 3);
        assert_eq!(u32_at(&b, 16), 1);
        assert_eq!(f32_at(&b, 28), 3.0);
        assert_eq!(b.len(), 38);
        assert_eq!(decode(&b).unwrap(), MvolData::Labels(l));
    }

    #[test]
    fn distinct_errors() {
        let good = encode_volume(&sample_volume());

        let mut bad_magic = good.clone();
        bad_magic[..4].copy_from_slice(b"XVOL");
        assert!(matches!(decode(&bad_magic), Err(MvolError::BadMagic(_))));

        assert!(matches!(decode(&good[..good.len() - 1]), Err(MvolError::Truncated { .. })));
        assert!(matches!(decode(&good[..20]), Err(MvolError::Truncated { .. })));

        let mut zero = good.clone();
        zero[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&zero), Err(MvolError::ZeroDims(4, 0, 4))));

        let mut dtype = good.clone();
        dtype[6] = 9;
        assert!(matches!(decode(&dtype), Err(MvolError::UnknownDtype(9))));
    }

    #[test]
    fn label_range_checked_on_read() {
        let l = LabelMap::new(Dims::new(2, 1, 1), Spacing::default(), 3, vec![0, 2]).unwrap();
        let mut b = encode_labels(&l);
        b[HEADER_LEN + 1] = 7;
        assert!(matches!(decode(&b), Err(MvolError::Invalid(VoxelError::LabelOutOfRange { .. }))));
    }

    proptest! {
        #[test]
        fn volume_roundtrip_is_bit_exact(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6,
            bits in proptest::collection::vec(any::<u32>(), 216),
        ) {
            let dims = Dims::new(nx, ny, nz);
            let data: Vec<f32> = bits[..dims.len()]
                .iter()
                .map(|&b| {
                    let f = f32::from_bits(b);
                    if f.is_finite() { f } else { f32::MAX }
                })
                .collect();
            let v = Volume::new(dims, Spacing::new(0.5, 0.7, 2.5).unwrap(), data).unwrap();
            let back = match decode(&encode_volume(&v)).unwrap() {
                MvolData::Volume(b) => b,
                _ => unreachable!(),
            };
            let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.spacing(), v.spacing());
        }
    }
}
