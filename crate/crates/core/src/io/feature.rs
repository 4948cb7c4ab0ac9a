//! Binary feature-file container ("FLRT"): a little-endian header of magic,
//! version, rank and extents, followed by row-major f32 payload. Carries
//! modality feature streams and checkpoint parameters.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FLRT";
pub const VERSION: u32 = 1;

/// Serialize a tensor to feature-file bytes. Values are narrowed to f32.
pub fn to_bytes(tensor: &Tensor) -> Result<Vec<u8>> {
    if !tensor.all_finite() {
        return Err(Error::Contract(
            "feature file write requires finite values".into(),
        ));
    }
    let dims = tensor.shape();
    let mut out = Vec::with_capacity(12 + dims.len() * 4 + tensor.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |detail: String| Error::format(origin, detail);
    if bytes.len() < 12 {
        return Err(fail(format!("header needs 12 bytes, file has {}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}, expected {:?}", &bytes[0..4], MAGIC)));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_len = 12 + rank * 4;
    if bytes.len() < header_len {
        return Err(fail(format!(
            "header with rank {rank} needs {header_len} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 12 + i * 4;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = dims.iter().product();
    let expected = numel * 4;
    let actual = bytes.len() - header_len;
    if actual != expected {
        return Err(fail(format!(
            "payload for dims {dims:?} expects {expected} bytes, found {actual}"
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = header_len + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Tensor::new(dims, data)
}

pub fn write_feature_file(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn origin() -> PathBuf {
        PathBuf::from("<mem>")
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 7.0, -0.125]).unwrap();
        let bytes = to_bytes(&t).unwrap();
        let back = from_bytes(&bytes, &origin()).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert_eq!(back, t);
    }

    #[test]
    fn empty_dims_are_legal() {
        let t = Tensor::zeros(vec![0]);
        let bytes = to_bytes(&t).unwrap();
        assert_eq!(bytes.len(), 12 + 4); // header + one extent, zero payload
        let back = from_bytes(&bytes, &origin()).unwrap();
        assert_eq!(back.shape(), &[0]);
    }

    #[test]
    fn truncated_payload_reports_expected_vs_actual() {
        let t = Tensor::zeros(vec![4, 4]);
        let mut bytes = to_bytes(&t).unwrap();
        bytes.truncate(bytes.len() - 32);
        match from_bytes(&bytes, &origin()) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("64"), "{detail}");
                assert!(detail.contains("32"), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let t = Tensor::scalar(1.0);
        let mut bytes = to_bytes(&t).unwrap();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes, &origin()), Err(Error::Format { .. })));
        let mut bytes = to_bytes(&t).unwrap();
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes, &origin()), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_write_rejected() {
        let t = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(to_bytes(&t).is_err());
    }
}
