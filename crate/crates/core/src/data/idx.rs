//! Reading and writing IDX files, the distribution format of MNIST-style
//! datasets: a big-endian magic number, 32-bit dimension sizes, then a raw
//! unsigned-byte payload. Files ending in `.gz` are transparently
//! (de)compressed.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

/// Magic number for 3-dimensional unsigned-byte tensors (image files).
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Magic number for 1-dimensional unsigned-byte tensors (label files).
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_payload(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: gzip decode: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Data(format!(
            "{}: truncated header, needed 4 bytes at offset {offset}, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("4 bytes")))
}

/// Loads an IDX image file into an `N x (rows*cols)` matrix with pixel bytes
/// scaled by 1/255 into `[0, 1]`.
pub fn load_idx_images<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let bytes = read_payload(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {magic:#010x} at offset 0, expected {IMAGE_MAGIC:#010x} (images)",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(n))
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: dimension overflow {n} x {rows} x {cols} in header at offset 4",
                path.display()
            ))
        })?;
    let body = &bytes[16.min(bytes.len())..];
    if body.len() != pixels {
        return Err(Error::Data(format!(
            "{}: payload at offset 16 has {} bytes, header promises {pixels}",
            path.display(),
            body.len()
        )));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let data: Vec<T> = body.iter().map(|&b| T::from_f64(f64::from(b)) * scale).collect();
    Ok(Matrix::from_vec(n, rows * cols, data))
}

/// Loads an IDX label file into a vector of class ids.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_payload(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {magic:#010x} at offset 0, expected {LABEL_MAGIC:#010x} (labels)",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8.min(bytes.len())..];
    if body.len() != n {
        return Err(Error::Data(format!(
            "{}: payload at offset 8 has {} bytes, header promises {n}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
    }
    Ok(())
}

/// Writes `n` images of `rows x cols` unsigned bytes as an IDX image file.
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::Argument(format!(
            "write_idx_images: {} bytes for {n} x {rows} x {cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    write_file(path, &out)
}

/// Writes class ids (must fit a byte) as an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > u8::MAX as usize {
            return Err(Error::Argument(format!("label {l} does not fit an IDX byte")));
        }
        out.push(l as u8);
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lvat-idx-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn hand_built_fixture_round_trips_with_exact_scaling() {
        // Two 2x2 images, pixel bytes 0, 255, 128, 51, ...
        let path = temp_path("fixture-idx");
        let pixels = [0u8, 255, 128, 51, 10, 20, 30, 40];
        write_idx_images(&path, &pixels, 2, 2, 2).unwrap();
        let m: Matrix<f64> = load_idx_images(&path).unwrap();
        assert_eq!(m.shape(), (2, 4));
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 2), 128.0 / 255.0);
        assert_eq!(m.get(1, 3), 40.0 / 255.0);
    }

    #[test]
    fn gzip_files_round_trip_by_extension() {
        let path = temp_path("labels-idx.gz");
        write_idx_labels(&path, &[3, 1, 4, 1, 5, 9]).unwrap();
        assert_eq!(load_idx_labels(&path).unwrap(), vec![3, 1, 4, 1, 5, 9]);
    }

    #[test]
    fn bad_magic_and_truncation_are_reported_with_offsets() {
        let path = temp_path("bad-magic-idx");
        std::fs::write(&path, 42u32.to_be_bytes()).unwrap();
        let err = load_idx_images::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic") && err.contains("offset 0"), "{err}");

        let path = temp_path("truncated-idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[7u8; 3]); // promises 8 pixel bytes, has 3
        std::fs::write(&path, bytes).unwrap();
        let err = load_idx_images::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("offset 16") && err.contains("promises 8"), "{err}");
    }

    #[test]
    fn mismatched_magic_kinds_are_rejected() {
        let path = temp_path("kind-idx");
        write_idx_labels(&path, &[1, 2]).unwrap();
        assert!(load_idx_images::<f32>(&path).is_err());
    }
}
