//! Big-endian IDX files and the count-label sidecar.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const COUNTS_MAGIC: u32 = 0x0000_0C01;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_header(path: &Path, bytes: &[u8], magic: u32, words: usize) -> Result<Vec<usize>> {
    let header_len = 4 * (words + 1);
    if bytes.len() >= 4 && be_u32(bytes, 0) != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found: be_u32(bytes, 0),
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok((0..words).map(|i| be_u32(bytes, 4 * (i + 1)) as usize).collect())
}

fn body<'a>(path: &Path, bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    let expected = offset + len;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[offset..expected])
}

/// Raw image bytes: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let dims = read_header(path, &bytes, IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = body(path, &bytes, 16, n * rows * cols)?.to_vec();
    Ok((n, rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let n = read_header(path, &bytes, LABELS_MAGIC, 1)?[0];
    Ok(body(path, &bytes, 8, n)?.to_vec())
}

/// Images scaled to `[0, 1]` with one-hot digit labels `[N×10]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let digits = read_idx_labels(labels)?;
    if digits.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: digits.len(),
        });
    }
    if n == 0 {
        return Err(Error::Domain(format!("{}: no images", images.display())));
    }
    let mut onehot = vec![0.0; n * 10];
    for (i, &d) in digits.iter().enumerate() {
        if d > 9 {
            return Err(Error::Domain(format!(
                "{}: label {d} at item {i} is not a digit",
                labels.display()
            )));
        }
        onehot[i * 10 + d as usize] = 1.0;
    }
    let x = Tensor::from_parts(
        vec![n, rows * cols],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    );
    let mut ds = Dataset::new(x, Some(Tensor::from_parts(vec![n, 10], onehot)), Split::Train)?;
    ds.label_names = (0..10).map(|d| d.to_string()).collect();
    Ok(ds)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Domain(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows == 0 || cols == 0 || !pixels.len().is_multiple_of(rows * cols) {
        return Err(Error::shape("write_idx_images", &[pixels.len()], &[rows, cols]));
    }
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write_atomic(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_atomic(path, &out)
}

/// Count labels `[N×K]` as `magic | N | K | N·K bytes`.
pub fn save_counts(path: &Path, counts: &Tensor) -> Result<()> {
    let (n, k) = (counts.rows(), counts.cols());
    let mut out = Vec::with_capacity(12 + n * k);
    for w in [COUNTS_MAGIC, n as u32, k as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    for &c in counts.data() {
        if !(0.0..=255.0).contains(&c) || c.fract() != 0.0 {
            return Err(Error::Domain(format!("count {c} does not fit in a byte")));
        }
        out.push(c as u8);
    }
    write_atomic(path, &out)
}

pub fn load_counts(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let dims = read_header(path, &bytes, COUNTS_MAGIC, 2)?;
    let (n, k) = (dims[0], dims[1]);
    if n == 0 || k == 0 {
        return Err(Error::Domain(format!("{}: empty count table", path.display())));
    }
    let data = body(path, &bytes, 12, n * k)?;
    Ok(Tensor::from_parts(
        vec![n, k],
        data.iter().map(|&b| f64::from(b)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_round_trip_and_scale() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_images(&img, 2, 2, &[0, 255, 128, 1, 2, 3, 4, 5]).unwrap();
        write_idx_labels(&lab, &[3, 9]).unwrap();
        let ds = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(ds.x.shape(), &[2, 4]);
        assert_eq!(ds.x.data()[1], 1.0);
        assert_eq!(ds.y.as_ref().unwrap().row(0)[3], 1.0);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_images(&img, 2, 2, &[0; 8]).unwrap();
        write_idx_labels(&lab, &[1, 2, 3]).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
        assert!(matches!(load_mnist_idx(&lab, &lab), Err(Error::BadMagic { .. })));

        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..20]).unwrap();
        let err = read_idx_images(&img).unwrap_err();
        assert!(matches!(
            err,
            Error::Truncated {
                expected: 24,
                actual: 20,
                ..
            }
        ));
        assert!(err.to_string().contains("expected 24 bytes but found 20"));
    }

    #[test]
    fn counts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        let c = Tensor::from_parts(vec![2, 3], vec![0.0, 1.0, 5.0, 2.0, 0.0, 0.0]);
        save_counts(&p, &c).unwrap();
        assert_eq!(load_counts(&p).unwrap(), c);
        assert!(save_counts(&p, &Tensor::full(&[1, 1], 0.5)).is_err());
    }
}
