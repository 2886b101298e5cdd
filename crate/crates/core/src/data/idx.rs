//! The IDX container: a big-endian magic word and dimension sizes followed
//! by unsigned bytes.

use std::path::Path;

use super::{Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const LABEL_CLASSES: u32 = 10;

fn format_error(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(bytes: &[u8], what: &'static str, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let len = 4 + 4 * dims;
    if bytes.len() < len {
        return Err(format_error(
            what,
            format!("truncated header: {} of {len} bytes", bytes.len()),
        ));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(format_error(
            what,
            format!("magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    Ok((0..dims)
        .map(|d| be_u32(bytes, 4 + 4 * d) as usize)
        .collect())
}

fn payload<'a>(
    bytes: &'a [u8],
    what: &'static str,
    offset: usize,
    expected: usize,
) -> Result<&'a [u8]> {
    let have = bytes.len() - offset;
    match have.cmp(&expected) {
        std::cmp::Ordering::Less => Err(format_error(
            what,
            format!("truncated payload: {have} of {expected} bytes"),
        )),
        std::cmp::Ordering::Greater => Err(format_error(
            what,
            format!("{} trailing bytes", have - expected),
        )),
        std::cmp::Ordering::Equal => Ok(&bytes[offset..]),
    }
}

/// Returns `(count, rows, cols, pixels)`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let what = "idx images";
    let dims = header(bytes, what, IDX_IMAGES_MAGIC, 3)?;
    let (n, r, c) = (dims[0], dims[1], dims[2]);
    let expected = n
        .checked_mul(r)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| format_error(what, "dimensions overflow"))?;
    Ok((n, r, c, payload(bytes, what, 16, expected)?))
}

/// Returns `(count, labels)`.
pub fn decode_idx_labels(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let what = "idx labels";
    let dims = header(bytes, what, IDX_LABELS_MAGIC, 1)?;
    Ok((dims[0], payload(bytes, what, 8, dims[0])?))
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label file pair. Pixels are scaled to `[0, 1]`; the label
/// space is the digits 0 to 9.
pub fn load_idx<S: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<S>> {
    let img_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (n, r, c, pixels) = decode_idx_images(&img_bytes)?;
    let (m, lbls) = decode_idx_labels(&lbl_bytes)?;
    if n != m {
        return Err(format_error(
            "idx pair",
            format!("{n} images but {m} labels"),
        ));
    }
    if let Some(&bad) = lbls.iter().find(|&&l| u32::from(l) >= LABEL_CLASSES) {
        return Err(format_error(
            "idx labels",
            format!("label {bad} is not a digit"),
        ));
    }
    let scale = S::lit(1.0 / 255.0);
    let data = pixels
        .iter()
        .map(|&p| S::lit(f64::from(p)) * scale)
        .collect();
    Dataset::new(
        Tensor::new(vec![n, r * c], data)?,
        vec![r, c],
        Labels::Single(lbls.iter().map(|&l| l as usize).collect()),
        (0..LABEL_CLASSES).collect(),
        Split::Train,
    )
}

/// Writes a single-label image dataset back to an IDX pair. Pixels are
/// rounded from `[0, 1]` to bytes; labels are written as source ids.
pub fn write_idx<S: Scalar>(dataset: &Dataset<S>, images: &Path, labels: &Path) -> Result<()> {
    let (r, c) = match dataset.sample_shape() {
        [r, c] | [1, r, c] => (*r, *c),
        other => {
            return Err(Error::invalid(format!(
                "cannot write samples of shape {other:?} as images"
            )))
        }
    };
    let Labels::Single(cls) = dataset.labels() else {
        return Err(Error::invalid(
            "only single-label datasets can be written as idx",
        ));
    };
    let pixels: Vec<u8> = dataset
        .inputs()
        .data()
        .iter()
        .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let lbls = cls
        .iter()
        .map(|&k| {
            u8::try_from(dataset.label_space()[k])
                .map_err(|_| Error::invalid("label id exceeds a byte"))
        })
        .collect::<Result<Vec<u8>>>()?;
    std::fs::write(images, encode_idx_images(r, c, &pixels)).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, encode_idx_labels(&lbls)).map_err(|e| Error::io(labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(dir: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let pixels: Vec<u8> = (0..n * 4).map(|i| (i * 37 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (ip, lp) = (dir.join("img"), dir.join("lbl"));
        std::fs::write(&ip, encode_idx_images(2, 2, &pixels)).unwrap();
        std::fs::write(&lp, encode_idx_labels(&labels)).unwrap();
        (ip, lp)
    }

    #[test]
    fn load_scales_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = pair(dir.path(), 12);
        let d: Dataset<f64> = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 12);
        assert_eq!(d.sample_shape(), &[2, 2]);
        assert!(d.inputs().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lbl2"));
        write_idx(&d, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = pair(dir.path(), 5);
        // images file passed as labels
        let err = load_idx::<f64>(&ip, &ip).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        let empty = dir.path().join("empty");
        std::fs::write(&empty, b"").unwrap();
        let err = load_idx::<f64>(&empty, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut short = std::fs::read(&ip).unwrap();
        short.pop();
        std::fs::write(&empty, &short).unwrap();
        assert!(load_idx::<f64>(&empty, &lp)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        let (_, lp6) = {
            let d = dir.path().join("six");
            std::fs::create_dir(&d).unwrap();
            pair(&d, 6)
        };
        assert!(load_idx::<f64>(&ip, &lp6)
            .unwrap_err()
            .to_string()
            .contains("5 images but 6 labels"));
        assert!(load_idx::<f64>(&dir.path().join("nope"), &lp).is_err());
    }

    #[test]
    fn full_size_training_file() {
        let dir = tempfile::tempdir().unwrap();
        let n = 60_000;
        let pixels: Vec<u8> = (0..n * 784).map(|i| (i % 251) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        std::fs::write(&ip, encode_idx_images(28, 28, &pixels)).unwrap();
        std::fs::write(&lp, encode_idx_labels(&labels)).unwrap();
        let d: Dataset<f64> = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 60_000);
        assert_eq!(d.sample_shape(), &[28, 28]);
        assert_eq!(d.label_space(), (0..10).collect::<Vec<u32>>());
    }
}
