//! MNIST IDX reader (big-endian headers, unsigned byte payloads).

use std::fs;
use std::path::{Path, PathBuf};

use nnchip_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found} (expected {expected})")]
    Magic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated, need {need} bytes, have {have}")]
    Truncated { path: PathBuf, need: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    Count { images: usize, labels: usize },
    #[error("{path}: label {label} at index {index} is not a digit")]
    Label { path: PathBuf, index: usize, label: u8 },
}

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.into(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, IdxError> {
    let b = bytes.get(at..at + 4).ok_or_else(|| IdxError::Truncated {
        path: path.into(),
        need: at + 4,
        have: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Header of an image file: (count, rows, cols).
pub fn image_header(path: &Path) -> Result<(usize, usize, usize), IdxError> {
    let bytes = read(path)?;
    parse_image_header(&bytes, path)
}

fn parse_image_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize), IdxError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::Magic {
            path: path.into(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    Ok((
        be_u32(bytes, 4, path)? as usize,
        be_u32(bytes, 8, path)? as usize,
        be_u32(bytes, 12, path)? as usize,
    ))
}

/// Images as `[count, rows · cols]` scaled to `[0, 1]`.
pub fn load_images(path: &Path) -> Result<Tensor, IdxError> {
    let bytes = read(path)?;
    let (n, r, c) = parse_image_header(&bytes, path)?;
    let need = 16 + n * r * c;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            path: path.into(),
            need,
            have: bytes.len(),
        });
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, r * c], data).expect("sized from header"))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>, IdxError> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::Magic {
            path: path.into(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            path: path.into(),
            need,
            have: bytes.len(),
        });
    }
    bytes[8..need]
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if label < 10 {
                Ok(label as usize)
            } else {
                Err(IdxError::Label {
                    path: path.into(),
                    index,
                    label,
                })
            }
        })
        .collect()
}

/// A labelled image set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
        }
    }
}

pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    let x = load_images(images)?;
    let y = load_labels(labels)?;
    if x.rows() != y.len() {
        return Err(IdxError::Count {
            images: x.rows(),
            labels: y.len(),
        });
    }
    Ok(Dataset { images: x, labels: y })
}

/// Train and test splits from the standard file names in `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset), IdxError> {
    let train = load_mnist(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}
