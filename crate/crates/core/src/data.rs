//! Dataset loading: IDX container parsing, pixel scaling, and train-split
//! standardization.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image split, standardized and ready for batching.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Images as (N, C, H, W).
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the selected samples into a batch tensor plus labels.
    pub fn gather(&self, idxs: &[usize]) -> (Tensor, Vec<u32>) {
        let dims = self.images.dims();
        let sample = dims[1] * dims[2] * dims[3];
        let mut data = Vec::with_capacity(idxs.len() * sample);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![idxs.len(), dims[1], dims[2], dims[3]], data)
            .expect("gather dims consistent");
        (t, labels)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an IDX image file: big-endian magic 0x00000803, then count, rows,
/// cols, then raw u8 pixels.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let buf = read_file(path)?;
    if buf.len() < 16 {
        return Err(Error::Data(format!(
            "{}: truncated header ({} bytes)",
            path.display(),
            buf.len()
        )));
    }
    let magic = be_u32(&buf, 0);
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&buf, 4) as usize;
    let rows = be_u32(&buf, 8) as usize;
    let cols = be_u32(&buf, 12) as usize;
    let expect = 16 + n * rows * cols;
    if buf.len() != expect {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {expect} for {n} images of {rows}x{cols}",
            path.display(),
            buf.len()
        )));
    }
    Ok((buf[16..].to_vec(), n, rows, cols))
}

/// Parses an IDX label file: big-endian magic 0x00000801, then count, then
/// raw u8 labels.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = read_file(path)?;
    if buf.len() < 8 {
        return Err(Error::Data(format!(
            "{}: truncated header ({} bytes)",
            path.display(),
            buf.len()
        )));
    }
    let magic = be_u32(&buf, 0);
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&buf, 4) as usize;
    if buf.len() != 8 + n {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {} for {n} labels",
            path.display(),
            buf.len(),
            8 + n
        )));
    }
    Ok(buf[8..].to_vec())
}

/// Writes an IDX image file in the standard layout.
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "{} pixels for {n} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(n as u32).to_be_bytes());
    buf.extend_from_slice(&(rows as u32).to_be_bytes());
    buf.extend_from_slice(&(cols as u32).to_be_bytes());
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// Writes an IDX label file in the standard layout.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    fs::write(path, buf)?;
    Ok(())
}

/// Paths of one train/test IDX pair.
#[derive(Debug, Clone)]
pub struct IdxPaths {
    pub train_images: std::path::PathBuf,
    pub train_labels: std::path::PathBuf,
    pub test_images: std::path::PathBuf,
    pub test_labels: std::path::PathBuf,
}

/// Loads a train/test pair, scales pixels to [0, 1], and standardizes both
/// splits with the mean and standard deviation of the train split only.
pub fn load_idx_pair(
    paths: &IdxPaths,
    num_classes: usize,
    limit_train: Option<usize>,
    limit_test: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let (train_px, ntr, rows, cols) = read_idx_images(&paths.train_images)?;
    let train_lb = read_idx_labels(&paths.train_labels)?;
    if train_lb.len() != ntr {
        return Err(Error::Data(format!(
            "train split has {ntr} images but {} labels",
            train_lb.len()
        )));
    }
    let (test_px, nte, trows, tcols) = read_idx_images(&paths.test_images)?;
    let test_lb = read_idx_labels(&paths.test_labels)?;
    if test_lb.len() != nte {
        return Err(Error::Data(format!(
            "test split has {nte} images but {} labels",
            test_lb.len()
        )));
    }
    if (trows, tcols) != (rows, cols) {
        return Err(Error::Data(format!(
            "train images are {rows}x{cols} but test images are {trows}x{tcols}"
        )));
    }
    let ntr = limit_train.map_or(ntr, |l| l.min(ntr));
    let nte = limit_test.map_or(nte, |l| l.min(nte));
    let px_per = rows * cols;
    let train_px = &train_px[..ntr * px_per];
    let test_px = &test_px[..nte * px_per];
    let train_lb = &train_lb[..ntr];
    let test_lb = &test_lb[..nte];
    for (split, labels) in [("train", train_lb), ("test", test_lb)] {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!(
                "{split} label {bad} out of range for {num_classes} classes"
            )));
        }
    }

    // Scale to [0, 1]; standardize with train statistics only.
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for &p in train_px {
        let v = p as f64 / 255.0;
        sum += v;
        sumsq += v * v;
    }
    let n = train_px.len() as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    let std = var.sqrt().max(1e-8);

    let standardize = |px: &[u8], count: usize| -> Tensor {
        let data: Vec<f32> = px
            .iter()
            .map(|&p| (((p as f64 / 255.0) - mean) / std) as f32)
            .collect();
        Tensor::new(vec![count, 1, rows, cols], data).expect("pixel count consistent")
    };

    let train = Dataset {
        images: standardize(train_px, ntr),
        labels: train_lb.iter().map(|&l| l as u32).collect(),
        num_classes,
    };
    let test = Dataset {
        images: standardize(test_px, nte),
        labels: test_lb.iter().map(|&l| l as u32).collect(),
        num_classes,
    };
    Ok((train, test))
}
