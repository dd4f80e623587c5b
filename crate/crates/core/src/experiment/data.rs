use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Sample, Target};
use crate::tensor::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Class-labelled samples split into training and validation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub input_dim: usize,
    pub classes: usize,
}

impl Dataset {
    /// Per class, the first 80% (rounded) of its samples in input order go to
    /// training and the rest to validation.
    pub fn stratified(samples: Vec<Sample>, input_dim: usize, classes: usize) -> Result<Self> {
        let mut per_class = vec![0usize; classes];
        for s in &samples {
            let c = class_of(s)?;
            if c >= classes {
                return Err(Error::param(format!("label {c} outside 0..{classes}")));
            }
            if s.x.len() != input_dim {
                return Err(Error::Dimension {
                    context: "dataset sample",
                    expected: input_dim,
                    got: s.x.len(),
                });
            }
            per_class[c] += 1;
        }
        let quota: Vec<usize> = per_class
            .iter()
            .map(|&n| (n as f64 * 0.8).round() as usize)
            .collect();
        let mut seen = vec![0usize; classes];
        let (mut train, mut validation) = (Vec::new(), Vec::new());
        for s in samples {
            let c = class_of(&s)?;
            seen[c] += 1;
            if seen[c] <= quota[c] {
                train.push(s);
            } else {
                validation.push(s);
            }
        }
        Ok(Dataset {
            train,
            validation,
            input_dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn class_of(s: &Sample) -> Result<usize> {
    match s.target {
        Target::Class(c) => Ok(c),
        Target::Values(_) => Err(Error::param("dataset samples must carry class labels")),
    }
}

/// Mean of class `c`: `(2 cos 2πc/C, 2 sin 2πc/C, 0, …)`.
pub fn class_mean(c: usize, classes: usize, dim: usize) -> Vec<f64> {
    let angle = 2.0 * PI * c as f64 / classes as f64;
    let mut mean = vec![0.0; dim];
    mean[0] = 2.0 * angle.cos();
    mean[1] = 2.0 * angle.sin();
    mean
}

/// Isotropic Gaussian blobs with standard deviation `spread` around
/// [`class_mean`]. Sample `i` belongs to class `i mod classes`.
pub fn generate_synthetic(
    classes: usize,
    dim: usize,
    samples: usize,
    spread: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if classes < 2 || samples < classes {
        return Err(Error::param(format!(
            "synthetic data needs classes ≥ 2 and samples ≥ classes, got {classes} and {samples}"
        )));
    }
    if dim < 2 {
        return Err(Error::param("synthetic data needs dim ≥ 2"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::param(format!(
            "spread must be finite and ≥ 0, got {spread}"
        )));
    }
    let means: Vec<Vec<f64>> = (0..classes).map(|c| class_mean(c, classes, dim)).collect();
    let data = (0..samples)
        .map(|i| {
            let c = i % classes;
            let x = means[c]
                .iter()
                .map(|&m| m + spread * rng.standard_normal())
                .collect();
            Sample::class(x, c)
        })
        .collect();
    Dataset::stratified(data, dim, classes)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.pos, format!("truncated {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic number")?;
        if found != expected {
            return Err(self.err(0, format!("magic {found:#010x}, expected {expected:#010x}")));
        }
        Ok(())
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n);
        match end.and_then(|e| self.bytes.get(self.pos..e)) {
            Some(chunk) => {
                self.pos += n;
                Ok(chunk)
            }
            None => Err(self.err(
                self.bytes.len(),
                format!("truncated {what}: need {n} bytes from offset {}", self.pos),
            )),
        }
    }
}

/// Reads an IDX image file (`u8` pixels) and its label file. Pixels are
/// scaled to `[0, 1]`; at most `limit` records are kept. The result is split
/// with [`Dataset::stratified`] over 10 classes, or more if labels require.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let image_bytes = fs::read(images)?;
    let label_bytes = fs::read(labels)?;

    let mut img = Cursor {
        path: images,
        bytes: &image_bytes,
        pos: 0,
    };
    img.magic(IDX_IMAGES_MAGIC)?;
    let n_images = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;
    let pixels = rows
        .checked_mul(cols)
        .ok_or_else(|| img.err(8, "image dimensions overflow"))?;

    let mut lab = Cursor {
        path: labels,
        bytes: &label_bytes,
        pos: 0,
    };
    lab.magic(IDX_LABELS_MAGIC)?;
    let n_labels = lab.u32("label count")? as usize;
    if n_labels != n_images {
        return Err(lab.err(4, format!("{n_labels} labels for {n_images} images")));
    }

    let n = limit.map_or(n_images, |l| l.min(n_images));
    let mut samples = Vec::with_capacity(n);
    let mut classes = 10;
    for _ in 0..n {
        let x = img
            .take(pixels, "pixel data")?
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect();
        let label = lab.take(1, "label data")?[0] as usize;
        classes = classes.max(label + 1);
        samples.push(Sample::class(x, label));
    }
    Dataset::stratified(samples, pixels, classes)
}
