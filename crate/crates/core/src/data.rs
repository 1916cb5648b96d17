//! Labeled datasets: builtin synthetic generators plus CSV and IDX readers.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::numeric::{DenseArray, Rng};

/// In-memory labeled samples with a leading sample axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DenseArray,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: DenseArray, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(Error::Dimension(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {y} of sample {i} is outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &DenseArray {
        &self.inputs
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Batch {
            inputs: DenseArray::from_parts(shape, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.select(indices);
        Dataset {
            inputs: b.inputs,
            labels: b.labels,
            num_classes: self.num_classes,
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Shuffled mini-batches covering every sample once.
    pub fn batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        order
            .chunks(batch_size.max(1))
            .map(|chunk| self.select(chunk))
            .collect()
    }

    /// Random train/validation split; validation gets `round(n * fraction)` samples.
    pub fn split(&self, validation_fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0, 1), got {validation_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let n_val = (self.len() as f64 * validation_fraction).round() as usize;
        let (val, train) = order.split_at(n_val);
        Ok((self.subset(train), self.subset(val)))
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Isotropic Gaussian blobs around class centers on a circle.
    Blobs {
        classes: usize,
        samples: usize,
        #[serde(default = "default_blob_spread")]
        spread: f64,
        #[serde(default = "default_blob_radius")]
        radius: f64,
    },
    /// Interleaved spiral arms, one per class.
    Spirals {
        classes: usize,
        samples: usize,
        #[serde(default = "default_spiral_noise")]
        noise: f64,
    },
    /// Small single-channel images of oriented bars, for the toy CNN.
    Patterns {
        classes: usize,
        samples: usize,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_pattern_noise")]
        noise: f64,
    },
    /// Numeric CSV, last column is the integer label.
    Csv {
        path: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
        #[serde(default)]
        header: bool,
    },
    /// IDX image and label files (unsigned-byte images scaled to [0, 1]).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
}

fn default_blob_spread() -> f64 {
    0.6
}
fn default_blob_radius() -> f64 {
    1.5
}
fn default_spiral_noise() -> f64 {
    0.1
}
fn default_side() -> usize {
    8
}
fn default_pattern_noise() -> f64 {
    0.35
}

impl DatasetSource {
    pub fn load(&self, rng: &mut Rng) -> Result<Dataset> {
        match self {
            DatasetSource::Blobs {
                classes,
                samples,
                spread,
                radius,
            } => blobs(*classes, *samples, *spread, *radius, rng),
            DatasetSource::Spirals {
                classes,
                samples,
                noise,
            } => spirals(*classes, *samples, *noise, rng),
            DatasetSource::Patterns {
                classes,
                samples,
                side,
                noise,
            } => patterns(*classes, *samples, *side, *noise, rng),
            DatasetSource::Csv {
                path,
                classes,
                header,
            } => read_csv(path, *classes, *header),
            DatasetSource::Idx {
                images,
                labels,
                classes,
            } => read_idx(images, labels, *classes),
        }
    }
}

/// Loads the dataset and splits it into (train, validation).
pub fn ingest(
    source: &DatasetSource,
    validation_fraction: f64,
    rng: &mut Rng,
) -> Result<(Dataset, Dataset)> {
    let data = source.load(rng)?;
    if data.is_empty() {
        return Err(Error::Validation("dataset has no samples".into()));
    }
    data.split(validation_fraction, rng)
}

fn check_generator(classes: usize, samples: usize) -> Result<()> {
    if classes < 2 || samples < classes {
        return Err(Error::Config(format!(
            "generator needs >= 2 classes and at least one sample per class (classes={classes}, samples={samples})"
        )));
    }
    Ok(())
}

/// Balanced Gaussian blobs in 2-D, labels cycling through the classes.
pub fn blobs(classes: usize, samples: usize, spread: f64, radius: f64, rng: &mut Rng) -> Result<Dataset> {
    check_generator(classes, samples)?;
    let mut data = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let y = i % classes;
        let angle = 2.0 * PI * y as f64 / classes as f64;
        data.push(radius * angle.cos() + rng.normal(0.0, spread));
        data.push(radius * angle.sin() + rng.normal(0.0, spread));
        labels.push(y);
    }
    Dataset::new(DenseArray::new(vec![samples, 2], data)?, labels, classes)
}

pub fn spirals(classes: usize, samples: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    check_generator(classes, samples)?;
    let mut data = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let y = i % classes;
        let t = rng.uniform(0.05, 1.0);
        let angle = 2.0 * PI * (y as f64 / classes as f64) + 3.0 * PI * t;
        data.push(t * angle.cos() + rng.normal(0.0, noise));
        data.push(t * angle.sin() + rng.normal(0.0, noise));
        labels.push(y);
    }
    Dataset::new(DenseArray::new(vec![samples, 2], data)?, labels, classes)
}

/// `side x side` images: class 0 horizontal bar, 1 vertical, 2 diagonal,
/// 3 anti-diagonal; bar position is random and Gaussian noise is added.
pub fn patterns(classes: usize, samples: usize, side: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    check_generator(classes, samples)?;
    if classes > 4 || side < 4 {
        return Err(Error::Config(
            "pattern generator supports up to 4 classes and side >= 4".into(),
        ));
    }
    let per = side * side;
    let mut data = Vec::with_capacity(samples * per);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let y = i % classes;
        let offset = rng.below(side - 2) as isize - (side as isize - 2) / 2;
        for r in 0..side {
            for c in 0..side {
                let (r, c) = (r as isize, c as isize);
                let mid = side as isize / 2 + offset;
                let on = match y {
                    0 => r == mid,
                    1 => c == mid,
                    2 => r - c == offset,
                    _ => r + c == side as isize - 1 + offset,
                };
                data.push(if on { 1.0 } else { 0.0 } + rng.normal(0.0, noise));
            }
        }
        labels.push(y);
    }
    Dataset::new(DenseArray::new(vec![samples, 1, side, side], data)?, labels, classes)
}

fn infer_classes(labels: &[usize], declared: Option<usize>) -> Result<usize> {
    match declared {
        Some(c) => Ok(c),
        None => {
            let max = labels
                .iter()
                .max()
                .ok_or_else(|| Error::Validation("dataset has no samples".into()))?;
            Ok((max + 1).max(2))
        }
    }
}

pub fn read_csv(path: &Path, classes: Option<usize>, header: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, &path.display().to_string(), classes, header)
}

pub fn parse_csv(
    reader: impl std::io::Read,
    source_name: &str,
    classes: Option<usize>,
    header: bool,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |row: usize, col: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        location: format!("row {row}, column {col}"),
        message,
    };
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1 + usize::from(header);
        let record = record.map_err(|e| parse_err(row, 0, e.to_string()))?;
        if record.len() < 2 {
            return Err(parse_err(row, record.len(), "need at least one feature and a label".into()));
        }
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(parse_err(row, record.len(), "inconsistent column count".into()));
        }
        let last = record.len() - 1;
        for (col, cell) in record.iter().enumerate().take(last) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, col + 1, format!("non-numeric cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, col + 1, format!("non-finite value {cell:?}")));
            }
            features.push(v);
        }
        let label: usize = record[last]
            .parse()
            .map_err(|_| parse_err(row, last + 1, format!("label {:?} is not a class index", &record[last])))?;
        labels.push(label);
    }
    let n = labels.len();
    let cols = width.unwrap_or(1) - 1;
    if n == 0 {
        return Err(Error::Validation(format!("{source_name}: no data rows")));
    }
    let num_classes = infer_classes(&labels, classes)?;
    Dataset::new(DenseArray::new(vec![n, cols], features)?, labels, num_classes)
}

pub const IDX_UBYTE_3D: u32 = 0x0000_0803;
pub const IDX_UBYTE_1D: u32 = 0x0000_0801;

/// Parses an IDX unsigned-byte file. Returns (dims, bytes).
pub fn parse_idx(bytes: &[u8], source_name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let err = |offset: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        location: format!("byte offset {offset}"),
        message,
    };
    if bytes.len() < 4 {
        return Err(err(0, "truncated header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, "magic number must start with two zero bytes".into()));
    }
    if bytes[2] != 0x08 {
        return Err(err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(err(4, "truncated dimension table".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(err(
            header,
            format!("expected {count} data bytes, found {}", bytes.len() - header),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub fn read_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let img_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    idx_dataset(
        &img_bytes,
        &lbl_bytes,
        &images.display().to_string(),
        &labels.display().to_string(),
        classes,
    )
}

pub fn idx_dataset(
    images: &[u8],
    labels: &[u8],
    images_name: &str,
    labels_name: &str,
    classes: Option<usize>,
) -> Result<Dataset> {
    let (dims, pixels) = parse_idx(images, images_name)?;
    if dims.len() != 3 {
        return Err(Error::Parse {
            source_name: images_name.into(),
            location: "byte offset 3".into(),
            message: format!("image file must be 3-D (magic 0x{IDX_UBYTE_3D:08x}), got {} dims", dims.len()),
        });
    }
    let (ldims, raw_labels) = parse_idx(labels, labels_name)?;
    if ldims.len() != 1 || ldims[0] != dims[0] {
        return Err(Error::Parse {
            source_name: labels_name.into(),
            location: "byte offset 4".into(),
            message: format!("label file must be 1-D with {} entries", dims[0]),
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = infer_classes(&labels, classes)?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Dataset::new(
        DenseArray::new(vec![dims[0], 1, dims[1], dims[2]], data)?,
        labels,
        num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_split_sizes() {
        let mut rng = Rng::new(42);
        let src = DatasetSource::Blobs {
            classes: 3,
            samples: 600,
            spread: 0.5,
            radius: 1.5,
        };
        let (train, val) = ingest(&src, 0.2, &mut rng).unwrap();
        assert_eq!(train.len(), 480);
        assert_eq!(val.len(), 120);
        assert_eq!(train.num_classes(), 3);
    }

    #[test]
    fn csv_reports_row_and_column() {
        let text = "1.0,2.0,0\n3.0,abc,1\n";
        let err = parse_csv(text.as_bytes(), "mem.csv", None, false).unwrap_err();
        match err {
            Error::Parse { location, message, .. } => {
                assert_eq!(location, "row 2, column 2");
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_label_range_is_validated() {
        let text = "1.0,0\n2.0,5\n";
        assert!(matches!(
            parse_csv(text.as_bytes(), "mem.csv", Some(3), false),
            Err(Error::Validation(_))
        ));
        let ok = parse_csv(text.as_bytes(), "mem.csv", None, false).unwrap();
        assert_eq!(ok.num_classes(), 6);
        assert_eq!(ok.sample_shape(), &[1]);
    }

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn idx_images_parse_as_3d() {
        let imgs = idx_bytes(IDX_UBYTE_3D, &[2, 2, 2], &[0, 255, 0, 0, 255, 255, 255, 255]);
        let lbls = idx_bytes(IDX_UBYTE_1D, &[2], &[1, 0]);
        let ds = idx_dataset(&imgs, &lbls, "i", "l", None).unwrap();
        assert_eq!(ds.inputs().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.inputs().data()[1], 1.0);
        assert_eq!(ds.labels(), &[1, 0]);

        let truncated = &imgs[..imgs.len() - 1];
        assert!(matches!(
            idx_dataset(truncated, &lbls, "i", "l", None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn generators_are_balanced_and_seeded() {
        let a = patterns(4, 40, 8, 0.3, &mut Rng::new(1)).unwrap();
        let b = patterns(4, 40, 8, 0.3, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&y| y == c).count(), 10);
        }
        let s = spirals(3, 30, 0.1, &mut Rng::new(2)).unwrap();
        assert_eq!(s.inputs().shape(), &[30, 2]);
    }
}
