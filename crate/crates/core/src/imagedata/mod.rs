//! Image datasets, normalization and lossless 8-bit image files.
//!
//! Images are kept as 8-bit NHWC arrays ([`RawImages`]) and converted to
//! real-valued [`ImageBatch`]es on demand.

mod cache;
mod formats;
mod io;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use djescc_autograd::{Float, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cache::{default_cache_dir, load_dataset, load_dataset_with, Remote, CACHE_ENV};
pub use formats::{parse_cifar_batch, parse_stl_images, parse_stl_labels};
pub use io::{export_grid, export_image, export_raw, import_image, import_raw};
pub use synthetic::synthetic_images;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("could not fetch {url}: {reason}")]
    Fetch { url: String, reason: String },
    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Integrity {
        path: String,
        expected: String,
        found: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("invalid image batch: {0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Cifar10,
    Stl10,
    /// Procedurally generated stand-in with CIFAR-like statistics, for
    /// machines without the real archives.
    Synthetic,
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Stl10 => "stl10",
            DatasetId::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetId {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "cifar10" => Ok(DatasetId::Cifar10),
            "stl10" => Ok(DatasetId::Stl10),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(DataError::Unsupported(format!("unknown dataset {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// STL-10 only.
    Unlabeled,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(DataError::Unsupported(format!("unknown split {other}"))),
        }
    }
}

/// 8-bit images, NHWC, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImages {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, DataError> {
        if data.len() != count * height * width * channels {
            return Err(DataError::Invalid(format!(
                "{count}x{height}x{width}x{channels} needs {} bytes, got {}",
                count * height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            count,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn single(&self, i: usize) -> RawImages {
        self.gather(&[i])
    }

    pub fn gather(&self, indices: &[usize]) -> RawImages {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        RawImages {
            count: indices.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn first(&self, n: usize) -> RawImages {
        let n = n.min(self.count);
        RawImages {
            count: n,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[..n * self.image_len()].to_vec(),
        }
    }

    pub fn same_shape(&self, other: &RawImages) -> bool {
        (self.count, self.height, self.width, self.channels)
            == (other.count, other.height, other.width, other.channels)
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> RawImages {
        RawImages {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Real-valued images in `[0, 1]`, NHWC, with spatial sides divisible by 4.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ImageBatch {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self, DataError> {
        if count == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(DataError::Invalid("dimensions must be positive".into()));
        }
        if height % 4 != 0 || width % 4 != 0 {
            return Err(DataError::Invalid(format!(
                "spatial size {height}x{width} is not divisible by 4"
            )));
        }
        if values.len() != count * height * width * channels {
            return Err(DataError::Invalid(format!(
                "expected {} values, got {}",
                count * height * width * channels,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            count,
            height,
            width,
            channels,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(batch, h, w, c)`.
    pub fn shape(&self) -> [usize; 4] {
        [self.count, self.height, self.width, self.channels]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// NCHW tensor for the networks.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        let (n, h, w, c) = (self.count, self.height, self.width, self.channels);
        let mut out = vec![F::zero(); self.values.len()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[((b * c + ch) * h + y) * w + x] =
                            F::from_f64_lossy(self.values[((b * h + y) * w + x) * c + ch] as f64);
                    }
                }
            }
        }
        Tensor::new(vec![n, c, h, w], out)
    }

    /// Inverse of [`ImageBatch::to_tensor`]. Values must already lie in `[0, 1]`.
    pub fn from_tensor<F: Float>(t: &Tensor<F>) -> Result<Self, DataError> {
        let (n, c, h, w) = t.dims4();
        let d = t.data();
        let mut values = vec![0f32; d.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        values[((b * h + y) * w + x) * c + ch] =
                            d[((b * c + ch) * h + y) * w + x].to_f64_lossy() as f32;
                    }
                }
            }
        }
        Self::new(n, h, w, c, values)
    }

    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        let per = self.height * self.width * self.channels;
        let mut values = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            values.extend_from_slice(&self.values[i * per..(i + 1) * per]);
        }
        ImageBatch {
            count: indices.len(),
            values,
            ..self.clone()
        }
    }
}

/// `raw / 255` element-wise.
pub fn normalize(raw: &RawImages) -> Result<ImageBatch, DataError> {
    ImageBatch::new(
        raw.count,
        raw.height,
        raw.width,
        raw.channels,
        raw.data.iter().map(|&v| v as f32 / 255.0).collect(),
    )
}

/// Round half up to the nearest 8-bit level, clamped to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn denormalize(img: &ImageBatch) -> RawImages {
    RawImages {
        count: img.count,
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: img.values.iter().map(|&v| quantize(v as f64)).collect(),
    }
}

/// One loaded split. Labels are kept only for pretraining the feature
/// extractor; nothing downstream of it reads them.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: DatasetId,
    pub split: Split,
    pub images: RawImages,
    pub labels: Option<Vec<u8>>,
}

impl DatasetSplit {
    pub fn count(&self) -> usize {
        self.images.count
    }

    /// Keep the first `n` images (0 keeps everything).
    pub fn truncate(mut self, n: usize) -> Self {
        if n > 0 && n < self.images.count {
            self.images = self.images.first(n);
            if let Some(l) = &mut self.labels {
                l.truncate(n);
            }
        }
        self
    }
}

/// Seeded permutation of `0..n`, used for batch order.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let raw = RawImages::new(1, 4, 4, 1, vec![0, 255, 51, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0])
            .unwrap();
        let b = normalize(&raw).unwrap();
        assert_eq!(b.values()[0], 0.0);
        assert_eq!(b.values()[1], 1.0);
        assert!((b.values()[2] as f64 - 0.2).abs() < 1e-7);
    }

    #[test]
    fn denormalize_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
    }

    #[test]
    fn every_byte_round_trips() {
        let data: Vec<u8> = (0..=255u8).collect();
        let raw = RawImages::new(1, 16, 16, 1, data).unwrap();
        assert_eq!(denormalize(&normalize(&raw).unwrap()), raw);
    }

    #[test]
    fn batch_rejects_bad_sides_and_ranges() {
        assert!(ImageBatch::new(1, 6, 8, 3, vec![0.0; 144]).is_err());
        assert!(ImageBatch::new(1, 4, 4, 1, vec![1.5; 16]).is_err());
        assert!(ImageBatch::new(1, 4, 4, 1, vec![0.5; 15]).is_err());
        assert!(ImageBatch::new(1, 4, 4, 1, vec![0.5; 16]).is_ok());
    }

    #[test]
    fn tensor_layout_round_trip() {
        let values: Vec<f32> = (0..2 * 4 * 8 * 3).map(|i| i as f32 / 200.0).collect();
        let b = ImageBatch::new(2, 4, 8, 3, values).unwrap();
        let t = b.to_tensor::<f32>();
        assert_eq!(t.shape(), &[2, 3, 4, 8]);
        // pixel (b=1, y=2, x=5, c=1)
        let nhwc = b.values()[((4 + 2) * 8 + 5) * 3 + 1];
        assert_eq!(t.data()[((3 + 1) * 4 + 2) * 8 + 5], nhwc);
        assert_eq!(ImageBatch::from_tensor(&t).unwrap(), b);
    }

    #[test]
    fn shuffled_indices_are_seeded_permutations() {
        let a = shuffled_indices(100, 3);
        assert_eq!(a, shuffled_indices(100, 3));
        assert_ne!(a, shuffled_indices(100, 4));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }
}
