//! The four trainable networks, the frozen feature extractor, and the
//! parameter bundle tying them together.

mod bundle;
mod djscc;
pub(crate) mod layers;
mod unet;
mod vgg;

pub use bundle::{
    decode_forward, decrypt_forward, encode_forward, encrypt_forward, Arch, Bound, Encryption,
    ModelBundle, Part,
};
pub use djscc::{JsccDecoder, JsccEncoder};
pub use unet::UNet;
pub use vgg::{
    pretrain_feature_extractor, FeatureExtractor, PretrainConfig, PretrainReport, VggConfig,
};

use djescc_autograd::ParamError;

use crate::imagedata::{DataError, ImageBatch};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("bundle has no {0} parameters")]
    MissingPart(&'static str),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Extractor features, NHWC, `m = h_f·w_f·c_f` values per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn m(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.values[i * self.m()..(i + 1) * self.m()]
    }
}

pub fn extract_features(img: &ImageBatch, extractor: &FeatureExtractor<f32>) -> FeatureMap {
    let mut tape = djescc_autograd::Tape::new();
    let x = tape.constant(img.to_tensor());
    let f = extractor.forward(&mut tape, x);
    let t = tape.value(f);
    let (n, c, h, w) = t.dims4();
    let mut values = vec![0f32; t.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    values[((b * h + y) * w + xx) * c + ch] = t.data()[((b * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
    FeatureMap {
        count: n,
        height: h,
        width: w,
        channels: c,
        values,
    }
}
