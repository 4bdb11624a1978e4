//! Parameter bundle `(μ, θ, φ, ν)` and the inference passes built on it.

use std::collections::BTreeMap;
use std::path::Path;

use djescc_autograd::params::{load_file, save_file, take_prefixed};
use djescc_autograd::{Float, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{JsccDecoder, JsccEncoder, ModelError, UNet};
use crate::attacks::ShuffleKey;
use crate::channel::{pack_complex, unpack_complex, SymbolBlock};
use crate::imagedata::ImageBatch;

const INFER_CHUNK: usize = 64;

/// How the owner protects images before the channel encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Encryption {
    /// Trainable encryption and decryption networks.
    Learned,
    /// Fixed keyed pixel shuffle; the recipient inverts it exactly.
    Shuffle { seed: u64 },
    /// No protection: plain DJSCC.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub channels: usize,
    pub t: usize,
    pub jscc_widths: [usize; 4],
    pub unet_width: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            channels: 3,
            t: 16,
            jscc_widths: [16, 32, 32, 32],
            unet_width: 32,
        }
    }
}

impl Arch {
    pub fn unet(&self) -> UNet {
        UNet {
            channels: self.channels,
            width: self.unet_width,
        }
    }

    pub fn encoder(&self) -> JsccEncoder {
        JsccEncoder {
            in_channels: self.channels,
            widths: self.jscc_widths,
            t: self.t,
        }
    }

    pub fn decoder(&self) -> JsccDecoder {
        JsccDecoder {
            out_channels: self.channels,
            widths: self.jscc_widths,
            t: self.t,
        }
    }

    /// Channel symbols per source dimension, `k/n = t/(32·c)`.
    pub fn bandwidth_ratio(&self) -> f64 {
        self.t as f64 / (32 * self.channels) as f64
    }
}

/// Which parameter sets a file carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Full,
    Encryption,
    Djscc,
    Decryption,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    arch: Arch,
    encryption: Encryption,
    lambda_e: f64,
    lambda_d: f64,
    config_hash: String,
    part: Part,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<F> {
    pub arch: Arch,
    pub encryption: Encryption,
    pub lambda_e: f64,
    pub lambda_d: f64,
    pub config_hash: String,
    pub mu: ParamSet<F>,
    pub theta: ParamSet<F>,
    pub phi: ParamSet<F>,
    pub nu: ParamSet<F>,
}

/// Tape handles for a bound bundle.
pub struct Bound {
    pub mu: Vec<Var>,
    pub theta: Vec<Var>,
    pub phi: Vec<Var>,
    pub nu: Vec<Var>,
}

/// NCHW index map equivalent to an NHWC component permutation.
fn nchw_permutation(key: &ShuffleKey, c: usize, h: usize, w: usize) -> Vec<usize> {
    let perm = key.permutation();
    let nhwc_to_nchw = |q: usize| {
        let ch = q % c;
        let x = (q / c) % w;
        let y = q / (c * w);
        (ch * h + y) * w + x
    };
    let mut out = vec![0; c * h * w];
    for (q, &src) in perm.iter().enumerate() {
        out[nhwc_to_nchw(q)] = nhwc_to_nchw(src);
    }
    out
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

impl<F: Float> ModelBundle<F> {
    /// Fresh parameters; μ and ν are empty unless the encryption is learned.
    pub fn init(arch: Arch, encryption: Encryption, lambda_e: f64, lambda_d: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let learned = encryption == Encryption::Learned;
        let unet = arch.unet().layout();
        let mu = if learned {
            unet.init(&mut rng)
        } else {
            ParamSet::from_entries(Vec::new())
        };
        let theta = arch.encoder().layout().init(&mut rng);
        let phi = arch.decoder().layout().init(&mut rng);
        let nu = if learned {
            unet.init(&mut rng)
        } else {
            ParamSet::from_entries(Vec::new())
        };
        Self {
            arch,
            encryption,
            lambda_e,
            lambda_d,
            config_hash: String::new(),
            mu,
            theta,
            phi,
            nu,
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        Bound {
            mu: self.mu.bind(tape, trainable),
            theta: self.theta.bind(tape, trainable),
            phi: self.phi.bind(tape, trainable),
            nu: self.nu.bind(tape, trainable),
        }
    }

    fn require(&self, set: &ParamSet<F>, name: &'static str) -> Result<(), ModelError> {
        let layout = match name {
            "encryption" | "decryption" => self.arch.unet().layout(),
            "encoder" => self.arch.encoder().layout(),
            _ => self.arch.decoder().layout(),
        };
        if set.is_empty() {
            return Err(ModelError::MissingPart(name));
        }
        layout.check(set)?;
        Ok(())
    }

    /// Verify every parameter set needed by the encryption kind.
    pub fn check(&self) -> Result<(), ModelError> {
        if self.encryption == Encryption::Learned {
            self.require(&self.mu, "encryption")?;
            self.require(&self.nu, "decryption")?;
        }
        self.require(&self.theta, "encoder")?;
        self.require(&self.phi, "decoder")
    }

    pub fn encrypt_var(&self, tape: &mut Tape<F>, b: &Bound, x: Var) -> Var {
        match &self.encryption {
            Encryption::Learned => self.arch.unet().forward(tape, &b.mu, x),
            Encryption::Shuffle { seed } => {
                let (_, c, h, w) = tape.value(x).dims4();
                let perm = nchw_permutation(&ShuffleKey::new(*seed, c * h * w), c, h, w);
                tape.permute_samples(x, &perm)
            }
            Encryption::None => x,
        }
    }

    pub fn encode_var(&self, tape: &mut Tape<F>, b: &Bound, y: Var) -> Var {
        self.arch.encoder().forward(tape, &b.theta, y)
    }

    pub fn decode_var(&self, tape: &mut Tape<F>, b: &Bound, zhat: Var, h: usize, w: usize) -> Var {
        self.arch.decoder().forward(tape, &b.phi, zhat, h, w)
    }

    pub fn decrypt_var(&self, tape: &mut Tape<F>, b: &Bound, yhat: Var) -> Var {
        match &self.encryption {
            Encryption::Learned => self.arch.unet().forward(tape, &b.nu, yhat),
            Encryption::Shuffle { seed } => {
                let (_, c, h, w) = tape.value(yhat).dims4();
                let perm = nchw_permutation(&ShuffleKey::new(*seed, c * h * w), c, h, w);
                tape.permute_samples(yhat, &inverse(&perm))
            }
            Encryption::None => yhat,
        }
    }

    pub fn cast<G: Float>(&self) -> ModelBundle<G> {
        ModelBundle {
            arch: self.arch.clone(),
            encryption: self.encryption.clone(),
            lambda_e: self.lambda_e,
            lambda_d: self.lambda_d,
            config_hash: self.config_hash.clone(),
            mu: self.mu.cast(),
            theta: self.theta.cast(),
            phi: self.phi.cast(),
            nu: self.nu.cast(),
        }
    }

    /// Named tensors and metadata for `part`, ready to merge into a file.
    pub fn to_entries(&self, part: Part) -> (Vec<(String, Tensor<F>)>, BTreeMap<String, String>) {
        let mut entries = Vec::new();
        if matches!(part, Part::Full | Part::Encryption) {
            entries.extend(self.mu.prefixed("mu."));
        }
        if matches!(part, Part::Full | Part::Djscc) {
            entries.extend(self.theta.prefixed("theta."));
            entries.extend(self.phi.prefixed("phi."));
        }
        if matches!(part, Part::Full | Part::Decryption) {
            entries.extend(self.nu.prefixed("nu."));
        }
        let meta = BundleMeta {
            arch: self.arch.clone(),
            encryption: self.encryption.clone(),
            lambda_e: self.lambda_e,
            lambda_d: self.lambda_d,
            config_hash: self.config_hash.clone(),
            part,
        };
        let mut m = BTreeMap::new();
        m.insert("bundle".into(), serde_json::to_string(&meta).expect("meta serializes"));
        (entries, m)
    }

    pub fn from_entries(
        entries: &[(String, Tensor<F>)],
        meta: &BTreeMap<String, String>,
    ) -> Result<(Self, Part), ModelError> {
        let bm: BundleMeta = meta
            .get("bundle")
            .ok_or_else(|| ModelError::Config("file carries no bundle metadata".into()))
            .and_then(|s| {
                serde_json::from_str(s).map_err(|e| ModelError::Config(format!("bundle metadata: {e}")))
            })?;
        let bundle = Self {
            arch: bm.arch,
            encryption: bm.encryption,
            lambda_e: bm.lambda_e,
            lambda_d: bm.lambda_d,
            config_hash: bm.config_hash,
            mu: take_prefixed(entries, "mu."),
            theta: take_prefixed(entries, "theta."),
            phi: take_prefixed(entries, "phi."),
            nu: take_prefixed(entries, "nu."),
        };
        for (set, name) in [
            (&bundle.mu, "encryption"),
            (&bundle.theta, "encoder"),
            (&bundle.phi, "decoder"),
            (&bundle.nu, "decryption"),
        ] {
            if !set.is_empty() {
                bundle.require(set, name)?;
            }
        }
        Ok((bundle, bm.part))
    }

    pub fn save(&self, path: &Path, part: Part) -> Result<(), ModelError> {
        let (entries, meta) = self.to_entries(part);
        save_file(path, &entries, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Part), ModelError> {
        let (entries, meta) = load_file::<F>(path)?;
        Self::from_entries(&entries, &meta)
    }
}

fn check_learned(b: &ModelBundle<f32>, set: &ParamSet<f32>, name: &'static str) -> Result<(), ModelError> {
    if b.encryption == Encryption::Learned {
        b.require(set, name)?;
    }
    Ok(())
}

fn run_chunks(
    x: &ImageBatch,
    f: impl Fn(&mut Tape<f32>, Var) -> Var,
) -> Result<Vec<Tensor<f32>>, ModelError> {
    let idx: Vec<usize> = (0..x.count()).collect();
    let mut out = Vec::new();
    for chunk in idx.chunks(INFER_CHUNK) {
        let mut tape = Tape::new();
        let v = tape.constant(x.gather(chunk).to_tensor());
        let y = f(&mut tape, v);
        out.push(tape.value(y).clone());
    }
    Ok(out)
}

fn concat_batches(parts: Vec<Tensor<f32>>) -> Result<ImageBatch, ModelError> {
    let mut batches = parts.iter().map(ImageBatch::from_tensor);
    let first = batches.next().expect("at least one chunk")?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut values = first.values().to_vec();
    let mut count = first.count();
    for b in batches {
        let b = b?;
        count += b.count();
        values.extend_from_slice(b.values());
    }
    Ok(ImageBatch::new(count, h, w, c, values)?)
}

fn check_channels(b: &ModelBundle<f32>, x: &ImageBatch) -> Result<(), ModelError> {
    if x.channels() != b.arch.channels {
        return Err(ModelError::Shape(format!(
            "bundle expects {} channels, image has {}",
            b.arch.channels,
            x.channels()
        )));
    }
    Ok(())
}

/// `y = e_μ(x)`.
pub fn encrypt_forward(x: &ImageBatch, b: &ModelBundle<f32>) -> Result<ImageBatch, ModelError> {
    check_channels(b, x)?;
    check_learned(b, &b.mu, "encryption")?;
    let parts = run_chunks(x, |tape, v| {
        let mu = b.mu.bind(tape, false);
        let bound = Bound {
            mu,
            theta: Vec::new(),
            phi: Vec::new(),
            nu: Vec::new(),
        };
        b.encrypt_var(tape, &bound, v)
    })?;
    concat_batches(parts)
}

/// `z = f_θ(y)`, one power-normalized block per image.
pub fn encode_forward(y: &ImageBatch, b: &ModelBundle<f32>) -> Result<Vec<SymbolBlock>, ModelError> {
    check_channels(b, y)?;
    b.require(&b.theta, "encoder")?;
    let parts = run_chunks(y, |tape, v| {
        let theta = b.theta.bind(tape, false);
        b.arch.encoder().forward(tape, &theta, v)
    })?;
    let mut out = Vec::with_capacity(y.count());
    for t in parts {
        let (n, len) = t.dims2();
        for i in 0..n {
            let reals: Vec<f64> = t.data()[i * len..(i + 1) * len].iter().map(|&v| v as f64).collect();
            out.push(pack_complex(&reals).expect("encoder output has even length"));
        }
    }
    Ok(out)
}

/// `ŷ = g_φ(ẑ)` for images of `h × w`.
pub fn decode_forward(
    zhat: &[SymbolBlock],
    b: &ModelBundle<f32>,
    h: usize,
    w: usize,
) -> Result<ImageBatch, ModelError> {
    b.require(&b.phi, "decoder")?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(ModelError::Shape(format!("target {h}x{w} is not divisible by 4")));
    }
    let k = b.arch.encoder().symbols_per_image(h, w);
    if let Some(bad) = zhat.iter().find(|z| z.k() != k) {
        return Err(ModelError::Shape(format!(
            "a {h}x{w} image needs {k} symbols at t={}, block has {}",
            b.arch.t,
            bad.k()
        )));
    }
    if zhat.is_empty() {
        return Err(ModelError::Shape("no symbol blocks".into()));
    }
    let mut parts = Vec::new();
    for chunk in zhat.chunks(INFER_CHUNK) {
        let data: Vec<f32> = chunk
            .iter()
            .flat_map(unpack_complex)
            .map(|v| v as f32)
            .collect();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![chunk.len(), 2 * k], data));
        let phi = b.phi.bind(&mut tape, false);
        let y = b.arch.decoder().forward(&mut tape, &phi, z, h, w);
        parts.push(tape.value(y).clone());
    }
    concat_batches(parts)
}

/// `x̂ = d_ν(ŷ)`.
pub fn decrypt_forward(yhat: &ImageBatch, b: &ModelBundle<f32>) -> Result<ImageBatch, ModelError> {
    check_channels(b, yhat)?;
    check_learned(b, &b.nu, "decryption")?;
    let parts = run_chunks(yhat, |tape, v| {
        let nu = b.nu.bind(tape, false);
        let bound = Bound {
            mu: Vec::new(),
            theta: Vec::new(),
            phi: Vec::new(),
            nu,
        };
        b.decrypt_var(tape, &bound, v)
    })?;
    concat_batches(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::keyed_shuffle_encrypt;
    use crate::imagedata::{denormalize, normalize, RawImages};

    fn small_arch() -> Arch {
        Arch {
            channels: 3,
            t: 16,
            jscc_widths: [8, 8, 8, 8],
            unet_width: 4,
        }
    }

    #[test]
    fn ratio_is_t_over_96() {
        assert_eq!(Arch::default().bandwidth_ratio(), 1.0 / 6.0);
        let a = Arch {
            t: 8,
            ..Arch::default()
        };
        assert_eq!(a.bandwidth_ratio(), 1.0 / 12.0);
    }

    #[test]
    fn tensor_shuffle_matches_image_shuffle() {
        let raw = RawImages::new(2, 4, 8, 3, (0..192).map(|i| i as u8).collect()).unwrap();
        let b = ModelBundle::<f32>::init(small_arch(), Encryption::Shuffle { seed: 11 }, 0.0, 0.0, 0);
        let enc = encrypt_forward(&normalize(&raw).unwrap(), &b).unwrap();
        let key = ShuffleKey::new(11, 96);
        assert_eq!(denormalize(&enc), keyed_shuffle_encrypt(&raw, &key).unwrap());
        let dec = decrypt_forward(&enc, &b).unwrap();
        assert_eq!(denormalize(&dec), raw);
    }

    #[test]
    fn full_pipeline_keeps_shape() {
        let b = ModelBundle::<f32>::init(small_arch(), Encryption::Learned, 0.05, 0.05, 3);
        for side in [32, 96] {
            let x = ImageBatch::new(1, side, side, 3, vec![0.4; side * side * 3]).unwrap();
            let y = encrypt_forward(&x, &b).unwrap();
            assert_eq!(y.shape(), x.shape());
            let z = encode_forward(&y, &b).unwrap();
            assert_eq!(z[0].k(), side * side * 16 / 32);
            assert!((z[0].average_power() - 1.0).abs() < 1e-5);
            let yhat = decode_forward(&z, &b, side, side).unwrap();
            let xhat = decrypt_forward(&yhat, &b).unwrap();
            assert_eq!(xhat.shape(), x.shape());
        }
    }

    #[test]
    fn decoder_rejects_wrong_block_length() {
        let b = ModelBundle::<f32>::init(small_arch(), Encryption::None, 0.0, 0.0, 3);
        let z = vec![pack_complex(&vec![0.5; 100]).unwrap()];
        assert!(matches!(decode_forward(&z, &b, 32, 32), Err(ModelError::Shape(_))));
    }

    #[test]
    fn parts_save_and_load_separately() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ModelBundle::<f32>::init(small_arch(), Encryption::Learned, 0.05, 0.05, 9);
        b.config_hash = "abc".into();
        let full = dir.path().join("full.safetensors");
        b.save(&full, Part::Full).unwrap();
        let (back, part) = ModelBundle::<f32>::load(&full).unwrap();
        assert_eq!((back, part), (b.clone(), Part::Full));
        let enc = dir.path().join("enc.safetensors");
        b.save(&enc, Part::Encryption).unwrap();
        let (e, part) = ModelBundle::<f32>::load(&enc).unwrap();
        assert_eq!(part, Part::Encryption);
        assert_eq!(e.mu, b.mu);
        assert!(e.theta.is_empty() && e.nu.is_empty());
        let x = ImageBatch::new(1, 8, 8, 3, vec![0.2; 192]).unwrap();
        assert_eq!(encrypt_forward(&x, &e).unwrap(), encrypt_forward(&x, &b).unwrap());
        assert!(matches!(encode_forward(&x, &e), Err(ModelError::MissingPart("encoder"))));
    }
}
