//! VGG16 with batch normalization: classifier pretraining and the frozen
//! feature extractor cut from its trunk.

use std::collections::BTreeMap;
use std::path::Path;

use djescc_autograd::params::{load_file, save_file};
use djescc_autograd::{Adam, Float, Init, ParamLayout, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Builder;
use super::ModelError;
use crate::imagedata::{normalize, shuffled_indices, RawImages};

const BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    pub in_channels: usize,
    /// Every block width is divided by this (1 is the standard network).
    pub width_divisor: usize,
    /// Features are taken after the last ReLU of this block (1-based), before pooling.
    pub cut_block: usize,
    pub classes: usize,
}

impl Default for VggConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            width_divisor: 1,
            cut_block: 3,
            classes: 10,
        }
    }
}

impl VggConfig {
    fn blocks(&self) -> Vec<(usize, usize)> {
        BLOCKS
            .iter()
            .map(|&(w, n)| ((w / self.width_divisor).max(1), n))
            .collect()
    }

    /// `(h_f, w_f, c_f)` at the cut for an `h × w` input.
    pub fn feature_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let pools = self.cut_block - 1;
        (h >> pools, w >> pools, self.blocks()[self.cut_block - 1].0)
    }

    fn trunk(&self, b: &mut Builder, upto: usize) {
        let mut cin = self.in_channels;
        for (bi, (w, n)) in self.blocks().into_iter().take(upto).enumerate() {
            for j in 0..n {
                let name = format!("b{}.c{}", bi + 1, j + 1);
                b.conv(&name, cin, w, 3, false);
                b.batch_norm(&name, w);
                cin = w;
            }
        }
    }

    pub fn classifier_layout(&self) -> ParamLayout {
        let mut b = Builder::new();
        self.trunk(&mut b, 5);
        b.linear("head", self.blocks()[4].0, self.classes);
        b.finish()
    }

    fn running_layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        for (bi, (w, n)) in self.blocks().into_iter().enumerate() {
            for j in 0..n {
                let name = format!("b{}.c{}", bi + 1, j + 1);
                l.add(format!("{name}.mean"), &[w], Init::Constant(0.0));
                l.add(format!("{name}.var"), &[w], Init::Constant(1.0));
            }
        }
        l
    }

    fn num_convs(&self, upto: usize) -> usize {
        self.blocks().iter().take(upto).map(|b| b.1).sum()
    }
}

/// Training-mode classifier forward. Returns logits and the batch-norm nodes.
fn classifier_forward<F: Float>(
    cfg: &VggConfig,
    tape: &mut Tape<F>,
    p: &[Var],
    x: Var,
) -> (Var, Vec<Var>) {
    let mut h = x;
    let mut k = 0;
    let mut bns = Vec::new();
    for (_, n) in cfg.blocks() {
        for _ in 0..n {
            h = tape.conv2d(h, p[k], None, 1, 1);
            h = tape.batch_norm(h, p[k + 1], p[k + 2], BN_EPS);
            bns.push(h);
            h = tape.relu(h);
            k += 3;
        }
        if tape.value(h).dims4().2 >= 2 {
            h = tape.max_pool2(h);
        }
    }
    let pooled = tape.spatial_mean(h);
    (tape.linear(pooled, p[k], p[k + 1]), bns)
}

#[derive(Clone, Debug, PartialEq)]
struct FoldedConv<F> {
    w: Tensor<F>,
    scale: Tensor<F>,
    shift: Tensor<F>,
}

/// Frozen trunk of a pretrained VGG16-BN up to the configured cut. Batch
/// norm runs in inference mode, folded into a per-channel affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<F> {
    pub config: VggConfig,
    convs: Vec<FoldedConv<F>>,
}

fn fold<F: Float>(
    cfg: &VggConfig,
    params: &ParamSet<F>,
    running: &ParamSet<F>,
    upto: usize,
) -> Vec<FoldedConv<F>> {
    (0..cfg.num_convs(upto))
        .map(|i| {
            let g = params.tensor(3 * i + 1).data();
            let b = params.tensor(3 * i + 2).data();
            let m = running.tensor(2 * i).data();
            let v = running.tensor(2 * i + 1).data();
            let eps = F::from_f64_lossy(BN_EPS);
            let scale: Vec<F> = g.iter().zip(v).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
            let shift: Vec<F> = b
                .iter()
                .zip(m)
                .zip(&scale)
                .map(|((&b, &m), &s)| b - m * s)
                .collect();
            let c = scale.len();
            FoldedConv {
                w: params.tensor(3 * i).clone(),
                scale: Tensor::new(vec![c], scale),
                shift: Tensor::new(vec![c], shift),
            }
        })
        .collect()
}

fn folded_forward<F: Float>(
    cfg: &VggConfig,
    convs: &[FoldedConv<F>],
    upto: usize,
    tape: &mut Tape<F>,
    x: Var,
) -> Var {
    let mut h = x;
    let mut k = 0;
    for (bi, (_, n)) in cfg.blocks().into_iter().take(upto).enumerate() {
        if bi > 0 && tape.value(h).dims4().2 >= 2 {
            h = tape.max_pool2(h);
        }
        for _ in 0..n {
            let c = &convs[k];
            let w = tape.constant(c.w.clone());
            let s = tape.constant(c.scale.clone());
            let t = tape.constant(c.shift.clone());
            h = tape.conv2d(h, w, None, 1, 1);
            h = tape.channel_affine(h, s, t);
            h = tape.relu(h);
            k += 1;
        }
    }
    h
}

impl<F: Float> FeatureExtractor<F> {
    /// Features `(N, c_f, h_f, w_f)` of an NCHW input. Gradients flow to `x`
    /// only; the extractor's own parameters enter the tape as constants.
    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Var {
        folded_forward(&self.config, &self.convs, self.config.cut_block, tape, x)
    }

    /// Randomly initialized extractor, for shape tests and gradient checks.
    pub fn random(config: VggConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config.classifier_layout().init::<F, _>(&mut rng);
        let running = config.running_layout().init::<F, _>(&mut rng);
        let convs = fold(&config, &params, &running, config.cut_block);
        Self { config, convs }
    }

    /// Flattened parameter set ψ.
    pub fn psi(&self) -> ParamSet<F> {
        let mut entries = Vec::new();
        let mut k = 0;
        for (bi, (_, n)) in self.config.blocks().into_iter().take(self.config.cut_block).enumerate() {
            for j in 0..n {
                let name = format!("b{}.c{}", bi + 1, j + 1);
                let c = &self.convs[k];
                entries.push((format!("{name}.w"), c.w.clone()));
                entries.push((format!("{name}.scale"), c.scale.clone()));
                entries.push((format!("{name}.shift"), c.shift.clone()));
                k += 1;
            }
        }
        ParamSet::from_entries(entries)
    }

    pub fn from_psi(config: VggConfig, psi: &ParamSet<F>) -> Result<Self, ModelError> {
        let n = config.num_convs(config.cut_block);
        if psi.len() != 3 * n {
            return Err(ModelError::Config(format!(
                "extractor needs {} tensors for cut block {}, found {}",
                3 * n,
                config.cut_block,
                psi.len()
            )));
        }
        let convs = (0..n)
            .map(|i| FoldedConv {
                w: psi.tensor(3 * i).clone(),
                scale: psi.tensor(3 * i + 1).clone(),
                shift: psi.tensor(3 * i + 2).clone(),
            })
            .collect();
        Ok(Self { config, convs })
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<(), ModelError> {
        let mut meta = extra.clone();
        meta.insert("vgg".into(), serde_json::to_string(&self.config).expect("config serializes"));
        save_file(path, &self.psi().prefixed(""), &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>), ModelError> {
        if !path.exists() {
            return Err(ModelError::Config(format!(
                "feature extractor checkpoint {} not found",
                path.display()
            )));
        }
        let (entries, meta) = load_file::<F>(path)?;
        let config: VggConfig = meta
            .get("vgg")
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| ModelError::Config(format!("{} lacks a vgg config", path.display())))?;
        Ok((Self::from_psi(config, &ParamSet::from_entries(entries))?, meta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub train_loss: Vec<f64>,
    pub test_accuracy: f64,
}

fn batch_tensor<F: Float>(images: &RawImages, idx: &[usize]) -> Tensor<F> {
    normalize(&images.gather(idx))
        .expect("dataset images are valid")
        .to_tensor()
}

/// Train the full classifier on labeled images and keep its trunk.
pub fn pretrain_feature_extractor(
    config: &VggConfig,
    train: (&RawImages, &[u8]),
    test: (&RawImages, &[u8]),
    pc: &PretrainConfig,
    seed: u64,
) -> (FeatureExtractor<f32>, PretrainReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = config.classifier_layout();
    let mut params = layout.init::<f32, _>(&mut rng);
    let mut running = config.running_layout().init::<f32, _>(&mut rng);
    let mut adam = Adam::new(&params);
    let (images, labels) = train;
    let mut losses = Vec::with_capacity(pc.epochs);
    for epoch in 0..pc.epochs {
        let order = shuffled_indices(images.count, seed ^ (epoch as u64 + 1).wrapping_mul(0x51_7cc1));
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(pc.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(images, idx));
            let vars = params.bind(&mut tape, true);
            let (logits, bns) = classifier_forward(config, &mut tape, &vars, x);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i] as usize).collect();
            let loss = tape.softmax_cross_entropy(logits, &y);
            total += tape.value(loss).item() as f64;
            batches += 1;
            let mut grads = tape.backward(loss);
            let g: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
            adam.update(&mut params, &g, pc.lr);
            for (i, &bn) in bns.iter().enumerate() {
                let (mean, var) = tape.batch_norm_stats(bn).expect("batch-norm node");
                let (n, _, h, w) = tape.value(bn).dims4();
                let cnt = (n * h * w) as f32;
                let unbias = cnt / (cnt - 1.0).max(1.0);
                let m = BN_MOMENTUM as f32;
                for (r, &b) in running.tensor_mut(2 * i).data_mut().iter_mut().zip(mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, &b) in running.tensor_mut(2 * i + 1).data_mut().iter_mut().zip(var) {
                    *r = (1.0 - m) * *r + m * b * unbias;
                }
            }
        }
        let mean = total / batches.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        losses.push(mean);
    }
    let all = fold(config, &params, &running, 5);
    let acc = accuracy(config, &all, &params, test);
    let convs = all[..config.num_convs(config.cut_block)].to_vec();
    (
        FeatureExtractor {
            config: config.clone(),
            convs,
        },
        PretrainReport {
            train_loss: losses,
            test_accuracy: acc,
        },
    )
}

fn accuracy(
    cfg: &VggConfig,
    convs: &[FoldedConv<f32>],
    params: &ParamSet<f32>,
    test: (&RawImages, &[u8]),
) -> f64 {
    let (images, labels) = test;
    let head = 3 * cfg.num_convs(5);
    let mut correct = 0;
    let idx: Vec<usize> = (0..images.count).collect();
    for chunk in idx.chunks(128) {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(images, chunk));
        let mut h = folded_forward(cfg, convs, 5, &mut tape, x);
        if tape.value(h).dims4().2 >= 2 {
            h = tape.max_pool2(h);
        }
        let pooled = tape.spatial_mean(h);
        let w = tape.constant(params.tensor(head).clone());
        let b = tape.constant(params.tensor(head + 1).clone());
        let logits = tape.linear(pooled, w, b);
        let (_, k) = tape.value(logits).dims2();
        for (row, &i) in tape.value(logits).data().chunks(k).zip(chunk) {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            if arg == labels[i] as usize {
                correct += 1;
            }
        }
    }
    correct as f64 / images.count.max(1) as f64
}
