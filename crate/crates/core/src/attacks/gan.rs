//! Unpaired GAN attack: a generator learns to map cipher images into the
//! plain-image domain while a discriminator scores plain-domain realism.

use djescc_autograd::{Adam, ParamLayout, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::imagedata::{denormalize, normalize, shuffled_indices, ImageBatch, RawImages};
use crate::models::layers::{Builder, Cursor};
use crate::models::UNet;
use crate::seeds::{derive_seed, stream};

const LEAKY_SLOPE: f64 = 0.3;
const DISC_WIDTHS: [usize; 3] = [16, 16, 32];

/// Three 2×2 stride-2 convolutions with leaky ReLU, then a dense sigmoid unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Discriminator {
    pub fn layout(&self) -> ParamLayout {
        let mut b = Builder::new();
        let mut cin = self.channels;
        for (i, &w) in DISC_WIDTHS.iter().enumerate() {
            b.conv(&format!("d{i}"), cin, w, 2, true);
            cin = w;
        }
        b.linear("head", self.flat_len(), 1);
        b.finish()
    }

    fn flat_len(&self) -> usize {
        DISC_WIDTHS[2] * (self.height >> 3) * (self.width >> 3)
    }

    /// Logits `(N, 1)`; the score is their sigmoid.
    pub fn logits<F: djescc_autograd::Float>(&self, tape: &mut Tape<F>, params: &[Var], x: Var) -> Var {
        let mut p = Cursor::new(params);
        let mut h = x;
        for _ in DISC_WIDTHS {
            h = p.conv(tape, h, 2, 0);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let n = tape.value(h).dims4().0;
        let flat = tape.reshape(h, &[n, self.flat_len()]);
        let w = p.next();
        let b = p.next();
        p.done();
        tape.linear(flat, w, b)
    }

    pub fn score<F: djescc_autograd::Float>(&self, tape: &mut Tape<F>, params: &[Var], x: Var) -> Var {
        let l = self.logits(tape, params, x);
        tape.sigmoid(l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub generator_width: usize,
    pub collapse_threshold: f64,
    pub collapse_epochs: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 64,
            lr: 1e-4,
            generator_width: 32,
            collapse_threshold: 1e-6,
            collapse_epochs: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanAttack {
    pub generator: UNet,
    pub discriminator: Discriminator,
    pub g: ParamSet<f32>,
    pub d: ParamSet<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanReport {
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    /// Epochs at which a discriminator collapse warning was raised.
    pub collapse_warnings: Vec<usize>,
}

/// Two equal, disjoint halves of `0..n` (one index is dropped when `n` is odd).
pub fn split_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let idx = shuffled_indices(n, derive_seed(&[seed, stream::GAN, u64::MAX]));
    let half = n / 2;
    (idx[..half].to_vec(), idx[half..2 * half].to_vec())
}

/// Tracks consecutive epochs with a vanishing discriminator loss.
#[derive(Clone, Debug)]
pub struct CollapseMonitor {
    threshold: f64,
    epochs: usize,
    streak: usize,
}

impl CollapseMonitor {
    pub fn new(threshold: f64, epochs: usize) -> Self {
        Self {
            threshold,
            epochs,
            streak: 0,
        }
    }

    /// True when this epoch completes a run of `epochs` collapsed epochs.
    pub fn observe(&mut self, d_loss: f64) -> bool {
        if d_loss < self.threshold {
            self.streak += 1;
            self.streak % self.epochs == 0
        } else {
            self.streak = 0;
            false
        }
    }
}

fn grads_of(g: &mut djescc_autograd::Gradients<f32>, vars: &[Var]) -> Vec<Option<Tensor<f32>>> {
    vars.iter().map(|&v| g.take(v)).collect()
}

impl GanAttack {
    pub fn new(channels: usize, height: usize, width: usize, generator_width: usize, seed: u64) -> Self {
        let generator = UNet {
            channels,
            width: generator_width,
        };
        let discriminator = Discriminator {
            channels,
            height,
            width,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stream::GAN, stream::INIT]));
        let g = generator.layout().init(&mut rng);
        let d = discriminator.layout().init(&mut rng);
        Self {
            generator,
            discriminator,
            g,
            d,
        }
    }

    /// Generator output for 8-bit cipher images, quantized to 8 bits.
    pub fn reconstruct(&self, cipher: &RawImages) -> Result<RawImages, AttackError> {
        self.check(cipher)?;
        let mut out = Vec::with_capacity(cipher.data.len());
        let idx: Vec<usize> = (0..cipher.count).collect();
        for chunk in idx.chunks(64) {
            let x = normalize(&cipher.gather(chunk)).map_err(|e| AttackError::Shape(e.to_string()))?;
            let mut tape = Tape::new();
            let v = tape.constant(x.to_tensor::<f32>());
            let p = self.g.bind(&mut tape, false);
            let y = self.generator.forward(&mut tape, &p, v);
            let img = ImageBatch::from_tensor(tape.value(y)).map_err(|e| AttackError::Shape(e.to_string()))?;
            out.extend(denormalize(&img).data);
        }
        Ok(RawImages {
            data: out,
            ..cipher.clone()
        })
    }

    /// Discriminator scores in `(0, 1)`.
    pub fn score(&self, images: &RawImages) -> Result<Vec<f64>, AttackError> {
        self.check(images)?;
        let x = normalize(images).map_err(|e| AttackError::Shape(e.to_string()))?;
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x.to_tensor());
        let p = self.d.bind(&mut tape, false);
        let s = self.discriminator.score(&mut tape, &p, v);
        Ok(tape.value(s).data().iter().map(|&v| v as f64).collect())
    }

    fn check(&self, imgs: &RawImages) -> Result<(), AttackError> {
        let d = &self.discriminator;
        if imgs.channels != d.channels || imgs.height != d.height || imgs.width != d.width {
            return Err(AttackError::Shape(format!(
                "attack trained on {}x{}x{}, got {}x{}x{}",
                d.height, d.width, d.channels, imgs.height, imgs.width, imgs.channels
            )));
        }
        Ok(())
    }

    /// One discriminator update then one generator update; returns both losses.
    fn step(
        &mut self,
        real: &Tensor<f32>,
        cipher: &Tensor<f32>,
        opt_g: &mut Adam<f32>,
        opt_d: &mut Adam<f32>,
        lr: f64,
    ) -> (f64, f64) {
        let mut tape = Tape::new();
        let c = tape.constant(cipher.clone());
        let gp = self.g.bind(&mut tape, false);
        let fake = self.generator.forward(&mut tape, &gp, c);
        let fake = tape.detach(fake);
        let r = tape.constant(real.clone());
        let dp = self.d.bind(&mut tape, true);
        let lr_real = self.discriminator.logits(&mut tape, &dp, r);
        let lr_fake = self.discriminator.logits(&mut tape, &dp, fake);
        let a = tape.bce_with_logits(lr_real, 1.0);
        let b = tape.bce_with_logits(lr_fake, 0.0);
        let d_loss = tape.add(a, b);
        let d_val = tape.value(d_loss).item() as f64;
        let mut g = tape.backward(d_loss);
        opt_d.update(&mut self.d, &grads_of(&mut g, &dp), lr);

        let mut tape = Tape::new();
        let c = tape.constant(cipher.clone());
        let gp = self.g.bind(&mut tape, true);
        let fake = self.generator.forward(&mut tape, &gp, c);
        let dp = self.d.bind(&mut tape, false);
        let l = self.discriminator.logits(&mut tape, &dp, fake);
        let g_loss = tape.bce_with_logits(l, 1.0);
        let g_val = tape.value(g_loss).item() as f64;
        let mut g = tape.backward(g_loss);
        opt_g.update(&mut self.g, &grads_of(&mut g, &gp), lr);
        (d_val, g_val)
    }
}

/// Train the attack on `train`: one half supplies real plain images, the
/// other half is encrypted by `cipher_fn` and fed to the generator, so no
/// pair is ever seen.
pub fn gan_attack_train(
    cipher_fn: &dyn Fn(&RawImages) -> Result<RawImages, AttackError>,
    train: &RawImages,
    cfg: &GanConfig,
    seed: u64,
) -> Result<(GanAttack, GanReport), AttackError> {
    gan_attack_train_observed(cipher_fn, train, cfg, seed, &mut |_, _| {})
}

/// [`gan_attack_train`] with a callback after every epoch.
pub fn gan_attack_train_observed(
    cipher_fn: &dyn Fn(&RawImages) -> Result<RawImages, AttackError>,
    train: &RawImages,
    cfg: &GanConfig,
    seed: u64,
    observer: &mut dyn FnMut(usize, &GanAttack),
) -> Result<(GanAttack, GanReport), AttackError> {
    if train.count < 2 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(AttackError::Config("GAN attack needs two images, a batch and an epoch".into()));
    }
    if train.height % 8 != 0 || train.width % 8 != 0 {
        return Err(AttackError::Shape(format!(
            "discriminator needs sides divisible by 8, got {}x{}",
            train.height, train.width
        )));
    }
    let (x1, x2) = split_halves(train.count, seed);
    let real = train.gather(&x1);
    let cipher = cipher_fn(&train.gather(&x2))?;
    if !cipher.same_shape(&real) {
        return Err(AttackError::Shape("cipher images differ in shape from plain images".into()));
    }
    let norm = |r: &RawImages| normalize(r).map_err(|e| AttackError::Shape(e.to_string()));
    let real = norm(&real)?;
    let cipher = norm(&cipher)?;

    let mut attack = GanAttack::new(train.channels, train.height, train.width, cfg.generator_width, seed);
    let mut opt_g = Adam::new(&attack.g);
    let mut opt_d = Adam::new(&attack.d);
    let mut monitor = CollapseMonitor::new(cfg.collapse_threshold, cfg.collapse_epochs);
    let mut report = GanReport::default();
    let n = real.count();
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let order_r = shuffled_indices(n, derive_seed(&[seed, stream::GAN, e, 0]));
        let order_c = shuffled_indices(n, derive_seed(&[seed, stream::GAN, e, 1]));
        let (mut ds, mut gs, mut batches) = (0.0, 0.0, 0);
        for (br, bc) in order_r.chunks(cfg.batch_size).zip(order_c.chunks(cfg.batch_size)) {
            let r = real.gather(br).to_tensor();
            let c = cipher.gather(bc).to_tensor();
            let (d, g) = attack.step(&r, &c, &mut opt_g, &mut opt_d, cfg.lr);
            ds += d;
            gs += g;
            batches += 1;
        }
        let (d, g) = (ds / batches as f64, gs / batches as f64);
        log::debug!("gan epoch {epoch}: d {d:.5} g {g:.5}");
        if monitor.observe(d) {
            log::warn!(
                "discriminator loss below {} for {} epochs (epoch {epoch}); continuing",
                cfg.collapse_threshold,
                cfg.collapse_epochs
            );
            report.collapse_warnings.push(epoch);
        }
        report.d_loss.push(d);
        report.g_loss.push(g);
        observer(epoch, &attack);
    }
    Ok((attack, report))
}
