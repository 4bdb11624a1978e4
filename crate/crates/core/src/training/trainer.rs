//! Optimization of the full encrypt → encode → channel → decode → decrypt
//! chain, with checkpointing and resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use djescc_autograd::params::{load_file, save_file};
use djescc_autograd::{Adam, Float, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Plateau, TrainError, TrainingSection};
use crate::channel::{noise_reals, snr_to_sigma2};
use crate::imagedata::{denormalize, export_grid, shuffled_indices, ImageBatch};
use crate::models::{Bound, FeatureExtractor, ModelBundle, Part};
use crate::objective::{total_loss_var, LossBreakdown, LossVars};
use crate::seeds::{derive_seed, stream};

/// AWGN samples for a batch of `n` blocks of `k` symbols, laid out like the
/// encoder output (real parts first). An infinite SNR gives zeros.
pub fn channel_noise<F: Float>(k: usize, snrs_db: &[f64], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let mut data = Vec::with_capacity(snrs_db.len() * 2 * k);
    for &snr in snrs_db {
        let sigma2 = snr_to_sigma2(snr);
        let reals = noise_reals(k, sigma2, rng).expect("σ² from an SNR is non-negative");
        data.extend(reals.into_iter().map(F::from_f64_lossy));
    }
    Tensor::new(vec![snrs_db.len(), 2 * k], data)
}

/// One SNR for the whole batch, or one per image.
pub fn sample_snrs(t: &TrainingSection, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut draw = || {
        if t.snr_min_db == t.snr_max_db {
            t.snr_min_db
        } else {
            rng.gen_range(t.snr_min_db..=t.snr_max_db)
        }
    };
    if t.per_image_snr {
        (0..n).map(|_| draw()).collect()
    } else {
        vec![draw(); n]
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Graph {
    pub y: Var,
    pub z: Var,
    pub yhat: Var,
    pub xhat: Var,
    pub losses: LossVars,
}

/// Record the full chain for `x` (NCHW) with the given channel noise.
pub fn build_graph<F: Float>(
    tape: &mut Tape<F>,
    bundle: &ModelBundle<F>,
    bound: &Bound,
    extractor: &FeatureExtractor<F>,
    x: Var,
    noise: Tensor<F>,
) -> Result<Graph, TrainError> {
    let (_, _, h, w) = tape.value(x).dims4();
    let y = bundle.encrypt_var(tape, bound, x);
    let z = bundle.encode_var(tape, bound, y);
    if tape.shape(z) != noise.shape() {
        return Err(TrainError::Config(format!(
            "noise shape {:?} does not match channel input {:?}",
            noise.shape(),
            tape.shape(z)
        )));
    }
    let n = tape.constant(noise);
    let zhat = tape.add(z, n);
    let yhat = bundle.decode_var(tape, bound, zhat, h, w);
    let xhat = bundle.decrypt_var(tape, bound, yhat);
    let losses = total_loss_var(tape, extractor, x, y, yhat, xhat, bundle.lambda_e, bundle.lambda_d)?;
    Ok(Graph {
        y,
        z,
        yhat,
        xhat,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub snrs_db: Vec<f64>,
}

/// A bundle plus one Adam state per parameter set.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub bundle: ModelBundle<f32>,
    pub training: TrainingSection,
    opts: [Adam<f32>; 4],
}

const SETS: [&str; 4] = ["mu", "theta", "phi", "nu"];

impl Trainer {
    pub fn new(bundle: ModelBundle<f32>, training: TrainingSection) -> Self {
        let opts = [
            Adam::new(&bundle.mu),
            Adam::new(&bundle.theta),
            Adam::new(&bundle.phi),
            Adam::new(&bundle.nu),
        ];
        Self {
            bundle,
            training,
            opts,
        }
    }

    /// One Adam update of (μ, θ, φ, ν) against the total loss. Parameters
    /// are left untouched when the loss is not finite.
    pub fn step(
        &mut self,
        batch: &ImageBatch,
        extractor: &FeatureExtractor<f32>,
        rng: &mut ChaCha8Rng,
        lr: f64,
    ) -> Result<StepReport, TrainError> {
        let snrs = sample_snrs(&self.training, batch.count(), rng);
        let k = self.bundle.arch.encoder().symbols_per_image(batch.height(), batch.width());
        let noise = channel_noise(k, &snrs, rng);
        let mut tape = Tape::new();
        let x = tape.constant(batch.to_tensor());
        let bound = self.bundle.bind(&mut tape, true);
        let g = build_graph(&mut tape, &self.bundle, &bound, extractor, x, noise)?;
        let loss = g.losses.breakdown(&tape, self.bundle.lambda_e, self.bundle.lambda_d);
        if ![loss.l_r, loss.l_e, loss.l_d, loss.l_total].iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFinite {
                snrs_db: snrs,
                loss,
                dump: None,
            });
        }
        let mut grads = tape.backward(g.losses.total);
        let mut take = |vars: &[Var]| vars.iter().map(|&v| grads.take(v)).collect::<Vec<_>>();
        let gs = [take(&bound.mu), take(&bound.theta), take(&bound.phi), take(&bound.nu)];
        let b = &mut self.bundle;
        let sets = [&mut b.mu, &mut b.theta, &mut b.phi, &mut b.nu];
        for ((opt, set), g) in self.opts.iter_mut().zip(sets).zip(&gs) {
            opt.update(set, g, lr);
        }
        Ok(StepReport { loss, snrs_db: snrs })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_r: f64,
    pub l_e: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,l_r,l_e,l_d,l_total,lr\n");
    for r in log {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.l_r, r.l_e, r.l_d, r.l_total, r.lr));
    }
    s
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where logs and checkpoints go; `None` keeps everything in memory.
    pub run_dir: Option<PathBuf>,
    /// Continue from `checkpoints/last.safetensors` if present.
    pub resume: bool,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub bundle: ModelBundle<f32>,
    pub log: Vec<EpochLog>,
    pub finished: bool,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    config_hash: String,
    epochs_done: usize,
    plateau: Plateau,
    best_loss: f64,
    adam_steps: [u64; 4],
    log: Vec<EpochLog>,
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

fn save_state(path: &Path, trainer: &Trainer, state: &TrainerState) -> Result<(), TrainError> {
    let (mut entries, mut meta) = trainer.bundle.to_entries(Part::Full);
    for (opt, name) in trainer.opts.iter().zip(SETS) {
        entries.extend(opt.state(&format!("opt.{name}.")));
    }
    meta.insert("trainer".into(), serde_json::to_string(state).expect("state serializes"));
    let tmp = path.with_extension("tmp");
    save_file(&tmp, &entries, &meta)?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

fn load_state(path: &Path, training: &TrainingSection) -> Result<(Trainer, TrainerState), TrainError> {
    let (entries, meta) = load_file::<f32>(path)?;
    let state: TrainerState = meta
        .get("trainer")
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| TrainError::Config(format!("{} is not a training checkpoint", path.display())))?;
    let (bundle, _) = ModelBundle::from_entries(&entries, &meta)?;
    let mut trainer = Trainer::new(bundle, training.clone());
    for ((opt, name), steps) in trainer.opts.iter_mut().zip(SETS).zip(state.adam_steps) {
        if !opt.restore(steps, &entries, &format!("opt.{name}.")) {
            return Err(TrainError::Config(format!("{} lacks optimizer state for {name}", path.display())));
        }
    }
    Ok((trainer, state))
}

fn dump_batch(
    run_dir: &Path,
    batch: &ImageBatch,
    epoch: usize,
    index: usize,
    snrs: &[f64],
    loss: &LossBreakdown,
) -> Result<PathBuf, TrainError> {
    let dir = run_dir.join("nonfinite");
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    export_grid(&[denormalize(batch)], &dir.join("batch.png"))?;
    let info = serde_json::json!({
        "epoch": epoch,
        "batch": index,
        "snr_db": snrs,
        "l_r": loss.l_r,
        "l_e": loss.l_e,
        "l_d": loss.l_d,
        "l_total": loss.l_total,
    });
    write_atomic(&dir.join("info.json"), info.to_string().as_bytes())?;
    Ok(dir)
}

/// Train from scratch (or resume) for `cfg.training.epochs` epochs.
pub fn fit(
    cfg: &ExperimentConfig,
    train: &ImageBatch,
    extractor: &FeatureExtractor<f32>,
    opts: &FitOptions,
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let tc = &cfg.training;
    let seed = cfg.run.seed;
    let ckpt = opts.run_dir.as_deref().map(checkpoint_dir);
    if let Some(d) = &ckpt {
        std::fs::create_dir_all(d).map_err(io(d))?;
    }
    let last = ckpt.as_ref().map(|d| d.join("last.safetensors"));

    let resumed = match &last {
        Some(p) if opts.resume && p.exists() => {
            let (t, s) = load_state(p, tc)?;
            if s.config_hash != hash {
                return Err(TrainError::HashMismatch {
                    expected: s.config_hash,
                    found: hash,
                });
            }
            log::info!("resuming after epoch {}", s.epochs_done);
            Some((t, s))
        }
        _ => None,
    };
    let (mut trainer, mut state) = resumed.unwrap_or_else(|| {
        let mut bundle = ModelBundle::init(
            cfg.arch(),
            cfg.encryption(),
            cfg.model.lambda_e,
            cfg.model.lambda_d,
            derive_seed(&[seed, stream::INIT]),
        );
        bundle.config_hash = hash.clone();
        let state = TrainerState {
            config_hash: hash.clone(),
            epochs_done: 0,
            plateau: Plateau::new(tc.initial_lr, tc.plateau_factor, tc.plateau_patience, tc.plateau_threshold),
            best_loss: f64::INFINITY,
            adam_steps: [0; 4],
            log: Vec::new(),
        };
        (Trainer::new(bundle, tc.clone()), state)
    });

    while state.epochs_done < tc.epochs {
        if opts.stop_after.is_some_and(|s| state.epochs_done >= s) {
            return Ok(FitOutcome {
                bundle: trainer.bundle,
                log: state.log,
                finished: false,
            });
        }
        let epoch = state.epochs_done;
        let lr = state.plateau.lr;
        let order = shuffled_indices(train.count(), derive_seed(&[seed, stream::SHUFFLE, epoch as u64]));
        let mut sums = [0.0f64; 4];
        for (bi, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch = train.gather(idx);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stream::CHANNEL, epoch as u64, bi as u64]));
            let report = match trainer.step(&batch, extractor, &mut rng, lr) {
                Err(TrainError::NonFinite { snrs_db, loss, .. }) => {
                    let dump = match &opts.run_dir {
                        Some(d) => Some(dump_batch(d, &batch, epoch, bi, &snrs_db, &loss)?),
                        None => None,
                    };
                    log::error!("non-finite loss at epoch {epoch}, batch {bi}, snr {snrs_db:?}");
                    return Err(TrainError::NonFinite { snrs_db, loss, dump });
                }
                r => r?,
            };
            let w = idx.len() as f64;
            let l = report.loss;
            for (s, v) in sums.iter_mut().zip([l.l_r, l.l_e, l.l_d, l.l_total]) {
                *s += w * v;
            }
        }
        let n = train.count() as f64;
        let row = EpochLog {
            epoch,
            l_r: sums[0] / n,
            l_e: sums[1] / n,
            l_d: sums[2] / n,
            l_total: sums[3] / n,
            lr,
        };
        log::info!(
            "epoch {epoch}: l_total {:.6} l_r {:.6} l_e {:.4} l_d {:.4} lr {lr:e}",
            row.l_total,
            row.l_r,
            row.l_e,
            row.l_d
        );
        state.plateau.observe(row.l_total);
        let improved = row.l_total < state.best_loss;
        if improved {
            state.best_loss = row.l_total;
        }
        state.log.push(row);
        state.epochs_done += 1;
        state.adam_steps = [0, 1, 2, 3].map(|i| trainer.opts[i].steps());
        if let (Some(d), Some(last)) = (&opts.run_dir, &last) {
            write_atomic(&d.join("train_log.csv"), log_csv(&state.log).as_bytes())?;
            if improved {
                let best = checkpoint_dir(d).join("best.safetensors");
                trainer.bundle.save(&best, Part::Full)?;
            }
            save_state(last, &trainer, &state)?;
        }
    }
    if let Some(d) = &opts.run_dir {
        trainer.bundle.save(&checkpoint_dir(d).join("final.safetensors"), Part::Full)?;
    }
    Ok(FitOutcome {
        bundle: trainer.bundle,
        log: state.log,
        finished: true,
    })
}

/// Metadata keys a checkpoint written by [`fit`] carries.
pub fn checkpoint_meta(path: &Path) -> Result<BTreeMap<String, String>, TrainError> {
    Ok(load_file::<f32>(path)?.1)
}
