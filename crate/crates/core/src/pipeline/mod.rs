//! Experiment orchestration: datasets, run directories, the three-party
//! file workflow, attacks and reports.

mod manifest;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use manifest::RunManifest;
pub use report::{emit_report, Report};

use crate::attacks::{
    gan_attack_train, run_attack, AttackError, AttackMethod, AttackReport, AttackTarget, GanConfig, ATTACK_HEADER,
};
use crate::channel::{awgn_apply, snr_to_sigma2};
use crate::imagedata::{
    denormalize, export_image, import_image, load_dataset, normalize, synthetic_images, DataError, DatasetId,
    DatasetSplit, ImageBatch, RawImages, Split,
};
use crate::models::{
    decode_forward, decrypt_forward, encode_forward, encrypt_forward, pretrain_feature_extractor, FeatureExtractor,
    ModelBundle, ModelError, Part, PretrainConfig, PretrainReport,
};
use crate::seeds::{derive_seed, stream};
use crate::training::{evaluate, fit, EvalOptions, ExperimentConfig, FitOptions, MetricTable, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(io(p))?;
    }
    std::fs::write(path, text).map_err(io(path))
}

/// Read a config file (or start from defaults) and apply overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::from_toml(&std::fs::read_to_string(p).map_err(io(p))?)?,
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(overrides)?)
}

/// Cache root and run root.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub cache: PathBuf,
    pub runs: PathBuf,
}

impl Workspace {
    pub fn run_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.runs.join(&cfg.run.id)
    }

    pub fn features_path(&self, cfg: &ExperimentConfig) -> PathBuf {
        if !cfg.features.checkpoint.is_empty() {
            return PathBuf::from(&cfg.features.checkpoint);
        }
        let f = &cfg.features;
        self.cache.join("features").join(format!(
            "vgg16bn_{}_cut{}_div{}.safetensors",
            cfg.data.dataset, f.cut_block, f.width_divisor
        ))
    }
}

/// A dataset split, generated or read through the cache, cut to `limit`.
pub fn load_split(
    cfg: &ExperimentConfig,
    dataset: DatasetId,
    split: Split,
    limit: usize,
    cache: &Path,
) -> Result<DatasetSplit> {
    let d = &cfg.data;
    let s = match dataset {
        DatasetId::Synthetic => {
            let n = match split {
                Split::Train | Split::Unlabeled => d.synthetic_train_count,
                Split::Test => d.synthetic_test_count,
            };
            let n = if limit > 0 { n.min(limit) } else { n };
            synthetic_images(split, n, d.synthetic_side, d.synthetic_seed)
        }
        _ => load_dataset(dataset, split, cache)?,
    };
    Ok(s.truncate(limit))
}

fn train_split(cfg: &ExperimentConfig, cache: &Path) -> Result<DatasetSplit> {
    load_split(cfg, cfg.data.dataset, cfg.data.train_split, cfg.data.train_limit, cache)
}

fn test_split(cfg: &ExperimentConfig, cache: &Path) -> Result<DatasetSplit> {
    load_split(cfg, cfg.data.dataset, cfg.data.test_split, cfg.data.test_limit, cache)
}

/// Populate the cache with every split the config refers to.
pub fn prepare_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut wanted = vec![
        (cfg.data.dataset, cfg.data.train_split, cfg.data.train_limit),
        (cfg.data.dataset, cfg.data.test_split, cfg.data.test_limit),
    ];
    wanted.push((cfg.attack.dataset, cfg.attack.split, cfg.attack.limit));
    for (d, s, limit) in wanted {
        let split = load_split(cfg, d, s, limit, &ws.cache)?;
        let i = &split.images;
        out.push(format!("{d}/{s}: {} images of {}x{}x{}", i.count, i.height, i.width, i.channels));
    }
    Ok(out)
}

/// Pretrain the classifier on the training dataset and save its trunk.
pub fn pretrain_features(cfg: &ExperimentConfig, ws: &Workspace) -> Result<(PathBuf, PretrainReport)> {
    let f = &cfg.features;
    let train = load_split(cfg, cfg.data.dataset, cfg.data.train_split, f.pretrain_limit, &ws.cache)?;
    let test = test_split(cfg, &ws.cache)?;
    let labels = |s: &DatasetSplit| {
        s.labels
            .clone()
            .ok_or_else(|| PipelineError::Missing(format!("{}/{} has no labels", s.name, s.split)))
    };
    let (tl, vl) = (labels(&train)?, labels(&test)?);
    let pc = PretrainConfig {
        epochs: f.pretrain_epochs,
        batch_size: f.pretrain_batch_size,
        lr: f.pretrain_lr,
    };
    let (ex, report) = pretrain_feature_extractor(
        &cfg.vgg(),
        (&train.images, &tl),
        (&test.images, &vl),
        &pc,
        derive_seed(&[cfg.run.seed, stream::INIT, 0x7667]),
    );
    let path = ws.features_path(cfg);
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(io(p))?;
    }
    let mut meta = BTreeMap::new();
    meta.insert("test_accuracy".into(), report.test_accuracy.to_string());
    ex.save(&path, &meta)?;
    Ok((path, report))
}

pub fn load_features(cfg: &ExperimentConfig, ws: &Workspace) -> Result<FeatureExtractor<f32>> {
    let path = ws.features_path(cfg);
    let (ex, _) = FeatureExtractor::load(&path).map_err(|e| {
        PipelineError::Missing(format!("{e}; run `pretrain-features` first"))
    })?;
    if ex.config != cfg.vgg() {
        return Err(PipelineError::Missing(format!(
            "{} holds a different extractor configuration",
            path.display()
        )));
    }
    Ok(ex)
}

pub fn final_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join("final.safetensors")
}

/// Train a run and split the result into per-party checkpoints.
pub fn train_run(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<(PathBuf, bool)> {
    let dir = ws.run_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let mut manifest = RunManifest::open_or_new(&dir, cfg)?;
    if manifest.config_hash != cfg.hash() && resume {
        return Err(TrainError::HashMismatch {
            expected: manifest.config_hash,
            found: cfg.hash(),
        }
        .into());
    }
    manifest.config_hash = cfg.hash();
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let ex = load_features(cfg, ws)?;
    let train = normalize(&train_split(cfg, &ws.cache)?.images)?;
    let out = fit(
        cfg,
        &train,
        &ex,
        &FitOptions {
            run_dir: Some(dir.clone()),
            resume,
            stop_after,
        },
    )?;
    manifest.record("config", "config.toml");
    manifest.record("train_log", "train_log.csv");
    if out.finished {
        let ck = dir.join("checkpoints");
        for (part, name) in [
            (Part::Encryption, "encryption"),
            (Part::Djscc, "djscc"),
            (Part::Decryption, "decryption"),
        ] {
            out.bundle.save(&ck.join(format!("{name}.safetensors")), part)?;
            manifest.record(name, &format!("checkpoints/{name}.safetensors"));
        }
        manifest.record("final", "checkpoints/final.safetensors");
        manifest.record("best", "checkpoints/best.safetensors");
    }
    manifest.save(&dir)?;
    Ok((dir, out.finished))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle<f32>> {
    Ok(ModelBundle::<f32>::load(path)?.0)
}

/// Evaluate a finished run; writes `metrics.csv`, `summary.csv` and grids.
pub fn evaluate_run(cfg: &ExperimentConfig, ws: &Workspace) -> Result<MetricTable> {
    let dir = ws.run_dir(cfg);
    let bundle = load_bundle(&final_checkpoint(&dir))?;
    let test = normalize(&test_split(cfg, &ws.cache)?.images)?;
    let ex = load_features(cfg, ws).ok();
    if ex.is_none() {
        log::warn!("no feature extractor; l_e and l_d columns stay empty");
    }
    let e = &cfg.evaluation;
    let table = evaluate(
        &bundle,
        &test,
        ex.as_ref(),
        &EvalOptions {
            run_id: cfg.run.id.clone(),
            snrs_db: e.snrs_db.clone(),
            repeats: e.repeats,
            seed: e.seed,
            noiseless: e.noiseless,
            grid_dir: Some(dir.join("grids")),
            grid_images: e.grid_images,
        },
    )?;
    write(&dir.join("metrics.csv"), &table.metrics_csv())?;
    write(&dir.join("summary.csv"), &table.summary_csv())?;
    let mut manifest = RunManifest::open_or_new(&dir, cfg)?;
    manifest.record("metrics", "metrics.csv");
    manifest.record("summary", "summary.csv");
    manifest.record("grids", "grids");
    manifest.save(&dir)?;
    Ok(table)
}

/// Owner side: plain image file → 8-bit cipher image file.
pub fn encrypt_file(bundle: &Path, input: &Path, output: &Path) -> Result<()> {
    let b = load_bundle(bundle)?;
    let x = import_image(input)?;
    export_image(&encrypt_forward(&x, &b)?, output)?;
    Ok(())
}

/// Provider side: cipher image → encoder → AWGN at `snr_db` → decoder.
pub fn transmit_file(bundle: &Path, input: &Path, output: &Path, snr_db: f64, seed: u64) -> Result<()> {
    let b = load_bundle(bundle)?;
    let y = import_image(input)?;
    export_image(&transmit_images(&y, &b, snr_db, seed)?, output)?;
    Ok(())
}

/// Encoder, channel and decoder for a batch, image `i` drawing its noise
/// from `(seed, i)`.
pub fn transmit_images(y: &ImageBatch, b: &ModelBundle<f32>, snr_db: f64, seed: u64) -> Result<ImageBatch> {
    let z = encode_forward(y, b)?;
    let sigma2 = snr_to_sigma2(snr_db);
    let zhat = z
        .iter()
        .enumerate()
        .map(|(i, blk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stream::TRANSMIT, i as u64]));
            awgn_apply(blk, sigma2, &mut rng).expect("σ² from an SNR is non-negative")
        })
        .collect::<Vec<_>>();
    Ok(decode_forward(&zhat, b, y.height(), y.width())?)
}

/// Recipient side: decoded image → decrypted image.
pub fn decrypt_file(bundle: &Path, input: &Path, output: &Path) -> Result<()> {
    let b = load_bundle(bundle)?;
    let yhat = import_image(input)?;
    export_image(&decrypt_forward(&yhat, &b)?, output)?;
    Ok(())
}

fn quantized(img: &ImageBatch) -> RawImages {
    denormalize(img)
}

/// FR and GAN attacks against a finished run's encrypted and decoded images.
pub fn attack_run(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<AttackReport>> {
    let dir = ws.run_dir(cfg);
    let bundle = load_bundle(&final_checkpoint(&dir))?;
    let a = &cfg.attack;
    let pool = load_split(cfg, a.dataset, a.split, a.limit, &ws.cache)?.images;
    if pool.count <= a.eval_count + 1 {
        return Err(PipelineError::Missing(format!(
            "attack needs more than {} images, {} available",
            a.eval_count + 1,
            pool.count
        )));
    }
    let eval_idx: Vec<usize> = (0..a.eval_count).collect();
    let train_idx: Vec<usize> = (a.eval_count..pool.count).collect();
    let plain = pool.gather(&eval_idx);
    let (encrypted, decoded) = ciphers(&bundle, &plain, a.snr_db, a.seed)?;

    let enc = |x: &RawImages| -> std::result::Result<RawImages, AttackError> {
        let b = normalize(x).map_err(|e| AttackError::Shape(e.to_string()))?;
        let y = encrypt_forward(&b, &bundle).map_err(|e| AttackError::Shape(e.to_string()))?;
        Ok(quantized(&y))
    };
    let gan_cfg = GanConfig {
        epochs: a.gan_epochs,
        batch_size: a.gan_batch_size,
        lr: a.gan_lr,
        generator_width: a.generator_width,
        collapse_threshold: a.collapse_threshold,
        collapse_epochs: a.collapse_epochs,
    };
    let (gan, gan_log) = gan_attack_train(&enc, &pool.gather(&train_idx), &gan_cfg, a.seed)?;
    let grids = dir.join("attacks");
    let label = cfg.run.id.as_str();
    let mut reports = Vec::new();
    for (target, imgs) in [(AttackTarget::Encrypted, &encrypted), (AttackTarget::Decoded, &decoded)] {
        for m in [AttackMethod::Fr(a.fr_mode), AttackMethod::Gan(&gan)] {
            reports.push(run_attack(label, &m, target, imgs, &plain, Some(&grids), 8)?);
        }
    }
    let mut csv = format!("{ATTACK_HEADER}\n");
    let mut summary = String::new();
    for r in &reports {
        csv.push_str(&r.csv_rows());
        summary.push_str(&r.summary_line());
        summary.push('\n');
    }
    summary.push_str(&format!(
        "gan final d_loss={:.6} g_loss={:.6} collapse_warnings={}\n",
        gan_log.d_loss.last().copied().unwrap_or(f64::NAN),
        gan_log.g_loss.last().copied().unwrap_or(f64::NAN),
        gan_log.collapse_warnings.len()
    ));
    write(&dir.join("attack.csv"), &csv)?;
    write(&dir.join("attack_summary.txt"), &summary)?;
    let mut manifest = RunManifest::open_or_new(&dir, cfg)?;
    manifest.record("attack", "attack.csv");
    manifest.record("attack_summary", "attack_summary.txt");
    manifest.save(&dir)?;
    Ok(reports)
}

/// 8-bit encrypted images and 8-bit decoded images received at `snr_db`.
pub fn ciphers(
    bundle: &ModelBundle<f32>,
    plain: &RawImages,
    snr_db: f64,
    seed: u64,
) -> Result<(RawImages, RawImages)> {
    let y = quantized(&encrypt_forward(&normalize(plain)?, bundle)?);
    let yhat = transmit_images(&normalize(&y)?, bundle, snr_db, seed)?;
    Ok((y, quantized(&yhat)))
}
