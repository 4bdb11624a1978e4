//! Repeated-transmission evaluation over a grid of test SNRs.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::channel::{awgn_apply, snr_to_sigma2, SymbolBlock};
use crate::imagedata::{denormalize, export_grid, normalize, ImageBatch, RawImages};
use crate::models::{
    decode_forward, decrypt_forward, encode_forward, encrypt_forward, FeatureExtractor, ModelBundle,
};
use crate::objective::{feature_distances, psnr, ssim_per_image};
use crate::seeds::{derive_seed, stream};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub run_id: String,
    pub snrs_db: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    /// Append an evaluation with the channel noise switched off (`snr_db = inf`).
    pub noiseless: bool,
    /// Write plain / encrypted / decoded / decrypted grids for the first
    /// `grid_images` images of repeat 0.
    pub grid_dir: Option<PathBuf>,
    pub grid_images: usize,
}

/// One transmission of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub snr_db: f64,
    pub repeat: usize,
    pub image: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l_e: Option<f64>,
    pub l_d: Option<f64>,
    /// Same transmission with 8-bit images at the trust boundaries.
    pub psnr_q: f64,
    pub ssim_q: f64,
    /// PSNR of the plain image against the encrypted and decoded images.
    pub psnr_xy: f64,
    pub psnr_xyhat: f64,
}

/// Means over all images and repeats at one SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub snr_db: f64,
    pub transmissions: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l_e: Option<f64>,
    pub l_d: Option<f64>,
    pub psnr_q: f64,
    pub ssim_q: f64,
    pub psnr_xy: f64,
    pub psnr_xyhat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub run_id: String,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
}

pub const METRIC_HEADER: &str = "run_id,snr_db,repeat,image,psnr,ssim,l_e,l_d,psnr_q,ssim_q,psnr_xy,psnr_xyhat";
pub const SUMMARY_HEADER: &str =
    "run_id,snr_db,transmissions,psnr,ssim,l_e,l_d,psnr_q,ssim_q,psnr_xy,psnr_xyhat";

pub fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

impl MetricTable {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRIC_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.run_id,
                r.snr_db,
                r.repeat,
                r.image,
                fmt_num(r.psnr),
                fmt_num(r.ssim),
                fmt_opt(r.l_e),
                fmt_opt(r.l_d),
                fmt_num(r.psnr_q),
                fmt_num(r.ssim_q),
                fmt_num(r.psnr_xy),
                fmt_num(r.psnr_xyhat),
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                self.run_id,
                r.snr_db,
                r.transmissions,
                fmt_num(r.psnr),
                fmt_num(r.ssim),
                fmt_opt(r.l_e),
                fmt_opt(r.l_d),
                fmt_num(r.psnr_q),
                fmt_num(r.ssim_q),
                fmt_num(r.psnr_xy),
                fmt_num(r.psnr_xyhat),
            ));
        }
        s
    }

    pub fn mean_psnr(&self, snr_db: f64) -> Option<f64> {
        self.summary.iter().find(|r| r.snr_db == snr_db).map(|r| r.psnr)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn summarize(snr_db: f64, rows: &[MetricRow]) -> SummaryRow {
    let opt_mean = |f: fn(&MetricRow) -> Option<f64>| {
        rows.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| mean(v.into_iter()))
    };
    SummaryRow {
        snr_db,
        transmissions: rows.len(),
        psnr: mean(rows.iter().map(|r| r.psnr)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        l_e: opt_mean(|r| r.l_e),
        l_d: opt_mean(|r| r.l_d),
        psnr_q: mean(rows.iter().map(|r| r.psnr_q)),
        ssim_q: mean(rows.iter().map(|r| r.ssim_q)),
        psnr_xy: mean(rows.iter().map(|r| r.psnr_xy)),
        psnr_xyhat: mean(rows.iter().map(|r| r.psnr_xyhat)),
    }
}

fn transmit(z: &[SymbolBlock], snr_db: f64, seed: u64, snr_index: usize, repeat: usize) -> Vec<SymbolBlock> {
    let sigma2 = snr_to_sigma2(snr_db);
    z.iter()
        .enumerate()
        .map(|(i, b)| {
            let s = derive_seed(&[seed, stream::EVAL, snr_index as u64, repeat as u64, i as u64]);
            awgn_apply(b, sigma2, &mut ChaCha8Rng::seed_from_u64(s)).expect("non-negative variance")
        })
        .collect()
}

fn per_image_psnr(a: &RawImages, b: &RawImages) -> Result<Vec<f64>, TrainError> {
    (0..a.count)
        .map(|i| Ok(psnr(&a.single(i), &b.single(i))?))
        .collect()
}

fn requantize(img: &ImageBatch) -> Result<ImageBatch, TrainError> {
    Ok(normalize(&denormalize(img))?)
}

/// Transmit every test image `repeats` times at each SNR with independent
/// noise, once with continuous values and once with 8-bit images at the
/// trust boundaries (same noise).
pub fn evaluate(
    bundle: &ModelBundle<f32>,
    test: &ImageBatch,
    extractor: Option<&FeatureExtractor<f32>>,
    opts: &EvalOptions,
) -> Result<MetricTable, TrainError> {
    if opts.repeats < 1 {
        return Err(TrainError::Config("evaluation needs at least one repeat".into()));
    }
    let (h, w) = (test.height(), test.width());
    let x_raw = denormalize(test);
    let y = encrypt_forward(test, bundle)?;
    let y_q = requantize(&y)?;
    let y_raw = denormalize(&y);
    let z = encode_forward(&y, bundle)?;
    let z_q = encode_forward(&y_q, bundle)?;
    let psnr_xy = per_image_psnr(&x_raw, &y_raw)?;
    let l_e = match extractor {
        Some(ex) => Some(feature_distances(test, &y, ex)?),
        None => None,
    };

    let mut snrs = opts.snrs_db.clone();
    if opts.noiseless {
        snrs.push(f64::INFINITY);
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (si, &snr) in snrs.iter().enumerate() {
        let start = rows.len();
        for rep in 0..opts.repeats {
            let zhat = transmit(&z, snr, opts.seed, si, rep);
            let yhat = decode_forward(&zhat, bundle, h, w)?;
            let xhat = decrypt_forward(&yhat, bundle)?;
            let zhat_q = transmit(&z_q, snr, opts.seed, si, rep);
            let yhat_q = requantize(&decode_forward(&zhat_q, bundle, h, w)?)?;
            let xhat_q = decrypt_forward(&yhat_q, bundle)?;

            let xhat_raw = denormalize(&xhat);
            let xhat_q_raw = denormalize(&xhat_q);
            let yhat_raw = denormalize(&yhat);
            let p = per_image_psnr(&x_raw, &xhat_raw)?;
            let s = ssim_per_image(&x_raw, &xhat_raw)?;
            let pq = per_image_psnr(&x_raw, &xhat_q_raw)?;
            let sq = ssim_per_image(&x_raw, &xhat_q_raw)?;
            let pyh = per_image_psnr(&x_raw, &yhat_raw)?;
            let l_d = match extractor {
                Some(ex) => Some(feature_distances(test, &yhat, ex)?),
                None => None,
            };
            for i in 0..test.count() {
                rows.push(MetricRow {
                    snr_db: snr,
                    repeat: rep,
                    image: i,
                    psnr: p[i],
                    ssim: s[i],
                    l_e: l_e.as_ref().map(|v| v[i]),
                    l_d: l_d.as_ref().map(|v| v[i]),
                    psnr_q: pq[i],
                    ssim_q: sq[i],
                    psnr_xy: psnr_xy[i],
                    psnr_xyhat: pyh[i],
                });
            }
            if rep == 0 {
                if let Some(dir) = &opts.grid_dir {
                    let n: Vec<usize> = (0..opts.grid_images.min(test.count())).collect();
                    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                        path: dir.display().to_string(),
                        source,
                    })?;
                    let name = if snr.is_finite() {
                        format!("snr_{snr}.png")
                    } else {
                        "snr_inf.png".to_string()
                    };
                    export_grid(
                        &[x_raw.gather(&n), y_raw.gather(&n), yhat_raw.gather(&n), xhat_raw.gather(&n)],
                        &dir.join(name),
                    )?;
                }
            }
        }
        summary.push(summarize(snr, &rows[start..]));
    }
    Ok(MetricTable {
        run_id: opts.run_id.clone(),
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagedata::{synthetic_images, Split};
    use crate::models::{Arch, Encryption, VggConfig};
    use crate::training::{fit, ExperimentConfig, FitOptions};

    fn small_bundle(enc: Encryption) -> ModelBundle<f32> {
        ModelBundle::init(
            Arch {
                channels: 3,
                t: 4,
                jscc_widths: [4, 4, 4, 4],
                unet_width: 4,
            },
            enc,
            0.0,
            0.0,
            2,
        )
    }

    fn opts(snrs: Vec<f64>, repeats: usize) -> EvalOptions {
        EvalOptions {
            run_id: "t".into(),
            snrs_db: snrs,
            repeats,
            seed: 3,
            noiseless: false,
            grid_dir: None,
            grid_images: 4,
        }
    }

    fn test_images(n: usize) -> ImageBatch {
        normalize(&synthetic_images(Split::Test, n, 16, 1).images).unwrap()
    }

    #[test]
    fn counts_every_transmission() {
        let b = small_bundle(Encryption::Learned);
        let t = evaluate(&b, &test_images(10), None, &opts(vec![0.0, 10.0, 20.0], 10)).unwrap();
        assert_eq!(t.rows.len(), 300);
        assert_eq!(t.summary.len(), 3);
        assert!(t.summary.iter().all(|s| s.transmissions == 100 && s.l_e.is_none()));
        assert_eq!(t.metrics_csv().lines().count(), 301);
    }

    #[test]
    fn evaluation_is_deterministic_and_writes_grids() {
        let b = small_bundle(Encryption::Learned);
        let ex = FeatureExtractor::random(
            VggConfig {
                width_divisor: 16,
                cut_block: 2,
                ..VggConfig::default()
            },
            0,
        );
        let dir = tempfile::tempdir().unwrap();
        let mut o = opts(vec![5.0], 2);
        o.noiseless = true;
        o.grid_dir = Some(dir.path().join("grids"));
        let a = evaluate(&b, &test_images(4), Some(&ex), &o).unwrap();
        let c = evaluate(&b, &test_images(4), Some(&ex), &o).unwrap();
        assert_eq!(a.metrics_csv(), c.metrics_csv());
        assert_eq!(a.summary_csv(), c.summary_csv());
        assert!(a.summary_csv().contains(",inf,"));
        assert!(dir.path().join("grids/snr_5.png").exists());
        assert!(dir.path().join("grids/snr_inf.png").exists());
        assert!(a.rows.iter().all(|r| r.l_e.unwrap() >= 0.0 && r.l_d.unwrap() >= 0.0));
    }

    #[test]
    fn repeats_draw_independent_noise() {
        let b = small_bundle(Encryption::None);
        let t = evaluate(&b, &test_images(2), None, &opts(vec![0.0], 2)).unwrap();
        assert_ne!(t.rows[0].psnr, t.rows[2].psnr);
        assert_eq!(t.rows[0].psnr_xy, f64::INFINITY);
    }

    #[test]
    fn noiseless_bounds_a_trained_bundle_and_snr_helps() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.t = 8;
        cfg.model.jscc_widths = [8, 8, 8, 8];
        cfg.model.unet_width = 4;
        cfg.model.encryption = crate::training::EncryptionKind::None;
        cfg.model.lambda_e = 0.0;
        cfg.model.lambda_d = 0.0;
        cfg.training.epochs = 20;
        cfg.training.batch_size = 8;
        cfg.training.initial_lr = 1e-2;
        let train = normalize(&synthetic_images(Split::Train, 32, 16, 1).images).unwrap();
        let ex = FeatureExtractor::random(
            VggConfig {
                width_divisor: 16,
                cut_block: 1,
                ..VggConfig::default()
            },
            0,
        );
        let out = fit(&cfg, &train, &ex, &FitOptions::default()).unwrap();
        let mut o = opts(vec![0.0, 20.0], 3);
        o.noiseless = true;
        let t = evaluate(&out.bundle, &test_images(16), None, &o).unwrap();
        let (p0, p20, pinf) = (t.summary[0].psnr, t.summary[1].psnr, t.summary[2].psnr);
        assert!(p20 >= p0, "{p0} {p20}");
        assert!(pinf >= p20, "{p20} {pinf}");
    }
}
