//! Training losses and image quality metrics.
//!
//! `L_total = L_r − λe·L_e − λd·L_d`, where `L_r` is the pixel MSE between
//! plain and decrypted images and `L_e`, `L_d` are mean squared feature
//! distances from the plain image to the encrypted and decoded images.

use djescc_autograd::{Float, Tape, Var};

use crate::imagedata::{ImageBatch, RawImages};
use crate::models::{extract_features, FeatureExtractor};

#[derive(Debug, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss weights must be non-negative, got λe={0}, λd={1}")]
    NegativeWeight(f64, f64),
    #[error("image of {0}x{1} is smaller than the {SSIM_WINDOW}-pixel SSIM window")]
    TooSmall(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_e: f64,
    pub l_d: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn combine(l_r: f64, l_e: f64, l_d: f64, lambda_e: f64, lambda_d: f64) -> Result<Self, ObjectiveError> {
        check_weights(lambda_e, lambda_d)?;
        Ok(Self {
            l_r,
            l_e,
            l_d,
            l_total: l_r - lambda_e * l_e - lambda_d * l_d,
        })
    }
}

fn check_weights(lambda_e: f64, lambda_d: f64) -> Result<(), ObjectiveError> {
    if !(lambda_e >= 0.0 && lambda_d >= 0.0) {
        return Err(ObjectiveError::NegativeWeight(lambda_e, lambda_d));
    }
    Ok(())
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_r: Var,
    pub l_e: Var,
    pub l_d: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<F: Float>(&self, tape: &Tape<F>, lambda_e: f64, lambda_d: f64) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossBreakdown {
            l_r: v(self.l_r),
            l_e: v(self.l_e),
            l_d: v(self.l_d),
            l_total: v(self.l_r) - lambda_e * v(self.l_e) - lambda_d * v(self.l_d),
        }
    }
}

/// `(1/n)·Σ(x − x̂)²` on a tape.
pub fn recon_loss_var<F: Float>(tape: &mut Tape<F>, x: Var, xhat: Var) -> Var {
    tape.mean_squared_diff(x, xhat)
}

/// `(1/m)·‖h(a) − h(b)‖²` averaged over the batch, with `h(a)` precomputed.
pub fn feature_loss_var<F: Float>(
    tape: &mut Tape<F>,
    extractor: &FeatureExtractor<F>,
    ha: Var,
    b: Var,
) -> Var {
    let hb = extractor.forward(tape, b);
    tape.mean_squared_diff(ha, hb)
}

/// Record the full objective. A feature term whose weight is zero is still
/// evaluated for logging, but on a detached input so it adds no gradient.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var<F: Float>(
    tape: &mut Tape<F>,
    extractor: &FeatureExtractor<F>,
    x: Var,
    y: Var,
    yhat: Var,
    xhat: Var,
    lambda_e: f64,
    lambda_d: f64,
) -> Result<LossVars, ObjectiveError> {
    check_weights(lambda_e, lambda_d)?;
    let l_r = recon_loss_var(tape, x, xhat);
    let xc = tape.detach(x);
    let hx = extractor.forward(tape, xc);
    let hx = tape.detach(hx);
    let y_in = if lambda_e > 0.0 { y } else { tape.detach(y) };
    let l_e = feature_loss_var(tape, extractor, hx, y_in);
    let yhat_in = if lambda_d > 0.0 { yhat } else { tape.detach(yhat) };
    let l_d = feature_loss_var(tape, extractor, hx, yhat_in);
    let we = tape.scale(l_e, lambda_e);
    let wd = tape.scale(l_d, lambda_d);
    let t = tape.sub(l_r, we);
    let total = tape.sub(t, wd);
    Ok(LossVars { l_r, l_e, l_d, total })
}

fn same_shape(a: &ImageBatch, b: &ImageBatch) -> Result<(), ObjectiveError> {
    if a.shape() != b.shape() {
        return Err(ObjectiveError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn recon_loss(x: &ImageBatch, xhat: &ImageBatch) -> Result<f64, ObjectiveError> {
    same_shape(x, xhat)?;
    let s: f64 = x
        .values()
        .iter()
        .zip(xhat.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / x.values().len() as f64)
}

/// Per-image feature distances `(1/m)·‖h(a_i) − h(b_i)‖²`.
pub fn feature_distances(
    a: &ImageBatch,
    b: &ImageBatch,
    extractor: &FeatureExtractor<f32>,
) -> Result<Vec<f64>, ObjectiveError> {
    same_shape(a, b)?;
    let fa = extract_features(a, extractor);
    let fb = extract_features(b, extractor);
    Ok((0..a.count())
        .map(|i| {
            let s: f64 = fa
                .image(i)
                .iter()
                .zip(fb.image(i))
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum();
            s / fa.m() as f64
        })
        .collect())
}

pub fn feature_loss(
    a: &ImageBatch,
    b: &ImageBatch,
    extractor: &FeatureExtractor<f32>,
) -> Result<f64, ObjectiveError> {
    let d = feature_distances(a, b, extractor)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

pub fn total_loss(
    x: &ImageBatch,
    y: &ImageBatch,
    yhat: &ImageBatch,
    xhat: &ImageBatch,
    lambda_e: f64,
    lambda_d: f64,
    extractor: &FeatureExtractor<f32>,
) -> Result<LossBreakdown, ObjectiveError> {
    check_weights(lambda_e, lambda_d)?;
    let l_r = recon_loss(x, xhat)?;
    let l_e = feature_loss(x, y, extractor)?;
    let l_d = feature_loss(x, yhat, extractor)?;
    LossBreakdown::combine(l_r, l_e, l_d, lambda_e, lambda_d)
}

fn same_raw(a: &RawImages, b: &RawImages) -> Result<(), ObjectiveError> {
    if !a.same_shape(b) {
        return Err(ObjectiveError::Shape(format!(
            "{}x{}x{}x{} vs {}x{}x{}x{}",
            a.count, a.height, a.width, a.channels, b.count, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Mean squared error in the 0–255 domain.
pub fn mse_255(a: &RawImages, b: &RawImages) -> Result<f64, ObjectiveError> {
    same_raw(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum();
    Ok(s / a.data.len() as f64)
}

/// `10·log10(255²/MSE)`; identical images give `+∞`.
pub fn psnr(a: &RawImages, b: &RawImages) -> Result<f64, ObjectiveError> {
    let mse = mse_255(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const RANGE: f64 = 255.0;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let c1 = (K1 * RANGE).powi(2);
    let c2 = (K2 * RANGE).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let aa = filter_valid(&prod(a, a), h, w, &win);
    let bb = filter_valid(&prod(b, b), h, w, &win);
    let ab = filter_valid(&prod(a, b), h, w, &win);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Single-scale SSIM per image, averaged over channels.
pub fn ssim_per_image(a: &RawImages, b: &RawImages) -> Result<Vec<f64>, ObjectiveError> {
    same_raw(a, b)?;
    let (h, w, c) = (a.height, a.width, a.channels);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ObjectiveError::TooSmall(h, w));
    }
    Ok((0..a.count)
        .map(|n| {
            let (ia, ib) = (a.image(n), b.image(n));
            let mut s = 0.0;
            for ch in 0..c {
                let pa: Vec<f64> = (0..h * w).map(|p| ia[p * c + ch] as f64).collect();
                let pb: Vec<f64> = (0..h * w).map(|p| ib[p * c + ch] as f64).collect();
                s += ssim_plane(&pa, &pb, h, w);
            }
            s / c as f64
        })
        .collect())
}

/// Mean SSIM over the images of a batch.
pub fn ssim(a: &RawImages, b: &RawImages) -> Result<f64, ObjectiveError> {
    let v = ssim_per_image(a, b)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::VggConfig;
    use djescc_autograd::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pattern(f: impl Fn(i64, i64, i64) -> i64) -> RawImages {
        let mut data = Vec::new();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    data.push(f(x, y, c).clamp(0, 255) as u8);
                }
            }
        }
        RawImages::new(1, 16, 16, 3, data).unwrap()
    }

    fn fixtures() -> [RawImages; 4] {
        let a = pattern(|x, y, c| ((x * x + 3 * y + 17 * c) * 7) % 256);
        let b = pattern(|x, y, c| (x * 5 + y * y * 3 + c * 29 + 13) % 256);
        let g = pattern(|x, y, c| (x * 8 + y * 4 + c * 20) % 256);
        let n = pattern(|x, y, c| (x * 8 + y * 4 + c * 20) % 256 + (x * y * 13 + c) % 21 - 10);
        [a, b, g, n]
    }

    #[test]
    fn ssim_matches_reference_values() {
        let [a, b, g, n] = fixtures();
        // scikit-image structural_similarity, gaussian weights, population covariance
        for (p, q, want) in [
            (&a, &b, 0.007270789316421045),
            (&g, &n, 0.9215174056876719),
            (&g, &a, 0.013700985725530123),
        ] {
            let got = ssim(p, q).unwrap();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            assert!((ssim(q, p).unwrap() - got).abs() < 1e-12);
        }
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_reference_values() {
        let [a, b, g, n] = fixtures();
        assert!((psnr(&a, &b).unwrap() - 8.279983450709379).abs() < 1e-9);
        assert!((psnr(&g, &n).unwrap() - 32.16297195262012).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let one = a.map(|v| if v < 255 { v + 1 } else { v - 1 });
        assert!((psnr(&a, &one).unwrap() - 48.130803608679106).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_is_consistent_with_mse() {
        let [a, b, ..] = fixtures();
        let want = 10.0 * (255.0f64 * 255.0).log10() - 10.0 * mse_255(&a, &b).unwrap().log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn inverted_images_have_low_ssim() {
        use crate::imagedata::{synthetic_images, Split};
        let x = synthetic_images(Split::Test, 5, 32, 0).images;
        let inv = x.map(|v| 255 - v);
        // scikit-image on the same five images
        let want = [
            -0.3308403575624413,
            -0.3095916334293239,
            -0.42146094134126066,
            -0.6923977124864239,
            -0.6447955473262154,
        ];
        for (got, want) in ssim_per_image(&x, &inv).unwrap().into_iter().zip(want) {
            assert!(got < 0.2);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let t = RawImages::new(1, 8, 8, 3, vec![0; 192]).unwrap();
        assert_eq!(ssim(&t, &t), Err(ObjectiveError::TooSmall(8, 8)));
    }

    #[test]
    fn recon_loss_examples() {
        let x = ImageBatch::new(1, 4, 4, 3, vec![0.25; 48]).unwrap();
        let y = ImageBatch::new(1, 4, 4, 3, vec![0.75; 48]).unwrap();
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_loss(&x, &y).unwrap(), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f32> = (0..48).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..48).map(|_| rng.gen()).collect();
        let mut oracle = 0.0;
        for i in 0..48 {
            let d = a[i] as f64 - b[i] as f64;
            oracle += d * d;
        }
        oracle /= 48.0;
        let ia = ImageBatch::new(1, 4, 4, 3, a).unwrap();
        let ib = ImageBatch::new(1, 4, 4, 3, b).unwrap();
        assert!((recon_loss(&ia, &ib).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(recon_loss(&ia, &ib).unwrap(), recon_loss(&ib, &ia).unwrap());
    }

    fn extractor() -> FeatureExtractor<f32> {
        FeatureExtractor::random(
            VggConfig {
                width_divisor: 16,
                ..VggConfig::default()
            },
            1,
        )
    }

    #[test]
    fn feature_loss_matches_elementwise_oracle() {
        let ex = extractor();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ImageBatch::new(2, 16, 16, 3, (0..1536).map(|_| rng.gen()).collect()).unwrap();
        let b = ImageBatch::new(2, 16, 16, 3, (0..1536).map(|_| rng.gen()).collect()).unwrap();
        assert_eq!(feature_loss(&a, &a, &ex).unwrap(), 0.0);
        let ab = feature_loss(&a, &b, &ex).unwrap();
        assert_eq!(ab, feature_loss(&b, &a, &ex).unwrap());
        let fa = extract_features(&a, &ex);
        let fb = extract_features(&b, &ex);
        let mut oracle = 0.0;
        for i in 0..fa.values.len() {
            oracle += (fa.values[i] as f64 - fb.values[i] as f64).powi(2);
        }
        oracle /= fa.values.len() as f64;
        assert!((ab - oracle).abs() < 1e-9, "{ab} vs {oracle}");
    }

    #[test]
    fn combination_is_exact() {
        let l = LossBreakdown::combine(0.1, 2.0, 1.0, 0.05, 0.05).unwrap();
        assert!((l.l_total - -0.05).abs() < 1e-15);
        assert_eq!(LossBreakdown::combine(0.3, 5.0, 7.0, 0.0, 0.0).unwrap().l_total, 0.3);
        assert!(LossBreakdown::combine(0.1, 1.0, 1.0, -0.1, 0.0).is_err());
        let big = LossBreakdown::combine(0.1, 1e6, 0.0, 0.05, 0.0).unwrap();
        assert!(big.l_total < -1e4);
    }

    #[test]
    fn zero_weights_leave_only_the_reconstruction_gradient() {
        let ex: FeatureExtractor<f64> = FeatureExtractor::random(
            VggConfig {
                width_divisor: 16,
                cut_block: 2,
                ..VggConfig::default()
            },
            4,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_t = |n: usize| Tensor::<f64>::new(vec![1, 3, 8, 8], (0..n).map(|_| rng.gen()).collect());
        let (x, y, yhat, xhat) = (rand_t(192), rand_t(192), rand_t(192), rand_t(192));
        let grads = |with_features: bool| {
            let mut tape = Tape::new();
            let vx = tape.constant(x.clone());
            let vy = tape.param(y.clone());
            let vyh = tape.param(yhat.clone());
            let vxh = tape.param(xhat.clone());
            let loss = if with_features {
                total_loss_var(&mut tape, &ex, vx, vy, vyh, vxh, 0.0, 0.0).unwrap().total
            } else {
                recon_loss_var(&mut tape, vx, vxh)
            };
            let g = tape.backward(loss);
            [vy, vyh, vxh].map(|v| g.get(v).map(|t| t.data().to_vec()))
        };
        let full = grads(true);
        let plain = grads(false);
        assert_eq!(full, plain);
        assert!(full[0].is_none() && full[1].is_none());
    }
}
