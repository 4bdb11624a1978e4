//! Complex baseband symbols, transmit power normalization and AWGN.
//!
//! SNR is `10·log10(P/σ²)` with unit signal power after normalization, and
//! the noise variance is split evenly between the in-phase and quadrature
//! components.

use num_complex::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, PartialEq, thiserror::Error)]
pub enum ChannelError {
    #[error("real vector of odd length {0} cannot be packed into complex symbols")]
    OddLength(usize),
    #[error("symbol block has zero energy")]
    ZeroEnergy,
    #[error("noise variance must be non-negative, got {0}")]
    NegativeVariance(f64),
    #[error("SNR range [{0}, {1}] dB is empty")]
    EmptyRange(f64, f64),
}

/// `k` complex channel symbols for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolBlock {
    pub symbols: Vec<Complex<f64>>,
}

impl SymbolBlock {
    pub fn k(&self) -> usize {
        self.symbols.len()
    }

    /// `(1/k)·Σ|z_i|²`.
    pub fn average_power(&self) -> f64 {
        self.symbols.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.k() as f64
    }
}

/// First half of `reals` becomes the real parts, second half the imaginary parts.
pub fn pack_complex(reals: &[f64]) -> Result<SymbolBlock, ChannelError> {
    if reals.len() % 2 != 0 {
        return Err(ChannelError::OddLength(reals.len()));
    }
    let k = reals.len() / 2;
    Ok(SymbolBlock {
        symbols: (0..k).map(|i| Complex::new(reals[i], reals[k + i])).collect(),
    })
}

pub fn unpack_complex(block: &SymbolBlock) -> Vec<f64> {
    let mut out: Vec<f64> = block.symbols.iter().map(|z| z.re).collect();
    out.extend(block.symbols.iter().map(|z| z.im));
    out
}

/// Scale by `sqrt(k / Σ|z|²)` so the block has unit average power.
pub fn power_normalize(raw: &SymbolBlock) -> Result<SymbolBlock, ChannelError> {
    let energy: f64 = raw.symbols.iter().map(|z| z.norm_sqr()).sum();
    if energy == 0.0 || !energy.is_finite() {
        return Err(ChannelError::ZeroEnergy);
    }
    let s = (raw.k() as f64 / energy).sqrt();
    Ok(SymbolBlock {
        symbols: raw.symbols.iter().map(|z| z * s).collect(),
    })
}

/// `10^(−snr/10)`; `+∞` dB gives a noiseless channel.
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Noise for `k` symbols in the packed real layout of [`pack_complex`].
///
/// Draws are taken symbol by symbol, in-phase first, each with variance
/// `σ²/2`.
pub fn noise_reals(k: usize, sigma2: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, ChannelError> {
    if sigma2 < 0.0 || sigma2.is_nan() {
        return Err(ChannelError::NegativeVariance(sigma2));
    }
    let sd = (sigma2 / 2.0).sqrt();
    let mut out = vec![0.0; 2 * k];
    for i in 0..k {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        out[i] = re * sd;
        out[k + i] = im * sd;
    }
    Ok(out)
}

/// `ẑ = z + ω` with circularly symmetric complex Gaussian `ω`.
pub fn awgn_apply(
    z: &SymbolBlock,
    sigma2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SymbolBlock, ChannelError> {
    let k = z.k();
    let n = noise_reals(k, sigma2, rng)?;
    Ok(SymbolBlock {
        symbols: z
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| s + Complex::new(n[i], n[k + i]))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    TrainSample,
    FixedTest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub seed: u64,
    pub mode: ChannelMode,
}

impl ChannelConfig {
    pub fn train(snr_db_min: f64, snr_db_max: f64, seed: u64) -> Result<Self, ChannelError> {
        if !(snr_db_min <= snr_db_max) {
            return Err(ChannelError::EmptyRange(snr_db_min, snr_db_max));
        }
        Ok(Self {
            snr_db_min,
            snr_db_max,
            seed,
            mode: ChannelMode::TrainSample,
        })
    }

    pub fn fixed(snr_db: f64, seed: u64) -> Self {
        Self {
            snr_db_min: snr_db,
            snr_db_max: snr_db,
            seed,
            mode: ChannelMode::FixedTest,
        }
    }
}

/// Uniform on `[min, max]` in training mode, the configured value otherwise.
pub fn sample_snr(cfg: &ChannelConfig, rng: &mut ChaCha8Rng) -> f64 {
    match cfg.mode {
        ChannelMode::FixedTest => cfg.snr_db_min,
        ChannelMode::TrainSample if cfg.snr_db_min == cfg.snr_db_max => cfg.snr_db_min,
        ChannelMode::TrainSample => rng.gen_range(cfg.snr_db_min..=cfg.snr_db_max),
    }
}
