//! Ciphertext-only attacks and the non-learned perceptual encryption
//! baselines they are compared against.

mod fr;
mod gan;
mod report;
mod shuffle;

pub use fr::{fr_attack, FrMode};
pub use gan::{gan_attack_train, gan_attack_train_observed, split_halves, CollapseMonitor, Discriminator, GanAttack, GanConfig, GanReport};
pub use report::{run_attack, AttackMethod, AttackReport, AttackRow, AttackTarget, ATTACK_HEADER};
pub use shuffle::{keyed_shuffle_decrypt, keyed_shuffle_encrypt, pixel_invert, ShuffleKey};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
}
