//! Feature-reconstruction attack: flip every component whose leading bit
//! disagrees with a guessed bit, exposing edges of images encrypted by
//! bit-level negation.

use super::AttackError;
use crate::imagedata::RawImages;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrMode {
    /// Compare the most significant bit (`⌊v/128⌋`) with the guess.
    MostSignificantBit,
    /// Compare the raw component value with the guess.
    LiteralFloor,
}

fn flip(v: u8, b: u8, mode: FrMode) -> u8 {
    let key = match mode {
        FrMode::MostSignificantBit => v >> 7,
        FrMode::LiteralFloor => v,
    };
    if key != b {
        v ^ 255
    } else {
        v
    }
}

pub fn fr_attack(cipher: &RawImages, b: u8, mode: FrMode) -> Result<RawImages, AttackError> {
    if b > 1 {
        return Err(AttackError::Config(format!("guess bit must be 0 or 1, got {b}")));
    }
    if cipher.channels != 3 {
        return Err(AttackError::Shape(format!(
            "FR attack expects RGB images, got {} channels",
            cipher.channels
        )));
    }
    let hw = cipher.height * cipher.width;
    let mut out = cipher.clone();
    for n in 0..cipher.count {
        let img = &mut out.data[n * hw * 3..(n + 1) * hw * 3];
        for i in 0..hw {
            for j in 0..3 {
                img[i * 3 + j] = flip(img[i * 3 + j], b, mode);
            }
        }
    }
    Ok(out)
}
