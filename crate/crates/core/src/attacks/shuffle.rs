//! Keyed pixel shuffling and intensity inversion baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AttackError;
use crate::imagedata::RawImages;

/// Seed-derived permutation over the `h·w·c` components of an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleKey {
    pub seed: u64,
    perm: Vec<usize>,
}

impl ShuffleKey {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { seed, perm }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Position `i` of the cipher holds component `perm[i]` of the plain image.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn apply<T: Copy>(&self, plain: &[T]) -> Result<Vec<T>, AttackError> {
        self.check(plain.len())?;
        Ok(self.perm.iter().map(|&j| plain[j]).collect())
    }

    pub fn invert<T: Copy + Default>(&self, cipher: &[T]) -> Result<Vec<T>, AttackError> {
        self.check(cipher.len())?;
        let mut out = vec![T::default(); cipher.len()];
        for (i, &j) in self.perm.iter().enumerate() {
            out[j] = cipher[i];
        }
        Ok(out)
    }

    fn check(&self, n: usize) -> Result<(), AttackError> {
        if n != self.perm.len() {
            return Err(AttackError::Shape(format!(
                "key covers {} components, image has {n}",
                self.perm.len()
            )));
        }
        Ok(())
    }
}

fn per_image(
    imgs: &RawImages,
    f: impl Fn(&[u8]) -> Result<Vec<u8>, AttackError>,
) -> Result<RawImages, AttackError> {
    let mut data = Vec::with_capacity(imgs.data.len());
    for i in 0..imgs.count {
        data.extend(f(imgs.image(i))?);
    }
    Ok(RawImages { data, ..imgs.clone() })
}

pub fn keyed_shuffle_encrypt(imgs: &RawImages, key: &ShuffleKey) -> Result<RawImages, AttackError> {
    per_image(imgs, |im| key.apply(im))
}

pub fn keyed_shuffle_decrypt(imgs: &RawImages, key: &ShuffleKey) -> Result<RawImages, AttackError> {
    per_image(imgs, |im| key.invert(im))
}

/// `255 − v` per component.
pub fn pixel_invert(imgs: &RawImages) -> RawImages {
    imgs.map(|v| 255 - v)
}
