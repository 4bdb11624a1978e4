//! Scoring attack reconstructions against the plain images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fr_attack, AttackError, FrMode, GanAttack};
use crate::imagedata::{export_grid, RawImages};
use crate::objective::{psnr, ssim_per_image};

pub enum AttackMethod<'a> {
    Fr(FrMode),
    Gan(&'a GanAttack),
}

impl AttackMethod<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fr(_) => "fr",
            AttackMethod::Gan(_) => "gan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    Encrypted,
    Decoded,
}

impl AttackTarget {
    pub fn name(self) -> &'static str {
        match self {
            AttackTarget::Encrypted => "encrypted",
            AttackTarget::Decoded => "decoded",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRow {
    pub image: usize,
    /// Guess bit of the FR variant kept for this image.
    pub bit: Option<u8>,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub label: String,
    pub method: &'static str,
    pub target: AttackTarget,
    pub rows: Vec<AttackRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub grids: Vec<PathBuf>,
}

pub const ATTACK_HEADER: &str = "label,method,target,image,bit,psnr,ssim";

impl AttackReport {
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6}\n",
                self.label,
                self.method,
                self.target.name(),
                r.image,
                r.bit.map(|b| b.to_string()).unwrap_or_default(),
                r.psnr,
                r.ssim
            ));
        }
        s
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} {} {}: mean_psnr={:.6} mean_ssim={:.6} images={}",
            self.label,
            self.method,
            self.target.name(),
            self.mean_psnr,
            self.mean_ssim,
            self.rows.len()
        )
    }
}

fn per_image(a: &RawImages, b: &RawImages) -> Result<(Vec<f64>, Vec<f64>), AttackError> {
    let err = |e: crate::objective::ObjectiveError| AttackError::Shape(e.to_string());
    let p = (0..a.count)
        .map(|i| psnr(&a.single(i), &b.single(i)).map_err(err))
        .collect::<Result<Vec<_>, _>>()?;
    let s = ssim_per_image(a, b).map_err(err)?;
    Ok((p, s))
}

/// Attack every target image and score it against its plain image. For the
/// FR attack both guess bits are tried and the one with higher PSNR is kept
/// per image. With `grid_dir`, the first `grid_images` plain / target /
/// reconstruction triples are exported side by side.
pub fn run_attack(
    label: &str,
    method: &AttackMethod,
    target: AttackTarget,
    targets: &RawImages,
    plains: &RawImages,
    grid_dir: Option<&Path>,
    grid_images: usize,
) -> Result<AttackReport, AttackError> {
    if !targets.same_shape(plains) {
        return Err(AttackError::Shape(format!(
            "{} targets of {}x{} vs {} plains of {}x{}",
            targets.count, targets.height, targets.width, plains.count, plains.height, plains.width
        )));
    }
    let (recon, bits, p, s) = match method {
        AttackMethod::Fr(mode) => {
            let r0 = fr_attack(targets, 0, *mode)?;
            let r1 = fr_attack(targets, 1, *mode)?;
            let (p0, s0) = per_image(&r0, plains)?;
            let (p1, s1) = per_image(&r1, plains)?;
            let mut data = Vec::with_capacity(targets.data.len());
            let (mut bits, mut p, mut s) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..targets.count {
                let one = p1[i] > p0[i];
                let src = if one { &r1 } else { &r0 };
                data.extend_from_slice(src.image(i));
                bits.push(Some(one as u8));
                p.push(if one { p1[i] } else { p0[i] });
                s.push(if one { s1[i] } else { s0[i] });
            }
            let recon = RawImages {
                data,
                ..targets.clone()
            };
            (recon, bits, p, s)
        }
        AttackMethod::Gan(g) => {
            let recon = g.reconstruct(targets)?;
            let (p, s) = per_image(&recon, plains)?;
            (recon, vec![None; targets.count], p, s)
        }
    };
    let mut grids = Vec::new();
    if let Some(dir) = grid_dir {
        std::fs::create_dir_all(dir).map_err(|e| AttackError::Config(format!("{}: {e}", dir.display())))?;
        let idx: Vec<usize> = (0..grid_images.min(targets.count)).collect();
        let path = dir.join(format!("{label}_{}_{}.png", method.name(), target.name()));
        export_grid(&[plains.gather(&idx), targets.gather(&idx), recon.gather(&idx)], &path)
            .map_err(|e| AttackError::Config(e.to_string()))?;
        grids.push(path);
    }
    let n = targets.count as f64;
    Ok(AttackReport {
        label: label.to_string(),
        method: method.name(),
        target,
        rows: (0..targets.count)
            .map(|i| AttackRow {
                image: i,
                bit: bits[i],
                psnr: p[i],
                ssim: s[i],
            })
            .collect(),
        mean_psnr: p.iter().sum::<f64>() / n,
        mean_ssim: s.iter().sum::<f64>() / n,
        grids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{keyed_shuffle_encrypt, pixel_invert, ShuffleKey};
    use crate::imagedata::{synthetic_images, Split};

    #[test]
    fn fr_keeps_the_better_bit_per_image() {
        let plain = synthetic_images(Split::Test, 6, 16, 2).images;
        let inverted = pixel_invert(&plain);
        let dir = tempfile::tempdir().unwrap();
        let rep = run_attack(
            "inv",
            &AttackMethod::Fr(FrMode::MostSignificantBit),
            AttackTarget::Encrypted,
            &inverted,
            &plain,
            Some(dir.path()),
            4,
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 6);
        for (i, r) in rep.rows.iter().enumerate() {
            let one = plain.single(i);
            let p0 = psnr(&fr_attack(&inverted.single(i), 0, FrMode::MostSignificantBit).unwrap(), &one).unwrap();
            let p1 = psnr(&fr_attack(&inverted.single(i), 1, FrMode::MostSignificantBit).unwrap(), &one).unwrap();
            assert_eq!(r.psnr, p0.max(p1));
        }
        assert!(rep.grids[0].exists());
        assert_eq!(rep.csv_rows().lines().count(), 6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = synthetic_images(Split::Test, 2, 16, 2).images;
        let b = synthetic_images(Split::Test, 3, 16, 2).images;
        let r = run_attack("x", &AttackMethod::Fr(FrMode::MostSignificantBit), AttackTarget::Decoded, &a, &b, None, 0);
        assert!(matches!(r, Err(AttackError::Shape(_))));
    }

    #[test]
    fn inversion_has_lower_psnr_than_shuffling() {
        let plain = synthetic_images(Split::Test, 10, 32, 4).images;
        let key = ShuffleKey::new(9, 32 * 32 * 3);
        let shuffled = keyed_shuffle_encrypt(&plain, &key).unwrap();
        let inv = pixel_invert(&plain);
        for i in 0..10 {
            let p = plain.single(i);
            assert!(psnr(&p, &inv.single(i)).unwrap() < psnr(&p, &shuffled.single(i)).unwrap());
        }
    }
}
