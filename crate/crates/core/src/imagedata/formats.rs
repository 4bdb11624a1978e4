//! Decoders for the published binary archive layouts.

use super::{DataError, RawImages};

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const STL_SIDE: usize = 96;
const STL_IMAGE: usize = 3 * STL_SIDE * STL_SIDE;

/// One CIFAR-10 binary batch: records of a label byte followed by the red,
/// green and blue 32×32 planes.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<(RawImages, Vec<u8>), DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Format(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = vec![0u8; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(DataError::Format(format!("record {i}: label {} > 9", rec[0])));
        }
        labels.push(rec[0]);
        let px = &rec[1..];
        let out = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[p * 3 + c] = px[c * plane + p];
            }
        }
    }
    Ok((RawImages::new(n, CIFAR_SIDE, CIFAR_SIDE, 3, data)?, labels))
}

/// STL-10 `*_X.bin`: each image is stored channel-major and column-major.
pub fn parse_stl_images(bytes: &[u8]) -> Result<RawImages, DataError> {
    if bytes.is_empty() || bytes.len() % STL_IMAGE != 0 {
        return Err(DataError::Format(format!(
            "STL-10 image file length {} is not a multiple of {STL_IMAGE}",
            bytes.len()
        )));
    }
    let n = bytes.len() / STL_IMAGE;
    let plane = STL_SIDE * STL_SIDE;
    let mut data = vec![0u8; bytes.len()];
    for (i, img) in bytes.chunks_exact(STL_IMAGE).enumerate() {
        let out = &mut data[i * STL_IMAGE..(i + 1) * STL_IMAGE];
        for c in 0..3 {
            for x in 0..STL_SIDE {
                for y in 0..STL_SIDE {
                    out[(y * STL_SIDE + x) * 3 + c] = img[c * plane + x * STL_SIDE + y];
                }
            }
        }
    }
    RawImages::new(n, STL_SIDE, STL_SIDE, 3, data)
}

/// STL-10 `*_y.bin`: one byte per image, classes numbered from 1.
pub fn parse_stl_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    bytes
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (1..=10).contains(&l) {
                Ok(l - 1)
            } else {
                Err(DataError::Format(format!("label {i}: {l} outside 1..=10")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_planes_become_interleaved_pixels() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        // red plane pixel (row 1, col 2), green plane pixel (0, 0)
        rec[1 + 32 + 2] = 200;
        rec[1 + 1024] = 99;
        let (imgs, labels) = parse_cifar_batch(&rec).unwrap();
        assert_eq!(labels, vec![7]);
        assert_eq!(imgs.data[(32 + 2) * 3], 200);
        assert_eq!(imgs.data[1], 99);
    }

    #[test]
    fn cifar_rejects_truncated_and_bad_labels() {
        assert!(parse_cifar_batch(&[0u8; 100]).is_err());
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(parse_cifar_batch(&rec).is_err());
    }

    #[test]
    fn stl_column_major_is_transposed() {
        let mut img = vec![0u8; STL_IMAGE];
        // channel 2, column x=5, row y=1
        img[2 * 9216 + 5 * 96 + 1] = 42;
        let imgs = parse_stl_images(&img).unwrap();
        assert_eq!((imgs.height, imgs.width, imgs.channels), (96, 96, 3));
        assert_eq!(imgs.data[(96 + 5) * 3 + 2], 42);
    }

    #[test]
    fn stl_labels_shift_to_zero_base() {
        assert_eq!(parse_stl_labels(&[1, 10]).unwrap(), vec![0, 9]);
        assert!(parse_stl_labels(&[0]).is_err());
    }
}
