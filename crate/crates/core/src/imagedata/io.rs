//! Lossless 8-bit PNG files.

use std::path::Path;

use image::{ColorType, ImageFormat};

use super::{denormalize, normalize, DataError, ImageBatch, RawImages};

const GUTTER: usize = 2;

fn color_type(channels: usize) -> Result<ColorType, DataError> {
    match channels {
        1 => Ok(ColorType::L8),
        3 => Ok(ColorType::Rgb8),
        c => Err(DataError::Unsupported(format!("{c}-channel images cannot be written"))),
    }
}

fn write_png(path: &Path, w: usize, h: usize, c: usize, data: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(super::io_err(dir))?;
    }
    image::save_buffer_with_format(path, data, w as u32, h as u32, color_type(c)?, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => DataError::Io {
                path: path.display().to_string(),
                source,
            },
            other => DataError::Format(format!("{}: {other}", path.display())),
        })
}

/// Write one 8-bit image (`raw.count == 1`).
pub fn export_raw(raw: &RawImages, path: &Path) -> Result<(), DataError> {
    if raw.count != 1 {
        return Err(DataError::Invalid(format!("expected one image, got {}", raw.count)));
    }
    write_png(path, raw.width, raw.height, raw.channels, &raw.data)
}

/// Quantize a single image with [`denormalize`] and write it.
pub fn export_image(img: &ImageBatch, path: &Path) -> Result<(), DataError> {
    export_raw(&denormalize(img), path)
}

pub fn import_raw(path: &Path) -> Result<RawImages, DataError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => DataError::Io {
            path: path.display().to_string(),
            source,
        },
        other => DataError::Format(format!("{}: {other}", path.display())),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img.color() {
        ColorType::L8 => (img.into_luma8().into_raw(), 1),
        _ => (img.into_rgb8().into_raw(), 3),
    };
    RawImages::new(1, h, w, data.1, data.0)
}

/// Read an image file as a `(1, h, w, c)` batch.
pub fn import_image(path: &Path) -> Result<ImageBatch, DataError> {
    normalize(&import_raw(path)?)
}

/// Write rows of equally sized images as one grid, row `r` holding
/// `rows[r]` left to right.
pub fn export_grid(rows: &[RawImages], path: &Path) -> Result<(), DataError> {
    let Some(first) = rows.first() else {
        return Err(DataError::Invalid("empty grid".into()));
    };
    let (h, w, c) = (first.height, first.width, first.channels);
    if rows.iter().any(|r| (r.height, r.width, r.channels) != (h, w, c)) {
        return Err(DataError::Invalid("grid rows differ in image shape".into()));
    }
    let cols = rows.iter().map(|r| r.count).max().unwrap_or(0).max(1);
    let gw = cols * w + (cols + 1) * GUTTER;
    let gh = rows.len() * h + (rows.len() + 1) * GUTTER;
    let mut buf = vec![255u8; gw * gh * c];
    for (ri, row) in rows.iter().enumerate() {
        for i in 0..row.count {
            let img = row.image(i);
            let ox = GUTTER + i * (w + GUTTER);
            let oy = GUTTER + ri * (h + GUTTER);
            for y in 0..h {
                let dst = ((oy + y) * gw + ox) * c;
                buf[dst..dst + w * c].copy_from_slice(&img[y * w * c..(y + 1) * w * c]);
            }
        }
    }
    write_png(path, gw, gh, c, &buf)
}
