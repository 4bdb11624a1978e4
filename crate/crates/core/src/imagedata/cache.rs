//! On-disk dataset cache.
//!
//! Layout: `<cache>/<dataset>/<split>/{images.bin, labels.bin, manifest.json}`.
//! The split files are rebuilt from the upstream archive (downloaded into
//! `<cache>/<dataset>/` when missing) and verified against the manifest on
//! every load.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use md5::Md5;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::formats::{parse_cifar_batch, parse_stl_images, parse_stl_labels};
use super::{io_err, DataError, DatasetId, DatasetSplit, RawImages, Split};

/// Environment variable naming the cache root.
pub const CACHE_ENV: &str = "DJESCC_CACHE";

pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Where an archive comes from and what it must hash to.
#[derive(Clone, Debug)]
pub struct Remote {
    pub url: String,
    pub md5: String,
    pub archive_name: String,
    /// Directory inside the archive holding the binary files.
    pub inner_dir: String,
}

impl Remote {
    pub fn official(name: DatasetId) -> Option<Remote> {
        match name {
            DatasetId::Cifar10 => Some(Remote {
                url: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz".into(),
                md5: "c32a1d4ab5d03f1284b67883e8d87530".into(),
                archive_name: "cifar-10-binary.tar.gz".into(),
                inner_dir: "cifar-10-batches-bin".into(),
            }),
            DatasetId::Stl10 => Some(Remote {
                url: "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz".into(),
                md5: "91f7769df0f17e558f3565bffb0c7dfb".into(),
                archive_name: "stl10_binary.tar.gz".into(),
                inner_dir: "stl10_binary".into(),
            }),
            DatasetId::Synthetic => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DatasetId,
    pub split: Split,
    pub source_url: String,
    pub sha256_images: String,
    pub sha256_labels: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn source_files(name: DatasetId, split: Split) -> Result<Vec<&'static str>, DataError> {
    match (name, split) {
        (DatasetId::Cifar10, Split::Train) => Ok(vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ]),
        (DatasetId::Cifar10, Split::Test) => Ok(vec!["test_batch.bin"]),
        (DatasetId::Stl10, Split::Train) => Ok(vec!["train_X.bin", "train_y.bin"]),
        (DatasetId::Stl10, Split::Test) => Ok(vec!["test_X.bin", "test_y.bin"]),
        (DatasetId::Stl10, Split::Unlabeled) => Ok(vec!["unlabeled_X.bin"]),
        (n, s) => Err(DataError::Unsupported(format!("{n} has no {s} split"))),
    }
}

/// Load a split through the cache, fetching the official archive if needed.
pub fn load_dataset(
    name: DatasetId,
    split: Split,
    cache_dir: &Path,
) -> Result<DatasetSplit, DataError> {
    match Remote::official(name) {
        Some(remote) => load_dataset_with(name, split, cache_dir, &remote),
        None => Err(DataError::Unsupported(format!(
            "{name} is generated, not loaded; see synthetic_images"
        ))),
    }
}

pub fn load_dataset_with(
    name: DatasetId,
    split: Split,
    cache_dir: &Path,
    remote: &Remote,
) -> Result<DatasetSplit, DataError> {
    let files = source_files(name, split)?;
    let split_dir = cache_dir.join(name.to_string()).join(split.to_string());
    if !split_dir.join("manifest.json").exists() {
        build_split(name, split, cache_dir, remote, &files, &split_dir)?;
    }
    read_split(name, split, &split_dir)
}

fn read_split(name: DatasetId, split: Split, dir: &Path) -> Result<DatasetSplit, DataError> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| DataError::Format(format!("{}: {e}", mpath.display())))?;
    if m.dataset != name || m.split != split {
        return Err(DataError::Format(format!(
            "{} describes {}/{}",
            mpath.display(),
            m.dataset,
            m.split
        )));
    }
    let ipath = dir.join("images.bin");
    let images = fs::read(&ipath).map_err(io_err(&ipath))?;
    let found = sha256_hex(&images);
    if found != m.sha256_images {
        return Err(DataError::Integrity {
            path: ipath.display().to_string(),
            expected: m.sha256_images,
            found,
        });
    }
    let lpath = dir.join("labels.bin");
    let labels = fs::read(&lpath).map_err(io_err(&lpath))?;
    let found = sha256_hex(&labels);
    if found != m.sha256_labels {
        return Err(DataError::Integrity {
            path: lpath.display().to_string(),
            expected: m.sha256_labels,
            found,
        });
    }
    let images = RawImages::new(m.count, m.height, m.width, m.channels, images)?;
    let labels = if labels.is_empty() { None } else { Some(labels) };
    Ok(DatasetSplit {
        name,
        split,
        images,
        labels,
    })
}

fn build_split(
    name: DatasetId,
    split: Split,
    cache_dir: &Path,
    remote: &Remote,
    files: &[&str],
    split_dir: &Path,
) -> Result<(), DataError> {
    let ds_dir = cache_dir.join(name.to_string());
    let src_dir = ds_dir.join(&remote.inner_dir);
    if !files.iter().all(|f| src_dir.join(f).exists()) {
        let archive = ds_dir.join(&remote.archive_name);
        if !archive.exists() {
            fs::create_dir_all(&ds_dir).map_err(io_err(&ds_dir))?;
            download(&remote.url, &archive)?;
        }
        verify_md5(&archive, &remote.md5)?;
        extract(&archive, &remote.inner_dir, &src_dir)?;
    }
    let read = |f: &str| {
        let p = src_dir.join(f);
        fs::read(&p).map_err(io_err(&p))
    };
    let (images, labels) = match name {
        DatasetId::Cifar10 => {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            let mut count = 0;
            for f in files {
                let (imgs, l) = parse_cifar_batch(&read(f)?)?;
                count += imgs.count;
                data.extend_from_slice(&imgs.data);
                labels.extend_from_slice(&l);
            }
            (RawImages::new(count, 32, 32, 3, data)?, labels)
        }
        DatasetId::Stl10 => {
            let imgs = parse_stl_images(&read(files[0])?)?;
            let labels = match files.get(1) {
                Some(f) => parse_stl_labels(&read(f)?)?,
                None => Vec::new(),
            };
            if !labels.is_empty() && labels.len() != imgs.count {
                return Err(DataError::Format(format!(
                    "{} images but {} labels",
                    imgs.count,
                    labels.len()
                )));
            }
            (imgs, labels)
        }
        DatasetId::Synthetic => unreachable!("synthetic data has no archive"),
    };
    fs::create_dir_all(split_dir).map_err(io_err(split_dir))?;
    let manifest = Manifest {
        dataset: name,
        split,
        source_url: remote.url.clone(),
        sha256_images: sha256_hex(&images.data),
        sha256_labels: sha256_hex(&labels),
        count: images.count,
        height: images.height,
        width: images.width,
        channels: images.channels,
    };
    write_atomic(&split_dir.join("images.bin"), &images.data)?;
    write_atomic(&split_dir.join("labels.bin"), &labels)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&split_dir.join("manifest.json"), text.as_bytes())?;
    log::info!("cached {name}/{split}: {} images", images.count);
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("part");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn download(url: &str, dest: &Path) -> Result<(), DataError> {
    log::info!("downloading {url}");
    let fetch_err = |reason: String| DataError::Fetch {
        url: url.to_string(),
        reason,
    };
    let resp = ureq::get(url)
        .timeout(std::time::Duration::from_secs(600))
        .call()
        .map_err(|e| fetch_err(e.to_string()))?;
    let tmp = dest.with_extension("part");
    let mut out = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    let mut reader = resp.into_reader();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| fetch_err(e.to_string()))?;
        if n == 0 {
            break;
        }
        out.write_all(&buf[..n]).map_err(io_err(&tmp))?;
    }
    drop(out);
    fs::rename(&tmp, dest).map_err(io_err(dest))
}

fn verify_md5(path: &Path, expected: &str) -> Result<(), DataError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut h = Md5::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let found = hex(&h.finalize());
    if found != expected {
        return Err(DataError::Integrity {
            path: path.display().to_string(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

fn extract(archive: &Path, inner_dir: &str, dest: &Path) -> Result<(), DataError> {
    let f = fs::File::open(archive).map_err(io_err(archive))?;
    let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(f));
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let entries = tar.entries().map_err(io_err(archive))?;
    for entry in entries {
        let mut entry = entry.map_err(io_err(archive))?;
        let path = entry.path().map_err(io_err(archive))?.into_owned();
        let in_dir = path
            .parent()
            .and_then(|p| p.file_name())
            .is_some_and(|d| d == inner_dir);
        let Some(file) = path.file_name() else { continue };
        if in_dir && path.extension().is_some_and(|e| e == "bin") {
            let out = dest.join(file);
            entry.unpack(&out).map_err(io_err(&out))?;
        }
    }
    Ok(())
}
