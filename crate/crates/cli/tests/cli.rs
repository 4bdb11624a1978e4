use std::path::Path;
use std::process::Command;

use djescc_core::imagedata::{denormalize, export_image, import_image, normalize, synthetic_images, Split};
use djescc_core::models::{decrypt_forward, encrypt_forward};
use djescc_core::pipeline::{load_bundle, transmit_images};

const TINY: &str = r#"
[run]
id = "cli"

[data]
dataset = "synthetic"
synthetic_side = 16
train_limit = 16
test_limit = 4

[model]
t = 8
jscc_widths = [4, 4, 4, 4]
unet_width = 4

[features]
width_divisor = 16
cut_block = 2
pretrain_epochs = 1
pretrain_batch_size = 8
pretrain_limit = 16

[training]
epochs = 1
batch_size = 8
"#;

fn djescc(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_djescc"))
        .current_dir(root)
        .env("RUST_LOG", "warn")
        .args(["--config", "tiny.toml", "--runs-dir", "runs", "--cache-dir", "cache"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) {
    let out = djescc(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn three_party_workflow_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    ok(root, &["pretrain-features"]);
    ok(root, &["train"]);

    let plain = normalize(&synthetic_images(Split::Test, 1, 16, 5).images).unwrap();
    export_image(&plain, &root.join("x.png")).unwrap();
    ok(root, &["encrypt", "--input", "x.png", "--output", "y.png"]);
    ok(root, &["transmit", "--input", "y.png", "--output", "yhat.png", "--snr-db", "10", "--seed", "3"]);
    ok(root, &["decrypt", "--input", "yhat.png", "--output", "xhat.png"]);

    let ck = root.join("runs/cli/checkpoints");
    let full = load_bundle(&ck.join("final.safetensors")).unwrap();
    let y = normalize(&denormalize(&encrypt_forward(&plain, &full).unwrap())).unwrap();
    let yhat = normalize(&denormalize(&transmit_images(&y, &full, 10.0, 3).unwrap())).unwrap();
    let xhat = denormalize(&decrypt_forward(&yhat, &full).unwrap());
    let read = |n: &str| denormalize(&import_image(&root.join(n)).unwrap());
    assert_eq!(read("y.png"), denormalize(&y));
    assert_eq!(read("yhat.png"), denormalize(&yhat));
    assert_eq!(read("xhat.png"), xhat);
}

#[test]
fn errors_exit_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    let out = djescc(root, &["--set", "model.nope=1", "evaluate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.nope"));
    let out = djescc(root, &["evaluate"]);
    assert!(!out.status.success());
    let out = djescc(root, &["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain-features"));
}
