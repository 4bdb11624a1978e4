//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! `DJESCC_ACCEPTANCE_SCALE` selects `desk` (default) or `ci` for the training
//! and attack criteria. Property, gradient and reproducibility criteria always
//! gate the exit code; training trends and attack comparisons gate it only
//! when `DJESCC_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use djescc_autograd::{Tape, Tensor};
use djescc_core::attacks::{
    fr_attack, gan_attack_train, keyed_shuffle_decrypt, keyed_shuffle_encrypt, AttackError, AttackReport,
    AttackTarget, FrMode, GanConfig, ShuffleKey,
};
use djescc_core::channel::{
    awgn_apply, pack_complex, power_normalize, snr_to_sigma2, unpack_complex, SymbolBlock,
};
use djescc_core::imagedata::{denormalize, normalize, synthetic_images, RawImages, Split};
use djescc_core::models::{
    decode_forward, decrypt_forward, encode_forward, encrypt_forward, Arch, Encryption, FeatureExtractor,
    ModelBundle, VggConfig,
};
use djescc_core::objective::{psnr, ssim};
use djescc_core::pipeline::{
    attack_run, evaluate_run, load_config, load_split, pretrain_features, train_run, Workspace,
};
use djescc_core::training::{build_graph, channel_noise, ExperimentConfig, MetricTable};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, PartialEq)]
enum Gate {
    Hard,
    Soft,
    Info,
}

struct Harness {
    strict: bool,
    failed_hard: Vec<String>,
    failed_soft: Vec<String>,
}

impl Harness {
    fn check(&mut self, id: &str, gate: Gate, ok: bool, detail: String) {
        let tag = match gate {
            Gate::Info => " [oracle, non-gating]",
            _ => "",
        };
        println!("{} {id}{tag}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            match gate {
                Gate::Hard => self.failed_hard.push(id.into()),
                Gate::Soft if self.strict => self.failed_hard.push(id.into()),
                Gate::Soft => self.failed_soft.push(id.into()),
                Gate::Info => {}
            }
        }
    }
}

struct Scale {
    name: &'static str,
    train: usize,
    test: usize,
    epochs: usize,
    batch: usize,
    unet_width: usize,
    vgg_div: usize,
    pretrain_epochs: usize,
    repeats: usize,
    attack_pool: usize,
    attack_eval: usize,
    gan_epochs: usize,
    gan_width: usize,
}

const DESK: Scale = Scale {
    name: "desk",
    train: 1536,
    test: 200,
    epochs: 20,
    batch: 32,
    unet_width: 8,
    vgg_div: 8,
    pretrain_epochs: 3,
    repeats: 10,
    attack_pool: 5100,
    attack_eval: 100,
    gan_epochs: 60,
    gan_width: 8,
};

const CI: Scale = Scale {
    name: "ci",
    train: 384,
    test: 48,
    epochs: 3,
    batch: 64,
    unet_width: 8,
    vgg_div: 8,
    pretrain_epochs: 1,
    repeats: 1,
    attack_pool: 288,
    attack_eval: 32,
    gan_epochs: 4,
    gan_width: 8,
};

const EVAL_SNRS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
const LAMBDAS: [f64; 4] = [0.0, 0.005, 0.05, 0.5];

fn main() {
    let scale = match std::env::var("DJESCC_ACCEPTANCE_SCALE").as_deref() {
        Ok("ci") => &CI,
        Ok("desk") | Err(_) => &DESK,
        Ok(other) => panic!("unknown DJESCC_ACCEPTANCE_SCALE `{other}` (use desk or ci)"),
    };
    let mut h = Harness {
        strict: std::env::var("DJESCC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1"),
        failed_hard: Vec::new(),
        failed_soft: Vec::new(),
    };
    println!("acceptance scale={} strict={}", scale.name, h.strict);

    let t = Instant::now();
    properties(&mut h);
    println!("  (properties: {:.1}s)", t.elapsed().as_secs_f64());

    let t = Instant::now();
    gradient_check(&mut h);
    println!("  (gradient check: {:.1}s)", t.elapsed().as_secs_f64());

    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{}", scale.name));
    let _ = std::fs::remove_dir_all(&root);
    let ws = Workspace {
        cache: root.join("cache"),
        runs: root.join("runs"),
    };

    let t = Instant::now();
    let runs = training_trends(&mut h, scale, &ws);
    println!("  (training: {:.1}s)", t.elapsed().as_secs_f64());

    let t = Instant::now();
    attack_audit(&mut h, scale, &ws, &runs);
    println!("  (attacks: {:.1}s)", t.elapsed().as_secs_f64());

    let t = Instant::now();
    reproducibility(&mut h, scale, &root);
    println!("  (reproducibility: {:.1}s)", t.elapsed().as_secs_f64());

    println!(
        "summary: {} gating failure(s) {:?}; {} non-gating failure(s) {:?}",
        h.failed_hard.len(),
        h.failed_hard,
        h.failed_soft.len(),
        h.failed_soft
    );
    if !h.failed_hard.is_empty() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- properties

fn gaussian_block(k: usize, scale: f64, rng: &mut ChaCha8Rng) -> SymbolBlock {
    SymbolBlock {
        symbols: (0..k)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex::new(re * scale, im * scale)
            })
            .collect(),
    }
}

fn small_arch(t: usize) -> Arch {
    Arch {
        channels: 3,
        t,
        jscc_widths: [4, 4, 4, 4],
        unet_width: 4,
    }
}

fn properties(h: &mut Harness) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc);

    // Power constraint, on the channel function and on encoder outputs.
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=512);
        let s = 10f64.powf(rng.gen_range(-3.0..3.0));
        let z = power_normalize(&gaussian_block(k, s, &mut rng)).unwrap();
        worst = worst.max((z.average_power() - 1.0).abs());
    }
    let bundle = ModelBundle::<f32>::init(small_arch(8), Encryption::Learned, 0.0, 0.0, 3);
    let imgs = normalize(&synthetic_images(Split::Test, 1000, 16, 3).images).unwrap();
    let blocks = encode_forward(&imgs, &bundle).unwrap();
    let worst_enc = blocks.iter().map(|b| (b.average_power() - 1.0).abs()).fold(0.0, f64::max);
    h.check(
        "c1.power",
        Gate::Hard,
        worst < 1e-5 && worst_enc < 1e-5 && blocks.len() == 1000,
        format!("max |P-1| = {worst:.2e} (channel, 1000 blocks), {worst_enc:.2e} (encoder, 1000 blocks)"),
    );

    let mut ok = true;
    for _ in 0..1000 {
        let n = 2 * rng.gen_range(1..=300);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b = pack_complex(&v).unwrap();
        ok &= unpack_complex(&b) == v && pack_complex(&unpack_complex(&b)).unwrap() == b;
    }
    ok &= pack_complex(&[1.0, 2.0, 3.0]).is_err();
    h.check("c1.pack", Gate::Hard, ok, "unpack(pack(v)) = v on 1000 vectors; odd length rejected".into());

    let z = gaussian_block(4096, 1.0, &mut rng);
    let same = awgn_apply(&z, 0.0, &mut rng).unwrap() == z;
    let sigma2 = 0.37;
    let zero = SymbolBlock {
        symbols: vec![Complex::new(0.0, 0.0); 1_000_000],
    };
    let n = awgn_apply(&zero, sigma2, &mut rng).unwrap();
    let var = n.average_power();
    let var_re = n.symbols.iter().map(|c| c.re * c.re).sum::<f64>() / 1e6;
    let rel = (var / sigma2 - 1.0).abs();
    let rel_re = (var_re / (sigma2 / 2.0) - 1.0).abs();
    h.check(
        "c1.awgn",
        Gate::Hard,
        same && rel < 0.01 && rel_re < 0.01,
        format!("σ²=0 identity {same}; 10^6 symbols: E|n|²/σ² - 1 = {rel:.2e}, real part {rel_re:.2e}"),
    );

    let all: Vec<u8> = (0..=255u8).collect();
    let raw = RawImages::new(1, 16, 16, 1, all.clone()).unwrap();
    let back = denormalize(&normalize(&raw).unwrap());
    let exact_scale = normalize(&raw)
        .unwrap()
        .values()
        .iter()
        .zip(&all)
        .all(|(v, &u)| *v == u as f32 / 255.0);
    h.check(
        "c1.normalize",
        Gate::Hard,
        back == raw && exact_scale,
        "denormalize(normalize(v)) = v for all 256 values".into(),
    );

    let (max_diff, max_grad) = lambda_zero_identity();
    h.check(
        "c1.lambda0",
        Gate::Hard,
        max_diff == 0.0 && max_grad > 0.0,
        format!("λe=λd=0: max |∇L_total - ∇L_r| = {max_diff:e} over μ,θ,φ,ν (max |∇| {max_grad:.3e})"),
    );

    let mut ok = true;
    for b in 0..=1u8 {
        let data: Vec<u8> = (0..=255u8).flat_map(|v| [v, v, v]).collect();
        let cipher = RawImages::new(1, 16, 16, 3, data.clone()).unwrap();
        let out = fr_attack(&cipher, b, FrMode::MostSignificantBit).unwrap();
        for (&v, &o) in data.iter().zip(&out.data) {
            let want = [v, 255 - v].into_iter().find(|c| c >> 7 == b).unwrap();
            ok &= o == want && o >> 7 == b;
        }
    }
    h.check("c1.fr", Gate::Hard, ok, "matches the bitwise oracle on 256 values × b∈{0,1}".into());

    let mut ok = true;
    let imgs = synthetic_images(Split::Test, 4, 32, 11).images;
    for seed in 0..20u64 {
        let key = ShuffleKey::new(seed, 32 * 32 * 3);
        let c = keyed_shuffle_encrypt(&imgs, &key).unwrap();
        ok &= keyed_shuffle_decrypt(&c, &key).unwrap() == imgs;
        for i in 0..imgs.count {
            let mut a = imgs.image(i).to_vec();
            let mut b = c.image(i).to_vec();
            a.sort_unstable();
            b.sort_unstable();
            ok &= a == b;
        }
        ok &= ShuffleKey::new(seed + 100, 3072).permutation() != key.permutation();
    }
    h.check(
        "c1.shuffle",
        Gate::Hard,
        ok,
        "round trip and per-image histogram preserved for 20 keys".into(),
    );

    let mut detail = Vec::new();
    let mut ok = true;
    let full = ModelBundle::<f32>::init(Arch::default(), Encryption::Learned, 0.05, 0.05, 5);
    for side in [32, 96] {
        let x = normalize(&synthetic_images(Split::Test, 2, side, 1).images).unwrap();
        let y = encrypt_forward(&x, &full).unwrap();
        let z = encode_forward(&y, &full).unwrap();
        let zh: Vec<SymbolBlock> = z
            .iter()
            .map(|b| awgn_apply(b, snr_to_sigma2(10.0), &mut rng).unwrap())
            .collect();
        let yh = decode_forward(&zh, &full, side, side).unwrap();
        let xh = decrypt_forward(&yh, &full).unwrap();
        let k = full.arch.encoder().symbols_per_image(side, side);
        ok &= y.shape() == x.shape() && yh.shape() == x.shape() && xh.shape() == x.shape();
        ok &= z.iter().all(|b| b.k() == k);
        detail.push(format!("{side}x{side}x3 → k={k} → {:?}", xh.shape()));
    }
    h.check("c1.shapes", Gate::Hard, ok, detail.join("; "));
}

fn tiny_f64(seed: u64) -> (ModelBundle<f64>, FeatureExtractor<f64>, Tensor<f64>, Tensor<f64>) {
    let arch = Arch {
        channels: 1,
        t: 2,
        jscc_widths: [2, 2, 2, 2],
        unet_width: 2,
    };
    let bundle = ModelBundle::<f64>::init(arch.clone(), Encryption::Learned, 0.5, 0.5, seed);
    let ex = FeatureExtractor::<f64>::random(
        VggConfig {
            in_channels: 1,
            width_divisor: 32,
            cut_block: 1,
            classes: 10,
        },
        seed + 100,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|_| rng.gen_range(0.05..0.95)).collect());
    let k = arch.encoder().symbols_per_image(4, 4);
    let noise = channel_noise::<f64>(k, &[10.0, 10.0], &mut rng);
    (bundle, ex, x, noise)
}

/// Gradients of the total loss and of `L_r` alone with both weights zero.
fn lambda_zero_identity() -> (f64, f64) {
    let (mut bundle, ex, x, noise) = tiny_f64(0);
    bundle.lambda_e = 0.0;
    bundle.lambda_d = 0.0;
    let grads = |use_total: bool| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = bundle.bind(&mut tape, true);
        let g = build_graph(&mut tape, &bundle, &bound, &ex, xv, noise.clone()).unwrap();
        let loss = if use_total { g.losses.total } else { g.losses.l_r };
        let gr = tape.backward(loss);
        [&bound.mu, &bound.theta, &bound.phi, &bound.nu]
            .into_iter()
            .flatten()
            .flat_map(|&v| gr.get(v).map(|t| t.data().to_vec()).unwrap_or_default())
            .collect::<Vec<f64>>()
    };
    let (a, b) = (grads(true), grads(false));
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    (diff, b.iter().map(|v| v.abs()).fold(0.0, f64::max))
}

/// Largest |gradient| per parameter set, and the feature-loss values.
fn gradient_scale(
    bundle: &ModelBundle<f64>,
    ex: &FeatureExtractor<f64>,
    x: &Tensor<f64>,
    noise: &Tensor<f64>,
) -> ([f64; 4], f64, f64) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = bundle.bind(&mut tape, true);
    let g = build_graph(&mut tape, bundle, &bound, ex, xv, noise.clone()).unwrap();
    let grads = tape.backward(g.losses.total);
    let max = |vs: &[djescc_autograd::Var]| {
        vs.iter()
            .flat_map(|&v| grads.get(v).unwrap().data().to_vec())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    };
    let b = g.losses.breakdown(&tape, bundle.lambda_e, bundle.lambda_d);
    (
        [max(&bound.mu), max(&bound.theta), max(&bound.phi), max(&bound.nu)],
        b.l_e,
        b.l_d,
    )
}

fn gradient_check(h: &mut Harness) {
    // At 2 filters some initializations leave every feature map dead or a
    // parameter set with ~1e-9 gradients, which finite differences cannot
    // resolve in f64. Take the first seed where every set is live.
    let seed = (0..64u64)
        .find(|&s| {
            let (b, ex, x, n) = tiny_f64(s);
            let (g, le, ld) = gradient_scale(&b, &ex, &x, &n);
            g.iter().all(|&v| v > 1e-3) && le > 1e-4 && ld > 1e-4
        })
        .expect("a well-conditioned seed exists");
    let (bundle, ex, x, noise) = tiny_f64(seed);
    let loss = |b: &ModelBundle<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = b.bind(&mut tape, false);
        let g = build_graph(&mut tape, b, &bound, &ex, xv, noise.clone()).unwrap();
        tape.value(g.losses.total).item()
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = bundle.bind(&mut tape, true);
    let g = build_graph(&mut tape, &bundle, &bound, &ex, xv, noise.clone()).unwrap();
    let grads = tape.backward(g.losses.total);

    let eps = 1e-6;
    let sets: [(&str, &[_]); 4] = [
        ("mu", &bound.mu),
        ("theta", &bound.theta),
        ("phi", &bound.phi),
        ("nu", &bound.nu),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (si, (name, vars)) in sets.iter().enumerate() {
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for (ti, &v) in vars.iter().enumerate() {
            let a = grads.get(v).expect("every parameter receives a gradient");
            for j in 0..a.len() {
                let nudge = |d: f64| {
                    let mut b = bundle.clone();
                    let set = [&mut b.mu, &mut b.theta, &mut b.phi, &mut b.nu][si].tensor_mut(ti);
                    set.data_mut()[j] += d;
                    loss(&b)
                };
                num.push((nudge(eps) - nudge(-eps)) / (2.0 * eps));
                ana.push(a.data()[j]);
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = ana.iter().zip(&num).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&ana).max(norm(&num)).max(1e-300);
        ok &= rel < 1e-3 && norm(&ana) > 0.0;
        parts.push(format!("{name}: {rel:.2e} ({} params)", ana.len()));
    }
    h.check(
        "c2.gradient",
        Gate::Hard,
        ok,
        format!("seed {seed}, relative error vs central differences, {}", parts.join(", ")),
    );
}

// ---------------------------------------------------------------- training

fn base_config(s: &Scale) -> ExperimentConfig {
    let o: Vec<String> = vec![
        "data.dataset=\"synthetic\"".into(),
        "data.synthetic_side=32".into(),
        format!("data.train_limit={}", s.train),
        format!("data.test_limit={}", s.test),
        format!("model.unet_width={}", s.unet_width),
        format!("features.width_divisor={}", s.vgg_div),
        format!("features.pretrain_epochs={}", s.pretrain_epochs),
        format!("features.pretrain_limit={}", s.train),
        format!("training.epochs={}", s.epochs),
        format!("training.batch_size={}", s.batch),
        format!("evaluation.repeats={}", s.repeats),
        "evaluation.grid_images=4".into(),
        "attack.dataset=\"synthetic\"".into(),
        "attack.split=\"unlabeled\"".into(),
        format!("attack.limit={}", s.attack_pool),
        format!("attack.eval_count={}", s.attack_eval),
        format!("attack.gan_epochs={}", s.gan_epochs),
        format!("attack.generator_width={}", s.gan_width),
    ];
    load_config(None, &o).unwrap()
}

fn variant(base: &ExperimentConfig, id: &str, extra: &[String]) -> ExperimentConfig {
    let mut o = vec![format!("run.id=\"{id}\"")];
    o.extend_from_slice(extra);
    base.with_overrides(&o).unwrap()
}

fn lambda_cfg(base: &ExperimentConfig, l: f64, seed: u64) -> ExperimentConfig {
    variant(
        base,
        &format!("lambda{l}_s{seed}"),
        &[
            format!("model.lambda_e={l}"),
            format!("model.lambda_d={l}"),
            format!("run.seed={seed}"),
        ],
    )
}

struct Trained {
    cfg: ExperimentConfig,
    table: MetricTable,
}

fn train_eval(cfg: &ExperimentConfig, ws: &Workspace) -> Trained {
    let t = Instant::now();
    let (_, finished) = train_run(cfg, ws, false, None).expect("training runs");
    assert!(finished);
    let table = evaluate_run(cfg, ws).expect("evaluation runs");
    let curve: Vec<String> = EVAL_SNRS
        .iter()
        .map(|&s| format!("{s}:{:.3}", table.mean_psnr(s).unwrap()))
        .collect();
    println!(
        "  run {}: PSNR by SNR {} ({:.0}s)",
        cfg.run.id,
        curve.join(" "),
        t.elapsed().as_secs_f64()
    );
    Trained {
        cfg: cfg.clone(),
        table,
    }
}

fn psnr_at(r: &Trained, snr: f64) -> f64 {
    r.table.mean_psnr(snr).unwrap()
}

fn psnr_xy(r: &Trained) -> f64 {
    r.table.summary[0].psnr_xy
}

/// Pass when PSNR at 10 dB is non-increasing in λ, allowing one adjacent
/// inversion of at most 0.3 dB.
fn lambda_order(runs: &[Trained]) -> (bool, String) {
    let p: Vec<f64> = runs.iter().map(|r| psnr_at(r, 10.0)).collect();
    let inversions: Vec<f64> = p.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    let ok = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 0.3);
    let shown: Vec<String> = LAMBDAS.iter().zip(&p).map(|(l, v)| format!("λ={l}: {v:.3}")).collect();
    (ok, format!("{} dB; inversions {:?}", shown.join(", "), inversions))
}

struct DeskRuns {
    lambda005: Trained,
    shuffle: Trained,
}

fn training_trends(h: &mut Harness, s: &Scale, ws: &Workspace) -> DeskRuns {
    let base = base_config(s);
    let t = Instant::now();
    let (_, rep) = pretrain_features(&base, ws).expect("feature pretraining runs");
    println!(
        "  feature extractor: test accuracy {:.3} ({:.0}s)",
        rep.test_accuracy,
        t.elapsed().as_secs_f64()
    );

    let mut lambdas: Vec<Trained> = LAMBDAS.iter().map(|&l| train_eval(&lambda_cfg(&base, l, 0), ws)).collect();
    let shuffle = train_eval(
        &variant(&base, "shuffle_djscc", &["model.encryption=\"shuffle\"".into(), "model.lambda_e=0".into(), "model.lambda_d=0".into()]),
        ws,
    );
    let r12 = train_eval(
        &variant(&base, "lambda0.05_r12", &["model.t=8".into(), "model.lambda_e=0.05".into(), "model.lambda_d=0.05".into()]),
        ws,
    );

    let (mut ok, mut detail) = lambda_order(&lambdas);
    let mut retried = Vec::new();
    if !ok {
        let retry: Vec<Trained> = LAMBDAS.iter().map(|&l| train_eval(&lambda_cfg(&base, l, 1), ws)).collect();
        let (ok2, d2) = lambda_order(&retry);
        detail = format!("seed 0: {detail}; re-seeded: {d2}");
        ok = ok2;
        retried = retry;
    }
    h.check("c3a.lambda-order", Gate::Soft, ok, detail);

    let mut bad = Vec::new();
    let all: Vec<&Trained> = lambdas.iter().chain(&retried).chain([&shuffle, &r12]).collect();
    for r in &all {
        let p: Vec<f64> = EVAL_SNRS.iter().map(|&snr| psnr_at(r, snr)).collect();
        if p.windows(2).any(|w| w[1] < w[0] - 0.2) {
            bad.push(format!("{} {:?}", r.cfg.run.id, p));
        }
    }
    h.check(
        "c3b.snr-monotone",
        Gate::Soft,
        bad.is_empty(),
        format!("{} bundles checked over {:?} dB; violations {:?}", all.len(), EVAL_SNRS, bad),
    );

    let l005 = lambdas.remove(2);
    let gap = psnr_at(&l005, 10.0) - psnr_at(&shuffle, 10.0);
    h.check(
        "c3c.vs-shuffle",
        Gate::Soft,
        gap >= 3.0,
        format!(
            "PSNR@10dB learned λ=0.05 {:.3} vs shuffle+DJSCC {:.3}: gap {gap:.3} dB (need ≥ 3)",
            psnr_at(&l005, 10.0),
            psnr_at(&shuffle, 10.0)
        ),
    );

    let pairs: Vec<(f64, f64, f64)> = EVAL_SNRS
        .iter()
        .map(|&s| (s, psnr_at(&l005, s), psnr_at(&r12, s)))
        .collect();
    h.check(
        "c3d.bandwidth",
        Gate::Soft,
        pairs.iter().all(|(_, a, b)| a > b),
        format!(
            "R=1/6 vs R=1/12: {}",
            pairs
                .iter()
                .map(|(s, a, b)| format!("{s}dB {a:.3}>{b:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );

    let l0 = &lambdas[0];
    h.check(
        "c3e.privacy",
        Gate::Soft,
        psnr_xy(&l005) < psnr_xy(l0),
        format!("PSNR(x, y): λ=0.05 {:.3} dB vs λ=0 {:.3} dB", psnr_xy(&l005), psnr_xy(l0)),
    );
    DeskRuns {
        lambda005: l005,
        shuffle,
    }
}

// ---------------------------------------------------------------- attacks

fn find<'a>(reports: &'a [AttackReport], method: &str) -> &'a AttackReport {
    reports
        .iter()
        .find(|r| r.method == method && r.target == AttackTarget::Encrypted)
        .expect("attack report present")
}

fn attack_audit(h: &mut Harness, s: &Scale, ws: &Workspace, runs: &DeskRuns) {
    let learned = attack_run(&runs.lambda005.cfg, ws).expect("attack on learned encryption");
    let shuffled = attack_run(&runs.shuffle.cfg, ws).expect("attack on shuffle");
    for r in learned.iter().chain(&shuffled) {
        println!("  {}", r.summary_line());
    }
    let (fl, fs) = (find(&learned, "fr"), find(&shuffled, "fr"));
    h.check(
        "c4.fr-ssim",
        Gate::Soft,
        fl.mean_ssim <= fs.mean_ssim,
        format!("FR mean SSIM learned {:.4} ≤ shuffle {:.4}", fl.mean_ssim, fs.mean_ssim),
    );
    h.check(
        "c4.fr-psnr",
        Gate::Soft,
        fl.mean_psnr <= fs.mean_psnr,
        format!("FR mean PSNR learned {:.3} ≤ shuffle {:.3}", fl.mean_psnr, fs.mean_psnr),
    );
    let (gl, gs) = (find(&learned, "gan"), find(&shuffled, "gan"));
    h.check(
        "c4.gan-psnr",
        Gate::Soft,
        gs.mean_psnr > gl.mean_psnr,
        format!("GAN mean PSNR shuffle {:.3} > learned {:.3}", gs.mean_psnr, gl.mean_psnr),
    );

    // Directional oracles for the GAN procedure itself.
    let cfg = &runs.shuffle.cfg;
    let a = &cfg.attack;
    let pool = load_split(cfg, a.dataset, a.split, a.limit, &ws.cache).unwrap().images;
    let plain = pool.first(a.eval_count);
    let train = pool.gather(&(a.eval_count..pool.count).collect::<Vec<_>>());
    let gan_cfg = GanConfig {
        epochs: s.gan_epochs,
        batch_size: a.gan_batch_size,
        lr: a.gan_lr,
        generator_width: a.generator_width,
        ..GanConfig::default()
    };
    let identity = |x: &RawImages| -> Result<RawImages, AttackError> { Ok(x.clone()) };
    let (gan, _) = gan_attack_train(&identity, &train, &gan_cfg, a.seed).unwrap();
    let rec = gan.reconstruct(&plain).unwrap();
    let p_id = psnr(&plain, &rec).unwrap();
    h.check(
        "oracle.gan-identity",
        Gate::Info,
        p_id > 20.0,
        format!("GAN on an identity cipher: PSNR {p_id:.3} dB (expected > 20)"),
    );
    let key_seed = match runs.shuffle.cfg.encryption() {
        Encryption::Shuffle { seed } => seed,
        _ => unreachable!(),
    };
    let key = ShuffleKey::new(key_seed, plain.image_len());
    let raw = keyed_shuffle_encrypt(&plain, &key).unwrap();
    let p_raw = psnr(&plain, &raw).unwrap();
    h.check(
        "oracle.gan-shuffle-gain",
        Gate::Info,
        gs.mean_psnr > p_raw,
        format!(
            "GAN on shuffle ciphers {:.3} dB vs raw cipher {p_raw:.3} dB (SSIM raw {:.4})",
            gs.mean_psnr,
            ssim(&plain, &raw).unwrap()
        ),
    );
}

// ---------------------------------------------------------------- reproducibility

fn reproducibility(h: &mut Harness, s: &Scale, root: &Path) {
    let base = base_config(s);
    let cfg = variant(
        &base,
        "repro",
        &[
            "data.train_limit=256".into(),
            "data.test_limit=32".into(),
            "training.epochs=2".into(),
            "model.lambda_e=0.05".into(),
            "model.lambda_d=0.05".into(),
            "attack.gan_epochs=1".into(),
            "attack.limit=96".into(),
            "attack.eval_count=16".into(),
        ],
    );
    let files = ["train_log.csv", "metrics.csv", "summary.csv", "attack.csv"];
    let mut outputs = Vec::new();
    for rep in 0..2 {
        let ws = Workspace {
            cache: root.join("cache"),
            runs: root.join(format!("repro{rep}")),
        };
        train_run(&cfg, &ws, false, None).unwrap();
        evaluate_run(&cfg, &ws).unwrap();
        attack_run(&cfg, &ws).unwrap();
        let dir = ws.run_dir(&cfg);
        outputs.push(files.map(|f| std::fs::read(dir.join(f)).unwrap()));
    }
    let same: Vec<bool> = (0..files.len()).map(|i| outputs[0][i] == outputs[1][i]).collect();
    h.check(
        "c5.byte-identical",
        Gate::Hard,
        same.iter().all(|&b| b),
        format!(
            "two executions: {}",
            files
                .iter()
                .zip(&same)
                .map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "DIFFERS" }))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}
