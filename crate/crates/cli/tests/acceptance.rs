//! Acceptance checks, one PASS/FAIL line each. Exits nonzero on any failure.

mod common;
#[path = "../../core/tests/common/mod.rs"]
mod oracles;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mcan_core::analysis::{count_mult_adds, count_params, count_sigmoids, graph_mult_adds, graph_params};
use mcan_core::arch::graph::{Graph, GraphBuilder};
use mcan_core::arch::SUPPORTED_SCALES;
use mcan_core::data::{self, Image};
use mcan_core::format::{self, FormatError};
use mcan_core::tensor::{conv2d, ConvSpec};
use mcan_core::train::{self, grad_check, micro_config, smoothed_losses, TrainConfig, TrainingSet};
use mcan_core::{Model, ModelConfig, Preset, Tensor};
use oracles::{bilinear_oracle, conv_oracle, max_abs_diff, normwise_rel_error, random_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

const HR: (usize, usize) = (720, 1280);

/// Reference sizes: parameters and mult-adds (G) at x2, x3, x4.
const PUBLISHED: [(&str, f64, [f64; 3]); 4] = [
    ("MCAN", 1_233e3, [191.3, 95.4, 83.1]),
    ("MCAN-M", 594e3, [105.50, 50.91, 35.53]),
    ("MCAN-S", 243e3, [46.09, 21.91, 13.98]),
    ("MCAN-T", 35e3, [6.27, 3.10, 2.00]),
];

fn rel_dev(got: f64, want: f64) -> f64 {
    (got - want).abs() / want
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < limit, || format!("took {e:.2?}, limit {limit:?}"))
}

fn architecture_sizes() -> Check {
    let t = Instant::now();
    let (mut worst_p, mut worst_m) = (0.0f64, 0.0f64);
    for (name, params, madds) in PUBLISHED {
        for (i, s) in SUPPORTED_SCALES.into_iter().enumerate() {
            let model = Model::zeroed(ModelConfig::named(name, s).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let p = count_params(&model) as f64;
            let m = count_mult_adds(&model, HR).map_err(|e| e.to_string())? as f64 / 1e9;
            let (dp, dm) = (rel_dev(p, params), rel_dev(m, madds[i]));
            ensure(dp <= 0.10, || format!("{name} x{s}: {p} params vs {params}"))?;
            ensure(dm <= 0.10, || format!("{name} x{s}: {m:.2}G vs {}G", madds[i]))?;
            worst_p = worst_p.max(dp);
            worst_m = worst_m.max(dm);
        }
    }
    within(t, Duration::from_secs(1))?;
    Ok(format!(
        "12 configs, worst deviation params {:.1}% mult-adds {:.1}%, {:.0?}",
        worst_p * 100.0,
        worst_m * 100.0,
        t.elapsed()
    ))
}

/// Three-layer 9-5-5 network on the luminance channel at output resolution.
fn srcnn() -> Result<(Graph, usize), String> {
    let mut b = GraphBuilder::new();
    let e = |e: mcan_core::arch::graph::GraphError| e.to_string();
    let x = b.input("y", 1).map_err(e)?;
    let c1 = b.conv("conv1", x, ConvSpec::same(1, 64, 9)).map_err(e)?;
    let r1 = b.relu("relu1", c1).map_err(e)?;
    let c2 = b.conv("conv2", r1, ConvSpec::same(64, 32, 5)).map_err(e)?;
    let r2 = b.relu("relu2", c2).map_err(e)?;
    let out = b.conv("conv3", r2, ConvSpec::same(32, 1, 5)).map_err(e)?;
    Ok((b.finish(), out))
}

fn srcnn_cross_check() -> Check {
    let t = Instant::now();
    let (g, out) = srcnn()?;
    let params = graph_params(&g);
    let madds = graph_mult_adds(&g, out, (HR.0 * HR.1) as u64) as f64 / 1e9;
    ensure(rel_dev(params as f64, 57e3) <= 0.05, || format!("{params} params, expected about 57K"))?;
    ensure(rel_dev(madds, 52.7) <= 0.05, || format!("{madds:.2}G vs 52.7G"))?;
    within(t, Duration::from_secs(1))?;
    Ok(format!("{params} params, {madds:.2}G (dev {:.2}%)", rel_dev(madds, 52.7) * 100.0))
}

fn sigmoid_count() -> Check {
    let cfg = ModelConfig::named("MCAN", 2).map_err(|e| e.to_string())?;
    let stat = count_sigmoids(&cfg);
    let model = Model::zeroed(cfg).map_err(|e| e.to_string())?;
    let (_, stats) = model
        .forward_traced(&Tensor::full([1, 3, 4, 4], 0.5), 2)
        .map_err(|e| e.to_string())?;
    ensure(stat == 864, || format!("static count {stat}"))?;
    ensure(stats.gate_evaluations == stat, || format!("dynamic count {}", stats.gate_evaluations))?;
    Ok(format!("static {stat}, dynamic {}", stats.gate_evaluations))
}

fn gradient_check() -> Check {
    let t = Instant::now();
    let r = grad_check(&micro_config(), 7, 8).map_err(|e| e.to_string())?;
    ensure(r.max_rel_error <= 1e-3, || format!("max rel error {:.3e}", r.max_rel_error))?;
    within(t, Duration::from_secs(300))?;
    Ok(format!(
        "{} parameters checked, max rel error {:.2e}, {:.1?}",
        r.checked,
        r.max_rel_error,
        t.elapsed()
    ))
}

fn zero_weight_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for p in Preset::ALL {
        for s in SUPPORTED_SCALES {
            let model = Model::zeroed(ModelConfig::preset(p, s).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let x: Tensor = random_tensor([1, 3, 7, 9], 0.0, 1.0, &mut rng);
            let y = model.forward(&x).map_err(|e| e.to_string())?;
            let err = max_abs_diff(&y, &bilinear_oracle(&x, s));
            ensure(err <= 1e-6, || format!("{p} x{s}: {err:.2e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("{} presets x 3 scales, max abs diff {worst:.2e}", Preset::ALL.len()))
}

fn conv_oracle_agreement() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let groups = [1, 2, 4][rng.gen_range(0..3)];
        let cin = groups * rng.gen_range(1..=8 / groups);
        let cout = groups * rng.gen_range(1..=8 / groups);
        let (n, h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let kh = rng.gen_range(1..=h.min(5));
        let kw = rng.gen_range(1..=w.min(5));
        let spec = ConvSpec {
            kernel: (kh, kw),
            in_channels: cin,
            out_channels: cout,
            groups,
            padding: rng.gen_range(0..=2),
            has_bias: rng.gen(),
        };
        let x: Tensor = random_tensor([n, cin, h, w], -1.0, 1.0, &mut rng);
        let wt: Tensor = random_tensor(spec.weight_shape(), -1.0, 1.0, &mut rng);
        let b: Tensor = random_tensor(spec.bias_shape(), -1.0, 1.0, &mut rng);
        let bias = spec.has_bias.then_some(&b);
        let got = conv2d(&x, &spec, &wt, bias).map_err(|e| format!("trial {trial}: {e}"))?;
        let err = normwise_rel_error(&got, &conv_oracle(&x, &spec, &wt, bias));
        ensure(err <= 1e-5, || format!("trial {trial} {spec:?}: rel error {err:.2e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("200 instances, max rel error {worst:.2e}"))
}

fn toy_training() -> Check {
    let t = Instant::now();
    let images: Vec<Image> = (0..16).map(|i| oracles::synthetic_image(100 + i, 48, 48)).collect();
    let cfg = TrainConfig {
        lr: 2e-3,
        halve_every: 700,
        batch: 4,
        patch: 16,
        max_steps: 2000,
        scales: vec![2],
        seed: 1,
        ..TrainConfig::default()
    };
    let set = TrainingSet::from_images(&images, &cfg.scales, cfg.patch).map_err(|e| e.to_string())?;
    let mut model = Model::build(ModelConfig::named("MCAN-T", 2).map_err(|e| e.to_string())?, 1)
        .map_err(|e| e.to_string())?;
    let outcome = train::train_loop(&mut model, &set, &cfg, None, &mut ()).map_err(|e| e.to_string())?;
    let smooth = smoothed_losses(&outcome.history, 50);
    let (initial, last) = (smooth[0], *smooth.last().unwrap());

    let (mut sr_psnr, mut bic_psnr) = (0.0, 0.0);
    let pairs = set.pairs(2).unwrap();
    for (hr, lr) in pairs {
        let sr = model.forward(&data::to_tensor::<f32>(lr)).map_err(|e| e.to_string())?;
        let sr = data::to_image(&sr).map_err(|e| e.to_string())?;
        let bic = data::bicubic_resize(lr, hr.width(), hr.height()).map_err(|e| e.to_string())?;
        sr_psnr += data::psnr(&sr, hr, 2).map_err(|e| e.to_string())? / pairs.len() as f64;
        bic_psnr += data::psnr(&bic, hr, 2).map_err(|e| e.to_string())? / pairs.len() as f64;
    }
    let summary = format!(
        "loss {initial:.4} -> {last:.4} ({:.0}%), PSNR {sr_psnr:.2} vs bicubic {bic_psnr:.2} dB, {:.0?}",
        last / initial * 100.0,
        t.elapsed()
    );
    ensure(last <= 0.5 * initial, || summary.clone())?;
    ensure(sr_psnr >= bic_psnr + 0.3, || summary.clone())?;
    within(t, Duration::from_secs(30 * 60))?;
    Ok(summary)
}

/// Horizontal mirror, written out independently of the library transforms.
fn mirror(x: &Tensor) -> Tensor {
    let w = x.shape()[3];
    Tensor::from_fn(x.shape(), |n, c, y, xx| x.get(n, c, y, w - 1 - xx))
}

fn ensemble_equivariance() -> Check {
    let model = Model::build(ModelConfig::named("MCAN-T", 2).map_err(|e| e.to_string())?, 4)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let x: Tensor = random_tensor([1, 3, rng.gen_range(4..9), rng.gen_range(4..9)], 0.0, 1.0, &mut rng);
        let lhs = data::self_ensemble(&model, &mirror(&x), 2).map_err(|e| e.to_string())?;
        let rhs = mirror(&data::self_ensemble(&model, &x, 2).map_err(|e| e.to_string())?);
        let err = lhs.max_abs_diff(&rhs);
        ensure(err <= 1e-5, || format!("input {i}: {err:.2e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("10 inputs, max abs diff {worst:.2e}"))
}

fn metric_calibration() -> Check {
    let a = oracles::synthetic_image(5, 32, 32);
    let p = data::psnr(&a, &a, 2).map_err(|e| e.to_string())?;
    let s = data::ssim(&a, &a, 2).map_err(|e| e.to_string())?;
    let unit = data::psnr_from_mse(1.0);
    // 20 log10(255) with MSE 1
    let closed = 20.0 * 255f64.log10();
    ensure(p == f64::INFINITY, || format!("psnr(x, x) = {p}"))?;
    ensure(s == 1.0, || format!("ssim(x, x) = {s}"))?;
    ensure((unit - closed).abs() < 1e-9 && (unit - 48.13).abs() < 5e-3, || format!("MSE 1 gives {unit}"))?;
    Ok(format!("psnr(x,x) = inf, ssim(x,x) = 1, MSE 1 gives {unit:.4} dB"))
}

fn block_of(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("mim.d")?;
    let (d, rest) = rest.split_once('.')?;
    let k = rest.strip_prefix('k')?.split('.').next()?;
    Some((d.parse().ok()?, k.parse().ok()?))
}

fn inter_block_edges(g: &Graph) -> usize {
    g.nodes()
        .iter()
        .filter_map(|n| block_of(&n.name).map(|b| (b, n)))
        .map(|(b, n)| {
            n.inputs
                .iter()
                .filter(|&&p| block_of(&g.node(p).name).is_some_and(|pb| pb != b))
                .count()
        })
        .sum()
}

fn ablation_structure() -> Check {
    let base = ModelConfig::named("MCAN", 2).map_err(|e| e.to_string())?;
    let (d, k, m) = (base.d, base.k, base.m);
    let mut seen: Vec<(usize, usize, usize)> = Vec::new();
    let mut parts = Vec::new();
    for mim in [true, false] {
        for eff in [true, false] {
            let cfg = ModelConfig {
                mim_connections: mim,
                eff_enabled: eff,
                ..base.clone()
            };
            let model = Model::zeroed(cfg).map_err(|e| e.to_string())?;
            let g = &model.graph;
            // FE, blocks of M four-conv RCABs and M+1 fusions, EFF, three tails
            let want_convs = 2 + d * k * (5 * m + 1) + if eff { 2 } else { 0 } + 7;
            let want_links = if mim { d * (k - 1) * (m + 1) + (d - 1) * k } else { d * k - 1 };
            let (convs, links) = (g.convs().count(), inter_block_edges(g));
            ensure(convs == want_convs, || format!("mim={mim} eff={eff}: {convs} convs, want {want_convs}"))?;
            ensure(links == want_links, || format!("mim={mim} eff={eff}: {links} links, want {want_links}"))?;
            let key = (convs, links, g.edge_count());
            ensure(!seen.contains(&key), || format!("mim={mim} eff={eff} duplicates another graph"))?;
            seen.push(key);
            parts.push(format!("{convs}/{links}"));
        }
    }
    Ok(format!("convs/inter-block links {}", parts.join(", ")))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let weights = dir.path().join("w.bin");
    let input = dir.path().join("in.png");
    common::write_weights(&weights, "MCAN-T", Some(9));
    common::write_image(&input, &oracles::synthetic_image(3, 20, 16));
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("out{i}.png"));
        let run = common::mcan(&[
            "upscale",
            "--model",
            "MCAN-T",
            "--weights",
            common::p(&weights),
            "--input",
            common::p(&input),
            "--output",
            common::p(&out),
        ]);
        ensure(run.status.success(), || format!("upscale failed: {}", common::stderr(&run)))?;
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "upscale outputs differ".into())?;

    let model = Model::build(ModelConfig::named("MCAN", 3).map_err(|e| e.to_string())?, 12)
        .map_err(|e| e.to_string())?;
    let bytes = format::encode(&model.weights, None);
    let file = format::decode(&bytes).map_err(|e| e.to_string())?;
    let identical = file.entries.len() == model.weights.len()
        && file.entries.iter().all(|(n, t)| {
            model.weights.get(n).is_some_and(|w| {
                w.shape() == t.shape() && w.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            })
        });
    ensure(identical, || "decoded weights differ from the saved ones".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let flips = 64;
    for _ in 0..flips {
        let mut bad = bytes.clone();
        let i = rng.gen_range(0..bad.len());
        bad[i] ^= 1 << rng.gen_range(0..8);
        ensure(format::decode(&bad).is_err(), || format!("flip at byte {i} went undetected"))?;
    }
    let cut = format::decode(&bytes[..bytes.len() / 2]);
    ensure(matches!(cut, Err(FormatError::Checksum(_))), || format!("truncation gave {cut:?}"))?;
    Ok(format!(
        "2 identical upscales ({} bytes), {} entries bit-exact, {flips}/{flips} bit flips and truncation rejected",
        outputs[0].len(),
        file.entries.len()
    ))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 11] = [
        ("1  architecture sizes within 10%", architecture_sizes),
        ("2  SRCNN mult-adds within 5%", srcnn_cross_check),
        ("3  sigmoid count", sigmoid_count),
        ("4a gradient check", gradient_check),
        ("4b zero-weight identity", zero_weight_identity),
        ("4c conv oracle", conv_oracle_agreement),
        ("4d toy training", toy_training),
        ("4e self-ensemble equivariance", ensemble_equivariance),
        ("4f metric calibration", metric_calibration),
        ("4g ablation structure", ablation_structure),
        ("5  determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
