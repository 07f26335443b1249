//! Acceptance checks 1 to 8. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cwss::capsule::{forward_classify, route_trace};
use cwss::checkpoint::{decode, encode, load_checkpoint, Checkpoint};
use cwss::config::RunConfig;
use cwss::decoder::reconstruction_loss;
use cwss::error::{CheckpointError, Error};
use cwss::gradcheck::{self, random_input};
use cwss::mask::LabelMask;
use cwss::metrics::{class_ious, iou, mean_defined, SegPair};
use cwss::model::CapsNetParams;
use cwss::saliency::{class_saliency, normalize_minmax, smoothgrad, LinearSurrogate, SmoothGradConfig};
use cwss::synth::{generate_synthetic, white_patch};
use cwss::taxonomy::{mask_universe, Mode, BACKGROUND};
use cwss::tensor::Tensor;
use cwss::training::{margin_loss, observed_classes, train, LossConfig};
use cwss::wsss::{background_from_intensity, other_activation, run_pipeline};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure(
        (got - want).abs() <= tol,
        format!("{}: got {}, want {} ± {}", what, got, want, tol),
    )
}

fn e(err: Error) -> String {
    err.to_string()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck::standard_suite().map_err(e)?;
    let elapsed = t.elapsed();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op_name.as_str())
        .collect();
    ensure(failed.is_empty(), format!("failed: {}", failed.join(", ")))?;
    let required = [
        "conv2d",
        "transposed_conv2d",
        "squash",
        "routing_final_layer",
        "margin_loss",
        "decoder_weights_34x34",
        "score_path_34x34",
    ];
    for name in required {
        ensure(
            reports.iter().any(|r| r.op_name == name),
            format!("{} not checked", name),
        )?;
    }
    ensure(elapsed.as_secs() < 120, format!("took {:?}", elapsed))?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f32::max);
    Ok(format!(
        "{} checks, max rel err {:.2e}, {:.1?}",
        reports.len(),
        worst,
        elapsed
    ))
}

fn routing() -> Outcome {
    let uhat = random_input(&[30, 27, 8], -1.0, 1.0, 5);
    let mut worst = 0.0f32;
    let mut seen = 0;
    let (v, _) = route_trace(&uhat, 3, |st| {
        seen += 1;
        for row in st.c.data().chunks(27) {
            worst = worst.max((row.iter().sum::<f32>() - 1.0).abs());
        }
    })
    .map_err(e)?;
    ensure(seen == 3, "expected 3 iterations")?;
    ensure(worst <= 1e-6, format!("coupling row sum off by {}", worst))?;
    for cap in v.data().chunks(8) {
        let n = cap.iter().map(|x| x * x).sum::<f32>().sqrt();
        ensure((0.0..1.0).contains(&n), format!("capsule norm {}", n))?;
    }

    // û[i][j]: primary 0 predicts (1,0) and (0,1); primary 1 predicts (1,0)
    // and (0,0.5). Iteration 1 has c = 0.5, s0 = (1,0), s1 = (0,0.75), so
    // v0 = (0.5,0) and v1 = (0,0.36); the logits then grow by the agreements.
    let uhat = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.5]).unwrap();
    let mut cs = Vec::new();
    let (v, _) = route_trace(&uhat, 3, |st| cs.push(st.c.clone())).map_err(e)?;
    let want_c = [
        [0.5, 0.5, 0.5, 0.5],
        [
            0.5349429451582145,
            0.4650570548417855,
            0.5793242521487495,
            0.4206757478512505,
        ],
        [
            0.5940242905025964,
            0.4059757094974035,
            0.6720028414603639,
            0.32799715853963596,
        ],
    ];
    for (it, (got, want)) in cs.iter().zip(want_c).enumerate() {
        for (g, w) in got.data().iter().zip(want) {
            close(*g as f64, w, 1e-6, &format!("c after iteration {}", it + 1))?;
        }
    }
    let want_v = [0.615802016772185, 0.0, 0.0, 0.24520935691549164];
    for (g, w) in v.data().iter().zip(want_v) {
        close(*g as f64, w, 1e-6, "final v")?;
    }
    Ok(format!("max row-sum error {:.1e}", worst))
}

fn losses() -> Outcome {
    let cfg = LossConfig::default();
    let one = |s: f32, t: f32| margin_loss(&Tensor::full(vec![1], s), &Tensor::full(vec![1], t), &cfg).map_err(e);
    close(one(0.9, 1.0)? as f64, 0.0, 0.0, "L(0.9, T=1)")?;
    close(one(0.1, 0.0)? as f64, 0.0, 0.0, "L(0.1, T=0)")?;
    close(one(0.0, 1.0)? as f64, 0.81, 1e-6, "L(0, T=1)")?;
    let rec = reconstruction_loss(&Tensor::ones(vec![3, 2, 2]), &Tensor::zeros(vec![3, 2, 2])).map_err(e)?;
    close(rec as f64, 12.0, 0.0, "reconstruction")?;
    Ok("margin 0 / 0 / 0.81, reconstruction 12".into())
}

fn background() -> Outcome {
    close(background_from_intensity(240.0) as f64, 0.375, 1e-6, "B(240)")?;
    close(background_from_intensity(255.0) as f64, 0.75, 1e-6, "B(255)")?;
    let zero = Tensor::zeros(vec![8, 8]);
    let other = other_activation(&[&zero, &zero, &zero, &zero], &zero, Some(&zero)).map_err(e)?;
    ensure(other.data().iter().all(|&v| v == 0.05), "Other is not constant 0.05")?;
    Ok("0.375 / 0.75, Other 0.05".into())
}

fn saliency() -> Outcome {
    let params = CapsNetParams::init(&cwss::model::ArchitectureConfig::tiny(), 3).map_err(e)?;
    let image = random_input(&[3, 34, 34], 0.0, 1.0, 4);
    let cfg = SmoothGradConfig {
        samples: 5,
        sigma: 0.0,
        seed: 1,
    };
    for label in [0, 13] {
        let sg = smoothgrad(&params, &image, label, &cfg).map_err(e)?;
        let single = normalize_minmax(&class_saliency(&params, &image, label).map_err(e)?);
        ensure(
            sg == single,
            format!("sigma 0 differs from a single pass for label {}", label),
        )?;
    }

    let m = LinearSurrogate {
        weights: random_input(&[3, 3, 6, 5], -1.0, 1.0, 8),
    };
    let image = random_input(&[3, 6, 5], 0.0, 1.0, 2);
    let mut worst = 0.0f32;
    for label in 0..3 {
        let sal = class_saliency(&m, &image, label).map_err(e)?;
        let w = &m.weights.data()[label * 90..(label + 1) * 90];
        for p in 0..30 {
            let want = (0..3).map(|c| w[c * 30 + p].abs()).fold(0.0, f32::max);
            worst = worst.max((sal.data()[p] - want).abs());
        }
    }
    ensure(worst <= 1e-5, format!("surrogate saliency off by {}", worst))?;
    Ok(format!("sigma 0 exact, surrogate error {:.1e}", worst))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut masks = Vec::new();
    for _ in 0..50 {
        let mut m = || LabelMask::new(16, 16, (0..256).map(|_| rng.random_range(0..5u8)).collect()).unwrap();
        masks.push((m(), m()));
    }
    let pairs: Vec<SegPair> = masks.iter().map(|(p, g)| SegPair::new(p, g).unwrap()).collect();
    let mut pooled = [(0u64, 0u64); 5];
    for (p, g) in &masks {
        for (label, acc) in pooled.iter_mut().enumerate() {
            let (mut i, mut u) = (0u64, 0u64);
            for y in 0..16 {
                for x in 0..16 {
                    let (a, b) = (p.get(y, x) as usize == label, g.get(y, x) as usize == label);
                    i += (a && b) as u64;
                    u += (a || b) as u64;
                }
            }
            let want = (u > 0).then(|| i as f64 / u as f64);
            ensure(iou(SegPair::new(p, g).unwrap(), label) == want, "per-pair IoU differs")?;
            acc.0 += i;
            acc.1 += u;
        }
    }
    let rows = class_ious(&pairs, &[0, 1, 2, 3, 4]);
    let brute: Vec<f64> = pooled.iter().map(|&(i, u)| i as f64 / u as f64).collect();
    for (r, &(i, u)) in rows.iter().zip(&pooled) {
        ensure(r.intersection == i && r.union == u, "pooled counts differ")?;
    }
    let miou = mean_defined(&rows).map_err(e)?;
    ensure(miou == brute.iter().sum::<f64>() / 5.0, "mIoU differs")?;

    // left half vs a horizontally shifted half: overlap 1/4, union 3/4
    let half = |offset: usize| {
        LabelMask::new(
            4,
            4,
            (0..16)
                .map(|k| ((k % 4) >= offset && (k % 4) < offset + 2) as u8)
                .collect(),
        )
        .unwrap()
    };
    let (a, b) = (half(0), half(1));
    let got = iou(SegPair::new(&a, &b).unwrap(), 1).unwrap();
    ensure(got == 1.0 / 3.0, format!("half overlap gave {}", got))?;
    Ok(format!("50 pairs exact, mIoU {:.4}, half overlap 1/3", miou))
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn synthetic_end_to_end() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::load(Some(&workspace().join("configs/synthetic.toml")), &[]).map_err(e)?;
    let (train_set, eval_set) = generate_synthetic(&cfg.synth).map_err(e)?;
    ensure(train_set.len() == 600 && eval_set.len() == 100, "wrong split sizes")?;
    let mut params = CapsNetParams::init(&cfg.arch, cfg.train.seed).map_err(e)?;
    train(&train_set, &mut params, &cfg.train, &cfg.loss, None, |_, _, _| Ok(())).map_err(e)?;
    let trained = t.elapsed();

    let classes = observed_classes(&eval_set);
    let mut scores = Vec::new();
    for r in &eval_set {
        scores.push(forward_classify(&r.image, &params).map_err(e)?.0);
    }
    let targets: Vec<Tensor> = eval_set.iter().map(|r| r.targets()).collect();
    let accuracy = cwss::training::classification_metrics(&scores, &targets, cfg.pipeline.threshold, &classes)
        .map_err(e)?
        .accuracy;

    let mut preds = Vec::new();
    for r in &eval_set {
        preds.push(
            run_pipeline(&params, &r.image, Mode::Morphological, &cfg.pipeline)
                .map_err(e)?
                .mask,
        );
    }
    let pairs: Vec<SegPair> = preds
        .iter()
        .zip(&eval_set)
        .map(|(p, r)| SegPair::new(p, r.mask.as_ref().unwrap()).unwrap())
        .collect();
    let miou = mean_defined(&class_ious(&pairs, &mask_universe(Mode::Morphological))).map_err(e)?;

    let white = white_patch(cfg.synth.size);
    let wmask = run_pipeline(&params, &white.image, Mode::Morphological, &cfg.pipeline)
        .map_err(e)?
        .mask;
    let all_bg = wmask.data().iter().all(|&l| l as usize == BACKGROUND);
    let elapsed = t.elapsed();
    let summary = format!(
        "accuracy {:.1}%, mIoU {:.4}, white patch {}, train {:.0?}, total {:.0?}",
        accuracy,
        miou,
        if all_bg { "all Background" } else { "NOT all Background" },
        trained,
        elapsed
    );
    ensure(
        accuracy >= 90.0 && miou >= 0.45 && all_bg && elapsed.as_secs() <= 30 * 60,
        summary.clone(),
    )?;
    Ok(summary)
}

fn deterministic_runs() -> Outcome {
    let dir = tempfile::TempDir::new().map_err(|x| x.to_string())?;
    let cwss = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_cwss"))
            .args(args)
            .args([
                "--set",
                "preset=tiny",
                "--set",
                "synth.size=34",
                "--set",
                "synth.train=16",
            ])
            .args([
                "--set",
                "synth.eval=2",
                "--set",
                "train.epochs=3",
                "--set",
                "train.batch_size=4",
            ])
            .env("CWSS_LOG", "off")
            .output()
            .map_err(|x| x.to_string())?;
        ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
    };
    let p = |x: &Path| x.to_str().unwrap().to_owned();
    let data = dir.path().join("data");
    cwss(&["synth", "--out-dir", &p(&data), "--seed", "11"])?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        cwss(&[
            "train",
            "--data",
            &p(&data.join("train")),
            "--out-dir",
            &p(&out),
            "--deterministic",
            "--seed",
            "11",
        ])?;
        let log = fs::read(out.join("train_log.jsonl")).map_err(|x| x.to_string())?;
        let model = fs::read(out.join("model.cwss")).map_err(|x| x.to_string())?;
        runs.push((log, model));
    }
    ensure(runs[0].0 == runs[1].0, "training logs differ")?;
    ensure(runs[0].1 == runs[1].1, "checkpoints differ")?;

    let bytes = &runs[0].1;
    let ckpt: Checkpoint = load_checkpoint(&dir.path().join("a/model.cwss")).map_err(e)?;
    ensure(&encode(&ckpt).map_err(e)? == bytes, "re-encoding changed the bytes")?;
    ensure(decode(bytes).map_err(e)? == ckpt, "decoded checkpoint differs")?;

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    ensure(
        matches!(
            decode(&flipped),
            Err(Error::Checkpoint(CheckpointError::ChecksumMismatch { .. }))
        ),
        "flipped byte was not detected",
    )?;
    ensure(
        matches!(
            decode(&bytes[..bytes.len() - 9]),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ),
        "truncation was not detected",
    )?;
    let damaged = dir.path().join("damaged.cwss");
    fs::write(&damaged, &flipped).map_err(|x| x.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_cwss"))
        .args([
            "classify",
            "--checkpoint",
            &p(&damaged),
            "--images",
            &p(&data.join("eval/images")),
        ])
        .args(["--out-dir", &p(&dir.path().join("c"))])
        .env("CWSS_LOG", "off")
        .output()
        .map_err(|x| x.to_string())?;
    ensure(out.status.code() == Some(4), "CLI accepted a damaged checkpoint")?;
    Ok(format!(
        "logs and {}-byte checkpoints identical, damage refused",
        bytes.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradients),
        ("routing", routing),
        ("margin and reconstruction loss", losses),
        ("background and Other", background),
        ("SmoothGrad", saliency),
        ("metrics oracle", metrics_oracle),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("determinism and checkpoints", deterministic_runs),
    ];
    let skip_slow = std::env::var_os("CWSS_ACCEPTANCE_FAST").is_some();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if skip_slow && i == 6 {
            println!("criterion {} {}: SKIPPED (CWSS_ACCEPTANCE_FAST)", i + 1, name);
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {} {}: PASS ({})", i + 1, name, detail),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {}: FAIL ({})", i + 1, name, detail);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
