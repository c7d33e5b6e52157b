//! The twelve acceptance criteria, run in order inside one test so the
//! CPU-time budgets are measured without interference from sibling tests.
//! Criteria 10 and 11 train full-size models for minutes to hours; they run
//! only when `ACCEPTANCE_FULL=1` and are reported as SKIP otherwise.

mod common;

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgmps_core::gmm::{GmmModel, GmmOptions};
use rgmps_core::harness::dataset::{self, TEST_SEED_BASE};
use rgmps_core::harness::scene::GRASP_DIMS;
use rgmps_core::harness::{evaluate, sweep, DEFAULT_EPS};
use rgmps_core::lgss::{compute_accuracy, select_skill, ShapeCategory, Skill};
use rgmps_core::model::{checkpoint, overfit, train, ModelKind, OptimizerConfig, RasNet, RasNetConfig, TrainConfig};
use rgmps_core::sdfe::{spatial_mask, spike_neuron_step};
use rgmps_core::spatial::{wkv_scan, WkvMode};

use common::*;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Process CPU time in seconds.
fn cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0);
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

fn full_run() -> bool {
    std::env::var("ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn c1_wkv_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..250 {
        let len = rng.gen_range(1..=64);
        let c = rng.gen_range(1..=8);
        let seq = random_sequence(&mut rng, len, c);
        worst = worst.max(max_rel_diff(&wkv_scan(&seq, WkvMode::Adaptive).unwrap(), &wkv_closed_form(&seq)));
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(worst <= 1e-9 && secs < 10.0, format!("250 instances, max rel err {worst:.2e}, {secs:.2}s"))
}

fn c2_wkv_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.gen_range(1..=64);
        let c = rng.gen_range(1..=8);
        let mut seq = random_sequence(&mut rng, len, c);
        let out = wkv_scan(&seq, WkvMode::Adaptive).unwrap();
        for (o, v) in out[0].iter().zip(&seq.values[0]) {
            worst = worst.max((o - v).abs());
        }
        let constant: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        seq.values = vec![constant.clone(); len];
        for row in wkv_scan(&seq, WkvMode::Adaptive).unwrap() {
            for (o, v) in row.iter().zip(&constant) {
                worst = worst.max((o - v).abs());
            }
        }
    }
    verdict(worst <= 1e-9, format!("first output and constant fixed point, max err {worst:.2e}"))
}

fn c3_gradients() -> Outcome {
    let started = cpu_seconds();
    let mut primitive: f64 = 0.0;
    let cases = primitive_cases();
    for (i, c) in cases.iter().enumerate() {
        for seed in 0..3 {
            primitive = primitive.max(check_case(c, 100 * i as u64 + seed).unwrap());
        }
    }
    let full = full_model_grad_error(3).max_rel_error;
    let secs = cpu_seconds() - started;
    verdict(
        primitive <= 1e-4 && full <= 1e-3 && secs < 300.0,
        format!("{} primitives max {primitive:.2e}, full model {full:.2e}, {secs:.0} CPU s", cases.len()),
    )
}

fn c4_rope() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = 2 * rng.gen_range(1..=4);
        let a: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut coord = || (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let (p, q, s) = (coord(), coord(), coord());
        let shift = s.0 + s.1;
        let split = rng.gen_range(0.0..1.0);
        let before = rotated_inner(&a, p, &b, q);
        let after = rotated_inner(&a, (p.0 + s.0, p.1 + s.1), &b, (q.0 + split * shift, q.1 + (1.0 - split) * shift));
        worst = worst.max((before - after).abs());
    }
    verdict(worst <= 1e-10, format!("100 cases, max deviation {worst:.2e}"))
}

fn c5_spikes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut violations = 0;
    let mut fired = 0;
    let mut h: f64 = 0.0;
    for _ in 0..10_000 {
        let drive = rng.gen_range(-1.0..1.5);
        let tau = rng.gen_range(0.1..10.0);
        let threshold = rng.gen_range(0.2..2.0);
        let reset = rng.gen_range(-0.3..0.3);
        let s = spike_neuron_step(h, drive, tau, threshold, reset).unwrap();
        let binary = s.spike == 0.0 || s.spike == 1.0;
        let rule = if s.spike == 1.0 {
            s.memory == reset && s.potential >= threshold
        } else {
            s.memory == s.potential * (-1.0 / tau).exp() && s.potential < threshold
        };
        violations += usize::from(!(binary && rule && s.potential == h + drive));
        fired += s.spike as usize;
        h = s.memory;
    }
    let d = (-0.5f64).exp();
    let v2 = 0.6 * d + 0.6;
    let v3 = v2 * d + 0.6;
    let expected = [(0.6, 0.0, 0.6 * d), (v2, 0.0, v2 * d), (v3, 1.0, 0.0), (0.6, 0.0, 0.6 * d)];
    let mut h = 0.0;
    let mut trace_ok = true;
    for &(v, s, m) in &expected {
        let step = spike_neuron_step(h, 0.6, 2.0, 1.0, 0.0).unwrap();
        trace_ok &= (step.potential, step.spike, step.memory) == (v, s, m);
        h = step.memory;
    }
    verdict(
        violations == 0 && trace_ok,
        format!("10^4 steps ({fired} spikes), {violations} violations, hand trace {}", if trace_ok { "exact" } else { "differs" }),
    )
}

fn c6_mask() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst: f64 = 0.0;
    for n in 1..=16 {
        for c in 1..=4 {
            let b: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = spatial_mask(&b, n, c).unwrap();
            let naive = naive_mask(&b, n, c);
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((x[i * n + j] - naive[i * n + j]).abs()).max((x[i * n + j] - x[j * n + i]).abs());
                }
            }
        }
    }
    verdict(worst <= 1e-12, format!("n <= 16, c' <= 4, max deviation {worst:.2e}"))
}

fn c7_gmm() -> Outcome {
    use rand_distr::{Distribution, Normal};
    let mut monotone = true;
    let mut fits = 0;
    let mut check = |g: &GmmModel| {
        fits += 1;
        monotone &= g.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    };

    let planted = [[0.0, 0.0], [6.0, 1.0], [2.0, 7.0]];
    let noise = Normal::new(0.0, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut pts = Vec::new();
    for _ in 0..200 {
        for m in &planted {
            pts.push(vec![m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]);
        }
    }
    let g3 = GmmModel::fit(&pts, &GmmOptions { k: 3, ..Default::default() }).unwrap();
    check(&g3);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let recovery = perms
        .iter()
        .map(|p| {
            (0..3)
                .map(|i| ((planted[i][0] - g3.means[p[i]][0]).powi(2) + (planted[i][1] - g3.means[p[i]][1]).powi(2)).sqrt())
                .sum::<f64>()
                / 3.0
        })
        .fold(f64::INFINITY, f64::min);

    let actions: Vec<Vec<f64>> = dataset::generate(200, 7).unwrap().into_iter().map(|d| d.action).collect();
    let g6 = GmmModel::fit(&actions, &GmmOptions { omega: Some(GRASP_DIMS.to_vec()), ..Default::default() }).unwrap();
    check(&g6);
    for seed in 1..4 {
        check(&GmmModel::fit(&actions, &GmmOptions { seed, ..Default::default() }).unwrap());
    }
    let mut mismatches = 0;
    for _ in 0..1000 {
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sub: Vec<f64> = GRASP_DIMS.iter().map(|&i| a[i]).collect();
        let j = brute_force_nearest(&sub, &g6.means, &g6.covariances);
        let refined = g6.refine_action(&a).unwrap();
        if refined[..2] != a[..2] || refined[2..] != g6.means[j][..] {
            mismatches += 1;
        }
    }
    verdict(
        monotone && recovery <= 0.3 && mismatches == 0 && g6.k == 6,
        format!("{fits} fits monotone={monotone}, planted error {recovery:.3}, {mismatches}/1000 refine mismatches"),
    )
}

fn c8_accuracy() -> Outcome {
    let acc = compute_accuracy(0.85, 0.76).unwrap();
    verdict((acc - 0.65).abs() <= 0.005, format!("0.85 x 0.76 = {acc:.4}"))
}

fn c9_skills() -> Outcome {
    let anchored = select_skill(ShapeCategory::Cylindrical, true, true) == Some(Skill::SideGrasp)
        && select_skill(ShapeCategory::Crushed, true, true) == Some(Skill::TopPinch)
        && select_skill(ShapeCategory::Cylindrical, false, true) == Some(Skill::LiftUp);
    let mut total = true;
    let mut cells = 0;
    for shape in ShapeCategory::ALL {
        for lateral in [false, true] {
            for top in [false, true] {
                cells += 1;
                // Defined everywhere: a grasp when any side is clear, a refusal otherwise.
                total &= match select_skill(shape, lateral, top) {
                    Some(s) => s.is_grasp() && (lateral || top),
                    None => !lateral && !top,
                };
            }
        }
    }
    verdict(anchored && total, format!("anchored={anchored}, {cells} cells total={total}"))
}

fn c10_desk() -> Outcome {
    let mut net = RasNet::new(RasNetConfig::default()).unwrap();
    let sample = dataset::to_sample(&dataset::generate(1, 42).unwrap()[0]);
    let overfit_loss = *overfit(&mut net, &sample, 200, OptimizerConfig::adam()).unwrap().last().unwrap();
    if !full_run() {
        let detail = format!("overfit loss {overfit_loss:.2e}; training run needs ACCEPTANCE_FULL=1");
        return if overfit_loss <= 1e-4 { Outcome::Skip(detail) } else { Outcome::Fail(detail) };
    }
    let started = cpu_seconds();
    let train_set: Vec<_> = dataset::generate(200, 0).unwrap().iter().map(dataset::to_sample).collect();
    let test_demos = dataset::generate(200, TEST_SEED_BASE).unwrap();
    let test_set: Vec<_> = test_demos.iter().map(dataset::to_sample).collect();
    let mut net = RasNet::new(RasNetConfig::default()).unwrap();
    train(&mut net, &train_set, &TrainConfig::default(), |m| {
        eprintln!("  criterion 10: epoch {} loss {:.5}", m.epoch, m.train_loss);
        Ok(())
    })
    .unwrap();
    let secs = cpu_seconds() - started;
    let plain = evaluate(&mut net, &test_set, DEFAULT_EPS, None).unwrap();
    let actions: Vec<Vec<f64>> = dataset::generate(200, 0).unwrap().into_iter().map(|d| d.action).collect();
    let gmm = GmmModel::fit(&actions, &GmmOptions { omega: Some(GRASP_DIMS.to_vec()), ..Default::default() }).unwrap();
    let refined = evaluate(&mut net, &test_set, DEFAULT_EPS, Some(&gmm)).unwrap();
    verdict(
        plain.success_rate >= 0.90 && secs <= 1800.0 && overfit_loss <= 1e-4,
        format!(
            "success {:.3} (with mixture {:.3}), mean joint err {:.4} rad, {:.0} CPU s, overfit loss {overfit_loss:.2e}",
            plain.success_rate, refined.success_rate, plain.mean_joint_error, secs
        ),
    )
}

fn c11_sweep() -> Outcome {
    if !full_run() {
        return Outcome::Skip("needs ACCEPTANCE_FULL=1".into());
    }
    let started = cpu_seconds();
    let rows = sweep::run_sweep(&sweep::SweepConfig::default(), |r| {
        eprintln!("  criterion 11: {} n={} seed={} success {:.3}", r.model.as_str(), r.n, r.seed, r.success_rate);
        Ok(())
    })
    .unwrap();
    let secs = cpu_seconds() - started;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    sweep::write_csv(&path, &rows).unwrap();
    let text = std::fs::read(&path).unwrap();
    let header_ok = text.starts_with(sweep::CSV_HEADER.join(",").as_bytes());
    let parsed = sweep::parse_csv(&text).unwrap();
    let schema_ok = header_ok && parsed == rows && rows.len() == 30;
    let ras = sweep::mean_success(&rows, ModelKind::Rasnet, 40).unwrap();
    let cnn = sweep::mean_success(&rows, ModelKind::Cnn, 40).unwrap();
    verdict(
        schema_ok && secs <= 4.0 * 3600.0 && ras >= cnn,
        format!("{} rows, schema ok={schema_ok}, N=40 rasnet {ras:.3} vs cnn {cnn:.3}, {:.0} CPU s", rows.len(), secs),
    )
}

fn c12_determinism() -> Outcome {
    let samples: Vec<_> = dataset::generate(6, 5).unwrap().iter().map(dataset::to_sample).collect();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = RasNet::new(tiny_config()).unwrap();
        train(&mut net, &samples, &tc, |_| Ok(())).unwrap();
        let bytes = checkpoint::encode(&net).unwrap();
        let report = evaluate(&mut net, &samples, DEFAULT_EPS, None).unwrap();
        (bytes, serde_json::to_string(&report).unwrap())
    };
    let (ckpt_a, report_a) = run();
    let (ckpt_b, report_b) = run();
    let dir = tempfile::tempdir().unwrap();
    let (scene, registry) = write_skill_library(dir.path());
    let first = serde_json::to_string(&infer("I want Fanta", &scene, &registry, true).unwrap()).unwrap();
    let second_dir = tempfile::tempdir().unwrap();
    let (scene, registry) = write_skill_library(second_dir.path());
    let second = serde_json::to_string(&infer("I want Fanta", &scene, &registry, true).unwrap()).unwrap();
    let same_ckpt = ckpt_a == ckpt_b
        && std::fs::read(dir.path().join("policy.ckpt")).unwrap() == std::fs::read(second_dir.path().join("policy.ckpt")).unwrap();
    verdict(
        same_ckpt && report_a == report_b && first == second,
        format!("checkpoints {same_ckpt}, reports {}, traces {}", report_a == report_b, first == second),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("wkv oracle equivalence", c1_wkv_oracle),
        ("wkv trivial identities", c2_wkv_identities),
        ("gradient suite", c3_gradients),
        ("rope relative property", c4_rope),
        ("spike dynamics", c5_spikes),
        ("spatial mask", c6_mask),
        ("gmm", c7_gmm),
        ("accuracy arithmetic", c8_accuracy),
        ("skill selection", c9_skills),
        ("end-to-end desk experiment", c10_desk),
        ("data-efficiency sweep", c11_sweep),
        ("determinism", c12_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed.push(i + 1);
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        // Written past the test harness's capture so the summary always shows.
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {:>2} {tag} {name}: {detail}", i + 1).unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
