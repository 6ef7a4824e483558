//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach stdout; exits non-zero on any FAIL.

use std::process::ExitCode;
use std::time::Instant;

use epcontrast_core::bench::{bench_loss, BenchConfig, BenchMode, MIB};
use epcontrast_core::encoder::encode_checkpoint;
use epcontrast_core::losses::{count_pairs, LossConfig, LossKind};
use epcontrast_core::numcore::Matrix;
use epcontrast_core::pointcloud::PointCloud;
use epcontrast_core::rng::{derive_seed, RngStream};
use epcontrast_core::superpoint::{kmeans_segments_traced, KMeansConfig};
use epcontrast_core::trainer::{
    channel_redundancy, embed_scenes, generate_scenes, history_csv, linear_probe, pretrain,
    ProbeConfig, ProbeReport, PretrainResult, SyntheticSceneConfig, TrainConfig,
};
use epcontrast_core::verify::{gradient_suite, oracle_suite, SuiteReport};
use epcontrast_core::Error;

const SEED: u64 = 2024;
const SCENES: usize = 32;
const HELD_OUT: usize = 8;
const EPOCHS: usize = 20;
const SEGMENTS: usize = 32;
const CHANNELS: usize = 32;
const FRACTIONS: [f64; 2] = [1.0, 0.001];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, o: Outcome) {
    println!(
        "[{}] criterion {id} {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    results.push(o.pass);
}

fn suite_detail(r: &SuiteReport, secs: f64, limit: f64) -> String {
    format!(
        "{} checks, worst relative error {:.3e} (tol {:.0e}), {} failures, {secs:.2}s of {limit}s",
        r.checks,
        r.worst,
        r.tolerance,
        r.failures.len()
    )
}

fn c1_oracle() -> Outcome {
    let start = Instant::now();
    match oracle_suite(100, SEED) {
        Ok(r) => {
            let secs = start.elapsed().as_secs_f64();
            outcome(r.passed() && secs < 60.0, suite_detail(&r, secs, 60.0))
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    match gradient_suite(20, SEED) {
        Ok(r) => {
            let secs = start.elapsed().as_secs_f64();
            outcome(r.passed() && secs < 120.0, suite_detail(&r, secs, 120.0))
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn c3_scaling() -> Outcome {
    let start = Instant::now();
    let sizes = vec![1000, 2000, 4000, 8000];
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, target) in [(LossKind::Pc, 2.0), (LossKind::Ag, 1.0), (LossKind::Cc, 0.0)] {
        let cfg = BenchConfig {
            seed: SEED,
            ..BenchConfig::new(kind, sizes.clone())
        };
        let rep = match bench_loss(&cfg) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{kind}: {e}")),
        };
        for row in &rep.rows {
            let n = row.n as u64;
            let expected = match kind {
                LossKind::Pc => n * n - n,
                LossKind::Ag => n * 31,
                _ => 32 * 32 - 32,
            };
            if row.counts.negatives != expected || row.counts != count_pairs(kind, row.n, 32, 32) {
                pass = false;
                parts.push(format!("{kind} n={} negatives {} != {expected}", row.n, row.counts.negatives));
            }
        }
        let ne = rep.negatives_exponent.unwrap_or(f64::NAN);
        let be = rep.bytes_exponent.unwrap_or(f64::NAN);
        pass &= (ne - target).abs() <= 0.05 && (be - target).abs() <= 0.05;
        parts.push(format!(
            "{kind} exponents negatives {ne:.3} bytes {be:.3} (time {:.2})",
            rep.time_exponent.unwrap_or(f64::NAN)
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    parts.push(format!("{secs:.1}s of 120s"));
    outcome(pass, parts.join("; "))
}

fn c4_budget() -> Outcome {
    let budget = 256 * MIB;
    let run = |kind, m| {
        bench_loss(&BenchConfig {
            m,
            budget: Some(budget),
            mode: BenchMode::CountOnly,
            ..BenchConfig::new(kind, vec![65536])
        })
    };
    let pc = run(LossKind::Pc, 32);
    let ag = run(LossKind::Ag, 2000);
    let pc_ok = matches!(pc, Err(Error::Budget { n: 65536, .. }));
    let ag_ok = ag.is_ok();
    let describe = |r: &epcontrast_core::Result<_>| match r {
        Ok(_) => "fits".to_string(),
        Err(e) => e.to_string(),
    };
    outcome(
        pc_ok && ag_ok,
        format!(
            "budget {budget} B (accounted 8 B per similarity entry); pc N=65536: {}; ag N=65536 M=2000: {}",
            describe(&pc),
            describe(&ag)
        ),
    )
}

fn random_cloud(n: usize, stream: &mut RngStream) -> PointCloud {
    let pos = Matrix::from_vec(n, 3, (0..n * 3).map(|_| stream.uniform(0.0, 5.0)).collect()).unwrap();
    let col = Matrix::from_vec(n, 3, (0..n * 3).map(|_| stream.uniform(0.0, 1.0)).collect()).unwrap();
    PointCloud::new(pos, col, None).unwrap()
}

fn two_blobs(stream: &mut RngStream) -> (PointCloud, Vec<usize>) {
    let mut pos = Vec::new();
    let mut truth = Vec::new();
    for (b, center) in [[0.0, 0.0, 0.0], [10.0, 10.0, 10.0]].into_iter().enumerate() {
        for _ in 0..50 {
            for c in center {
                pos.push(c + 0.3 * stream.standard_normal());
            }
            truth.push(b);
        }
    }
    let n = truth.len();
    let cloud = PointCloud::new(
        Matrix::from_vec(n, 3, pos).unwrap(),
        Matrix::from_vec(n, 3, vec![0.5; n * 3]).unwrap(),
        None,
    )
    .unwrap();
    (cloud, truth)
}

/// Returns the outcome and a fingerprint of every assignment and trace.
fn c5_partitions() -> (Outcome, Vec<u8>) {
    let start = Instant::now();
    let mut fingerprint = Vec::new();
    let mut bad = Vec::new();
    for run in 0..1000u64 {
        let mut s = RngStream::new(derive_seed(SEED, run));
        let n = 20 + s.below(381);
        let m = 2 + s.below(39);
        let cloud = random_cloud(n, &mut s);
        let cfg = KMeansConfig {
            target_segments: m,
            seed: run,
            ..KMeansConfig::default()
        };
        let r = kmeans_segments_traced(&cloud, &cfg);
        let a = &r.assignment;
        let sizes = a.sizes();
        let covering = a.num_points() == n && a.segment_of().iter().all(|&id| id < a.num_segments());
        let non_empty = sizes.iter().all(|&k| k > 0) && sizes.iter().sum::<usize>() == n;
        let monotone = r.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        if !(covering && non_empty && monotone && a.num_segments() == m.min(n)) {
            bad.push(run);
        }
        fingerprint.extend(a.segment_of().iter().flat_map(|v| (*v as u64).to_le_bytes()));
        fingerprint.extend(r.objective.iter().flat_map(|v| v.to_le_bytes()));
    }
    let mut recovered = 0;
    for seed in 0..20u64 {
        let (cloud, truth) = two_blobs(&mut RngStream::new(derive_seed(SEED ^ 0xb10b, seed)));
        let cfg = KMeansConfig {
            target_segments: 2,
            seed,
            ..KMeansConfig::default()
        };
        let ids = kmeans_segments_traced(&cloud, &cfg).assignment.segment_of().to_vec();
        let same = ids.iter().zip(&truth).all(|(a, b)| a == b);
        let flipped = ids.iter().zip(&truth).all(|(a, b)| *a != *b);
        if same || flipped {
            recovered += 1;
        }
    }
    let pass = bad.is_empty() && recovered == 20;
    (
        outcome(
            pass,
            format!(
                "1000 runs, {} violations {:?}; two-blob recovery {recovered}/20 ({:.1}s)",
                bad.len(),
                &bad[..bad.len().min(5)],
                start.elapsed().as_secs_f64()
            ),
        ),
        fingerprint,
    )
}

/// Everything criteria 6-8 need for one seed.
struct SeedRun {
    main: PretrainResult,
    one_epoch: PretrainResult,
    no_channel: PretrainResult,
    probes: Vec<(ProbeReport, ProbeReport, ProbeReport)>,
    redundancy: (f64, f64, f64),
    seconds: f64,
}

fn train_cfg(seed: u64, epochs: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        channels: CHANNELS,
        loss_kind: LossKind::Ep,
        loss: LossConfig {
            lambda,
            ..LossConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

fn run_seed(seed: u64, with_extras: bool) -> SeedRun {
    let scene_cfg = SyntheticSceneConfig {
        seed,
        ..SyntheticSceneConfig::default()
    };
    let scenes = generate_scenes(&scene_cfg, SCENES).unwrap();
    let held = generate_scenes(
        &SyntheticSceneConfig {
            seed: derive_seed(seed, 0xe7a1),
            ..scene_cfg
        },
        HELD_OUT,
    )
    .unwrap();
    assert_eq!(scenes[0].len(), 1024);
    let km = KMeansConfig {
        target_segments: SEGMENTS,
        seed,
        ..KMeansConfig::default()
    };

    let start = Instant::now();
    let main = pretrain(&scenes, &train_cfg(seed, EPOCHS, 0.1), &km).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let one_epoch = pretrain(&scenes, &train_cfg(seed, 1, 0.1), &km).unwrap();
    let no_channel = if with_extras {
        pretrain(&scenes, &train_cfg(seed, EPOCHS, 0.0), &km).unwrap()
    } else {
        one_epoch.clone()
    };

    let probes = FRACTIONS
        .iter()
        .map(|&label_fraction| {
            let cfg = ProbeConfig {
                label_fraction,
                seed,
                ..ProbeConfig::default()
            };
            (
                linear_probe(main.params(), &scenes, &held, &cfg).unwrap(),
                linear_probe(&main.initial, &scenes, &held, &cfg).unwrap(),
                linear_probe(one_epoch.params(), &scenes, &held, &cfg).unwrap(),
            )
        })
        .collect();
    let red = |p| channel_redundancy(&embed_scenes(p, &held).unwrap());
    let redundancy = (red(&main.initial), red(main.params()), red(no_channel.params()));
    SeedRun {
        main,
        one_epoch,
        no_channel,
        probes,
        redundancy,
        seconds,
    }
}

fn fingerprint(runs: &[SeedRun]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in runs {
        for p in [&r.main, &r.one_epoch, &r.no_channel] {
            out.extend(encode_checkpoint(p.params()));
            out.extend(history_csv(&p.history).into_bytes());
        }
        for (a, b, c) in &r.probes {
            out.extend(format!("{a:?}{b:?}{c:?}").into_bytes());
        }
        let (x, y, z) = r.redundancy;
        for v in [x, y, z] {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn c6_training(runs: &[SeedRun]) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for (seed, r) in runs.iter().take(3).enumerate() {
        let losses: Vec<f64> = r.main.history.iter().map(|h| h.loss).collect();
        let q = losses.len() / 4;
        let first = median(&losses[..q]);
        let last = median(&losses[losses.len() - q..]);
        if last < first && r.seconds < 600.0 {
            wins += 1;
        }
        parts.push(format!(
            "seed {seed}: {} steps, median loss {first:.4} -> {last:.4}, {:.1}s",
            losses.len(),
            r.seconds
        ));
    }
    outcome(wins == 3, format!("{wins}/3 seeds; {}", parts.join("; ")))
}

fn c7_probe(runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (fi, frac) in FRACTIONS.iter().enumerate() {
        let full = runs.iter().filter(|r| r.probes[fi].0.accuracy > r.probes[fi].1.accuracy).count();
        let oet = runs.iter().filter(|r| r.probes[fi].2.accuracy > r.probes[fi].1.accuracy).count();
        pass &= full >= 4 && oet >= 3;
        let accs: Vec<String> = runs
            .iter()
            .map(|r| {
                let (a, b, c) = &r.probes[fi];
                format!("{:.3}/{:.3}/{:.3}", a.accuracy, c.accuracy, b.accuracy)
            })
            .collect();
        parts.push(format!(
            "fraction {frac}: pretrained wins {full}/5, one-epoch wins {oet}/5 [pre/one-epoch/random {}]",
            accs.join(" ")
        ));
    }
    outcome(pass, parts.join("; "))
}

fn c8_redundancy(runs: &[SeedRun]) -> Outcome {
    let runs = &runs[..3];
    let lowered = runs.iter().filter(|r| r.redundancy.1 < r.redundancy.0).count();
    let drop = |f: fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let with = drop(|r| r.redundancy.0 - r.redundancy.1);
    let without = drop(|r| r.redundancy.0 - r.redundancy.2);
    let vals: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}->{:.3} (lambda=0: {:.3})", r.redundancy.0, r.redundancy.1, r.redundancy.2))
        .collect();
    outcome(
        lowered == 3 && without < with,
        format!(
            "lowered {lowered}/3, mean drop {with:.4} with lambda=0.1 vs {without:.4} with lambda=0; {}",
            vals.join(", ")
        ),
    )
}

fn experiments() -> Vec<SeedRun> {
    (0..5u64).map(|s| run_seed(SEED + s, s < 3)).collect()
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, 1, "oracle equivalence", c1_oracle());
    report(&mut results, 2, "gradient checks", c2_gradients());
    report(&mut results, 3, "complexity scaling", c3_scaling());
    report(&mut results, 4, "memory feasibility under 256 MiB", c4_budget());
    let (c5, fp5) = c5_partitions();
    report(&mut results, 5, "partition invariants", c5);

    let t = Instant::now();
    let runs = experiments();
    println!(
        "(criteria 6-8 share one set of runs: {:.1}s of training and probing)",
        t.elapsed().as_secs_f64()
    );
    report(&mut results, 6, "training smoke", c6_training(&runs));
    report(&mut results, 7, "probe: pretrained beats random init", c7_probe(&runs));
    report(&mut results, 8, "channel decorrelation", c8_redundancy(&runs));

    let t = Instant::now();
    let (_, fp5_again) = c5_partitions();
    let again = experiments();
    let same5 = fp5 == fp5_again;
    let same68 = fingerprint(&runs) == fingerprint(&again);
    let verdict = |same| if same { "bit-identical" } else { "DIFFER" };
    report(
        &mut results,
        9,
        "determinism",
        outcome(
            same5 && same68,
            format!(
                "repeat of criteria 5-8: partitions {}, checkpoints/histories/reports {} ({:.1}s)",
                verdict(same5),
                verdict(same68),
                t.elapsed().as_secs_f64()
            ),
        ),
    );

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
