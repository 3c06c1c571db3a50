//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Criteria 5 and 6 train the default 64px network and take several minutes.

use std::io::Cursor;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use msce_core::ablation::{self, AblationOptions};
use msce_core::loss::{self, ScaleTarget};
use msce_core::net::{self, checkpoint};
use msce_core::tensor::{
    pool1d, pool1d_backward, pool2d, pool2d_backward, reduce_axes, reduce_axes_backward,
};
use msce_core::trainer::{self, r_aed};
use msce_core::{
    synth, CoordLabel, Error, HeadConfig, LossConfig, LossKind, NetConfig, PoolKind, ReduceKind,
    Sample, SynthSpec, Tensor, TrainConfig, DESK_LR0,
};

const H: f64 = 1e-6;
const SEEDS: u64 = 20;
const DESK_EPOCHS: usize = 15;
const GRID_EPOCHS: usize = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn normal(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

// Central differences, one coordinate at a time.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + H;
        let up = f(&probe);
        probe[i] = x[i] - H;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * H));
    }
    out
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn criterion_gradients() -> Outcome {
    let mut worst: Vec<(&str, f64, f64)> = Vec::new();
    let mut record =
        |name: &'static str, err: f64, tol: f64| match worst.iter_mut().find(|w| w.0 == name) {
            Some(w) => w.1 = w.1.max(err),
            None => worst.push((name, err, tol)),
        };

    for seed in 0..SEEDS {
        let mut rng = SplitMix64::seed_from_u64(0xacce_0000 + seed);
        let c = 16;
        let t = rng.random_range(0..c);
        let s = normal(&mut rng, c, 3.0);

        let analytic = loss::sce(&Tensor::vector(s.clone()), t).unwrap().grad;
        let numeric = numeric_grad(&s, |v| {
            loss::sce(&Tensor::vector(v.to_vec()), t).unwrap().loss
        });
        record("sce", rel_err(analytic.data(), &numeric), 1e-5);

        let analytic = loss::mse_sigmoid(&Tensor::vector(s.clone()), t)
            .unwrap()
            .grad;
        let numeric = numeric_grad(&s, |v| {
            loss::mse_sigmoid(&Tensor::vector(v.to_vec()), t)
                .unwrap()
                .loss
        });
        record("mse_sigmoid", rel_err(analytic.data(), &numeric), 1e-5);

        // Three independent branches of 16, 8 and 4 logits.
        let sizes = [16, 8, 4];
        let weights = [1.0, 0.5, 2.0];
        let target = ScaleTarget::new(t, c, 3).unwrap();
        let flat = normal(&mut rng, 28, 3.0);
        let split = |v: &[f64]| {
            vec![
                Tensor::vector(v[..16].to_vec()),
                Tensor::vector(v[16..24].to_vec()),
                Tensor::vector(v[24..].to_vec()),
            ]
        };
        let out = loss::msce(&split(&flat), &target, &weights).unwrap();
        let analytic: Vec<f64> = out.grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let numeric = numeric_grad(&flat, |v| {
            loss::msce(&split(v), &target, &weights).unwrap().loss
        });
        assert_eq!(analytic.len(), sizes.iter().sum::<usize>());
        record("msce", rel_err(&analytic, &numeric), 1e-5);

        for kind in [PoolKind::Max, PoolKind::Average] {
            let x = normal(&mut rng, 16, 1.0);
            let r = normal(&mut rng, 8, 1.0);
            let analytic =
                pool1d_backward(&Tensor::vector(x.clone()), kind, &Tensor::vector(r.clone()))
                    .unwrap();
            let numeric = numeric_grad(&x, |v| {
                dot(
                    &r,
                    pool1d(&Tensor::vector(v.to_vec()), kind).unwrap().data(),
                )
            });
            record("pool1d", rel_err(analytic.data(), &numeric), 1e-5);

            let x = normal(&mut rng, 64, 1.0);
            let r = normal(&mut rng, 16, 1.0);
            let img = |v: &[f64]| Tensor::new(vec![8, 8], v.to_vec()).unwrap();
            let up = Tensor::new(vec![4, 4], r.clone()).unwrap();
            let analytic = pool2d_backward(&img(&x), kind, &up).unwrap();
            let numeric = numeric_grad(&x, |v| dot(&r, pool2d(&img(v), kind).unwrap().data()));
            record("pool2d", rel_err(analytic.data(), &numeric), 1e-5);
        }

        for kind in [ReduceKind::Sum, ReduceKind::Mean] {
            let x = normal(&mut rng, 48, 1.0);
            let (rx, ry) = (normal(&mut rng, 8, 1.0), normal(&mut rng, 6, 1.0));
            let map = |v: &[f64]| Tensor::new(vec![6, 8], v.to_vec()).unwrap();
            let analytic = reduce_axes_backward(
                kind,
                &Tensor::vector(rx.clone()),
                &Tensor::vector(ry.clone()),
            )
            .unwrap();
            let numeric = numeric_grad(&x, |v| {
                let (a, b) = reduce_axes(&map(v), kind).unwrap();
                dot(&rx, a.data()) + dot(&ry, b.data())
            });
            record("reduce_axes", rel_err(analytic.data(), &numeric), 1e-5);
        }

        record("network_s8", network_error(seed), 1e-4);
    }

    let failed: Vec<_> = worst
        .iter()
        .filter(|w| w.1.partial_cmp(&w.2) != Some(std::cmp::Ordering::Less))
        .map(|w| w.0)
        .collect();
    let detail = worst
        .iter()
        .map(|(n, e, _)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(failed.is_empty(), format!("{SEEDS} seeds; worst: {detail}"))
}

// End-to-end check on an 8px network: 48 randomly chosen parameters against
// central differences of the full sample loss.
fn network_error(seed: u64) -> f64 {
    let mut rng = SplitMix64::seed_from_u64(0xe2e0_0000 + seed);
    let (pool, reduce) = if seed % 2 == 0 {
        (PoolKind::Max, ReduceKind::Sum)
    } else {
        (PoolKind::Average, ReduceKind::Mean)
    };
    let loss = match seed % 3 {
        0 => LossConfig::msce(3).unwrap(),
        1 => LossConfig::sce(),
        _ => LossConfig::mse_sigmoid(),
    };
    let cfg = NetConfig {
        input_size: 8,
        widths: vec![2, 4],
        head: HeadConfig {
            pool,
            reduce,
            scales: 3,
        },
        ..NetConfig::default()
    };
    let mut params = net::init(&cfg, seed).unwrap();
    for layer in &mut params.layers {
        let n = layer.bias.len();
        layer
            .bias
            .data_mut()
            .copy_from_slice(&normal(&mut rng, n, 0.1));
    }
    let image: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
    let sample = Sample {
        image: Tensor::new(vec![1, 8, 8], image).unwrap(),
        label: CoordLabel {
            x: (rng.random_range(0..8) as f64 + 0.5) / 8.0,
            y: (rng.random_range(0..8) as f64 + 0.5) / 8.0,
        },
    };
    let (_, grads) = trainer::sample_loss_grad(&params, &sample, &loss).unwrap();
    let n = params.param_count();
    let picks: Vec<usize> = (0..48).map(|_| rng.random_range(0..n)).collect();
    let analytic: Vec<f64> = picks.iter().map(|&i| grads.get_flat(i)).collect();
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&i| {
            let orig = params.get_flat(i);
            let mut at = |v: f64| {
                params.set_flat(i, v);
                trainer::sample_loss(&params, &sample, &loss).unwrap().0
            };
            let d = (at(orig + H) - at(orig - H)) / (2.0 * H);
            params.set_flat(i, orig);
            d
        })
        .collect();
    rel_err(&analytic, &numeric)
}

fn criterion_degeneracy() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(0xde9e);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = 1usize << rng.random_range(1..9);
        let t = rng.random_range(0..c);
        let s = Tensor::vector(normal(&mut rng, c, 5.0));
        let single = loss::sce(&s, t).unwrap();
        let multi = loss::msce(
            std::slice::from_ref(&s),
            &ScaleTarget::new(t, c, 1).unwrap(),
            &[1.0],
        )
        .unwrap();
        worst = worst.max((single.loss - multi.loss).abs());
        for (a, b) in single.grad.data().iter().zip(multi.grads[0].data()) {
            worst = worst.max((a - b).abs());
        }
    }

    let data = synth::generate(&SynthSpec {
        size: 16,
        count: 20,
        seed: 5,
        ..SynthSpec::default()
    })
    .unwrap();
    let net_cfg = NetConfig {
        input_size: 16,
        widths: vec![2, 4],
        head: HeadConfig {
            scales: 1,
            ..HeadConfig::default()
        },
        ..NetConfig::default()
    };
    let base = TrainConfig {
        lr0: DESK_LR0,
        max_epochs: 4,
        patience: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let msce = TrainConfig {
        loss: LossConfig::msce(1).unwrap(),
        ..base.clone()
    };
    let sce = TrainConfig {
        loss: LossConfig::sce(),
        ..base
    };
    let (pa, ra) = trainer::train(&data.samples, &net_cfg, &msce).unwrap();
    let (pb, rb) = trainer::train(&data.samples, &net_cfg, &sce).unwrap();
    let same_run = ra == rb && ra.to_csv().unwrap() == rb.to_csv().unwrap();
    let same_params = pa
        .flat()
        .iter()
        .zip(pb.flat())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        worst < 1e-15 && same_run && same_params,
        format!("max |msce(M=1) - sce| over 1000 vectors = {worst:.1e}; run records identical: {same_run}; params identical: {same_params}"),
    )
}

fn shared(k: usize, gt: usize, scales: usize) -> usize {
    (0..scales).filter(|m| k >> m == gt >> m).count()
}

fn criterion_landscape() -> Outcome {
    let (c, gt) = (256, 70);
    let mut notes = Vec::new();

    let mse = loss::landscape(&LossConfig::mse_sigmoid(), c, gt, loss::DEFAULT_AMPLITUDE).unwrap();
    let quad_err = mse
        .iter()
        .enumerate()
        .map(|(k, v)| (v - ((k as f64 - 70.0) / 185.0).powi(2)).abs())
        .fold(0.0, f64::max);
    let unique_min = mse
        .iter()
        .enumerate()
        .all(|(k, &v)| (k == gt) == (v == 0.0));
    let a = quad_err < 1e-12 && unique_min && mse[255] == 1.0;
    notes.push(format!("mse quad err {quad_err:.1e}, f(255)={}", mse[255]));

    let sce = loss::landscape(&LossConfig::sce(), c, gt, loss::DEFAULT_AMPLITUDE).unwrap();
    let off: Vec<f64> = (0..c).filter(|&k| k != gt).map(|k| sce[k]).collect();
    let spread = off.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        - off.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let b = spread < 1e-9 && off.iter().all(|&v| v > sce[gt]);
    notes.push(format!("sce off-target spread {spread:.1e}"));

    let mut staircase = true;
    for m in [4, 8] {
        let curve = loss::landscape(
            &LossConfig::msce(m).unwrap(),
            c,
            gt,
            loss::DEFAULT_AMPLITUDE,
        )
        .unwrap();
        let mut levels: Vec<(f64, f64)> = vec![(f64::INFINITY, f64::NEG_INFINITY); m + 1];
        for (k, &v) in curve.iter().enumerate() {
            let l = &mut levels[shared(k, gt, m)];
            l.0 = l.0.min(v);
            l.1 = l.1.max(v);
        }
        let present: Vec<(usize, (f64, f64))> = levels
            .into_iter()
            .enumerate()
            .filter(|(_, l)| l.0.is_finite())
            .collect();
        let flat = present.iter().all(|(_, (lo, hi))| hi - lo < 1e-9);
        let decreasing = present.windows(2).all(|w| w[1].1 .1 < w[0].1 .0);
        staircase &= flat && decreasing && present.len() == m + 1;
        notes.push(format!(
            "msce M={m}: {} levels, flat {flat}, decreasing {decreasing}",
            present.len()
        ));
    }
    outcome(a && b && staircase, notes.join("; "))
}

fn criterion_metric() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(0x4aed);
    let pts: Vec<(f64, f64)> = (0..10).map(|_| (rng.random(), rng.random())).collect();
    let perfect = r_aed(&pts, &pts).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..64);
        let mut p = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for _ in 0..n {
            p.push((rng.random::<f64>(), rng.random::<f64>()));
            q.push((rng.random::<f64>(), rng.random::<f64>()));
        }
        let mut total = 0.0;
        for i in 0..n {
            let dx = p[i].0 - q[i].0;
            let dy = p[i].1 - q[i].1;
            total += (dx * dx + dy * dy).sqrt();
        }
        let expected = 1.0 / (total / n as f64 + 0.1);
        worst = worst.max((r_aed(&p, &q).unwrap() - expected).abs());
    }
    outcome(
        perfect == 10.0 && worst < 1e-12,
        format!("perfect = {perfect}; max error vs brute force over 100 sets = {worst:.1e}"),
    )
}

struct DeskRun {
    test_r_aed: f64,
    epochs: usize,
    secs: f64,
}

fn desk_data(seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let train = synth::generate(&SynthSpec {
        count: 200,
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let test = synth::generate(&SynthSpec {
        count: 50,
        seed: seed + 1000,
        ..SynthSpec::default()
    })
    .unwrap();
    (train.samples, test.samples)
}

fn desk_run(kind: LossKind, seed: u64) -> DeskRun {
    let started = Instant::now();
    let (train, test) = desk_data(seed);
    let scales = if kind == LossKind::Msce { 6 } else { 1 };
    let net_cfg = NetConfig {
        head: HeadConfig {
            pool: PoolKind::Max,
            reduce: ReduceKind::Sum,
            scales,
        },
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        loss: LossConfig::new(kind, scales).unwrap(),
        batch_size: 8,
        lr0: DESK_LR0,
        max_epochs: DESK_EPOCHS,
        patience: DESK_EPOCHS,
        seed,
        ..TrainConfig::default()
    };
    let (params, record) = trainer::train(&train, &net_cfg, &cfg).unwrap();
    DeskRun {
        test_r_aed: trainer::evaluate(&params, &test).unwrap().r_aed,
        epochs: record.last_epoch(),
        secs: started.elapsed().as_secs_f64(),
    }
}

fn criterion_desk(run: &DeskRun) -> Outcome {
    outcome(
        run.test_r_aed >= 4.0 && run.epochs <= 300,
        format!(
            "MSCE Max/sum, S=64, 200 train / 50 test, seed 0, batch 8, {} epochs: test R-AED {:.3} in {:.0}s",
            run.epochs, run.test_r_aed, run.secs
        ),
    )
}

fn criterion_trend(msce_seed0: &DeskRun) -> Outcome {
    let mut msce = vec![msce_seed0.test_r_aed];
    let mut sce = Vec::new();
    for seed in 0..3 {
        if seed > 0 {
            msce.push(desk_run(LossKind::Msce, seed).test_r_aed);
        }
        sce.push(desk_run(LossKind::Sce, seed).test_r_aed);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m, s) = (mean(&msce), mean(&sce));

    let (train, test) = desk_data(0);
    let opts = AblationOptions {
        epochs: GRID_EPOCHS,
        patience: GRID_EPOCHS,
        ..AblationOptions::default()
    };
    let results: Vec<_> = ablation::grid()
        .iter()
        .enumerate()
        .map(|(i, cell)| ablation::run_cell(i, cell, &train, &test, &opts).unwrap())
        .collect();
    println!("nine-cell grid (seed 0, {GRID_EPOCHS} epochs):");
    for line in ablation::to_markdown(&results).lines() {
        println!("    {line}");
    }
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    outcome(
        m >= s && results.len() == 9,
        format!(
            "mean test R-AED over seeds 0-2: MSCE {m:.3} [{}] vs SCE {s:.3} [{}]",
            fmt(&msce),
            fmt(&sce)
        ),
    )
}

fn dataset_bytes(spec: &SynthSpec) -> Vec<u8> {
    let mut buf = Vec::new();
    synth::write_dataset(&synth::generate(spec).unwrap(), &mut buf).unwrap();
    buf
}

fn criterion_io() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let spec = SynthSpec {
        size: 16,
        count: 12,
        seed: 42,
        ..SynthSpec::default()
    };
    let bytes = dataset_bytes(&spec);
    checks.push(("dataset bytes reproducible", bytes == dataset_bytes(&spec)));

    let loaded = synth::read_dataset(Cursor::new(&bytes)).unwrap();
    let original = synth::generate(&spec).unwrap();
    let mut again = Vec::new();
    synth::write_dataset(&loaded, &mut again).unwrap();
    checks.push(("dataset round trip", loaded == original && again == bytes));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    checks.push((
        "dataset bad magic",
        matches!(
            synth::read_dataset(Cursor::new(&bad)),
            Err(Error::BadMagic { .. })
        ),
    ));
    checks.push((
        "dataset truncated",
        matches!(
            synth::read_dataset(Cursor::new(&bytes[..bytes.len() - 9])),
            Err(Error::Truncated(_))
        ),
    ));

    let net_cfg = NetConfig {
        input_size: 16,
        widths: vec![2, 4],
        head: HeadConfig {
            scales: 3,
            ..HeadConfig::default()
        },
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        loss: LossConfig::msce(3).unwrap(),
        lr0: DESK_LR0,
        max_epochs: 3,
        patience: 3,
        seed: 7,
        ..TrainConfig::default()
    };
    let (pa, ra) = trainer::train(&loaded.samples, &net_cfg, &cfg).unwrap();
    let (pb, rb) = trainer::train(&original.samples, &net_cfg, &cfg).unwrap();
    let ja = checkpoint::to_json(&pa).unwrap();
    checks.push((
        "run records identical",
        ra == rb && !ra.to_json().unwrap().is_empty(),
    ));
    checks.push((
        "checkpoints identical",
        ja == checkpoint::to_json(&pb).unwrap(),
    ));

    let back = checkpoint::from_json(&ja).unwrap();
    let lossless = back.config == pa.config
        && back
            .flat()
            .iter()
            .zip(pa.flat())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(("checkpoint round trip", lossless));
    checks.push((
        "checkpoint bad format",
        matches!(
            checkpoint::from_json(&ja.replace("msce-checkpoint", "other")),
            Err(Error::BadMagic { .. })
        ),
    ));
    checks.push((
        "checkpoint bad version",
        matches!(
            checkpoint::from_json(&ja.replace("\"version\":1", "\"version\":2")),
            Err(Error::UnsupportedVersion(2))
        ),
    ));

    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = if failed.is_empty() {
        format!("{} checks", checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    outcome(failed.is_empty(), detail)
}

fn report(n: usize, name: &str, started: Instant, o: Outcome) -> bool {
    println!(
        "{} criterion {n} ({name}): {} [{:.1}s]",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
    o.passed
}

fn main() {
    let mut ok = true;
    let t = Instant::now();
    ok &= report(1, "gradient fidelity", t, criterion_gradients());
    let t = Instant::now();
    ok &= report(2, "degeneracy", t, criterion_degeneracy());
    let t = Instant::now();
    ok &= report(3, "loss landscapes", t, criterion_landscape());
    let t = Instant::now();
    ok &= report(4, "metric exactness", t, criterion_metric());
    let t = Instant::now();
    ok &= report(7, "determinism and I/O", t, criterion_io());
    let t = Instant::now();
    let desk = desk_run(LossKind::Msce, 0);
    ok &= report(5, "desk-scale end to end", t, criterion_desk(&desk));
    let t = Instant::now();
    ok &= report(6, "MSCE vs SCE trend", t, criterion_trend(&desk));
    if !ok {
        std::process::exit(1);
    }
}
