//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run with `cargo test --release --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use common::{gradient_trial, small_config, small_strategies, BACKBONES};
use fedpeft::config::ExperimentConfig;
use fedpeft::datasets::{leave_one_out_split, synthetic_log, CandidateMode, SyntheticConfig};
use fedpeft::embedding::{comm_cost, Adapter, AdapterInit, HashPooling, ItemModel, Strategy};
use fedpeft::federation::simulation::item_features;
use fedpeft::federation::{prepare_data, pretrain, run_experiment, Phase, Simulation};
use fedpeft::metrics::evaluate;
use fedpeft::numerics::{DenseMatrix, Purpose, RngStream, StreamKey};
use fedpeft::pretraining::{rq_encode, train_rqvae, PretrainConfig, RqVaeConfig};
use fedpeft::privacy::{apply_ldp, laplace_noise};
use fedpeft::Result;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let out = f().unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!("error: {e}"),
    });
    let took = start.elapsed();
    let in_time = took <= limit;
    let pass = out.pass && in_time;
    let time_note = if in_time { String::new() } else { format!(" [over the {:?} budget]", limit) };
    println!(
        "{} {id}. {name}: {} ({:.2}s){time_note}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// 1. Communication accounting
fn comm_accounting() -> Result<Outcome> {
    let (n, k) = (3706, 32);
    let kb = |s: &Strategy| comm_cost(s, n, k) as f64 / 1000.0;
    let targets = [30.1, 45.2, 60.3, 75.4, 90.5];
    let mut worst: f64 = 0.0;
    for (rank, t) in (2..=6).zip(targets) {
        worst = worst.max((kb(&Strategy::Lora { rank }) - t).abs() / t);
    }
    let full_err = (kb(&Strategy::Full) - 482.4).abs() / 482.4;

    let mut r = common::rng(11);
    let mut mismatches = 0;
    let mut checked = 0;
    for family in 0..4 {
        for _ in 0..20 {
            let n = r.random_range(1..200);
            let k = r.random_range(1..40);
            let s = match family {
                0 => Strategy::Full,
                1 => Strategy::Lora { rank: r.random_range(1..9) },
                2 => Strategy::Hash {
                    table_size: r.random_range(1..300),
                    functions: r.random_range(1..5),
                    prime: 4093,
                    pooling: if r.random_bool(0.5) { HashPooling::Mean } else { HashPooling::Senet },
                    expansion: r.random_range(1..17),
                },
                _ => Strategy::RqVae {
                    levels: r.random_range(1..6),
                    codebook_size: r.random_range(1..64),
                },
            };
            let base = DenseMatrix::uniform(n, k, 1.0, &mut r);
            let mut model = ItemModel::full(base.clone());
            if s.is_peft() {
                let (l, d) = match s {
                    Strategy::RqVae { levels, codebook_size } => (levels, codebook_size as u32),
                    _ => (1, 1),
                };
                let codes: Vec<Vec<u32>> = (0..n).map(|_| (0..l).map(|_| r.random_range(0..d)).collect()).collect();
                model.freeze_and_attach(Adapter::initialize(&s, &base, Some(&codes), AdapterInit::Zero, &mut r)?)?;
            }
            checked += 1;
            if model.serialize_upload().len() as u64 != comm_cost(&s, n, k) {
                mismatches += 1;
            }
        }
    }
    Ok(Outcome {
        pass: worst < 0.05 && full_err < 0.05 && mismatches == 0,
        detail: format!(
            "LoRA worst rel. err {:.2}%, Full {:.2}% ({:.1} KB), payload mismatches {mismatches}/{checked}",
            worst * 100.0,
            full_err * 100.0,
            kb(&Strategy::Full)
        ),
    })
}

// 2. Identity-start equivalence
fn identity_start() -> Result<Outcome> {
    let variants: [(&str, &[&str]); 4] = [
        ("lora", &["strategy.kind=\"lora\""]),
        ("hash-mean", &["strategy.kind=\"hash\"", "strategy.pooling=\"mean\""]),
        ("hash-senet", &["strategy.kind=\"hash\"", "strategy.pooling=\"senet\""]),
        ("rqvae", &["strategy.kind=\"rqvae\""]),
    ];
    let mut failed = Vec::new();
    let mut users = 0;
    for (name, sets) in variants {
        let cfg = small_config(sets);
        let data = prepare_data(&cfg)?;
        let pre = pretrain(&cfg, &data.log)?;
        let mut sim = Simulation::new(cfg.clone(), data.split, pre.table, pre.codes)?;
        for _ in 0..cfg.federation.warmup_rounds {
            sim.run_round()?;
        }
        let before = sim.top_k_lists(20)?;
        sim.begin_peft()?;
        let after = sim.top_k_lists(20)?;
        users = before.len();
        if before != after {
            failed.push(name);
        }
    }
    Ok(Outcome {
        pass: failed.is_empty(),
        detail: format!("4 strategies x {users} test users, differing: {failed:?}"),
    })
}

// 3. Gradient correctness
fn gradients() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for kind in BACKBONES {
        for s in small_strategies() {
            pairs += 1;
            for trial in 0..50 {
                let (g, _) = gradient_trial(kind, &s, 1000 + trial);
                worst = worst.max(g);
            }
        }
    }
    Ok(Outcome {
        pass: worst < 1e-4,
        detail: format!("{pairs} pairs x 50 trials, worst relative error {worst:.2e}"),
    })
}

// 4. RQ-VAE oracle
fn rq_oracle() -> Result<Outcome> {
    let mut r = common::rng(4);
    let books: Vec<DenseMatrix> = (0..3).map(|_| DenseMatrix::uniform(8, 4, 1.0, &mut r)).collect();
    let (mut code_mismatch, mut worst_norm) = (0, 0.0f64);
    for _ in 0..1000 {
        let z: Vec<f32> = (0..4).map(|_| r.random_range(-2.0f32..2.0)).collect();
        let enc = rq_encode(&z, &books)?;
        let mut res: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        for (level, book) in books.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for row in 0..book.rows() {
                let d: f64 = book.row(row).iter().zip(&res).map(|(&c, x)| (x - c as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, row);
                }
            }
            if enc.codes[level] as usize != best.1 {
                code_mismatch += 1;
            }
            for (x, &c) in res.iter_mut().zip(book.row(enc.codes[level] as usize)) {
                *x -= c as f64;
            }
        }
        let gap: f64 = z.iter().zip(&enc.quantized).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt();
        let last: f64 = enc.residuals[3].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        worst_norm = worst_norm.max((gap - last).abs());
    }

    let log = synthetic_log(&SyntheticConfig {
        users: 400,
        items: 300,
        clusters: 8,
        ..Default::default()
    })?;
    let mut ratios = Vec::new();
    for seed in [1, 2, 3] {
        let cfg = small_config(&[&format!("seed={seed}")]);
        let features = item_features(&cfg, &log)?;
        let pcfg = PretrainConfig {
            steps: 100,
            lr: 1e-3,
            batch_size: 32,
            hidden: vec![32],
        };
        let rq = RqVaeConfig {
            levels: 3,
            codebook_size: 16,
            ..Default::default()
        };
        let out = train_rqvae(&features, 8, &rq, &pcfg, seed)?;
        let h = &out.loss_history;
        let head: f64 = h[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = h[h.len() - 10..].iter().sum::<f64>() / 10.0;
        ratios.push(tail / head);
    }
    let ratio = median(ratios);
    Ok(Outcome {
        pass: code_mismatch == 0 && worst_norm < 1e-6 && ratio < 1.0,
        detail: format!(
            "code mismatches {code_mismatch}/3000, max | |z-zq| - |r_l| | {worst_norm:.1e}, median loss ratio last10/first10 {ratio:.3}"
        ),
    })
}

// 5. DP statistics
fn dp_statistics() -> Result<Outcome> {
    let delta = 0.1;
    let mut rng = RngStream::new(5, StreamKey::new(Purpose::LocalNoise, 0, 0));
    let xs = laplace_noise(1_000_000, delta, &mut rng)?;
    let var = |v: &[f32]| {
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let target = 2.0 * delta * delta;
    let single = (var(&xs) - target).abs() / target;

    let (c, len) = (10, 200_000);
    let mut sum = vec![0.0f32; len];
    for client in 0..c {
        let mut upload = vec![0.0f32; len];
        let mut rng = RngStream::new(5, StreamKey::new(Purpose::LocalNoise, client, 1));
        apply_ldp(vec![&mut upload], delta, &mut rng)?;
        sum.iter_mut().zip(&upload).for_each(|(s, u)| *s += u);
    }
    let mean: Vec<f32> = sum.iter().map(|s| s / c as f32).collect();
    let averaged = (var(&mean) - target / c as f64).abs() / (target / c as f64);

    let plain = run_experiment(&small_config(&[]), None)?;
    let mut identical = true;
    for mode in ["ldp", "cdp"] {
        let z = run_experiment(&small_config(&[&format!("dp.mode=\"{mode}\""), "dp.delta=0.0"]), None)?;
        identical &= z.simulation.model == plain.simulation.model && z.evals == plain.evals;
    }
    Ok(Outcome {
        pass: single < 0.02 && averaged < 0.05 && identical,
        detail: format!(
            "variance err {:.2}%, mean-of-{c} err {:.2}%, delta=0 identical: {identical}",
            single * 100.0,
            averaged * 100.0
        ),
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// 6. Metric oracle
fn metric_oracle() -> Result<Outcome> {
    let ks = [1, 5, 10, 20];
    let mut worst: f64 = 0.0;
    for inst in 0..5u64 {
        let log = synthetic_log(&SyntheticConfig {
            users: 60 + 10 * inst as usize,
            items: 80,
            clusters: 4,
            seed: inst,
            ..Default::default()
        })?;
        let mode = if inst % 2 == 0 { CandidateMode::Sampled(30) } else { CandidateMode::Full };
        let split = leave_one_out_split(&log, mode, inst)?;
        let mut r = common::rng(inst);
        // coarse scores so that ties occur
        let scores: Vec<Vec<f32>> = (0..log.num_users)
            .map(|_| (0..log.num_items).map(|_| (r.random_range(0..20) as f32) / 4.0).collect())
            .collect();
        let scorer = |u: usize, items: &[u32]| -> Result<Vec<f32>> { Ok(items.iter().map(|&i| scores[u][i as usize]).collect()) };
        let table = evaluate(&scorer, &split, &ks)?;

        let mut hr = [0.0f64; 4];
        let mut nd = [0.0f64; 4];
        let mut count = 0.0;
        for (u, case) in split.test.iter().enumerate() {
            let Some(case) = case else { continue };
            count += 1.0;
            let s = scores[u][case.item as usize];
            let beaten = split.negatives(u).iter().filter(|&&j| scores[u][j as usize] >= s).count();
            let rank = beaten + 1;
            for (j, &k) in ks.iter().enumerate() {
                if rank <= k {
                    hr[j] += 1.0;
                    nd[j] += 1.0 / ((rank + 1) as f64).log2();
                }
            }
        }
        for (j, &k) in ks.iter().enumerate() {
            worst = worst.max((table.hr(k).unwrap() - hr[j] / count).abs());
            worst = worst.max((table.ndcg(k).unwrap() - nd[j] / count).abs());
        }
    }

    let log = synthetic_log(&SyntheticConfig {
        users: 10_000,
        items: 1000,
        clusters: 20,
        ..Default::default()
    })?;
    let split = leave_one_out_split(&log, CandidateMode::Sampled(99), 6)?;
    let random = |u: usize, items: &[u32]| -> Result<Vec<f32>> {
        Ok(items
            .iter()
            .map(|&i| (splitmix(((u as u64) << 32) | i as u64) >> 40) as f32)
            .collect())
    };
    let table = evaluate(&random, &split, &[10])?;
    let hr10 = table.hr(10).unwrap();
    Ok(Outcome {
        pass: worst < 1e-12 && (hr10 - 0.10).abs() <= 0.01,
        detail: format!(
            "5 toy instances, max deviation {worst:.1e}; random HR@10 = {hr10:.4} over {} users",
            table.users
        ),
    })
}

fn desk_config(strategy: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for s in [
        format!("strategy.kind=\"{strategy}\""),
        "features.dim=64".into(),
        "pretrain.hidden=[64, 48]".into(),
        "pretrain.steps=1000".into(),
        "pretrain.batch_size=64".into(),
        "federation.rounds=200".into(),
        "eval.every=0".into(),
        format!("seed={seed}"),
        format!("dataset.synthetic.seed={seed}"),
    ] {
        cfg.set(&s).expect("valid override");
    }
    cfg
}

// 7. Desk-scale learning
fn desk_scale() -> Result<Outcome> {
    let (mut full_hr, mut full_ndcg, mut lora_ndcg, mut ratio) = (vec![], vec![], vec![], vec![]);
    for seed in [2024, 7, 99] {
        let full = run_experiment(&desk_config("full", seed), None)?;
        let lora = run_experiment(&desk_config("lora", seed), None)?;
        let last = |o: &fedpeft::federation::ExperimentOutcome| o.evals.last().unwrap().table.clone();
        full_hr.push(last(&full).hr(10).unwrap());
        full_ndcg.push(last(&full).ndcg(10).unwrap());
        lora_ndcg.push(last(&lora).ndcg(10).unwrap());
        let bytes = |o: &fedpeft::federation::ExperimentOutcome| o.reports.last().unwrap().bytes_per_client as f64;
        ratio.push(bytes(&lora) / bytes(&full));
    }
    let per_seed: Vec<String> = full_hr.iter().map(|h| format!("{:.1}", h * 100.0)).collect();
    let (fh, fn_, ln, br) = (median(full_hr), median(full_ndcg), median(lora_ndcg), median(ratio));
    let gap = (ln - fn_).abs() / fn_;
    Ok(Outcome {
        pass: fh >= 0.30 && gap <= 0.20 && br < 0.15,
        detail: format!(
            "median Full HR@10 {:.2}% (seeds: {}), N@10 Full {:.2}% vs LoRA {:.2}% (gap {:.1}%), upload ratio {:.1}%",
            fh * 100.0,
            per_seed.join("/"),
            fn_ * 100.0,
            ln * 100.0,
            gap * 100.0,
            br * 100.0
        ),
    })
}

// 8. Determinism across worker counts
fn determinism() -> Result<Outcome> {
    let configs: [&[&str]; 2] = [
        &["federation.rounds=8", "eval.every=2"],
        &[
            "federation.rounds=8",
            "eval.every=2",
            "model.kind=\"fedncf\"",
            "strategy.kind=\"hash\"",
            "strategy.pooling=\"senet\"",
            "dp.mode=\"ldp\"",
            "dp.delta=0.001",
        ],
    ];
    let mut same = 0;
    for sets in configs {
        let mut csvs = Vec::new();
        for workers in [1, 4] {
            let dir = tempfile::tempdir().expect("temp dir");
            let mut cfg = small_config(sets);
            cfg.workers = workers;
            run_experiment(&cfg, Some(dir.path()))?;
            let p = dir.path().join("metrics.csv");
            csvs.push(std::fs::read(&p).expect("metrics.csv"));
        }
        same += usize::from(csvs[0] == csvs[1]);
    }
    Ok(Outcome {
        pass: same == configs.len(),
        detail: format!("{same}/{} configs byte-identical for workers 1 vs 4", configs.len()),
    })
}

// 9. Freeze discipline
fn freeze_discipline() -> Result<Outcome> {
    let mut ok = 0;
    let variants: [&[&str]; 3] = [
        &["strategy.kind=\"hash\"", "strategy.pooling=\"senet\""],
        &["strategy.kind=\"rqvae\""],
        &["strategy.kind=\"lora\"", "model.kind=\"fedncf\""],
    ];
    for sets in variants {
        let out = run_experiment(&small_config(sets), None)?;
        let peft: Vec<&String> = out
            .reports
            .iter()
            .filter(|r| r.phase == Phase::Peft)
            .map(|r| &r.base_digest)
            .collect();
        let digest_ok = !peft.is_empty() && peft.iter().all(|d| *d == peft[0]);
        let frozen_ok = out.frozen_at_start.as_deref() == Some(&out.simulation.model.items.adapter.frozen_bytes()[..]);
        let codes_ok = match &out.simulation.model.items.adapter {
            Adapter::RqVae(q) => {
                let codes = out.pretrained.codes.as_ref().unwrap();
                (0..codes.len()).all(|i| q.codes(i) == codes[i].as_slice())
            }
            _ => true,
        };
        ok += usize::from(digest_ok && frozen_ok && codes_ok);
    }
    Ok(Outcome {
        pass: ok == variants.len(),
        detail: format!("{ok}/{} strategies keep E, codes and hash parameters fixed", variants.len()),
    })
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        check(1, "communication accounting", s(1), comm_accounting),
        check(2, "identity-start equivalence", s(60), identity_start),
        check(3, "gradient correctness", s(120), gradients),
        check(4, "RQ-VAE oracle", s(120), rq_oracle),
        check(5, "DP statistics", s(60), dp_statistics),
        check(6, "metric oracle", s(60), metric_oracle),
        check(7, "desk-scale learning", s(900), desk_scale),
        check(8, "determinism across workers", s(300), determinism),
        check(9, "freeze discipline", Duration::MAX, freeze_discipline),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
