//! Acceptance criteria. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; the process exits nonzero if any criterion fails.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use avsrerank::embedstore::{self, EmbeddingStore, FrameMatrix, QueryEmbeddings, HEADER_LEN};
use avsrerank::fusion::{fuse_query, rerank_run, FusionConfig};
use avsrerank::graphrerank::{build_affinity, spread, GraphConfig, SigmaMode, Solver};
use avsrerank::metrics::{average_precision, evaluate_run, inf_ap, Metric, DEFAULT_EPSILON};
use avsrerank::runio::{parse_run, parse_run_str, write_run_string, Qrels, RankedRun};
use avsrerank::scoring::{score_candidates, score_video, PoolingMode};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// alpha = 1 keeps the input order; alpha = 0 sorts by the pooled frame score.
fn endpoint_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xE1);
    for trial in 0..100 {
        let n_queries = rng.random_range(1..=50);
        let c = random_corpus(&mut rng, n_queries, 200, 16, 4);
        let base = FusionConfig::default();

        let (keep, _) = rerank_run(&c.run, &c.store, &c.queries, &FusionConfig { alpha: 1.0, ..base })
            .map_err(|e| e.to_string())?;
        let (pure, _) = rerank_run(&c.run, &c.store, &c.queries, &FusionConfig { alpha: 0.0, ..base })
            .map_err(|e| e.to_string())?;
        for (q, entries) in c.run.queries() {
            let input: Vec<&str> = entries.iter().map(|e| e.video_id.as_str()).collect();
            ensure(keep.ranked_ids(q).unwrap() == input, || {
                format!("trial {trial}, {q}: alpha=1 changed the order")
            })?;

            let qv = c.queries.get(q).unwrap();
            let mut by_s: Vec<(usize, f64, &str)> = entries
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    (
                        i,
                        score_video(qv, c.store.get_frames(&e.video_id).unwrap(), PoolingMode::Max).unwrap(),
                        e.video_id.as_str(),
                    )
                })
                .collect();
            by_s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let want: Vec<&str> = by_s.iter().map(|t| t.2).collect();
            ensure(pure.ranked_ids(q).unwrap() == want, || {
                format!("trial {trial}, {q}: alpha=0 differs from frame-score order")
            })?;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("100 random runs, {took:.2?}"))
}

/// Committed three-video table, alpha = 0.4.
fn hand_table() -> Outcome {
    let run = parse_run(fs::read(fixture("fusion3_run.txt")).unwrap().as_slice()).map_err(|e| e.to_string())?;
    let store = embedstore::parse_text_store(fs::read(fixture("fusion3_frames.txt")).unwrap().as_slice())
        .map_err(|e| e.to_string())?;
    let queries = QueryEmbeddings::from_store(
        embedstore::parse_text_store(fs::read(fixture("fusion3_queries.txt")).unwrap().as_slice())
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let cfg = FusionConfig {
        alpha: 0.4,
        ..Default::default()
    };
    let (out, _) = rerank_run(&run, &store, &queries, &cfg).map_err(|e| e.to_string())?;
    let got = out.get("q1").unwrap();
    let table = fs::read_to_string(fixture("fusion3_expected.tsv")).unwrap();
    let mut worst = 0.0f64;
    for (row, entry) in table.lines().filter(|l| !l.starts_with('#')).zip(got) {
        let cols: Vec<&str> = row.split('\t').collect();
        let fused: f64 = cols[3].parse().unwrap();
        let rank: u32 = cols[4].parse().unwrap();
        ensure(entry.video_id == cols[0] && entry.rank == rank, || {
            format!("expected {} at rank {rank}, got {}", cols[0], entry.video_id)
        })?;
        worst = worst.max((entry.score - fused).abs());
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("max |fused - table| = {worst:.1e}"))
}

fn pooling_properties() -> Outcome {
    let frames = |dim: usize| prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), 1..12);
    let case = (2usize..24).prop_flat_map(move |dim| {
        (
            prop::collection::vec(-1.0f32..1.0, dim),
            frames(dim),
            prop::collection::vec(-1.0f32..1.0, dim),
            any::<u64>(),
        )
    });
    let nonzero = |v: &[f32]| v.iter().any(|x| x.abs() > 1e-3);

    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&case, |(q, rows, extra, _)| {
            prop_assume!(nonzero(&q) && nonzero(&extra) && rows.iter().all(|r| nonzero(r)));
            let before = score_video(&q, &FrameMatrix::from_rows(&rows).unwrap(), PoolingMode::Max).unwrap();
            let mut more = rows.clone();
            more.push(extra);
            let after = score_video(&q, &FrameMatrix::from_rows(&more).unwrap(), PoolingMode::Max).unwrap();
            prop_assert!(after >= before);
            Ok(())
        })
        .map_err(|e| format!("monotonicity: {e}"))?;

    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&case, |(q, rows, _, seed)| {
            prop_assume!(nonzero(&q) && rows.iter().all(|r| nonzero(r)));
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut StdRng::seed_from_u64(seed));
            for mode in [PoolingMode::Max, PoolingMode::Mean] {
                let a = score_video(&q, &FrameMatrix::from_rows(&rows).unwrap(), mode).unwrap();
                let b = score_video(&q, &FrameMatrix::from_rows(&shuffled).unwrap(), mode).unwrap();
                match mode {
                    PoolingMode::Max => prop_assert_eq!(a, b),
                    // Summation order may move the last bit of a mean.
                    PoolingMode::Mean => prop_assert!((a - b).abs() < 1e-12),
                }
            }
            Ok(())
        })
        .map_err(|e| format!("permutation invariance: {e}"))?;
    Ok("1000 monotonicity + 1000 permutation cases, 0 failures".into())
}

fn complete_qrels(q: &str, pool: &[String], rel: &[bool]) -> Qrels {
    let mut b = Qrels::builder();
    b.stratum(q, 0, pool.len() as u64, pool.len() as u64).unwrap();
    for (d, &r) in pool.iter().zip(rel) {
        b.judge(q, 0, d, r).unwrap();
    }
    b.build().unwrap()
}

fn infap_reduction() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x1AF);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 200 {
        let len = rng.random_range(1..=500);
        let ranked: Vec<String> = (0..len).map(|i| format!("d{i}")).collect();
        // Pool: a random subset of the run plus some never-retrieved docs.
        let mut pool: Vec<String> = ranked.iter().filter(|_| rng.random_bool(0.6)).cloned().collect();
        pool.extend((0..rng.random_range(0..20)).map(|i| format!("u{i}")));
        let rel: Vec<bool> = pool.iter().map(|_| rng.random_bool(0.3)).collect();
        if pool.is_empty() || !rel.contains(&true) {
            continue;
        }
        let qrels = complete_qrels("q", &pool, &rel);
        let mut order = ranked.clone();
        order.shuffle(&mut rng);
        let ap = average_precision(&order, &qrels, "q").map_err(|e| e.to_string())?;
        let inf = inf_ap(&order, &qrels, "q", DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        worst = worst.max((ap - inf).abs());
        done += 1;
    }
    ensure(worst < 1e-3, || format!("max |infAP - AP| = {worst:e}"))?;
    Ok(format!("200 instances, max |infAP - AP| = {worst:.2e}"))
}

fn infap_unbiased() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5A3);
    // 200 retrieved docs; 100 of them form the judged pool, 30 relevant.
    let docs: Vec<String> = (0..200).map(|i| format!("d{i}")).collect();
    let mut idx: Vec<usize> = (0..200).collect();
    idx.shuffle(&mut rng);
    let pool: Vec<usize> = idx[..100].to_vec();
    let relevant: Vec<usize> = pool[..30].to_vec();
    // Rank by a noisy score that favours relevant docs, as a real system would.
    let mut scored: Vec<(f64, &String)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            (
                rng.random_range(0.0..1.0) + if relevant.contains(&i) { 0.5 } else { 0.0 },
                d,
            )
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let ranked: Vec<&String> = scored.iter().map(|p| p.1).collect();

    let pool_ids: Vec<String> = pool.iter().map(|&i| docs[i].clone()).collect();
    let flags: Vec<bool> = pool.iter().map(|i| relevant.contains(i)).collect();
    let exact = average_precision(&ranked, &complete_qrels("q", &pool_ids, &flags), "q").map_err(|e| e.to_string())?;

    let mut sum = 0.0;
    let mut n = 0;
    let mut order: Vec<usize> = (0..100).collect();
    for _ in 0..2000 {
        order.shuffle(&mut rng);
        let mut b = Qrels::builder();
        b.stratum("q", 0, 100, 40).unwrap();
        for &j in &order[..40] {
            b.judge("q", 0, &pool_ids[j], flags[j]).unwrap();
        }
        let qrels = b.build().unwrap();
        match inf_ap(&ranked, &qrels, "q", DEFAULT_EPSILON) {
            Ok(v) => {
                sum += v;
                n += 1;
            }
            Err(e) => return Err(format!("resample failed: {e}")),
        }
    }
    let mean = sum / n as f64;
    let took = start.elapsed();
    let gap = (mean - exact).abs();
    ensure(gap <= 0.02, || format!("mean infAP {mean:.4} vs exact AP {exact:.4}"))?;
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!(
        "exact AP {exact:.4}, mean infAP {mean:.4} over {n} resamples (|gap| {gap:.4}), {took:.2?}"
    ))
}

fn labelspread_agreement() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x15);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=50);
        let dim = rng.random_range(2..16);
        let reprs: Vec<Vec<f64>> = (0..n)
            .map(|_| random_unit(&mut rng, dim).into_iter().map(f64::from).collect())
            .collect();
        let seeds = rng.random_range(1..n.max(2));
        let cfg = GraphConfig {
            propagation_alpha: rng.random_range(0.5..0.99),
            seeds,
            sigma_mode: SigmaMode::MedianHeuristic,
            solver: Solver::ClosedForm,
            max_iters: 200_000,
            tolerance: 1e-10,
        };
        let s = build_affinity(&reprs, cfg.sigma_mode);
        let closed = spread(&s, seeds, &cfg).map_err(|e| e.to_string())?;
        let iter = spread(
            &s,
            seeds,
            &GraphConfig {
                solver: Solver::Iterative,
                ..cfg
            },
        )
        .map_err(|e| e.to_string())?;
        for (a, b) in closed.iter().zip(&iter) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-5, || format!("max difference {worst:e}"))?;
    Ok(format!("50 problems, max |iterative - closed form| = {worst:.2e}"))
}

fn latency_anchor() -> Outcome {
    const CANDIDATES: usize = 5000;
    const FRAMES: usize = 20;
    const DIM: usize = 512;
    let mut rng = StdRng::seed_from_u64(0x22);
    let mut b = EmbeddingStore::builder(DIM).normalized(true);
    let mut list = Vec::with_capacity(CANDIDATES);
    for v in 0..CANDIDATES {
        let data: Vec<f32> = (0..FRAMES).flat_map(|_| random_unit(&mut rng, DIM)).collect();
        b.insert(format!("v{v}"), FrameMatrix::new(DIM, data).unwrap()).unwrap();
        list.push((format!("v{v}"), rng.random_range(0.0..1.0)));
    }
    let store = b.build().map_err(|e| e.to_string())?;
    let queries = QueryEmbeddings::from_vectors(DIM, [("q", random_unit(&mut rng, DIM))]).unwrap();
    let run = RankedRun::from_scored("perf", [("q", list)]).unwrap();
    let entries = run.get("q").unwrap();
    let cfg = FusionConfig {
        k: CANDIDATES,
        ..Default::default()
    };

    let mut times = Vec::new();
    for _ in 0..5 {
        let t = Instant::now();
        let ids: Vec<&str> = entries.iter().map(|e| e.video_id.as_str()).collect();
        let s = score_candidates("q", &ids, &store, &queries, cfg.pooling).map_err(|e| e.to_string())?;
        let (ranked, _) = fuse_query("q", entries, &s, &cfg).map_err(|e| e.to_string())?;
        times.push(t.elapsed());
        ensure(ranked.len() == CANDIDATES, || "lost candidates".into())?;
    }
    times.sort();
    let median = times[times.len() / 2];
    ensure(median <= Duration::from_millis(100), || {
        format!("median {median:?} over 5 runs")
    })?;
    Ok(format!(
        "5000 x 20 x 512, single thread: median {median:.1?} (min {:.1?})",
        times[0]
    ))
}

fn arb_run(rng: &mut StdRng) -> RankedRun {
    let mut run = RankedRun::new(format!("tag{}", rng.random_range(0..100)));
    for q in 0..rng.random_range(0..6) {
        let n = rng.random_range(1..30);
        let list = (0..n)
            .map(|v| {
                let mag = 10f64.powi(rng.random_range(-6..7));
                (format!("vid-{q}-{v}"), rng.random_range(-1.0..1.0) * mag)
            })
            .collect();
        run.insert_query(format!("{}", 100 + q), list).unwrap();
    }
    run
}

fn arb_store(rng: &mut StdRng) -> EmbeddingStore {
    let dim = rng.random_range(1..40);
    let normalized = rng.random_bool(0.5);
    let mut b = EmbeddingStore::builder(dim).normalized(normalized);
    for v in 0..rng.random_range(1..8) {
        let frames = rng.random_range(1..5);
        let data: Vec<f32> = (0..frames)
            .flat_map(|_| {
                let row = gaussian(rng, dim);
                if normalized {
                    unit(row)
                } else {
                    row.into_iter().map(|x| x * 3.0 + 0.5).collect()
                }
            })
            .collect();
        let id: String = (0..rng.random_range(1..12))
            .map(|_| rng.random_range('a'..='z'))
            .collect();
        let _ = b.insert(format!("{id}{v}"), FrameMatrix::new(dim, data).unwrap());
    }
    b.build().unwrap()
}

fn format_roundtrips() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xF0);
    for i in 0..1000 {
        let run = arb_run(&mut rng);
        let text = write_run_string(&run);
        let back = parse_run_str(&text).map_err(|e| format!("run {i}: {e}"))?;
        ensure(write_run_string(&back) == text, || format!("run {i}: text changed"))?;
        for (q, entries) in run.queries() {
            let ids: Vec<&str> = entries.iter().map(|e| e.video_id.as_str()).collect();
            ensure(back.ranked_ids(q).unwrap() == ids, || format!("run {i}: order changed"))?;
        }

        let store = arb_store(&mut rng);
        let bytes = embedstore::store_to_bytes(&store);
        let reopened = embedstore::open_store(&bytes).map_err(|e| format!("store {i}: {e}"))?;
        ensure(embedstore::store_to_bytes(&reopened) == bytes, || {
            format!("store {i}: bytes changed")
        })?;
    }

    let mut rejected = 0;
    while rejected < 1000 {
        let store = arb_store(&mut rng);
        let mut bytes = embedstore::store_to_bytes(&store);
        let pos = rng.random_range(0..HEADER_LEN);
        let val: u8 = rng.random();
        // Clearing the normalized bit of a normalized store yields another
        // valid file; it drops a claim without touching data.
        let clears_flag = pos == 8 && store.is_normalized() && val == bytes[8] & !1;
        if val == bytes[pos] || clears_flag {
            continue;
        }
        bytes[pos] = val;
        ensure(embedstore::open_store(&bytes).is_err(), || {
            format!("accepted corruption at byte {pos} -> {val:#04x}")
        })?;
        rejected += 1;
    }
    Ok("1000 runs + 1000 stores round-trip exactly; 1000/1000 header corruptions rejected".into())
}

fn end_to_end() -> Outcome {
    let mut wins = 0;
    let mut gains = Vec::new();
    for seed in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(1000 + seed);
        let c = planted_corpus(&mut rng, &PlantedParams::default());
        let before = evaluate_run(&c.run, &c.qrels, Metric::Ap)
            .map_err(|e| e.to_string())?
            .mean;
        let (after_run, _) =
            rerank_run(&c.run, &c.store, &c.queries, &FusionConfig::default()).map_err(|e| e.to_string())?;
        let after = evaluate_run(&after_run, &c.qrels, Metric::Ap)
            .map_err(|e| e.to_string())?
            .mean;
        if after > before {
            wins += 1;
        }
        gains.push(after - before);
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    ensure(wins >= 95, || format!("only {wins}/100 seeds improved"))?;
    Ok(format!("{wins}/100 seeds improved, mean AP gain {mean_gain:+.3}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("fusion endpoint identities", endpoint_identities),
        ("fused scores match hand table (alpha 0.4)", hand_table),
        (
            "max-pooling monotonicity and frame-permutation invariance",
            pooling_properties,
        ),
        ("infAP reduces to AP under complete judgments", infap_reduction),
        ("infAP Monte Carlo unbiasedness", infap_unbiased),
        ("label spreading solver agreement", labelspread_agreement),
        ("single-query latency anchor", latency_anchor),
        ("run and EMBS format round-trips, header corruption", format_roundtrips),
        ("planted corpus: rerank improves mean AP", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
