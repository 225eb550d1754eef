//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Criterion 10 runs only when `DPROTO_GSC_ROOT` points at a
//! Speech Commands v2 directory.

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dproto::dataset::{
    synth_corpus, EpisodeConfig, EpisodeSampler, FeatureLoader, Manifest, Split, SynthConfig,
};
use dproto::eval::{auroc, evaluate, ScoreRule};
use dproto::features::NoiseBank;
use dproto::model::{
    gumbel_from_uniform, posterior, select_dummy, EncoderConfig, GeneratorConfig, Model,
    ModelConfig, ScoringConfig, Selection,
};
use dproto::numerics::{Tape, Tensor};
use dproto::training::{dual_cross_entropy, gumbel_tau_at, lr_at, train, TrainConfig};
use dproto_cli::commands::{cmd_gradcheck, cmd_manifest};
use dproto_cli::RunConfig;

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

fn report(id: &str, name: &str, o: &Outcome) {
    println!(
        "[{}] {id:>2} {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gradient_correctness() -> Outcome {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("model.channels", "8"),
        ("episode.n_way", "3"),
        ("episode.n_shot", "2"),
        ("episode.n_query", "2"),
        ("model.dummies", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let start = Instant::now();
    match cmd_gradcheck(&cfg, None) {
        Ok(r) => {
            let secs = start.elapsed().as_secs_f64();
            let d = cfg.model().unwrap().encoder.embedding_dim();
            outcome(
                r.max_rel_error < 1e-4 && secs < 60.0,
                format!("D={d}, {} probes checked, max relative error {:.3e} (< 1e-4), {secs:.1} s (< 60 s)", r.checked(), r.max_rel_error),
            )
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn permutation_invariance() -> Outcome {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            channels: 8,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let d = model.embedding_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=10);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let a = model
            .generate_dummies(&Tensor::from_rows(&rows).unwrap())
            .unwrap()
            .unwrap();
        let b = model
            .generate_dummies(&Tensor::from_rows(&shuffled).unwrap())
            .unwrap()
            .unwrap();
        if a.data()
            .iter()
            .zip(b.data())
            .any(|(x, y)| x.to_bits() != y.to_bits())
        {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches}/100 prototype sets changed under row permutation"),
    )
}

/// Log-softmax of `-d / tau` over prototypes, cross-entropy averaged over queries.
fn plain_protonet_loss(
    emb: &[Vec<f64>],
    support: &[Vec<usize>],
    queries: &[usize],
    labels: &[usize],
    tau: f64,
) -> f64 {
    let protos: Vec<Vec<f64>> = support
        .iter()
        .map(|rows| {
            let mut c = vec![0.0; emb[0].len()];
            for &r in rows {
                for (ci, v) in c.iter_mut().zip(&emb[r]) {
                    *ci += v / rows.len() as f64;
                }
            }
            c
        })
        .collect();
    let mut total = 0.0;
    for (&q, &y) in queries.iter().zip(labels) {
        let logits: Vec<f64> = protos.iter().map(|c| -sqdist(&emb[q], c) / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / queries.len() as f64
}

fn posterior_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scoring = ScoringConfig {
        tau_known: 1.0,
        gamma: 3.0,
    };
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=16);
        let protos: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = posterior(&q, &Tensor::from_rows(&protos).unwrap(), Some(&c), &scoring).unwrap();
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    let hand = posterior(
        &[1.0],
        &Tensor::from_rows(&[vec![0.0]]).unwrap(),
        Some(&[2.0]),
        &scoring,
    )
    .unwrap()[1];

    let base_cfg = ModelConfig {
        encoder: EncoderConfig {
            channels: 1,
            ..EncoderConfig::default()
        },
        generator: None,
        ..ModelConfig::default()
    };
    let model = Model::new(base_cfg, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    let mut worst_loss: f64 = 0.0;
    for _ in 0..1000 {
        let (n, m, mq) = (
            rng.gen_range(2..=6),
            rng.gen_range(1..=5),
            rng.gen_range(1..=4),
        );
        let d = rng.gen_range(2..=24);
        let rows = n * (m + mq);
        let emb: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let support: Vec<Vec<usize>> = (0..n).map(|c| (c * m..(c + 1) * m).collect()).collect();
        let queries: Vec<usize> = (n * m..rows).collect();
        let labels: Vec<usize> = (0..n * mq).map(|i| i / mq).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let e = tape.leaf(Tensor::from_rows(&emb).unwrap(), true);
        let lp = model
            .log_posterior_graph(
                &mut tape,
                &bound,
                e,
                &support,
                &queries,
                Selection::Argmax { tau: 1.0 },
            )
            .unwrap();
        let loss = dual_cross_entropy(&mut tape, lp, &labels, 0, n, 0.0).unwrap();
        let expect = plain_protonet_loss(&emb, &support, &queries, &labels, 1.0);
        worst_loss = worst_loss.max((tape.value(loss).item().unwrap() - expect).abs());
    }
    outcome(
        worst_sum <= 1e-12 && (hand - 0.6607).abs() <= 1e-4 && worst_loss <= 1e-10,
        format!("max |sum-1| {worst_sum:.2e} (<= 1e-12); p_dummy {hand:.6} (0.6607 ± 1e-4); no-dummy loss vs reference max diff {worst_loss:.2e} (<= 1e-10) over 1000 episodes"),
    )
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut mismatches = 0;
    for _ in 0..100 {
        let nk = rng.gen_range(1..=100);
        let nu = rng.gen_range(1..=(200 - nk).min(100));
        let levels = rng.gen_range(2..=50) as f64;
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| (rng.gen_range(0.0..1.0) * levels).floor() / levels)
                .collect::<Vec<f64>>()
        };
        let (k, u) = (draw(nk), draw(nu));
        let mut wins = 0.0;
        for a in &u {
            for b in &k {
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let oracle = wins / (nk * nu) as f64;
        if auroc(&k, &u).unwrap() != oracle {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches}/100 score sets differ from the pairwise oracle (exact comparison)"),
    )
}

fn sampler_protocol(manifest: &Manifest) -> Outcome {
    let cfg = EpisodeConfig {
        n_way: 5,
        n_shot: 5,
        n_open: 5,
        n_query: 15,
    };
    let sampler = EpisodeSampler::new(manifest, Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut violations = 0;
    for _ in 0..10_000 {
        let ep = match sampler.sample(&cfg, &mut rng) {
            Ok(ep) => ep,
            Err(_) => {
                violations += 1;
                continue;
            }
        };
        let entry = |i: usize| manifest.entry(i);
        let mut bad = ep.known_classes.len() != cfg.n_way || ep.open_classes.len() != cfg.n_open;
        bad |= ep.support.len() != cfg.n_way
            || ep.known_queries.len() != cfg.n_way
            || ep.open_queries.len() != cfg.n_open;
        bad |= ep.support.iter().any(|s| s.len() != cfg.n_shot)
            || ep
                .known_queries
                .iter()
                .chain(&ep.open_queries)
                .any(|q| q.len() != cfg.n_query);
        for (n, class) in ep.known_classes.iter().enumerate() {
            let rows = ep
                .support
                .get(n)
                .into_iter()
                .chain(ep.known_queries.get(n))
                .flatten();
            bad |= rows
                .map(|&i| entry(i))
                .any(|e| e.is_silence || e.keyword != *class || e.split != Split::Test);
        }
        for (u, class) in ep.open_classes.iter().enumerate() {
            bad |= ep
                .open_queries
                .get(u)
                .into_iter()
                .flatten()
                .map(|&i| entry(i))
                .any(|e| e.keyword != *class || e.split != Split::Test);
        }
        let known: HashSet<&String> = ep.known_classes.iter().collect();
        bad |= ep.open_classes.iter().any(|c| known.contains(c));
        let all = ep.batch_order();
        bad |= all.iter().collect::<HashSet<_>>().len() != all.len();
        if bad {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violating episodes out of 10000 (test split, 5-way 5-shot, 5 open, 15 queries)"))
}

fn gumbel_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let query = vec![0.0, 0.0];
    let dummies = Tensor::from_rows(&[
        vec![0.3, 0.0],
        vec![0.0, 0.8],
        vec![1.0, 0.5],
        vec![-0.6, 0.6],
    ])
    .unwrap();
    let d: Vec<f64> = (0..4).map(|i| sqdist(&query, dummies.row(i))).collect();
    let z: f64 = d.iter().map(|v| (-v).exp()).sum();
    let expect: Vec<f64> = d.iter().map(|v| (-v).exp() / z).collect();
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let noise: Vec<f64> = (0..4)
            .map(|_| gumbel_from_uniform(rng.gen_range(0.0..1.0)))
            .collect();
        let (_, probs) = select_dummy(
            &query,
            &dummies,
            Selection::Gumbel {
                tau: 1.0,
                noise: &noise,
            },
        )
        .unwrap();
        let best = (0..4).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        counts[best] += 1;
    }
    let mut worst_sigma: f64 = 0.0;
    for (c, p) in counts.iter().zip(&expect) {
        let f = *c as f64 / draws as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        worst_sigma = worst_sigma.max((f - p).abs() / sigma);
    }
    let freqs: Vec<String> = counts
        .iter()
        .zip(&expect)
        .map(|(c, p)| format!("{:.4}/{p:.4}", *c as f64 / draws as f64))
        .collect();
    outcome(
        worst_sigma <= 3.0,
        format!(
            "frequency/softmax [{}], worst deviation {worst_sigma:.2} sigma (<= 3)",
            freqs.join(", ")
        ),
    )
}

fn schedules() -> Outcome {
    let want = [
        (0, 0.001),
        (20, 0.0005),
        (40, 0.00025),
        (60, 0.000125),
        (80, 0.0000625),
    ];
    let lr_ok = want.iter().all(|&(e, v)| lr_at(e) == v);
    let epochs = 100;
    let (first, last) = (gumbel_tau_at(0, epochs), gumbel_tau_at(epochs - 1, epochs));
    let got: Vec<String> = want.iter().map(|&(e, _)| format!("{}", lr_at(e))).collect();
    outcome(
        lr_ok && first == 2.0 && last == 0.5,
        format!(
            "lr at 0/20/40/60/80 = {}; tau first {first}, last {last}",
            got.join("/")
        ),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Variant {
    ProtoNet,
    DProto,
    Gamma1,
    OneDummy,
}

#[derive(Debug, Clone, Copy)]
struct RunResult {
    accuracy: f64,
    auroc: f64,
}

fn desk_model(v: Variant) -> ModelConfig {
    let base = ModelConfig {
        encoder: EncoderConfig {
            channels: 16,
            ..EncoderConfig::default()
        },
        generator: Some(GeneratorConfig {
            hidden: 32,
            dummies: 3,
        }),
        scoring: ScoringConfig {
            tau_known: 1.0,
            gamma: 3.0,
        },
        rfn: None,
    };
    match v {
        Variant::ProtoNet => ModelConfig {
            generator: None,
            ..base
        },
        Variant::DProto => base,
        Variant::Gamma1 => ModelConfig {
            scoring: ScoringConfig {
                gamma: 1.0,
                ..base.scoring
            },
            ..base
        },
        Variant::OneDummy => ModelConfig {
            generator: Some(GeneratorConfig {
                hidden: 32,
                dummies: 1,
            }),
            ..base
        },
    }
}

fn desk_run(
    manifest: &Manifest,
    bank: &NoiseBank,
    v: Variant,
    seed: u64,
) -> dproto::Result<RunResult> {
    let mut cfg = TrainConfig {
        epochs: 30,
        episodes_per_epoch: 50,
        seed,
        ..TrainConfig::default()
    };
    if v == Variant::ProtoNet {
        cfg.loss.lambda = 0.0;
    }
    let model_cfg = desk_model(v);
    let out = train(manifest, Some(bank), model_cfg, &cfg, |_| {})?;
    let rule = if model_cfg.is_baseline() {
        ScoreRule::MaxProbComplement
    } else {
        ScoreRule::DummyProb
    };
    let ep = EpisodeConfig {
        n_way: 5,
        n_shot: 5,
        n_open: 5,
        n_query: 15,
    };
    let r = evaluate(
        &out.best,
        manifest,
        Split::Test,
        &ep,
        300,
        rule,
        1000 + seed,
        &FeatureLoader::new(),
    )?;
    eprintln!(
        "  {v:?} seed {seed}: accuracy {:.4}, auroc {:.4} (best epoch {})",
        r.accuracy.mean, r.auroc.mean, out.best_epoch
    );
    Ok(RunResult {
        accuracy: r.accuracy.mean,
        auroc: r.auroc.mean,
    })
}

/// Runs every job on up to `available_parallelism` threads; results keep job order.
fn run_parallel(
    manifest: &Manifest,
    bank: &NoiseBank,
    jobs: &[(Variant, u64)],
) -> Vec<dproto::Result<RunResult>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<dproto::Result<RunResult>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(v, seed)) = jobs.get(i) else { break };
                let r = desk_run(manifest, bank, v, seed);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn mean_of(results: &[(Variant, u64, RunResult)], v: Variant) -> RunResult {
    let rs: Vec<&RunResult> = results
        .iter()
        .filter(|(w, _, _)| *w == v)
        .map(|(_, _, r)| r)
        .collect();
    let n = rs.len() as f64;
    RunResult {
        accuracy: rs.iter().map(|r| r.accuracy).sum::<f64>() / n,
        auroc: rs.iter().map(|r| r.auroc).sum::<f64>() / n,
    }
}

fn collect(
    jobs: &[(Variant, u64)],
    results: Vec<dproto::Result<RunResult>>,
) -> Result<Vec<(Variant, u64, RunResult)>, String> {
    jobs.iter()
        .zip(results)
        .map(|(&(v, s), r)| {
            r.map(|r| (v, s, r))
                .map_err(|e| format!("{v:?} seed {s}: {e}"))
        })
        .collect()
}

fn desk_reproduction(
    manifest: &Manifest,
    bank: &NoiseBank,
) -> (Outcome, Option<Vec<(Variant, u64, RunResult)>>) {
    let jobs: Vec<(Variant, u64)> = SEEDS
        .iter()
        .flat_map(|&s| [(Variant::ProtoNet, s), (Variant::DProto, s)])
        .collect();
    let start = Instant::now();
    let results = run_parallel(manifest, bank, &jobs);
    let elapsed = start.elapsed();
    let results = match collect(&jobs, results) {
        Ok(r) => r,
        Err(e) => return (outcome(false, format!("run failed: {e}")), None),
    };
    let (p, d) = (
        mean_of(&results, Variant::ProtoNet),
        mean_of(&results, Variant::DProto),
    );
    let gap = 100.0 * (d.auroc - p.auroc);
    let acc_gap = 100.0 * (d.accuracy - p.accuracy);
    let limit = Duration::from_secs(30 * 60);
    let o = outcome(
        gap >= 5.0 && acc_gap >= -3.0 && elapsed < limit,
        format!(
            "AUROC D-ProtoNet {:.2} vs ProtoNet {:.2} (gap {gap:+.2}, needs >= +5); accuracy {:.2} vs {:.2} (gap {acc_gap:+.2}, needs >= -3); {:.1} min on {} thread(s) (< 30 min)",
            100.0 * d.auroc,
            100.0 * p.auroc,
            100.0 * d.accuracy,
            100.0 * p.accuracy,
            elapsed.as_secs_f64() / 60.0,
            std::thread::available_parallelism().map_or(1, |n| n.get()),
        ),
    );
    (o, Some(results))
}

fn ablation(
    manifest: &Manifest,
    bank: &NoiseBank,
    main: Option<Vec<(Variant, u64, RunResult)>>,
) -> Outcome {
    let Some(main) = main else {
        return outcome(false, "needs the runs of criterion 8");
    };
    let jobs: Vec<(Variant, u64)> = SEEDS
        .iter()
        .flat_map(|&s| [(Variant::Gamma1, s), (Variant::OneDummy, s)])
        .collect();
    let results = match collect(&jobs, run_parallel(manifest, bank, &jobs)) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let all: Vec<_> = main.into_iter().chain(results).collect();
    let auroc = |v| 100.0 * mean_of(&all, v).auroc;
    let (p, g3, g1, l1) = (
        auroc(Variant::ProtoNet),
        auroc(Variant::DProto),
        auroc(Variant::Gamma1),
        auroc(Variant::OneDummy),
    );
    outcome(
        g3 >= g1 - 1.0 && l1 - p >= 5.0 && g3 - p >= 5.0,
        format!("AUROC gamma=3 {g3:.2} vs gamma=1 {g1:.2} (needs >= gamma=1 - 1); L=1 {l1:.2}, L=3 {g3:.2} vs no dummy {p:.2} (each needs >= +5)"),
    )
}

fn full_scale(root: &Path) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.tsv");
    let m = match cmd_manifest(root, &path, 0) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("manifest: {e}")),
    };
    let c = m.counts();
    let counts_ok = (c.train, c.val, c.test) == (24_444, 4_007, 4_482);
    let mut cfg = RunConfig::default();
    cfg.set("data.manifest", path.to_str().unwrap()).unwrap();
    let run = (|| -> dproto::Result<f64> {
        let bank = NoiseBank::load_dir(&root.join("_background_noise_"))?;
        let out = train(&m, Some(&bank), cfg.model()?, &cfg.train()?, |r| {
            eprintln!("  epoch {} val auroc {:.4}", r.epoch, r.val_auroc)
        })?;
        let r = evaluate(
            &out.best,
            &m,
            Split::Test,
            &cfg.eval_episode(),
            cfg.eval_episodes(),
            ScoreRule::DummyProb,
            0,
            &FeatureLoader::new(),
        )?;
        Ok(r.auroc.mean)
    })();
    match run {
        Ok(a) => outcome(
            counts_ok && a > 0.65,
            format!(
                "manifest {} / {} / {} (24444 / 4007 / 4482); 5-shot AUROC {:.2} (> 65)",
                c.train,
                c.val,
                c.test,
                100.0 * a
            ),
        ),
        Err(e) => outcome(
            false,
            format!(
                "manifest {} / {} / {}; run failed: {e}",
                c.train, c.val, c.test
            ),
        ),
    }
}

fn main() {
    let mut failed = 0;
    let mut check = |id: &str, name: &str, o: Outcome| {
        report(id, name, &o);
        if !o.pass {
            failed += 1;
        }
    };
    check("1", "gradient correctness", gradient_correctness());
    check("2", "permutation invariance", permutation_invariance());
    check("3", "posterior correctness", posterior_correctness());
    check("4", "AUROC oracle equivalence", auroc_oracle());

    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = synth_corpus(
        dir.path(),
        &SynthConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .expect("synthetic corpus");
    let bank = NoiseBank::load_dir(&dir.path().join("_background_noise_")).expect("noise bank");

    check("5", "sampler protocol", sampler_protocol(&manifest));
    check("6", "Gumbel statistics", gumbel_statistics());
    check("7", "schedules", schedules());
    let (o8, runs) = desk_reproduction(&manifest, &bank);
    check("8", "desk-scale reproduction", o8);
    check("9", "ablation direction", ablation(&manifest, &bank, runs));
    match std::env::var_os("DPROTO_GSC_ROOT") {
        Some(root) => check("10", "full-scale sanity", full_scale(Path::new(&root))),
        None => println!("[SKIP] 10 full-scale sanity: DPROTO_GSC_ROOT not set"),
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
