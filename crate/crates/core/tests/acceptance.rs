//! Acceptance run: one pass/fail line per criterion, non-zero exit if any fails.
//! Criteria 4 and 6 train real models and dominate the runtime.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nmtforge::corpus::{filter_corpus, filter_pair, FilterRules, ParallelCorpus, Provenance, Reject, SentencePair, Verdict};
use nmtforge::decode::DecodeConfig;
use nmtforge::metrics::{corpus_bleu, Tokenizer};
use nmtforge::model_zoo::{
    dtmt, init_store, transformer, Architecture, Direction, DtmtSpec, Model, ModelSpec, Preset, SelfAttention,
    TransformerSpec,
};
use nmtforge::numerics::{grad_check, grad_check_store, GradCheckConfig, Graph, Tensor, Var};
use nmtforge::pipeline::{run_experiment, PipelineConfig, RunOptions};
use nmtforge::text::{Vocabulary, BOS, EOS};
use nmtforge::toy::{ToyTask, ToyTaskSpec};
use nmtforge::train::{
    bleu_on, candidate_distribution, expected_risk, mrt_objective, pss_mix, target_denoise, DenoiseConfig, Objective,
    TrainConfig, Trainer,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Random fixed projection to a scalar, so every output coordinate gets its own gradient.
fn project<'g>(g: &mut Graph<'g>, x: Var, rng: &mut ChaCha8Rng) -> nmtforge::Result<Var> {
    let w = random(rng, &g.shape(x).to_vec());
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::from_counts((0..n).map(|i| (format!("w{i}"), 100 - i)))
}

fn tiny_transformer(attention: SelfAttention) -> TransformerSpec {
    TransformerSpec {
        hidden: 8,
        filter: 12,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        prenorm: true,
        decoder_self_attention: attention,
        positional: true,
    }
}

const SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |block: &'static str, e: f64| -> Result<(), String> {
        let w = worst.entry(block).or_insert(0.0);
        *w = w.max(e);
        ensure(e < GRAD_TOL, || format!("{block}: relative error {e:.2e}"))
    };
    let enc = tiny_transformer(SelfAttention::Standard);
    let aan = tiny_transformer(SelfAttention::Average);
    for seed in 0..SEEDS {
        let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        let store = init_store(&transformer::encoder_layer_schema(&enc, 0), seed).map_err(err)?;
        let x = random(&mut rng, &[2, 3, 8]);
        let proj = rng.gen();
        let e = grad_check_store(
            |g, p| {
                let x = g.constant(x.clone());
                let o = transformer::encoder_layer(g, p, &enc, 0, x, None)?;
                project(g, o, &mut ChaCha8Rng::seed_from_u64(proj))
            },
            &store,
            &cfg,
        )
        .map_err(err)?;
        record("pre-norm transformer layer", e)?;

        let store = init_store(&transformer::decoder_layer_schema(&aan, 0), seed).map_err(err)?;
        let (x, mem) = (random(&mut rng, &[2, 4, 8]), random(&mut rng, &[2, 3, 8]));
        let e = grad_check_store(
            |g, p| {
                let x = g.constant(x.clone());
                let mem = g.constant(mem.clone());
                let o = transformer::decoder_layer(g, p, &aan, 0, x, mem, None, None)?;
                project(g, o, &mut ChaCha8Rng::seed_from_u64(proj))
            },
            &store,
            &cfg,
        )
        .map_err(err)?;
        record("AAN layer", e)?;

        let store = init_store(&dtmt::lgru_schema("l", 3, 4), seed).map_err(err)?;
        let (x, h) = (random(&mut rng, &[2, 3]), random(&mut rng, &[2, 4]));
        let e = grad_check_store(
            |g, p| {
                let (x, h) = (g.constant(x.clone()), g.constant(h.clone()));
                let o = dtmt::lgru_step(g, p, "l", x, h)?;
                project(g, o, &mut ChaCha8Rng::seed_from_u64(proj))
            },
            &store,
            &cfg,
        )
        .map_err(err)?;
        record("L-GRU", e)?;

        let mut store = init_store(&dtmt::tgru_schema("t1", 4), seed).map_err(err)?;
        for (name, t) in init_store(&dtmt::tgru_schema("t2", 4), seed + 500).map_err(err)?.iter() {
            store.insert(name, t.clone()).map_err(err)?;
        }
        let h = random(&mut rng, &[2, 4]);
        let e = grad_check_store(
            |g, p| {
                let h = g.constant(h.clone());
                let o = dtmt::tgru_step(g, p, "t1", h)?;
                let o = dtmt::tgru_step(g, p, "t2", o)?;
                project(g, o, &mut ChaCha8Rng::seed_from_u64(proj))
            },
            &store,
            &cfg,
        )
        .map_err(err)?;
        record("T-GRU", e)?;

        let spec = ModelSpec {
            architecture: Architecture::Dtmt(DtmtSpec {
                hidden: 5,
                lgru_per_block: 1,
                tgru_per_block: 2,
                bidirectional_encoder: seed % 2 == 0,
            }),
            direction: Direction::L2r,
        };
        let m = Model::build(spec, vocab(3), vocab(3), seed).map_err(err)?;
        let src: Vec<usize> = (0..3).map(|_| rng.gen_range(4..7)).collect();
        let tgt: Vec<usize> = (0..2).map(|_| rng.gen_range(4..7)).collect();
        let e = grad_check_store(
            |g, p| {
                let logits = m.forward(g, p, &[src.clone()], &[vec![BOS, tgt[0], tgt[1]]])?;
                let logits = g.reshape(logits, &[3, 7])?;
                g.cross_entropy(logits, &[Some(tgt[0]), Some(tgt[1]), Some(EOS)], 0.1)
            },
            &m.params,
            &GradCheckConfig { coords_per_param: 3, ..cfg.clone() },
        )
        .map_err(err)?;
        record("full DTMT", e)?;

        let logits = random(&mut rng, &[4, 6]);
        let labels: Vec<Option<usize>> = (0..4).map(|i| (i != 2).then(|| rng.gen_range(0..6))).collect();
        let smoothing = [0.0, 0.1][seed as usize % 2];
        let e = grad_check(|g, v| g.cross_entropy(v[0], &labels, smoothing), &[logits], &cfg).map_err(err)?;
        record("cross-entropy loss", e)?;

        let groups = [2usize, 3, 1];
        let scores = Tensor::vector((0..6).map(|_| rng.gen_range(-8.0..-0.5)).collect());
        let risks: Vec<f64> = (0..6).map(|_| -rng.gen::<f64>()).collect();
        let alpha = rng.gen_range(0.05..1.5);
        let e = grad_check(|g, v| mrt_objective(g, v[0], &groups, &risks, alpha, seed % 2 == 1), &[scores], &cfg)
            .map_err(err)?;
        record("MRT loss", e)?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 600.0, || format!("took {secs:.0} s"))?;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!("{} blocks x {SEEDS} seeds in {secs:.1} s; worst: {}", worst.len(), detail.join(", ")))
}

fn criterion_2() -> Outcome {
    let (e1, e2) = ((-1f64).exp(), (-2f64).exp());
    let hand = (e1 * -0.8 + e2 * -0.3) / (e1 + e2);
    let r = expected_risk(&[-1.0, -2.0], &[-0.8, -0.3], 1.0).map_err(err)?;
    ensure((r - hand).abs() < 1e-9, || format!("fixture {r} vs {hand}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..10);
        let lps: Vec<f64> = (0..n).map(|_| rng.gen_range(-40.0..0.0)).collect();
        let alpha = rng.gen_range(0.001..3.0);
        let shift = rng.gen_range(-100.0..100.0);
        let q = candidate_distribution(&lps, alpha).map_err(err)?;
        worst = worst.max((q.iter().sum::<f64>() - 1.0).abs());
        ensure(q.iter().all(|&x| (0.0..=1.0).contains(&x)), || format!("Q out of range: {q:?}"))?;
        let shifted: Vec<f64> = lps.iter().map(|x| x + shift).collect();
        let q2 = candidate_distribution(&shifted, alpha).map_err(err)?;
        worst = q.iter().zip(&q2).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    ensure(worst < 1e-9, || format!("fuzzed deviation {worst:.2e}"))?;
    Ok(format!("fixture {r:.9}, 1000 fuzzed sets, max deviation {worst:.1e}"))
}

/// Brute-force BLEU: every n-gram occurrence is counted by scanning the whole sentence.
fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let count = |s: &[String], g: &[String]| s.windows(g.len()).filter(|w| *w == g).count();
    let (mut hl, mut rl) = (0usize, 0usize);
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (h, r) in hyps.iter().zip(refs) {
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            total[n - 1] += h.len() + 1 - n;
            // each distinct n-gram once, at its first occurrence
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                if h.windows(n).position(|w| w == g) == Some(i) {
                    matched[n - 1] += count(h, g).min(count(r, g));
                }
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if total[n] == 0 { 1.0 } else { matched[n] as f64 / total[n] as f64 };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / 4.0;
    }
    if hl == 0 {
        return 0.0;
    }
    let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
    100.0 * bp * log_sum.exp()
}

fn criterion_3() -> Outcome {
    let fixture = corpus_bleu(&["the cat sat"], &["the cat sat down"], Tokenizer::V13a).map_err(err)?.score;
    ensure((fixture - 71.65).abs() <= 0.01, || format!("fixture {fixture}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let words = ["a", "b", "c", "d", "e", "f"];
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let lines = rng.gen_range(1..8);
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let len = rng.gen_range(1..12);
            (0..len).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect()
        };
        let hyps: Vec<Vec<String>> = (0..lines).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<String>> = (0..lines).map(|_| sentence(&mut rng)).collect();
        let join = |v: &[Vec<String>]| v.iter().map(|s| s.join(" ")).collect::<Vec<_>>();
        let got = corpus_bleu(&join(&hyps), &join(&refs), Tokenizer::Whitespace).map_err(err)?.score;
        worst = worst.max((got - oracle_bleu(&hyps, &refs)).abs());
    }
    ensure(worst < 1e-9, || format!("oracle deviation {worst:.2e}"))?;
    Ok(format!("fixture {fixture:.4}, 50 random fixtures, max deviation {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut spec = ToyTaskSpec::new(ToyTask::LexiconSwap, 50, 12, 2000, 1);
    let train = spec.generate().map_err(err)?;
    spec.seed = 2;
    spec.pairs = 200;
    let held_out = spec.generate().map_err(err)?;
    let greedy = DecodeConfig::greedy();
    let mut parts = Vec::new();
    let mut failed = false;
    for preset in Preset::ALL {
        let start = Instant::now();
        let mut model =
            Model::build(preset.spec(), Vocabulary::build(&train.sources()), Vocabulary::build(&train.targets()), 0)
                .map_err(err)?;
        let mut cfg = TrainConfig::for_model(&model);
        cfg.batch_tokens = 256;
        let mut best = (0.0f64, 0usize);
        let mut trainer = Trainer::new(&mut model, &train, cfg, Objective::CrossEntropy).map_err(err)?;
        trainer
            .run(3000, 250, |m, step| {
                let b = bleu_on(&[m], &held_out, &greedy)?;
                if b > best.0 {
                    best = (b, step);
                }
                Ok(b >= 95.0)
            })
            .map_err(err)?;
        let secs = start.elapsed().as_secs_f64();
        let ok = best.0 >= 95.0 && secs < 1800.0;
        failed |= !ok;
        parts.push(format!("{} {:.2} at step {} ({secs:.0} s)", preset.name(), best.0, best.1));
    }
    if failed {
        Err(parts.join("; "))
    } else {
        Ok(parts.join("; "))
    }
}

fn criterion_5() -> Outcome {
    let m = Model::build(Preset::Aan.spec(), vocab(20), vocab(20), 5).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let src: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(4..24)).collect();
        let mut dec = vec![BOS];
        dec.extend((0..rng.gen_range(0..30)).map(|_| rng.gen_range(4..24)));
        let full = m.full_log_probs(&src, &dec).map_err(err)?;
        let mem = m.memory(&[src]).map_err(err)?;
        let mut st = vec![m.init_state(&mem, 0).map_err(err)?];
        for (t, &tok) in dec.iter().enumerate() {
            let row = m.step(&mem, &mut st, &[tok]).map_err(err)?.remove(0);
            worst = row.iter().zip(full.row(t)).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        }
    }
    ensure(worst < 1e-6, || format!("incremental vs parallel {worst:.2e}"))?;

    // per-step time at prefix 10 and 200, best of several repeats to shed noise
    let src: Vec<usize> = (0..10).map(|i| 4 + i).collect();
    let mem = m.memory(&[src]).map_err(err)?;
    let window = 10;
    let (mut early, mut late) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..7 {
        let mut st = vec![m.init_state(&mem, 0).map_err(err)?];
        let mut tok = BOS;
        for t in 0..200 + window {
            let started = Instant::now();
            m.step(&mem, &mut st, &[tok]).map_err(err)?;
            let dt = started.elapsed().as_secs_f64();
            tok = 4 + t % 20;
            if t == 10 {
                early = early.min(dt);
            }
            if t == 200 {
                late = late.min(dt);
            }
        }
    }
    let ratio = late / early;
    ensure((0.8..=1.2).contains(&ratio), || format!("step time ratio 200/10 = {ratio:.3}"))?;
    Ok(format!("max deviation {worst:.1e} over 100 prefixes; step time ratio 200/10 = {ratio:.3}"))
}

fn row(report: &nmtforge::pipeline::ExperimentReport, stage: &str) -> Result<f64, String> {
    report.rows.iter().find(|r| r.stage == stage).map(|r| r.bleu).ok_or_else(|| format!("no row {stage}"))
}

fn criterion_6() -> Outcome {
    let config = PipelineConfig::load(&configs().join("domain_shift.toml")).map_err(err)?;
    let cache = tempfile::tempdir().map_err(err)?;
    let names = ["(a) bt", "(b) finetune", "(c) transfer", "(d) pss", "(d) denoise", "(d) mrt", "(e) advanced ensemble"];
    let mut wins = [0usize; 7];
    let mut seeds = Vec::new();
    for seed in 1..=3u64 {
        let mut c = config.clone();
        c.seed = seed;
        let r = run_experiment(&c, &RunOptions { cache_root: Some(cache.path().to_path_buf()), out_dir: None, threads: 1 })
            .map_err(err)?;
        let (base, bt, ft, tr) = (row(&r, "row_baseline")?, row(&r, "row_bt")?, row(&r, "row_ft")?, row(&r, "row_transfer")?);
        let advanced = ["row_ft_pss", "row_ft_denoise", "row_ft_mrt"]
            .iter()
            .map(|s| row(&r, s))
            .collect::<Result<Vec<_>, _>>()?;
        let (normal_ens, advanced_ens) = (row(&r, "row_normal_ens")?, row(&r, "row_advanced_ens")?);
        let holds = [
            bt >= base + 2.0,
            ft > bt,
            tr > ft,
            advanced[0] >= ft,
            advanced[1] >= ft,
            advanced[2] >= ft,
            advanced_ens >= normal_ens,
        ];
        for (w, h) in wins.iter_mut().zip(holds) {
            *w += h as usize;
        }
        seeds.push(format!(
            "seed {seed}: {base:.1}/{bt:.1}/{ft:.1}/{tr:.1} adv {:.1}/{:.1}/{:.1} ens {normal_ens:.1}/{advanced_ens:.1}",
            advanced[0], advanced[1], advanced[2]
        ));
    }
    let tally: Vec<String> = names.iter().zip(wins).map(|(n, w)| format!("{n} {w}/3")).collect();
    let detail = format!("{}; {}", tally.join(", "), seeds.join("; "));
    if wins.iter().all(|&w| w >= 2) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn files(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).map_err(err)? {
            let p = e.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(err)?.to_path_buf();
                out.insert(rel, std::fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn criterion_7() -> Outcome {
    let config = PipelineConfig::load(&configs().join("micro.toml")).map_err(err)?;
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let opts = RunOptions { cache_root: Some(dir.path().join("cache")), out_dir: Some(dir.path().join("out")), threads: 1 };
        run_experiment(&config, &opts).map_err(err)?;
        runs.push((files(&dir.path().join("out"))?, files(&dir.path().join("cache"))?, dir));
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure(a.0 == b.0, || "reports differ".into())?;
    let ckpts = |m: &BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        m.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "ckpt")).map(|(p, v)| (p.clone(), v.clone())).collect()
    };
    let (ca, cb) = (ckpts(&a.1), ckpts(&b.1));
    ensure(!ca.is_empty(), || "no checkpoints written".into())?;
    ensure(ca == cb, || "checkpoints differ".into())?;
    ensure(a.1 == b.1, || "stage outputs differ".into())?;
    Ok(format!("{} report files, {} checkpoints, {} stage files identical", a.0.len(), ca.len(), a.1.len()))
}

fn pair(s: usize, t: usize, word: &str) -> SentencePair {
    SentencePair::new(vec![word.to_string(); s], vec!["y".to_string(); t], Provenance::Gold)
}

fn criterion_8() -> Outcome {
    let rules = FilterRules::default();
    ensure(rules.max_len == 100 && rules.max_word_chars == 40 && rules.max_ratio == 4.0, || format!("{rules:?}"))?;
    let keep = Verdict::Keep;
    let reject = Verdict::Reject;
    let cases = [
        (pair(100, 100, "x"), keep),
        (pair(101, 100, "x"), reject(Reject::LengthExceeded)),
        (pair(100, 101, "x"), reject(Reject::LengthExceeded)),
        (pair(3, 3, &"w".repeat(40)), keep),
        (pair(3, 3, &"w".repeat(41)), reject(Reject::WordTooLong)),
        (pair(3, 3, &"é".repeat(40)), keep),
        (pair(8, 2, "x"), keep),
        (pair(2, 8, "x"), keep),
        (pair(9, 2, "x"), reject(Reject::RatioExceeded)),
        (pair(2, 9, "x"), reject(Reject::RatioExceeded)),
        (pair(100, 25, "x"), keep),
        (pair(0, 3, "x"), reject(Reject::EmptySide)),
    ];
    for (i, (p, want)) in cases.iter().enumerate() {
        let got = filter_pair(p, &rules);
        ensure(got == *want, || format!("boundary case {i}: {got:?}, want {want:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pool = ["a", "bb", "ccc", &"d".repeat(39), &"e".repeat(41)].map(String::from);
    for _ in 0..200 {
        let n = rng.gen_range(0..60);
        let side = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let len = *[0, 1, 2, 5, 9, 40, 99, 100, 101].choose(rng).expect("non-empty");
            (0..len).map(|_| pool.choose(rng).expect("non-empty").clone()).collect()
        };
        let mut corpus: ParallelCorpus = (0..n)
            .map(|_| SentencePair::new(side(&mut rng), side(&mut rng), Provenance::Gold))
            .collect();
        let dup: Vec<SentencePair> = corpus.iter().take(5).cloned().collect();
        corpus.pairs.extend(dup);
        let (once, _) = filter_corpus(&corpus, &rules);
        let (twice, stats) = filter_corpus(&once, &rules);
        ensure(once == twice, || "filtering is not idempotent".into())?;
        ensure(stats.kept == once.len(), || "second pass dropped pairs".into())?;
    }
    Ok(format!("{} boundary cases, idempotent on 200 fuzzed corpora", cases.len()))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let targets: Vec<Vec<usize>> = (0..9000).map(|i| (0..1 + i % 12).map(|k| 4 + (k * 7 + i) % 40).collect()).collect();
    let (_, denoise) = target_denoise(&targets, &DenoiseConfig::default(), &mut rng);
    ensure(denoise.positions >= 50_000, || format!("only {} tokens", denoise.positions))?;
    let d = denoise.fraction();
    ensure((d - 0.045).abs() <= 0.005, || format!("corrupted fraction {d:.4}"))?;

    let gold: Vec<Vec<usize>> = (0..3000).map(|i| (0..2 + i % 13).map(|k| 4 + k).collect()).collect();
    let pred: Vec<Vec<usize>> = gold.iter().map(|g| vec![99; g.len()]).collect();
    let (_, mixed) = pss_mix(&gold, &pred, 0.5, &mut rng);
    let p = mixed.fraction();
    ensure((p - 0.5).abs() <= 0.02, || format!("mixed fraction {p:.4}"))?;

    // the same rates observed through the trainer
    let spec = ToyTaskSpec::new(ToyTask::Copy, 30, 12, 600, 9);
    let corpus = spec.generate().map_err(err)?;
    let small = ModelSpec {
        architecture: Architecture::Transformer(tiny_transformer(SelfAttention::Standard)),
        direction: Direction::L2r,
    };
    let mut rates = Vec::new();
    for objective in [Objective::Denoise(DenoiseConfig::default()), Objective::Pss { mix_ratio: 0.5 }] {
        let mut m = Model::build(small.clone(), Vocabulary::build(&corpus.sources()), Vocabulary::build(&corpus.targets()), 9)
            .map_err(err)?;
        let mut cfg = TrainConfig::finetune();
        cfg.batch_tokens = 2048;
        cfg.seed = 9;
        let mut t = Trainer::new(&mut m, &corpus, cfg, objective).map_err(err)?;
        while t.noise_counts().positions < 50_000 {
            t.step().map_err(err)?;
        }
        rates.push(t.noise_counts().fraction());
    }
    ensure((rates[0] - 0.045).abs() <= 0.005, || format!("trainer corrupted fraction {:.4}", rates[0]))?;
    ensure((rates[1] - 0.5).abs() <= 0.02, || format!("trainer mixed fraction {:.4}", rates[1]))?;
    Ok(format!(
        "denoise {d:.4} over {} tokens, pss {p:.4} over {} positions; in training {:.4} / {:.4}",
        denoise.positions, mixed.positions, rates[0], rates[1]
    ))
}

fn main() {
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", criterion_1),
        ("MRT math", criterion_2),
        ("BLEU oracle", criterion_3),
        ("architecture convergence", criterion_4),
        ("AAN equivalence", criterion_5),
        ("pipeline directions", criterion_6),
        ("determinism", criterion_7),
        ("filter rules", criterion_8),
        ("noise statistics", criterion_9),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
