use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model_zoo::{Architecture, ModelSpec, SelfAttention, TransformerSpec};
use crate::text::{Vocabulary, BOS, EOS, PAD};

type Table = dyn Fn(&[usize], &[usize]) -> Vec<f64> + Sync;

/// Scores prefixes with an arbitrary function of (source, prefix without BOS).
struct Toy {
    vocab: usize,
    table: Box<Table>,
}

struct ToySession<'a> {
    toy: &'a Toy,
    sources: Vec<Vec<usize>>,
    rows: Vec<(usize, Vec<usize>)>,
}

impl Session for ToySession<'_> {
    fn advance(&mut self, origins: &[Origin], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let rows = std::mem::take(&mut self.rows);
        self.rows = regather(rows, origins, |i| Ok((i, Vec::new())))?;
        Ok(self
            .rows
            .iter_mut()
            .zip(tokens)
            .map(|((src, prefix), &t)| {
                if t != BOS {
                    prefix.push(t);
                }
                (self.toy.table)(&self.sources[*src], prefix)
            })
            .collect())
    }
}

impl StepModel for Toy {
    fn target_vocab_size(&self) -> usize {
        self.vocab
    }

    fn open<'a>(&'a self, sources: &[Vec<usize>]) -> Result<Box<dyn Session + 'a>> {
        Ok(Box::new(ToySession { toy: self, sources: sources.to_vec(), rows: Vec::new() }))
    }
}

fn normalise(mut logits: Vec<f64>) -> Vec<f64> {
    let z = log_sum_exp(&logits);
    logits.iter_mut().for_each(|x| *x -= z);
    logits
}

/// Pseudo-random but fixed distributions keyed by seed, source and prefix.
fn random_toy(seed: u64, vocab: usize, sharpness: f64) -> Toy {
    Toy {
        vocab,
        table: Box::new(move |src, prefix| {
            let mut key = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            for &t in src.iter().chain([&999]).chain(prefix) {
                key = key.rotate_left(7) ^ (t as u64).wrapping_mul(0xff51_afd7_ed55_8ccd);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            normalise((0..vocab).map(|_| sharpness * rng.gen::<f64>()).collect())
        }),
    }
}

/// All finished outputs of length ≤ `max_len`, scored exactly as the decoder does.
fn enumerate(toy: &Toy, source: &[usize], max_len: usize, alpha: f64) -> Vec<Hypothesis> {
    let emit: Vec<usize> = (0..toy.vocab).filter(|&v| v != PAD && v != BOS).collect();
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::<usize>::new(), 0.0)];
    while let Some((prefix, lp)) = frontier.pop() {
        let dist = (toy.table)(source, &prefix);
        for &v in &emit {
            let total = lp + dist[v];
            if v == EOS {
                out.push(Hypothesis::new(prefix.clone(), total, alpha));
                continue;
            }
            let mut t = prefix.clone();
            t.push(v);
            if t.len() == max_len {
                out.push(Hypothesis::new(t, total, alpha));
            } else {
                frontier.push((t, total));
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    out
}

fn cfg(beam: usize, alpha: f64, max_len: usize) -> DecodeConfig {
    DecodeConfig { beam_size: beam, alpha, max_len, ..DecodeConfig::default() }
}

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::from_counts((0..n).map(|i| (format!("t{i}"), 50 - i)))
}

fn tiny_model(seed: u64) -> Model {
    let spec = ModelSpec {
        architecture: Architecture::Transformer(TransformerSpec {
            hidden: 8,
            filter: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            prenorm: true,
            decoder_self_attention: SelfAttention::Standard,
            positional: true,
        }),
        direction: Direction::L2r,
    };
    let mut m = Model::build(spec, vocab(6), vocab(6), seed).unwrap();
    // sharpen the output layer so outputs are not uniform noise
    for x in m.params.get_mut("out.w").unwrap().data_mut() {
        *x *= 6.0;
    }
    m
}

#[test]
fn exhaustive_beam_matches_enumeration() {
    // five emittable tokens: EOS, UNK and three words
    for seed in 0..20 {
        let toy = random_toy(seed, 7, 4.0);
        for alpha in [0.0, 0.6] {
            let oracle = enumerate(&toy, &[4, 5], 4, alpha);
            let got = beam_search(&toy, &[4, 5], &cfg(5usize.pow(4), alpha, 4)).unwrap();
            let top = &oracle[..got.len()];
            for (g, o) in got.iter().zip(top) {
                assert_eq!(g.tokens, o.tokens, "seed {seed} alpha {alpha}");
                assert!((g.score - o.score).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn small_beam_never_beats_the_enumerated_optimum() {
    for seed in 0..20 {
        let toy = random_toy(seed, 7, 4.0);
        let best = enumerate(&toy, &[3], 4, 0.0)[0].score;
        let got = beam_search(&toy, &[3], &cfg(4, 0.0, 4)).unwrap();
        assert!(got[0].score <= best + 1e-12);
        let hyp = &got[0];
        let exact = enumerate(&toy, &[3], 4, 0.0).into_iter().find(|h| h.tokens == hyp.tokens).unwrap();
        assert!((exact.log_prob - hyp.log_prob).abs() < 1e-12);
    }
}

#[test]
fn beam_of_one_is_greedy_on_a_real_model() {
    let m = tiny_model(3);
    for src in [vec![4, 5, 6], vec![9], vec![7, 7, 8, 4]] {
        let g = greedy_decode(&m, &src, &cfg(1, 0.6, 12)).unwrap();
        let b = beam_search(&m, &src, &cfg(1, 0.6, 12)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].tokens, g.tokens);
        assert!((b[0].log_prob - g.log_prob).abs() < 1e-12);
    }
}

#[test]
fn identical_copies_decode_like_one_model() {
    let m = tiny_model(5);
    let copies: Vec<&Model> = vec![&m, &m, &m];
    let ens = Ensemble::of_models(&copies, Combine::Arithmetic).unwrap();
    let geo = Ensemble::of_models(&copies, Combine::Geometric).unwrap();
    let single = Ensemble::of_models(&copies[..1], Combine::Arithmetic).unwrap();
    for src in [vec![4, 5, 6], vec![8, 9]] {
        let base = beam_search(&m, &src, &cfg(4, 0.6, 10)).unwrap();
        for e in [&ens, &geo, &single] {
            let got = beam_search(e, &src, &cfg(4, 0.6, 10)).unwrap();
            assert_eq!(got.len(), base.len());
            for (a, b) in got.iter().zip(&base) {
                assert_eq!(a.tokens, b.tokens);
                assert!((a.score - b.score).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn ensemble_rules_combine_by_hand() {
    let p: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
    let q: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
    let a = Toy { vocab: 4, table: Box::new(move |_, _| p.iter().map(|x| x.ln()).collect()) };
    let b = Toy { vocab: 4, table: Box::new(move |_, _| q.iter().map(|x| x.ln()).collect()) };
    let run = |combine| {
        let e = Ensemble::new(vec![&a, &b], combine).unwrap();
        let mut s = e.open(&[vec![4]]).unwrap();
        s.advance(&[Origin::Source(0)], &[BOS]).unwrap().remove(0)
    };
    for (v, x) in run(Combine::Arithmetic).iter().enumerate() {
        assert!((x.exp() - 0.25).abs() < 1e-12, "{v}");
    }
    let z: f64 = (0..4).map(|i| (p[i] * q[i]).sqrt()).sum();
    for (v, x) in run(Combine::Geometric).iter().enumerate() {
        assert!((x.exp() - (p[v] * q[v]).sqrt() / z).abs() < 1e-12);
    }
}

#[test]
fn ensemble_rejects_vocabulary_mismatch() {
    let a = random_toy(0, 7, 1.0);
    let b = random_toy(0, 8, 1.0);
    assert!(matches!(Ensemble::new(vec![&a, &b], Combine::Arithmetic), Err(Error::Ensemble(_))));
    let m = tiny_model(0);
    let mut other = tiny_model(0);
    other.tgt_vocab = vocab(5);
    assert!(matches!(Ensemble::of_models(&[&m, &other], Combine::Arithmetic), Err(Error::Ensemble(_))));
    assert!(matches!(Ensemble::of_models(&[], Combine::Arithmetic), Err(Error::Ensemble(_))));
}

#[test]
fn sampling_is_seeded_and_cools_to_greedy() {
    let m = tiny_model(7);
    let src = vec![4, 6, 8];
    let a = sample_decode(&m, &src, &DecodeConfig { max_len: 10, ..DecodeConfig::sample(11) }).unwrap();
    let b = sample_decode(&m, &src, &DecodeConfig { max_len: 10, ..DecodeConfig::sample(11) }).unwrap();
    assert_eq!(a, b);
    let cold = DecodeConfig { temperature: 1e-6, max_len: 10, ..DecodeConfig::sample(3) };
    let greedy = greedy_decode(&m, &src, &cfg(1, 0.6, 10)).unwrap();
    assert_eq!(sample_decode(&m, &src, &cold).unwrap().tokens, greedy.tokens);
    let distinct: std::collections::BTreeSet<Vec<usize>> = (0..20)
        .map(|s| sample_decode(&m, &src, &DecodeConfig { max_len: 10, ..DecodeConfig::sample(s) }).unwrap().tokens)
        .collect();
    assert!(distinct.len() > 1);
}

#[test]
fn sampled_first_tokens_follow_the_distribution() {
    let probs: [f64; 3] = [0.2, 0.3, 0.5];
    let toy = Toy {
        vocab: 7,
        table: Box::new(move |_, prefix| {
            let mut row = vec![f64::NEG_INFINITY; 7];
            if prefix.is_empty() {
                for (k, p) in probs.iter().enumerate() {
                    row[4 + k] = p.ln();
                }
            } else {
                row[EOS] = 0.0;
            }
            row
        }),
    };
    let n = 10_000;
    let sources = vec![vec![4]; n];
    let out = decode_batch(&toy, &sources, &DecodeConfig::sample(2024), 0).unwrap();
    let mut counts = [0usize; 3];
    for h in &out {
        assert_eq!(h[0].tokens.len(), 1);
        counts[h[0].tokens[0] - 4] += 1;
    }
    for k in 0..3 {
        let freq = counts[k] as f64 / n as f64;
        assert!((freq - probs[k]).abs() < 0.02, "token {k}: {freq}");
    }
}

#[test]
fn sampling_does_not_depend_on_batching() {
    let m = tiny_model(8);
    let sources = vec![vec![4, 5], vec![6], vec![7, 8, 9]];
    let config = DecodeConfig { max_len: 8, ..DecodeConfig::sample(5) };
    let all = decode_batch(&m, &sources, &config, 0).unwrap();
    let last = decode_batch(&m, &sources[2..], &config, 2).unwrap();
    assert_eq!(all[2], last[0]);
}

#[test]
fn translate_corpus_keeps_order_and_count() {
    let m = tiny_model(9);
    let config = cfg(2, 0.6, 6);
    assert!(translate_corpus(&[&m], &[], &config).unwrap().is_empty());
    let lines: Vec<String> = (0..70).map(|i| format!("t{} t{} zzz", i % 6, (i * 5) % 6)).collect();
    let out = translate_corpus(&[&m], &lines, &config).unwrap();
    assert_eq!(out.len(), lines.len());
    let one = translate_corpus(&[&m], &lines[40..41], &config).unwrap();
    assert_eq!(one[0], out[40]);
    assert_eq!(translate_corpus_threads(&[&m], &lines, &config, 3).unwrap(), out);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        DecodeConfig { beam_size: 0, ..DecodeConfig::default() },
        DecodeConfig { temperature: 0.0, ..DecodeConfig::default() },
        DecodeConfig { max_len: 0, ..DecodeConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert_eq!("sample".parse::<DecodeMode>().unwrap(), DecodeMode::Sample);
    assert!("topk".parse::<DecodeMode>().is_err());
}

#[test]
fn length_penalty_values() {
    assert_eq!(length_penalty(1, 0.6), 1.0);
    assert!((length_penalty(7, 0.6) - 2f64.powf(0.6)).abs() < 1e-15);
    assert_eq!(length_penalty(30, 0.0), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beam_scores_are_sorted(seed in 0u64..10_000, beam in 1usize..6, alpha in 0.0f64..1.5) {
        let toy = random_toy(seed, 8, 3.0);
        let got = beam_search(&toy, &[4, 6], &cfg(beam, alpha, 6)).unwrap();
        prop_assert!(!got.is_empty() && got.len() <= beam);
        for w in got.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for h in &got {
            prop_assert!((h.score - h.log_prob / length_penalty(h.tokens.len(), alpha)).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_of_one_is_greedy(seed in 0u64..10_000, alpha in 0.0f64..1.5) {
        let toy = random_toy(seed, 8, 3.0);
        let g = greedy_decode(&toy, &[5], &cfg(1, alpha, 7)).unwrap();
        let b = beam_search(&toy, &[5], &cfg(1, alpha, 7)).unwrap();
        prop_assert_eq!(&b[0].tokens, &g.tokens);
    }

    #[test]
    fn single_member_ensemble_is_the_member(seed in 0u64..10_000, beam in 1usize..5) {
        let toy = random_toy(seed, 8, 3.0);
        let e = Ensemble::new(vec![&toy], Combine::Arithmetic).unwrap();
        prop_assert_eq!(
            beam_search(&e, &[4], &cfg(beam, 0.6, 6)).unwrap(),
            beam_search(&toy, &[4], &cfg(beam, 0.6, 6)).unwrap()
        );
    }
}

#[test]
fn wider_beam_can_lose_to_a_narrower_one() {
    // beam search is not monotone in the beam width; this fixed model shows it
    let toy = random_toy(41, 8, 3.0);
    let narrow = beam_search(&toy, &[4], &cfg(1, 0.0, 6)).unwrap()[0].score;
    let wide = beam_search(&toy, &[4], &cfg(2, 0.0, 6)).unwrap()[0].score;
    assert!(wide < narrow);
    let full = beam_search(&toy, &[4], &cfg(6usize.pow(5), 0.0, 6)).unwrap()[0].score;
    assert!(full >= narrow);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exhaustive_beam_is_never_beaten(seed in 0u64..10_000, beam in 1usize..6, alpha in 0.0f64..1.5) {
        let toy = random_toy(seed, 7, 3.0);
        let small = beam_search(&toy, &[4], &cfg(beam, alpha, 4)).unwrap()[0].score;
        let full = beam_search(&toy, &[4], &cfg(5usize.pow(4), alpha, 4)).unwrap()[0].score;
        prop_assert!(full >= small - 1e-12);
    }
}
