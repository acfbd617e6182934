//! Strategies, brute-force oracles and checks shared by the property suite
//! and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed, TestCaseError, TestError, TestRunner};

use ade_core::corpus::{sentence_spans, Sentence, ABBREVIATIONS};
use ade_core::eval::{kfold, match_count, score, split_8_1_1, MatchMode};
use ade_core::lexicon::{find_mentions, sample_lexicon, DrugTrie, LexiconEntry, Mention};
use ade_core::model::{all_annotations, decode_spans, head_forward, pool_drug, tokenize, LabeledSentence, TokenizedSentence};
use ade_core::neural::Tensor;
use ade_core::pipeline::{select_pool, teacher_label, AnnotateStats};
use ade_core::synth::{synth_corpus, SynthConfig};
use ade_core::teacher::{
    annotate, cache_key, parse_response, render_response, AdeAnnotation, AdeMap, AnnotateOptions, MockClient,
    NoiseConfig, PromptMode, Provenance, ResponseCache,
};

pub const CASES: u32 = 1000;
pub const NUMERIC_TOL: f64 = 1e-12;

pub fn config() -> Config {
    Config {
        cases: CASES,
        rng_seed: RngSeed::Fixed(0x0ADE_5EED),
        failure_persistence: None,
        ..Config::default()
    }
}

/// Runs `check` on `CASES` seeded draws; returns the number of cases run.
pub fn run<S, F>(strategy: S, check: F) -> Result<u32, String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
    F: Fn(S::Value) -> Result<(), TestCaseError>,
{
    let mut runner = TestRunner::new(config());
    match runner.run(&strategy, check) {
        Ok(()) => Ok(CASES),
        Err(TestError::Fail(why, value)) => Err(format!("{why}; minimal input {value:?}")),
        Err(TestError::Abort(why)) => Err(format!("aborted: {why}")),
    }
}

// ---------- drug trie ----------

fn surface() -> impl Strategy<Value = String> {
    prop::collection::vec("[abc]{1,3}", 1..=2).prop_map(|w| w.join(" "))
}

fn text_piece() -> impl Strategy<Value = &'static str> {
    prop::sample::select(vec![
        "a", "b", "c", "ab", "abc", "ba", "A", "B", "C", " ", " ", "  ", "\t", ",", ".", "-", "x", "1",
    ])
}

pub fn trie_case() -> impl Strategy<Value = (Vec<(u8, String)>, String)> {
    (
        prop::collection::vec((0u8..5, surface()), 1..6),
        prop::collection::vec(text_piece(), 0..16).prop_map(|p| p.concat()),
    )
}

fn oracle_match_at(chars: &[char], i: usize, surface: &[char]) -> Option<usize> {
    let n = chars.len();
    let mut j = i;
    for &sc in surface {
        if sc == ' ' {
            if j < n && chars[j].is_whitespace() {
                while j < n && chars[j].is_whitespace() {
                    j += 1;
                }
            } else {
                return None;
            }
        } else if j < n && chars[j].to_ascii_lowercase() == sc {
            j += 1;
        } else {
            return None;
        }
    }
    if j < n && chars[j].is_alphanumeric() {
        return None;
    }
    Some(j)
}

/// Leftmost-longest matching by trying every surface at every word start.
/// ASCII text only, so char and byte offsets coincide.
pub fn oracle_mentions(text: &str, entries: &[(u8, String)]) -> Vec<(usize, usize, String)> {
    let chars: Vec<char> = text.chars().collect();
    let surfaces: Vec<(Vec<char>, String)> = entries
        .iter()
        .map(|(id, s)| (s.chars().collect(), format!("C{id}")))
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if (i > 0 && chars[i - 1].is_alphanumeric()) || chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let mut best: Option<(usize, String)> = None;
        for (s, id) in &surfaces {
            if let Some(end) = oracle_match_at(&chars, i, s) {
                best = match best {
                    Some((e, ref b)) if e > end || (e == end && *b <= *id) => Some((e, b.clone())),
                    _ => Some((end, id.clone())),
                };
            }
        }
        match best {
            Some((end, id)) => {
                out.push((i, end, id));
                i = end;
            }
            None => i += 1,
        }
    }
    out
}

pub fn check_trie((entries, text): (Vec<(u8, String)>, String)) -> Result<(), TestCaseError> {
    let lex: Vec<LexiconEntry> = entries
        .iter()
        .map(|(id, s)| LexiconEntry::new(format!("C{id}"), s.clone()))
        .collect();
    let trie = DrugTrie::build(&lex).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let got: Vec<(usize, usize, String)> = find_mentions(&text, &trie)
        .into_iter()
        .map(|m| {
            assert!(m.is_valid_in(&text));
            (m.start, m.end, m.concept_id.unwrap_or_default())
        })
        .collect();
    prop_assert_eq!(got, oracle_mentions(&text, &entries));
    Ok(())
}

// ---------- response parsing ----------

pub fn ade_map() -> impl Strategy<Value = AdeMap> {
    prop::collection::btree_map(
        "[a-zA-Z][a-zA-Z0-9 -]{0,10}[a-zA-Z0-9]".prop_filter("label-like key", |k| {
            !k.trim().eq_ignore_ascii_case("none") && !k.to_ascii_lowercase().starts_with("annotations")
        }),
        prop::collection::vec("[a-z][a-z0-9 :-]{0,12}[a-z0-9]", 1..4),
        0..4,
    )
    .prop_map(|m| {
        m.into_iter()
            .map(|(k, v)| {
                let mut seen = BTreeSet::new();
                (k, v.into_iter().filter(|e| seen.insert(e.clone())).collect())
            })
            .collect()
    })
}

pub fn check_render_parse(map: AdeMap) -> Result<(), TestCaseError> {
    let parsed = parse_response(&render_response(&map));
    prop_assert_eq!(parsed.malformed_lines, 0);
    prop_assert_eq!(parsed.map, map);
    Ok(())
}

pub fn raw_response() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", " ", ":", "|", "\n", ".", "none", "None", "x y"]),
        0..24,
    )
    .prop_map(|p| p.concat())
}

pub fn check_parse_fixpoint(raw: String) -> Result<(), TestCaseError> {
    let once = parse_response(&raw).map;
    let twice = parse_response(&render_response(&once)).map;
    prop_assert_eq!(twice, once);
    Ok(())
}

// ---------- span decoding ----------

pub fn decode_case() -> impl Strategy<Value = (Vec<String>, Vec<bool>, Vec<f64>)> {
    prop::collection::vec("[a-z]{1,4}", 1..15).prop_flat_map(|words| {
        let n = words.len();
        (
            Just(words),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(0.0f64..0.5, n),
        )
    })
}

pub fn check_decode_inverse((words, labels, jitter): (Vec<String>, Vec<bool>, Vec<f64>)) -> Result<(), TestCaseError> {
    let text = words.join(" ");
    let tokens = tokenize(&text);
    prop_assert_eq!(tokens.len(), words.len());
    let p: Vec<f64> = labels
        .iter()
        .zip(&jitter)
        .map(|(&l, &j)| if l { 0.5 + j } else { j })
        .collect();
    // Maximal runs of positive labels.
    let mut expected = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] {
            let s = i;
            while i < labels.len() && labels[i] {
                i += 1;
            }
            expected.push((tokens[s].start, tokens[i - 1].end));
        } else {
            i += 1;
        }
    }
    let got = decode_spans(&p, 0.5, &tokens, &text);
    let spans: Vec<(usize, usize)> = got.iter().map(|m| (m.start, m.end)).collect();
    prop_assert_eq!(&spans, &expected);
    for m in &got {
        prop_assert!(m.is_valid_in(&text));
    }
    let ts = TokenizedSentence::new(&Sentence::new("d", 0, text.as_str()), 64);
    prop_assert_eq!(ts.covered(&spans), labels);
    Ok(())
}

// ---------- scoring ----------

/// (sentence, drug, start, len)
pub type RawTriple = (u8, u8, usize, usize);

pub fn score_case() -> impl Strategy<Value = (Vec<RawTriple>, Vec<RawTriple>)> {
    let triple = (0u8..3, 0u8..2, 0usize..12, 1usize..4);
    (
        prop::collection::vec(triple.clone(), 0..7),
        prop::collection::vec(triple, 0..7),
    )
}

const SCORE_TEXT: &str = "abcdefghijklmnopqrstuvwxyzabcdefghijklmnopqrstuvwxyz";

fn to_annotations(raw: &[RawTriple], with_empty: bool) -> Vec<AdeAnnotation> {
    let ann = |k: u8, d: u8, events: Vec<Mention>| AdeAnnotation {
        doc_id: format!("D{k}"),
        sent_index: 0,
        drug: Mention::from_text(SCORE_TEXT, 30 + 2 * d as usize, 31 + 2 * d as usize),
        events,
        provenance: Provenance::Gold,
    };
    let mut out: Vec<AdeAnnotation> = raw
        .iter()
        .map(|&(k, d, s, l)| ann(k, d, vec![Mention::from_text(SCORE_TEXT, s, s + l)]))
        .collect();
    if with_empty {
        out.extend((0..3).map(|k| ann(k, 0, Vec::new())));
    }
    out
}

fn oracle_matching(preds: &[(usize, usize)], golds: &[(usize, usize)], used: &mut Vec<bool>, mode: MatchMode) -> usize {
    let Some((&p, rest)) = preds.split_first() else {
        return 0;
    };
    let mut best = oracle_matching(rest, golds, used, mode);
    for g in 0..golds.len() {
        let ok = match mode {
            MatchMode::Strict => p == golds[g],
            MatchMode::Lenient => p.0.max(golds[g].0) < p.1.min(golds[g].1),
        };
        if !used[g] && ok {
            used[g] = true;
            best = best.max(1 + oracle_matching(rest, golds, used, mode));
            used[g] = false;
        }
    }
    best
}

type Groups = BTreeMap<(u8, u8), BTreeSet<(usize, usize)>>;

fn groups(raw: &[RawTriple]) -> Groups {
    let mut g: Groups = BTreeMap::new();
    for &(k, d, s, l) in raw {
        g.entry((k, d)).or_default().insert((s, s + l));
    }
    g
}

/// (tp, fp, fn) by exhaustive search over one-to-one assignments.
pub fn oracle_counts(preds: &[RawTriple], golds: &[RawTriple], mode: MatchMode) -> (usize, usize, usize) {
    let (pg, gg) = (groups(preds), groups(golds));
    let np: usize = pg.values().map(BTreeSet::len).sum();
    let ng: usize = gg.values().map(BTreeSet::len).sum();
    let mut tp = 0;
    for (key, p) in &pg {
        if let Some(g) = gg.get(key) {
            let pv: Vec<_> = p.iter().copied().collect();
            let gv: Vec<_> = g.iter().copied().collect();
            tp += oracle_matching(&pv, &gv, &mut vec![false; gv.len()], mode);
        }
    }
    (tp, np - tp, ng - tp)
}

pub fn check_score_oracle((preds, golds): (Vec<RawTriple>, Vec<RawTriple>)) -> Result<(), TestCaseError> {
    let (pa, ga) = (to_annotations(&preds, false), to_annotations(&golds, true));
    for mode in [MatchMode::Strict, MatchMode::Lenient] {
        let r = score(&pa, &ga, mode).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!((r.tp, r.fp, r.fn_), oracle_counts(&preds, &golds, mode), "mode {}", mode);
    }
    // The span-level matcher on its own.
    let ps: Vec<(usize, usize)> = preds.iter().map(|&(_, _, s, l)| (s, s + l)).collect();
    let gs: Vec<(usize, usize)> = golds.iter().map(|&(_, _, s, l)| (s, s + l)).collect();
    for mode in [MatchMode::Strict, MatchMode::Lenient] {
        prop_assert_eq!(
            match_count(&ps, &gs, mode),
            oracle_matching(&ps, &gs, &mut vec![false; gs.len()], mode)
        );
    }
    Ok(())
}

pub fn check_strict_le_lenient((preds, golds): (Vec<RawTriple>, Vec<RawTriple>)) -> Result<(), TestCaseError> {
    let (pa, ga) = (to_annotations(&preds, false), to_annotations(&golds, true));
    let s = score(&pa, &ga, MatchMode::Strict).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let l = score(&pa, &ga, MatchMode::Lenient).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(s.tp <= l.tp);
    prop_assert!(s.f1 <= l.f1 && s.precision <= l.precision && s.recall <= l.recall);
    prop_assert_eq!(s.tp + s.fp, l.tp + l.fp);
    prop_assert_eq!(s.tp + s.fn_, l.tp + l.fn_);
    Ok(())
}

// ---------- pooling and head ----------

pub fn head_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>, Vec<f64>, f64)> {
    (1usize..7, 1usize..6).prop_flat_map(|(t, d)| {
        (
            Just(t),
            Just(d),
            prop::collection::vec(-3.0f64..3.0, t * d),
            prop::collection::vec(0..t, 1..5),
            prop::collection::vec(-2.0f64..2.0, 2 * d),
            -2.0f64..2.0,
        )
    })
}

pub fn check_pool_and_head(
    (t, d, h, idx, w, b): (usize, usize, Vec<f64>, Vec<usize>, Vec<f64>, f64),
) -> Result<(), TestCaseError> {
    let ht = Tensor::from_vec(&[t, d], h.clone()).unwrap();
    let pooled = pool_drug(&ht, &idx).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let mut oracle_pool = vec![0.0; d];
    for k in 0..d {
        let mut s = 0.0;
        for &i in &idx {
            s += h[i * d + k];
        }
        oracle_pool[k] = s / idx.len() as f64;
    }
    for k in 0..d {
        prop_assert!((pooled.data()[k] - oracle_pool[k]).abs() <= NUMERIC_TOL);
    }
    let wt = Tensor::from_vec(&[2 * d], w.clone()).unwrap();
    let p = head_forward(&ht, &pooled, &wt, b).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(p.len(), t);
    for i in 0..t {
        let mut z = b;
        for k in 0..d {
            z += w[k] * h[i * d + k] + w[d + k] * oracle_pool[k];
        }
        let want = 1.0 / (1.0 + (-z).exp());
        prop_assert!((p.data()[i] - want).abs() <= NUMERIC_TOL, "token {i}: {} vs {want}", p.data()[i]);
    }
    Ok(())
}

// ---------- teacher tallies and cache ----------

pub fn small_gold() -> &'static Vec<LabeledSentence> {
    static GOLD: OnceLock<Vec<LabeledSentence>> = OnceLock::new();
    GOLD.get_or_init(|| {
        let trie = DrugTrie::build(&sample_lexicon()).unwrap();
        synth_corpus(&SynthConfig::new(60, 11)).labeled(&trie)
    })
}

pub fn noise_case() -> impl Strategy<Value = (f64, f64, f64, u64, usize)> {
    (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, any::<u64>(), 1usize..80)
}

pub fn check_conservation((drop, spurious, jitter, seed, pool): (f64, f64, f64, u64, usize)) -> Result<(), TestCaseError> {
    let gold = small_gold();
    let sents: Vec<Sentence> = gold.iter().map(|l| l.sentence.clone()).collect();
    let noise = NoiseConfig::new(drop, spurious, jitter, seed).unwrap();
    let client = MockClient::new(&sents, &all_annotations(gold), noise);
    let mut run = teacher_label(&sents, &client, None, &AnnotateOptions::default());
    let selected = select_pool(&run.labeled, pool, seed, &mut run.stats);
    let s: &AnnotateStats = &run.stats;
    prop_assert!(s.conserved(), "{:?}", s);
    prop_assert_eq!(s.sentences, sents.len());
    prop_assert_eq!(s.client_calls, sents.len());
    prop_assert_eq!(selected.len(), s.pool);
    prop_assert!(s.pool <= pool);
    prop_assert!(selected.iter().all(LabeledSentence::has_events));
    let g = &s.grounding;
    prop_assert_eq!(g.grounded_events + g.hallucinated_events, g.event_strings);
    prop_assert_eq!(g.grounded_drugs + g.ungrounded_drugs, g.drug_keys);
    let mentions: usize = run
        .labeled
        .iter()
        .flat_map(|l| &l.annotations)
        .map(|a| a.events.len())
        .sum();
    prop_assert_eq!(mentions, g.event_mentions);
    for l in &run.labeled {
        for a in &l.annotations {
            prop_assert!(a.events.iter().all(|e| e.is_valid_in(&l.sentence.text)));
        }
    }
    Ok(())
}

pub fn cache_case() -> impl Strategy<Value = (String, String, u64)> {
    ("[ -~]{1,60}", "[ -~\n]{0,80}", any::<u64>())
}

pub fn check_cache_idempotence((prompt, raw, seed): (String, String, u64)) -> Result<(), TestCaseError> {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let key = cache_key(&prompt, PromptMode::FewShot5, "m");
    prop_assert_eq!(cache.get(&key), None);
    cache.put(&key, &raw).unwrap();
    cache.put(&key, &raw).unwrap();
    prop_assert_eq!(cache.get(&key), Some(raw.clone()));
    prop_assert_eq!(key.clone(), cache_key(&prompt, PromptMode::FewShot5, "m"));
    prop_assert_ne!(key.clone(), cache_key(&prompt, PromptMode::ZeroShot, "m"));
    prop_assert_ne!(key, cache_key(&prompt, PromptMode::FewShot5, "n"));

    // A warm rerun over the same sentences issues no calls and returns the same text.
    let gold = small_gold();
    let start = (seed % 55) as usize;
    let sents: Vec<Sentence> = gold[start..start + 5].iter().map(|l| l.sentence.clone()).collect();
    let noise = NoiseConfig::new(0.2, 0.2, 0.2, seed).unwrap();
    let client = MockClient::new(&sents, &all_annotations(gold), noise);
    let opts = AnnotateOptions {
        max_parallel: 1,
        ..Default::default()
    };
    let cold = annotate(&sents, &client, Some(&cache), &opts);
    let warm = annotate(&sents, &client, Some(&cache), &opts);
    prop_assert_eq!(cold.client_calls, 5);
    prop_assert_eq!(warm.client_calls, 0);
    prop_assert_eq!(warm.cache_hits, 5);
    let raws = |o: &ade_core::teacher::AnnotateOutcome| o.responses.iter().map(|r| r.raw.clone()).collect::<Vec<_>>();
    prop_assert_eq!(raws(&cold), raws(&warm));
    Ok(())
}

// ---------- splits ----------

pub fn split_case() -> impl Strategy<Value = (usize, usize, u64)> {
    (0usize..400, 2usize..13, any::<u64>())
}

pub fn check_splits((n, k, seed): (usize, usize, u64)) -> Result<(), TestCaseError> {
    let items: Vec<usize> = (0..n).collect();
    let (a, b, c) = split_8_1_1(&items, seed);
    prop_assert_eq!((a.len(), b.len()), (n * 8 / 10, n / 10));
    let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
    all.sort_unstable();
    prop_assert_eq!(&all, &items);
    prop_assert_eq!(split_8_1_1(&items, seed), (a, b, c));
    match kfold(&items, k, seed) {
        Err(_) => prop_assert!(n < k),
        Ok(folds) => {
            prop_assert_eq!(folds.len(), k);
            let mut seen = vec![0usize; n];
            for (i, (train, test)) in folds.iter().enumerate() {
                prop_assert_eq!(test.len(), n / k + usize::from(i < n % k));
                prop_assert_eq!(train.len() + test.len(), n);
                test.iter().for_each(|&x| seen[x] += 1);
                let tr: BTreeSet<_> = train.iter().collect();
                prop_assert!(test.iter().all(|x| !tr.contains(x)));
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
    Ok(())
}

// ---------- sentence splitting ----------

pub fn sentences_case() -> impl Strategy<Value = (Vec<String>, Vec<&'static str>)> {
    let sentence = (
        "[A-Z][a-z]{1,6}",
        prop::collection::vec("[a-z]{1,7}|[0-9]\\.[0-9]", 0..6),
        "[a-z]{3,7}".prop_filter("abbreviation", |w| !ABBREVIATIONS.contains(&format!("{w}.").as_str())),
        prop::sample::select(vec![".", "!", "?", ".)", "?\""]),
    )
        .prop_map(|(first, rest, last, end)| {
            let mut s = first;
            for w in rest.iter().chain([&last]) {
                s.push(' ');
                s.push_str(w);
            }
            s.push_str(end);
            s
        });
    (
        prop::collection::vec(sentence, 0..6),
        prop::collection::vec(prop::sample::select(vec![" ", "  ", "\n", " \n\t"]), 6),
    )
}

pub fn check_sentence_split((sents, gaps): (Vec<String>, Vec<&'static str>)) -> Result<(), TestCaseError> {
    let mut text = String::new();
    let mut expected = Vec::new();
    for (s, gap) in sents.iter().zip(&gaps) {
        text.push_str(gap);
        expected.push(text.len()..text.len() + s.len());
        text.push_str(s);
    }
    prop_assert_eq!(sentence_spans(&text), expected);
    Ok(())
}

/// Every property with its name, in a fixed order.
pub fn all_properties() -> Vec<(&'static str, fn() -> Result<u32, String>)> {
    vec![
        ("trie matches brute-force oracle", || run(trie_case(), check_trie)),
        ("render then parse is the identity", || run(ade_map(), check_render_parse)),
        ("parse of render of parse is a fixpoint", || run(raw_response(), check_parse_fixpoint)),
        ("decode inverts token labelling", || run(decode_case(), check_decode_inverse)),
        ("scorer matches brute-force matching", || run(score_case(), check_score_oracle)),
        ("strict never exceeds lenient", || run(score_case(), check_strict_le_lenient)),
        ("pool and head match naive oracle", || run(head_case(), check_pool_and_head)),
        ("teacher tallies are conserved", || run(noise_case(), check_conservation)),
        ("cache is idempotent", || run(cache_case(), check_cache_idempotence)),
        ("splits partition deterministically", || run(split_case(), check_splits)),
        ("joined sentences split back", || run(sentences_case(), check_sentence_split)),
    ]
}
