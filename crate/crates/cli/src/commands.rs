use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Duration;

use anyhow::anyhow;
use serde::Serialize;

use ade_core::bench::{run_bench, BenchError};
use ade_core::corpus::{curate as curate_docs, Document, Sentence};
use ade_core::eval::{report_table, split_8_1_1};
use ade_core::io::{read_jsonl, write_atomic, write_jsonl};
use ade_core::lexicon::{read_lexicon_tsv, sample_lexicon, DrugTrie, LexiconEntry};
use ade_core::model::{all_annotations, join_annotations, train as train_model, LabeledSentence, UnifiedModel};
use ade_core::pipeline::{
    distill as run_distill, evaluate_model, gold_labeled, select_pool, teacher_label, DistillSettings,
    PipelineConfig, TeacherMode,
};
use ade_core::synth::synth_corpus_with;
use ade_core::teacher::{AdeAnnotation, HttpClient, MockClient, Provenance, ResponseCache, TeacherClient};

use crate::manifest::Manifest;
use crate::{require_file, CliError, CliResult};

fn lexicon(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<Vec<LexiconEntry>> {
    match &cfg.paths.lexicon {
        None => Ok(sample_lexicon()),
        Some(p) => {
            require_file(p, "lexicon")?;
            let f = File::open(p).map_err(|e| CliError::usage(anyhow!("{}: {e}", p.display())))?;
            let entries = read_lexicon_tsv(BufReader::new(f))
                .map_err(|e| CliError::usage(anyhow!("{}: {e}", p.display())))?;
            m.input(p).map_err(CliError::usage)?;
            Ok(entries)
        }
    }
}

fn trie(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<(Vec<LexiconEntry>, DrugTrie)> {
    let entries = lexicon(cfg, m)?;
    let t = DrugTrie::build(&entries).map_err(CliError::usage)?;
    Ok((entries, t))
}

fn read_input<T: serde::de::DeserializeOwned>(p: &Path, what: &str, m: &mut Manifest) -> CliResult<Vec<T>> {
    require_file(p, what)?;
    let items = read_jsonl(p).map_err(CliError::usage)?;
    m.input(p).map_err(CliError::usage)?;
    Ok(items)
}

fn write_out<T: Serialize>(p: &Path, items: &[T], m: &mut Manifest) -> CliResult<()> {
    write_jsonl(p, items).map_err(CliError::failure)?;
    m.output(p).map_err(CliError::failure)
}

fn write_json<T: Serialize>(p: &Path, value: &T, m: &mut Manifest) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::failure)?;
    text.push('\n');
    write_atomic(p, text.as_bytes()).map_err(CliError::failure)?;
    m.output(p).map_err(CliError::failure)
}

fn save_model(model: &UnifiedModel, dir: &Path, m: &mut Manifest) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::failure(anyhow!("{}: {e}", dir.display())))?;
    model.save(dir).map_err(CliError::failure)?;
    for f in ["params.bin", "config.json", "vocab.json"] {
        m.output(&dir.join(f)).map_err(CliError::failure)?;
    }
    Ok(())
}

/// Mock answers from gold annotations, or the HTTP teacher keyed by the environment.
fn client(cfg: &PipelineConfig, sentences: &[Sentence], gold: Option<&[AdeAnnotation]>) -> CliResult<Box<dyn TeacherClient>> {
    let t = &cfg.teacher;
    match t.mode {
        TeacherMode::Mock => {
            let gold = gold.ok_or_else(|| CliError::usage(anyhow!("mock teacher mode needs gold annotations (--gold)")))?;
            Ok(Box::new(MockClient::new(sentences, gold, t.noise)))
        }
        TeacherMode::Real => {
            let c = HttpClient::from_env(t.endpoint.clone(), t.model.clone())
                .map_err(CliError::usage)?
                .with_timeout(Duration::from_secs(t.timeout_secs));
            Ok(Box::new(c))
        }
    }
}

fn cache(cfg: &PipelineConfig) -> CliResult<ResponseCache> {
    ResponseCache::open(cfg.paths.cache()).map_err(CliError::usage)
}

pub fn curate(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<()> {
    let corpus = cfg
        .paths
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::usage(anyhow!("no corpus given (--corpus)")))?;
    let (_, trie) = trie(cfg, m)?;
    let docs: Vec<Document> = read_input(corpus, "corpus", m)?;
    let (sents, stats) = curate_docs(&docs, &trie);
    write_out(&cfg.paths.sentences(), &sents, m)?;
    write_json(&cfg.paths.out.join("curate_stats.json"), &stats, m)?;
    println!(
        "documents {} (empty {}), sentences {}, kept {}",
        stats.documents, stats.empty_documents, stats.sentences, stats.kept
    );
    Ok(())
}

fn gold_input(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<Option<Vec<AdeAnnotation>>> {
    match &cfg.paths.gold {
        Some(p) => Ok(Some(read_input(p, "gold annotations", m)?)),
        None => Ok(None),
    }
}

pub fn annotate(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<()> {
    let sents: Vec<Sentence> = read_input(&cfg.paths.sentences(), "sentences", m)?;
    let gold = gold_input(cfg, m)?;
    let client = client(cfg, &sents, gold.as_deref())?;
    let cache = cache(cfg)?;
    let mut run = teacher_label(&sents, client.as_ref(), Some(&cache), &cfg.teacher.options());
    let pool = select_pool(&run.labeled, cfg.distill_pool_size, cfg.seed, &mut run.stats);
    write_out(&cfg.paths.annotations(), &all_annotations(&pool), m)?;
    if !run.failures.is_empty() {
        write_out(&cfg.paths.out.join("failures.jsonl"), &run.failures, m)?;
    }
    write_json(&cfg.paths.out.join("annotate_stats.json"), &run.stats, m)?;
    let s = &run.stats;
    let g = &s.grounding;
    println!(
        "sentences {}, responses {}, failures {}, client calls {}, cache hits {}",
        s.sentences, s.responses, s.failures, s.client_calls, s.cache_hits
    );
    println!(
        "drug keys {} (ungrounded {}), event strings {} (hallucinated {}), malformed lines {}",
        g.drug_keys, g.ungrounded_drugs, g.event_strings, g.hallucinated_events, s.malformed_lines
    );
    println!(
        "positive {}, dropped negative {}, pool {}, dropped by subsampling {}",
        s.positive, s.dropped_negative, s.pool, s.dropped_subsample
    );
    if !s.conserved() {
        return Err(CliError::failure(anyhow!("annotation tallies do not add up")));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    train: usize,
    dev: usize,
    test: usize,
    best_epoch: usize,
    history: Vec<ade_core::model::EpochLog>,
    test_lenient: ade_core::eval::EvalReport,
    test_strict: ade_core::eval::EvalReport,
}

pub fn train(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<()> {
    let sents: Vec<Sentence> = read_input(&cfg.paths.sentences(), "sentences", m)?;
    let anns: Vec<AdeAnnotation> = read_input(&cfg.paths.annotations(), "annotations", m)?;
    // Only sentences the annotation file covers are labelled.
    let keys: BTreeSet<_> = anns.iter().map(AdeAnnotation::key).collect();
    let covered: Vec<Sentence> = sents.into_iter().filter(|s| keys.contains(&s.key())).collect();
    let labeled = join_annotations(&covered, &anns, Provenance::Teacher);
    let (tr, dev, te) = split_8_1_1(&labeled, cfg.seed);
    let model_cfg = cfg.model.to_config(cfg.seed);
    let out = train_model(&tr, &dev, &model_cfg, &cfg.training).map_err(CliError::failure)?;
    let (l, s) = evaluate_model(&out.model, &te).map_err(CliError::failure)?;
    save_model(&out.model, &cfg.paths.checkpoint(), m)?;
    for h in &out.history {
        println!(
            "epoch {:>3}  loss {:.5}  dev lenient {}",
            h.epoch,
            h.train_loss,
            h.dev_lenient_f1.map_or("-".into(), |f| format!("{f:.4}"))
        );
    }
    println!("{}", report_table(&[("test".into(), l), ("test".into(), s)]));
    write_json(
        &cfg.paths.out.join("train_report.json"),
        &TrainReport {
            train: tr.len(),
            dev: dev.len(),
            test: te.len(),
            best_epoch: out.best_epoch,
            history: out.history,
            test_lenient: l,
            test_strict: s,
        },
        m,
    )
}

pub fn eval(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<()> {
    let dir = cfg.paths.checkpoint();
    require_file(&dir.join("params.bin"), "checkpoint")?;
    let mut model = UnifiedModel::load(&dir).map_err(CliError::usage)?;
    model.threshold = cfg.training.threshold;
    m.input(&dir.join("params.bin")).map_err(CliError::usage)?;
    let sents: Vec<Sentence> = read_input(&cfg.paths.sentences(), "sentences", m)?;
    let gold_path = cfg
        .paths
        .gold
        .as_ref()
        .ok_or_else(|| CliError::usage(anyhow!("no gold annotations given (--gold)")))?;
    let gold: Vec<AdeAnnotation> = read_input(gold_path, "gold annotations", m)?;
    let labeled = gold_labeled(&sents, &gold);
    let preds = model.predict_all(&sents).map_err(CliError::failure)?;
    write_out(&cfg.paths.out.join("predictions.jsonl"), &preds, m)?;
    let (l, s) = evaluate_model(&model, &labeled).map_err(CliError::failure)?;
    println!("{}", report_table(&[("eval".into(), l), ("eval".into(), s)]));
    write_json(&cfg.paths.out.join("eval_report.json"), &[l, s], m)
}

/// Gold-labelled sentences from the configured corpus, or a synthetic corpus.
fn gold_corpus(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<Vec<LabeledSentence>> {
    let (entries, trie) = trie(cfg, m)?;
    match (&cfg.paths.corpus, &cfg.paths.gold) {
        (Some(c), Some(g)) => {
            let docs: Vec<Document> = read_input(c, "corpus", m)?;
            let gold: Vec<AdeAnnotation> = read_input(g, "gold annotations", m)?;
            let (sents, _) = curate_docs(&docs, &trie);
            Ok(join_annotations(&sents, &gold, Provenance::Gold))
        }
        (None, None) => Ok(synth_corpus_with(&cfg.synth, &entries).labeled(&trie)),
        _ => Err(CliError::usage(anyhow!("distill needs both --corpus and --gold, or neither"))),
    }
}

pub fn distill(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<()> {
    let gold = gold_corpus(cfg, m)?;
    let sents: Vec<Sentence> = gold.iter().map(|l| l.sentence.clone()).collect();
    let gold_anns = all_annotations(&gold);
    let client = client(cfg, &sents, Some(&gold_anns))?;
    let cache = cache(cfg)?;
    let settings = DistillSettings {
        model: cfg.model.to_config(cfg.seed),
        training: cfg.training.clone(),
        pool_size: cfg.distill_pool_size,
        seed: cfg.seed,
        options: cfg.teacher.options(),
    };
    let (report, model) = run_distill(&gold, client.as_ref(), Some(&cache), &settings).map_err(CliError::failure)?;
    save_model(&model, &cfg.paths.checkpoint(), m)?;
    write_json(&cfg.paths.out.join("distill_report.json"), &report, m)?;
    println!(
        "split train {} / dev {} / test {}; pool {}",
        report.split.train, report.split.dev, report.split.test, report.train_annotation.pool
    );
    println!(
        "{}",
        report_table(&[
            ("teacher".into(), report.teacher_test_lenient),
            ("teacher".into(), report.teacher_test_strict),
            ("student".into(), report.student_test_lenient),
            ("student".into(), report.student_test_strict),
        ])
    );
    println!(
        "student {} teacher on lenient F1 ({:.4} vs {:.4})",
        if report.student_beats_teacher() { "outperforms" } else { "does not outperform" },
        report.student_test_lenient.f1,
        report.teacher_test_lenient.f1
    );
    Ok(())
}

pub fn bench(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<()> {
    let model = cfg.model.to_config(cfg.seed);
    let report = run_bench(&model, &cfg.bench).map_err(|e| match e {
        BenchError::Invalid(_) => CliError::usage(e),
        _ => CliError::failure(e),
    })?;
    let csv = cfg.paths.out.join("bench.csv");
    write_atomic(&csv, report.to_csv().as_bytes()).map_err(CliError::failure)?;
    m.output(&csv).map_err(CliError::failure)?;
    write_json(&cfg.paths.out.join("bench.json"), &report, m)?;
    print!("{}", report.to_csv());
    if let Some(r) = report.row(8, 8) {
        println!(
            "M=N=8: head passes {}, pairwise units {}, speedup {:.2}x",
            r.head_passes, r.pairwise_units, r.speedup
        );
    }
    Ok(())
}

pub fn synth(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<()> {
    let entries = lexicon(cfg, m)?;
    let corpus = synth_corpus_with(&cfg.synth, &entries);
    write_out(&cfg.paths.out.join("documents.jsonl"), &corpus.documents, m)?;
    write_out(&cfg.paths.out.join("gold.jsonl"), &corpus.gold, m)?;
    println!(
        "documents {}, annotations {}, sha256 {}",
        corpus.documents.len(),
        corpus.gold.len(),
        corpus.hash()
    );
    Ok(())
}
