//! End-to-end orchestration shared by the `ade` binary and the test suites:
//! run configuration, teacher labelling, distillation and learning curves.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::BenchConfig;
use crate::corpus::{subsample, Sentence, DEFAULT_DISTILL_POOL_SIZE};
use crate::eval::{learning_curve, score, split_8_1_1, CurvePoint, EvalError, EvalReport, MatchMode};
use crate::model::{all_annotations, join_annotations, train, EpochLog, LabeledSentence, ModelError, TrainConfig, UnifiedModel};
use crate::neural::ModelConfig;
use crate::synth::SynthConfig;
use crate::teacher::{
    annotate, ground_spans, AdeAnnotation, AnnotateOptions, GroundingStats, NoiseConfig, PromptMode, Provenance,
    ResponseCache, RetryPolicy, TeacherClient,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Lexicon TSV; the bundled sample lexicon when unset.
    pub lexicon: Option<PathBuf>,
    /// Documents JSONL (`doc_id`, `text`).
    pub corpus: Option<PathBuf>,
    /// Gold annotations JSONL.
    pub gold: Option<PathBuf>,
    /// Curated sentences JSONL; defaults to `<out>/sentences.jsonl`.
    pub sentences: Option<PathBuf>,
    /// Training annotations JSONL; defaults to `<out>/annotations.jsonl`.
    pub annotations: Option<PathBuf>,
    /// Checkpoint directory; defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    /// Teacher response cache; defaults to `<out>/cache`.
    pub cache: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            lexicon: None,
            corpus: None,
            gold: None,
            sentences: None,
            annotations: None,
            checkpoint: None,
            cache: None,
            out: PathBuf::from("out"),
        }
    }
}

impl Paths {
    pub fn sentences(&self) -> PathBuf {
        self.sentences.clone().unwrap_or_else(|| self.out.join("sentences.jsonl"))
    }

    pub fn annotations(&self) -> PathBuf {
        self.annotations.clone().unwrap_or_else(|| self.out.join("annotations.jsonl"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint"))
    }

    pub fn cache(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("cache"))
    }
}

/// Encoder shape; the vocabulary size comes from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_seq_len: m.max_seq_len,
            ffn_dim: m.ffn_dim,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 1,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            seed,
            ffn_dim: self.ffn_dim,
            n_markers: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    Mock,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub mode: TeacherMode,
    pub prompt: PromptMode,
    pub endpoint: String,
    pub model: String,
    pub max_parallel: usize,
    pub max_retries: usize,
    pub base_delay_ms: u64,
    pub timeout_secs: u64,
    pub noise: NoiseConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Mock,
            prompt: PromptMode::FewShot5,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            max_parallel: 4,
            max_retries: 3,
            base_delay_ms: 500,
            timeout_secs: 60,
            noise: NoiseConfig::none(0),
        }
    }
}

impl TeacherSection {
    pub fn options(&self) -> AnnotateOptions {
        AnnotateOptions {
            mode: self.prompt,
            max_parallel: self.max_parallel,
            retry: RetryPolicy {
                max_retries: self.max_retries,
                base_delay_ms: self.base_delay_ms,
            },
        }
    }
}

/// Everything a run needs; loaded from TOML and overridable from flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub distill_pool_size: usize,
    pub paths: Paths,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub teacher: TeacherSection,
    pub synth: SynthConfig,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            distill_pool_size: DEFAULT_DISTILL_POOL_SIZE,
            paths: Paths::default(),
            model: ModelSection::default(),
            training: TrainConfig::default(),
            teacher: TeacherSection::default(),
            synth: SynthConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model
            .to_config(self.seed)
            .validate()
            .map_err(|e| PipelineError::Invalid(e.to_string()))?;
        self.training.validate()?;
        self.teacher
            .noise
            .validate()
            .map_err(|e| PipelineError::Invalid(e.to_string()))?;
        if self.teacher.max_parallel == 0 {
            return Err(PipelineError::Invalid("teacher.max_parallel must be positive".into()));
        }
        if self.distill_pool_size == 0 {
            return Err(PipelineError::Invalid("distill_pool_size must be positive".into()));
        }
        Ok(())
    }
}

/// Counts from one teacher-labelling run. Each stage partitions the one
/// before it: `sentences = responses + failures`,
/// `responses = positive + dropped_negative`, `positive = pool + dropped_subsample`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateStats {
    pub sentences: usize,
    pub responses: usize,
    pub failures: usize,
    pub client_calls: usize,
    pub cache_hits: usize,
    pub malformed_lines: usize,
    pub grounding: GroundingStats,
    pub positive: usize,
    pub dropped_negative: usize,
    pub pool: usize,
    pub dropped_subsample: usize,
}

impl AnnotateStats {
    pub fn conserved(&self) -> bool {
        self.sentences == self.responses + self.failures
            && self.responses == self.positive + self.dropped_negative
            && self.positive == self.pool + self.dropped_subsample
    }
}

/// Teacher-labelled sentences (every response, positives or not) plus tallies.
#[derive(Debug, Clone, Default)]
pub struct TeacherRun {
    pub labeled: Vec<LabeledSentence>,
    pub failures: Vec<crate::teacher::AnnotationFailure>,
    pub stats: AnnotateStats,
}

/// Prompt, query, parse and ground every sentence.
pub fn teacher_label(
    sentences: &[Sentence],
    client: &dyn TeacherClient,
    cache: Option<&ResponseCache>,
    opts: &AnnotateOptions,
) -> TeacherRun {
    let outcome = annotate(sentences, client, cache, opts);
    let by_key: std::collections::HashMap<_, &Sentence> = sentences.iter().map(|s| (s.key(), s)).collect();
    let mut run = TeacherRun {
        stats: AnnotateStats {
            sentences: sentences.len(),
            responses: outcome.responses.len(),
            failures: outcome.failures.len(),
            client_calls: outcome.client_calls,
            cache_hits: outcome.cache_hits,
            ..Default::default()
        },
        failures: outcome.failures,
        ..Default::default()
    };
    for resp in &outcome.responses {
        let s = by_key[&resp.key()];
        let (anns, g) = ground_spans(s, &resp.parsed, Provenance::Teacher);
        run.stats.grounding += g;
        run.stats.malformed_lines += resp.malformed_lines;
        run.labeled.push(LabeledSentence::new(s.clone(), anns, Provenance::Teacher));
    }
    run
}

/// Keep sentences with at least one event, then draw at most `pool_size`
/// of them. Updates the positive/pool tallies in `stats`.
pub fn select_pool(
    labeled: &[LabeledSentence],
    pool_size: usize,
    seed: u64,
    stats: &mut AnnotateStats,
) -> Vec<LabeledSentence> {
    let positive = crate::teacher::filter_positive(labeled.to_vec(), |l| l.annotations.as_slice());
    stats.positive = positive.len();
    stats.dropped_negative = labeled.len() - positive.len();
    let pool = subsample(&positive, pool_size, seed);
    stats.pool = pool.len();
    stats.dropped_subsample = positive.len() - pool.len();
    pool
}

/// Lenient and strict scores of `preds` against `gold`.
pub fn score_both(preds: &[AdeAnnotation], gold: &[AdeAnnotation]) -> Result<(EvalReport, EvalReport), EvalError> {
    Ok((score(preds, gold, MatchMode::Lenient)?, score(preds, gold, MatchMode::Strict)?))
}

fn sentences_of(data: &[LabeledSentence]) -> Vec<Sentence> {
    data.iter().map(|l| l.sentence.clone()).collect()
}

/// Student lenient and strict scores on `test` gold.
pub fn evaluate_model(model: &UnifiedModel, test: &[LabeledSentence]) -> Result<(EvalReport, EvalReport), PipelineError> {
    let preds = model.annotate(&sentences_of(test))?;
    Ok(score_both(&preds, &all_annotations(test))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub total: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub seed: u64,
    pub split: SplitSizes,
    /// Labelling of the training split, through pool selection.
    pub train_annotation: AnnotateStats,
    pub teacher_test_lenient: EvalReport,
    pub teacher_test_strict: EvalReport,
    pub student_test_lenient: EvalReport,
    pub student_test_strict: EvalReport,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

impl DistillReport {
    pub fn student_beats_teacher(&self) -> bool {
        self.student_test_lenient.f1 > self.teacher_test_lenient.f1
    }
}

#[derive(Debug, Clone)]
pub struct DistillSettings {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub pool_size: usize,
    pub seed: u64,
    pub options: AnnotateOptions,
}

/// Split gold-labelled sentences 8:1:1, label every split with the teacher,
/// train the student on the positive teacher-labelled training pool with
/// teacher-labelled dev selection, and score both the student and the raw
/// teacher labels against gold test annotations.
pub fn distill(
    gold: &[LabeledSentence],
    client: &dyn TeacherClient,
    cache: Option<&ResponseCache>,
    settings: &DistillSettings,
) -> Result<(DistillReport, UnifiedModel), PipelineError> {
    let (train_g, dev_g, test_g) = split_8_1_1(gold, settings.seed);
    let mut train_run = teacher_label(&sentences_of(&train_g), client, cache, &settings.options);
    let dev_run = teacher_label(&sentences_of(&dev_g), client, cache, &settings.options);
    let test_run = teacher_label(&sentences_of(&test_g), client, cache, &settings.options);
    let pool = select_pool(&train_run.labeled, settings.pool_size, settings.seed, &mut train_run.stats);

    let outcome = train(&pool, &dev_run.labeled, &settings.model, &settings.training)?;
    let (student_l, student_s) = evaluate_model(&outcome.model, &test_g)?;
    let teacher_test: Vec<AdeAnnotation> = all_annotations(&test_run.labeled);
    let (teacher_l, teacher_s) = score_both(&teacher_test, &all_annotations(&test_g))?;
    let report = DistillReport {
        seed: settings.seed,
        split: SplitSizes {
            total: gold.len(),
            train: train_g.len(),
            dev: dev_g.len(),
            test: test_g.len(),
        },
        train_annotation: train_run.stats,
        teacher_test_lenient: teacher_l,
        teacher_test_strict: teacher_s,
        student_test_lenient: student_l,
        student_test_strict: student_s,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
    };
    Ok((report, outcome.model))
}

/// Test lenient F1 after training on nested subsets of `train`.
pub fn supervised_curve(
    train_set: &[LabeledSentence],
    dev: &[LabeledSentence],
    test: &[LabeledSentence],
    sizes: &[usize],
    model: &ModelConfig,
    training: &TrainConfig,
    seed: u64,
) -> Result<Vec<CurvePoint>, PipelineError> {
    let mut failure: Option<PipelineError> = None;
    let points = learning_curve(train_set, sizes, seed, |subset| {
        let run = || -> Result<f64, PipelineError> {
            let out = train(subset, dev, model, training)?;
            Ok(evaluate_model(&out.model, test)?.0.f1)
        };
        run().unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        })
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(points),
    }
}

/// Gold-labelled sentences from documents and annotations.
pub fn gold_labeled(sentences: &[Sentence], gold: &[AdeAnnotation]) -> Vec<LabeledSentence> {
    join_annotations(sentences, gold, Provenance::Gold)
}
