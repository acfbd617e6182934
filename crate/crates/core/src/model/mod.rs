//! Drug-centric token classifier: one encoder pass per sentence, then for
//! every drug a pooled drug vector is concatenated to each token state and
//! scored by a shared linear + sigmoid head. Also holds the pairwise
//! (span × drug) baseline used for the cost comparison.

mod pairwise;
mod train;
mod unified;

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;
use crate::lexicon::{normalize, Mention};
use crate::neural::{sigmoid, NeuralError, Tensor};
use crate::teacher::{AdeAnnotation, Provenance};

pub use pairwise::{PairwiseModel, RE_AE_MARKER, RE_DRUG_MARKER};
pub use train::{train, EpochLog, Optimizer, TrainConfig, TrainOutcome};
pub use unified::{unified_grad_check, Group, UnifiedModel};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const UNK: &str = "[UNK]";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("drug has no tokens to pool")]
    EmptyDrugSpan,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// One token with byte offsets into the original (not lowercased) text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercased word-level tokens: alphanumeric runs, and every other
/// non-space character on its own.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut run: Option<usize> = None;
    let close = |out: &mut Vec<Token>, s: usize, e: usize| {
        out.push(Token {
            text: text[s..e].to_lowercase(),
            start: s,
            end: e,
        })
    };
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            run.get_or_insert(i);
            continue;
        }
        if let Some(s) = run.take() {
            close(&mut out, s, i);
        }
        if !c.is_whitespace() {
            close(&mut out, i, i + c.len_utf8());
        }
    }
    if let Some(s) = run {
        close(&mut out, s, text.len());
    }
    out
}

/// All occurrences of one drug (same normalized surface) in a sentence.
/// `drug` is the first occurrence and is the key used in annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrugSpans {
    pub drug: Mention,
    pub occurrences: Vec<Mention>,
    pub ranges: Vec<Range<usize>>,
}

impl DrugSpans {
    /// Sorted, de-duplicated token indices over every occurrence.
    pub fn token_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.ranges.iter().flat_map(|r| r.clone()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn owns(&self, m: &Mention) -> bool {
        self.occurrences.iter().any(|o| o.start == m.start && o.end == m.end)
            || normalize(&self.drug.surface) == normalize(&m.surface)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub tokens: Vec<Token>,
    pub drugs: Vec<DrugSpans>,
}

fn token_range(tokens: &[Token], start: usize, end: usize) -> Range<usize> {
    let first = tokens.partition_point(|t| t.end <= start);
    let last = tokens.partition_point(|t| t.start < end);
    first..last.max(first)
}

impl TokenizedSentence {
    /// Tokenizes and keeps at most `max_len` tokens; drugs whose tokens all
    /// fall past the cut are dropped.
    pub fn new(sentence: &Sentence, max_len: usize) -> Self {
        let mut tokens = tokenize(&sentence.text);
        tokens.truncate(max_len);
        let mut drugs: Vec<DrugSpans> = Vec::new();
        let mut by_surface: HashMap<String, usize> = HashMap::new();
        for m in &sentence.drug_mentions {
            let r = token_range(&tokens, m.start, m.end);
            if r.is_empty() {
                continue;
            }
            let key = normalize(&m.surface);
            match by_surface.get(&key) {
                Some(&j) => {
                    drugs[j].occurrences.push(m.clone());
                    drugs[j].ranges.push(r);
                }
                None => {
                    by_surface.insert(key, drugs.len());
                    drugs.push(DrugSpans {
                        drug: m.clone(),
                        occurrences: vec![m.clone()],
                        ranges: vec![r],
                    });
                }
            }
        }
        Self { tokens, drugs }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token indices touched by any of `spans`.
    pub fn covered(&self, spans: &[(usize, usize)]) -> Vec<bool> {
        let mut y = vec![false; self.tokens.len()];
        for &(s, e) in spans {
            for i in token_range(&self.tokens, s, e) {
                y[i] = true;
            }
        }
        y
    }
}

/// Target drug plus per-token labels for one (sentence, drug) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub drug: Mention,
    pub drug_tokens: Vec<usize>,
    pub labels: Vec<f64>,
}

/// One example per drug in the sentence, including drugs without events.
pub fn make_examples(ts: &TokenizedSentence, annotations: &[AdeAnnotation]) -> Vec<TrainingExample> {
    ts.drugs
        .iter()
        .map(|d| {
            let spans: Vec<(usize, usize)> = annotations
                .iter()
                .filter(|a| d.owns(&a.drug))
                .flat_map(|a| a.events.iter().map(|e| (e.start, e.end)))
                .collect();
            TrainingExample {
                drug: d.drug.clone(),
                drug_tokens: d.token_indices(),
                labels: ts.covered(&spans).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
            }
        })
        .collect()
}

/// Mean of the selected rows of `h`.
pub fn pool_drug(h: &Tensor, indices: &[usize]) -> Result<Tensor, ModelError> {
    if indices.is_empty() {
        return Err(ModelError::EmptyDrugSpan);
    }
    let (t, d) = (h.rows(), h.cols());
    if let Some(&i) = indices.iter().find(|&&i| i >= t) {
        return Err(ModelError::ShapeMismatch(format!("drug token {i} out of {t}")));
    }
    let mut out = vec![0.0; d];
    for &i in indices {
        out.iter_mut().zip(h.row(i)).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / indices.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(Tensor::from_vec(&[d], out)?)
}

/// Token probabilities `sigmoid(w · [h_i ; d_bar] + b)` for every row of `h`.
pub fn head_forward(h: &Tensor, d_bar: &Tensor, w: &Tensor, b: f64) -> Result<Tensor, ModelError> {
    let (t, d) = (h.rows(), h.cols());
    if h.shape().len() != 2 || d_bar.len() != d || w.len() != 2 * d {
        return Err(ModelError::ShapeMismatch(format!(
            "H {:?}, drug {:?}, W {:?}",
            h.shape(),
            d_bar.shape(),
            w.shape()
        )));
    }
    let (wh, wd) = w.data().split_at(d);
    let drug_term = crate::neural::ops::dot(wd, d_bar.data()) + b;
    let p = (0..t)
        .map(|i| sigmoid(crate::neural::ops::dot(wh, h.row(i)) + drug_term))
        .collect();
    Ok(Tensor::from_vec(&[t], p)?)
}

/// Maximal runs of tokens with `p >= threshold`, each with its mean probability.
pub fn decode_scored(p: &[f64], threshold: f64, tokens: &[Token], text: &str) -> Vec<(Mention, f64)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < p.len().min(tokens.len()) {
        if p[i] < threshold {
            i += 1;
            continue;
        }
        let s = i;
        while i < p.len().min(tokens.len()) && p[i] >= threshold {
            i += 1;
        }
        let score = p[s..i].iter().sum::<f64>() / (i - s) as f64;
        out.push((Mention::from_text(text, tokens[s].start, tokens[i - 1].end), score));
    }
    out
}

pub fn decode_spans(p: &[f64], threshold: f64, tokens: &[Token], text: &str) -> Vec<Mention> {
    decode_scored(p, threshold, tokens, text).into_iter().map(|(m, _)| m).collect()
}

/// Inference cost accounting for one sentence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub n_events: usize,
    pub m_drugs: usize,
    pub encoder_passes: usize,
    pub head_passes: usize,
    pub pairwise_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRef {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub score: f64,
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub sent_index: usize,
    pub drug: SpanRef,
    pub events: Vec<ScoredSpan>,
}

impl PredictionRecord {
    pub fn new(sentence: &Sentence, drug: &Mention, events: Vec<(Mention, f64)>) -> Self {
        Self {
            doc_id: sentence.doc_id.clone(),
            sent_index: sentence.sent_index,
            drug: SpanRef {
                start: drug.start,
                end: drug.end,
                surface: drug.surface.clone(),
            },
            events: events
                .into_iter()
                .map(|(m, score)| ScoredSpan {
                    start: m.start,
                    end: m.end,
                    surface: m.surface,
                    score,
                })
                .collect(),
        }
    }

    pub fn to_annotation(&self) -> AdeAnnotation {
        let m = |start, end, surface: &str| Mention {
            start,
            end,
            surface: surface.to_string(),
            concept_id: None,
        };
        AdeAnnotation {
            doc_id: self.doc_id.clone(),
            sent_index: self.sent_index,
            drug: m(self.drug.start, self.drug.end, &self.drug.surface),
            events: self.events.iter().map(|e| m(e.start, e.end, &e.surface)).collect(),
            provenance: Provenance::Student,
        }
    }
}

/// A sentence with annotations covering every drug it mentions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub sentence: Sentence,
    pub annotations: Vec<AdeAnnotation>,
}

impl LabeledSentence {
    /// Adds an empty annotation for every drug surface that `annotations`
    /// leaves out, so negatives are explicit.
    pub fn new(sentence: Sentence, mut annotations: Vec<AdeAnnotation>, provenance: Provenance) -> Self {
        let ts = TokenizedSentence::new(&sentence, usize::MAX);
        for d in &ts.drugs {
            if !annotations.iter().any(|a| d.owns(&a.drug)) {
                annotations.push(AdeAnnotation {
                    doc_id: sentence.doc_id.clone(),
                    sent_index: sentence.sent_index,
                    drug: d.drug.clone(),
                    events: Vec::new(),
                    provenance,
                });
            }
        }
        Self { sentence, annotations }
    }

    pub fn has_events(&self) -> bool {
        self.annotations.iter().any(|a| !a.events.is_empty())
    }
}

/// Pair sentences with their annotations by sentence key.
pub fn join_annotations(sentences: &[Sentence], annotations: &[AdeAnnotation], provenance: Provenance) -> Vec<LabeledSentence> {
    let mut by_key: BTreeMap<_, Vec<AdeAnnotation>> = BTreeMap::new();
    for a in annotations {
        by_key.entry(a.key()).or_default().push(a.clone());
    }
    sentences
        .iter()
        .map(|s| LabeledSentence::new(s.clone(), by_key.remove(&s.key()).unwrap_or_default(), provenance))
        .collect()
}

/// Flatten the annotations of labeled sentences.
pub fn all_annotations(data: &[LabeledSentence]) -> Vec<AdeAnnotation> {
    data.iter().flat_map(|l| l.annotations.iter().cloned()).collect()
}

/// Token vocabulary; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, ModelError> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(ModelError::Invalid(format!("vocabulary must start with {UNK}")));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(ModelError::Invalid("duplicate vocabulary entry".into()));
        }
        Ok(Self { tokens, index })
    }

    /// Every token seen in `sentences`, most frequent first, ties by text.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in sentences {
            for t in tokenize(&s.text) {
                *counts.entry(t.text).or_default() += 1;
            }
        }
        counts.remove(UNK);
        let mut v: Vec<(String, usize)> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = std::iter::once(UNK.to_string()).chain(v.into_iter().map(|(t, _)| t)).collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(&t.text)).collect()
    }
}
