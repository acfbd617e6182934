//! Two-stage baseline: a drug-agnostic token tagger proposes event spans,
//! then every (span, drug) pair gets its own encoder pass with marker
//! embeddings and a binary relation classifier.

use std::ops::Range;

use super::train::fit;
use super::unified::head_init;
use super::{
    decode_scored, pool_drug, ComplexityReport, LabeledSentence, ModelError, PredictionRecord, TokenizedSentence,
    TrainConfig, Vocab,
};
use crate::corpus::Sentence;
use crate::lexicon::Mention;
use crate::neural::ops::{bce_mean, dot, sigmoid};
use crate::neural::{encoder_backward, forward_encoder_cached, init_encoder, ModelConfig, ParamSet, Tensor};

pub const RE_AE_MARKER: usize = 1;
pub const RE_DRUG_MARKER: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseModel {
    pub ner_config: ModelConfig,
    pub re_config: ModelConfig,
    pub vocab: Vocab,
    pub ner: ParamSet,
    pub re: ParamSet,
    pub threshold: f64,
}

struct NerItem {
    ids: Vec<usize>,
    labels: Vec<f64>,
}

struct ReItem {
    ids: Vec<usize>,
    markers: Vec<usize>,
    ae: Vec<usize>,
    drug: Vec<usize>,
    label: f64,
}

fn markers_for(t: usize, ae: &[usize], drug: &[usize]) -> Vec<usize> {
    let mut m = vec![0; t];
    ae.iter().for_each(|&i| m[i] = RE_AE_MARKER);
    drug.iter().for_each(|&i| m[i] = RE_DRUG_MARKER);
    m
}

fn ner_loss(p: &ParamSet, cfg: &ModelConfig, it: &NerItem, grads: Option<&mut ParamSet>) -> Result<f64, ModelError> {
    let t = it.ids.len();
    if t == 0 {
        return Ok(0.0);
    }
    let d = cfg.d_model;
    let (h, cache) = forward_encoder_cached(&it.ids, None, p, cfg)?;
    let w = p.t("ner.w").data();
    let b = p.t("ner.b").data()[0];
    let probs: Vec<f64> = (0..t).map(|i| sigmoid(dot(w, h.row(i)) + b)).collect();
    let loss = bce_mean(&probs, &it.labels);
    if let Some(g) = grads {
        let mut dh = vec![0.0; t * d];
        let mut dw = vec![0.0; d];
        let mut db = 0.0;
        for i in 0..t {
            let dz = (probs[i] - it.labels[i]) / t as f64;
            db += dz;
            for c in 0..d {
                dw[c] += dz * h.row(i)[c];
                dh[i * d + c] = dz * w[c];
            }
        }
        g.t_mut("ner.w").data_mut().iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        g.t_mut("ner.b").data_mut()[0] += db;
        encoder_backward(&cache, &dh, p, g, cfg);
    }
    Ok(loss)
}

fn re_score(h: &Tensor, p: &ParamSet, d: usize, ae: &[usize], drug: &[usize]) -> Result<(f64, Tensor, Tensor), ModelError> {
    let a = pool_drug(h, ae)?;
    let q = pool_drug(h, drug)?;
    let w = p.t("re.w").data();
    let z = dot(&w[..d], a.data()) + dot(&w[d..], q.data()) + p.t("re.b").data()[0];
    Ok((sigmoid(z), a, q))
}

fn re_loss(p: &ParamSet, cfg: &ModelConfig, it: &ReItem, grads: Option<&mut ParamSet>) -> Result<f64, ModelError> {
    let d = cfg.d_model;
    let t = it.ids.len();
    let (h, cache) = forward_encoder_cached(&it.ids, Some(&it.markers), p, cfg)?;
    let (prob, a, q) = re_score(&h, p, d, &it.ae, &it.drug)?;
    let loss = bce_mean(&[prob], &[it.label]);
    if let Some(g) = grads {
        let dz = prob - it.label;
        let w = p.t("re.w").data();
        {
            let dw = g.t_mut("re.w").data_mut();
            for c in 0..d {
                dw[c] += dz * a.data()[c];
                dw[d + c] += dz * q.data()[c];
            }
        }
        g.t_mut("re.b").data_mut()[0] += dz;
        let mut dh = vec![0.0; t * d];
        for (idx, wpart) in [(&it.ae, &w[..d]), (&it.drug, &w[d..])] {
            let share = dz / idx.len() as f64;
            for &k in idx.iter() {
                for c in 0..d {
                    dh[k * d + c] += share * wpart[c];
                }
            }
        }
        encoder_backward(&cache, &dh, p, g, cfg);
    }
    Ok(loss)
}

fn mean_step<I>(
    p: &ParamSet,
    batch: &[&I],
    grads: &mut ParamSet,
    mut f: impl FnMut(&ParamSet, &I, Option<&mut ParamSet>) -> Result<f64, ModelError>,
) -> Result<f64, ModelError> {
    grads.zero();
    let mut loss = 0.0;
    for it in batch {
        loss += f(p, it, Some(grads))?;
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    grads.scale(inv);
    Ok(loss * inv)
}

fn span_tokens(ts: &TokenizedSentence, start: usize, end: usize) -> Vec<usize> {
    ts.covered(&[(start, end)])
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

impl PairwiseModel {
    /// Untrained model: the relation encoder gets three marker embeddings.
    pub fn new(config: &ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        let mut ner_config = config.clone();
        ner_config.vocab_size = vocab.len();
        ner_config.n_markers = 0;
        let mut re_config = ner_config.clone();
        re_config.n_markers = 3;
        re_config.seed = config.seed.wrapping_add(1);
        let d = config.d_model;
        let mut ner = init_encoder(&ner_config)?;
        ner.insert("ner.w", Tensor::from_vec(&[d], head_init(d, ner_config.seed))?)?;
        ner.insert("ner.b", Tensor::scalar(0.0))?;
        let mut re = init_encoder(&re_config)?;
        re.insert("re.w", Tensor::from_vec(&[2 * d], head_init(2 * d, re_config.seed))?)?;
        re.insert("re.b", Tensor::scalar(0.0))?;
        Ok(Self {
            ner_config,
            re_config,
            vocab,
            ner,
            re,
            threshold: super::DEFAULT_THRESHOLD,
        })
    }

    pub fn tokenize(&self, s: &Sentence) -> TokenizedSentence {
        TokenizedSentence::new(s, self.ner_config.max_seq_len)
    }

    /// Trains the tagger on the union of event spans, then the relation
    /// classifier on every (gold event span, drug) pair of each sentence.
    pub fn train(train: &[LabeledSentence], config: &ModelConfig, cfg: &TrainConfig) -> Result<Self, ModelError> {
        let vocab = Vocab::build(train.iter().map(|l| &l.sentence));
        let mut m = Self::new(config, vocab)?;
        m.threshold = cfg.threshold;
        let mut ner_items = Vec::new();
        let mut re_items = Vec::new();
        for l in train {
            let ts = m.tokenize(&l.sentence);
            if ts.is_empty() {
                continue;
            }
            let ids = m.vocab.ids(&ts.tokens);
            let mut spans: Vec<(usize, usize)> = l
                .annotations
                .iter()
                .flat_map(|a| a.events.iter().map(|e| (e.start, e.end)))
                .collect();
            spans.sort_unstable();
            spans.dedup();
            ner_items.push(NerItem {
                ids: ids.clone(),
                labels: ts.covered(&spans).into_iter().map(|b| f64::from(u8::from(b))).collect(),
            });
            for &(s, e) in &spans {
                let ae = span_tokens(&ts, s, e);
                if ae.is_empty() {
                    continue;
                }
                for d in &ts.drugs {
                    let linked = l
                        .annotations
                        .iter()
                        .filter(|a| d.occurrences.iter().any(|o| (o.start, o.end) == (a.drug.start, a.drug.end)))
                        .any(|a| a.events.iter().any(|x| (x.start, x.end) == (s, e)));
                    let drug = d.token_indices();
                    re_items.push(ReItem {
                        markers: markers_for(ts.len(), &ae, &drug),
                        ids: ids.clone(),
                        ae: ae.clone(),
                        drug,
                        label: f64::from(u8::from(linked)),
                    });
                }
            }
        }
        let (nc, rc) = (m.ner_config.clone(), m.re_config.clone());
        fit(&mut m.ner, &ner_items, cfg, |p, b, g| mean_step(p, b, g, |p, it, g| ner_loss(p, &nc, it, g)), |_| Ok(None))?;
        if !re_items.is_empty() {
            fit(&mut m.re, &re_items, cfg, |p, b, g| mean_step(p, b, g, |p, it, g| re_loss(p, &rc, it, g)), |_| Ok(None))?;
        }
        Ok(m)
    }

    /// Stage 1: candidate event token ranges from the tagger.
    pub fn propose(&self, ts: &TokenizedSentence, text: &str) -> Result<Vec<Range<usize>>, ModelError> {
        if ts.is_empty() {
            return Ok(Vec::new());
        }
        let ids = self.vocab.ids(&ts.tokens);
        let (h, _) = forward_encoder_cached(&ids, None, &self.ner, &self.ner_config)?;
        let w = self.ner.t("ner.w").data();
        let b = self.ner.t("ner.b").data()[0];
        let p: Vec<f64> = (0..ts.len()).map(|i| sigmoid(dot(w, h.row(i)) + b)).collect();
        Ok(decode_scored(&p, self.threshold, &ts.tokens, text)
            .into_iter()
            .map(|(m, _)| {
                let idx = span_tokens(ts, m.start, m.end);
                idx[0]..idx[idx.len() - 1] + 1
            })
            .collect())
    }

    /// Stage 2 over the given candidates (or the tagger's own when `None`).
    /// Counts one encoder pass for the tagger plus one per (span, drug) pair.
    pub fn predict_with_candidates(
        &self,
        ts: &TokenizedSentence,
        text: &str,
        candidates: Option<&[Range<usize>]>,
    ) -> Result<(Vec<(Mention, Vec<(Mention, f64)>)>, ComplexityReport), ModelError> {
        let proposed = self.propose(ts, text)?;
        let cands = candidates.unwrap_or(&proposed);
        let mut report = ComplexityReport {
            n_events: cands.len(),
            m_drugs: ts.drugs.len(),
            encoder_passes: usize::from(!ts.is_empty()),
            ..Default::default()
        };
        let ids = self.vocab.ids(&ts.tokens);
        let d = self.re_config.d_model;
        let mut out = Vec::with_capacity(ts.drugs.len());
        for drug in &ts.drugs {
            let dt = drug.token_indices();
            let mut events = Vec::new();
            for r in cands {
                let ae: Vec<usize> = r.clone().collect();
                let markers = markers_for(ts.len(), &ae, &dt);
                let (h, _) = forward_encoder_cached(&ids, Some(&markers), &self.re, &self.re_config)?;
                let (prob, _, _) = re_score(&h, &self.re, d, &ae, &dt)?;
                report.encoder_passes += 1;
                report.head_passes += 1;
                report.pairwise_units += 1;
                if prob >= self.threshold {
                    let m = Mention::from_text(text, ts.tokens[r.start].start, ts.tokens[r.end - 1].end);
                    events.push((m, prob));
                }
            }
            out.push((drug.drug.clone(), events));
        }
        Ok((out, report))
    }

    pub fn predict(&self, s: &Sentence) -> Result<(Vec<PredictionRecord>, ComplexityReport), ModelError> {
        let ts = self.tokenize(s);
        let (per_drug, report) = self.predict_with_candidates(&ts, &s.text, None)?;
        Ok((
            per_drug
                .into_iter()
                .map(|(drug, ev)| PredictionRecord::new(s, &drug, ev))
                .collect(),
            report,
        ))
    }

    pub fn annotate(&self, sentences: &[Sentence]) -> Result<Vec<crate::teacher::AdeAnnotation>, ModelError> {
        let mut out = Vec::new();
        for s in sentences {
            out.extend(self.predict(s)?.0.iter().map(PredictionRecord::to_annotation));
        }
        Ok(out)
    }
}
