use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    decode_scored, head_forward, make_examples, pool_drug, ComplexityReport, LabeledSentence, ModelError,
    PredictionRecord, TokenizedSentence, TrainingExample, Vocab,
};
use crate::corpus::Sentence;
use crate::io::write_atomic;
use crate::lexicon::Mention;
use crate::neural::gradcheck::{grad_check, Coords, GradCheckReport};
use crate::neural::ops::{bce_mean, dot, sigmoid};
use crate::neural::{
    encoder_backward, forward_encoder_cached, init_encoder, load_checkpoint, save_checkpoint, ModelConfig, ParamSet,
    Tensor,
};
use crate::teacher::AdeAnnotation;

pub const VOCAB_FILE: &str = "vocab.json";

/// Token ids of one sentence and its per-drug training examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub ids: Vec<usize>,
    pub examples: Vec<TrainingExample>,
}

impl Group {
    pub fn new(ts: &TokenizedSentence, annotations: &[AdeAnnotation], vocab: &Vocab) -> Self {
        Self {
            ids: vocab.ids(&ts.tokens),
            examples: make_examples(ts, annotations),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    pub threshold: f64,
}

pub(crate) fn head_init(d_in: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
    let a = (6.0 / (d_in + 1) as f64).sqrt();
    (0..d_in).map(|_| rng.random_range(-a..a)).collect()
}

impl UnifiedModel {
    /// Fresh model; `config.vocab_size` is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        config.vocab_size = vocab.len();
        let mut params = init_encoder(&config)?;
        let d = config.d_model;
        params.insert("head.w", Tensor::from_vec(&[2 * d], head_init(2 * d, config.seed))?)?;
        params.insert("head.b", Tensor::scalar(0.0))?;
        Ok(Self {
            config,
            vocab,
            params,
            threshold: super::DEFAULT_THRESHOLD,
        })
    }

    pub fn tokenize(&self, sentence: &Sentence) -> TokenizedSentence {
        TokenizedSentence::new(sentence, self.config.max_seq_len)
    }

    pub fn group(&self, l: &LabeledSentence) -> Group {
        Group::new(&self.tokenize(&l.sentence), &l.annotations, &self.vocab)
    }

    /// One encoder pass, then one head pass per drug. Returns per-drug token
    /// probabilities in drug order.
    pub fn probabilities(&self, ts: &TokenizedSentence) -> Result<(Vec<Vec<f64>>, ComplexityReport), ModelError> {
        let mut report = ComplexityReport {
            m_drugs: ts.drugs.len(),
            ..Default::default()
        };
        if ts.drugs.is_empty() {
            return Ok((Vec::new(), report));
        }
        let ids = self.vocab.ids(&ts.tokens);
        let (h, _) = forward_encoder_cached(&ids, None, &self.params, &self.config)?;
        report.encoder_passes = 1;
        let w = self.params.t("head.w");
        let b = self.params.t("head.b").data()[0];
        let mut out = Vec::with_capacity(ts.drugs.len());
        for d in &ts.drugs {
            let dbar = pool_drug(&h, &d.token_indices())?;
            out.push(head_forward(&h, &dbar, w, b)?.into_data());
            report.head_passes += 1;
        }
        Ok((out, report))
    }

    /// Per-drug event spans with mean token probability.
    pub fn predict_tokenized(
        &self,
        ts: &TokenizedSentence,
        text: &str,
    ) -> Result<(Vec<(Mention, Vec<(Mention, f64)>)>, ComplexityReport), ModelError> {
        let (probs, mut report) = self.probabilities(ts)?;
        let out: Vec<_> = ts
            .drugs
            .iter()
            .zip(probs)
            .map(|(d, p)| (d.drug.clone(), decode_scored(&p, self.threshold, &ts.tokens, text)))
            .collect();
        report.n_events = out.iter().map(|(_, e)| e.len()).sum();
        Ok((out, report))
    }

    pub fn predict(&self, sentence: &Sentence) -> Result<(Vec<PredictionRecord>, ComplexityReport), ModelError> {
        let ts = self.tokenize(sentence);
        let (per_drug, report) = self.predict_tokenized(&ts, &sentence.text)?;
        let recs = per_drug
            .into_iter()
            .map(|(drug, events)| PredictionRecord::new(sentence, &drug, events))
            .collect();
        Ok((recs, report))
    }

    pub fn predict_all(&self, sentences: &[Sentence]) -> Result<Vec<PredictionRecord>, ModelError> {
        let mut out = Vec::new();
        for s in sentences {
            out.extend(self.predict(s)?.0);
        }
        Ok(out)
    }

    /// Predictions as annotations, one per drug (empty events included).
    pub fn annotate(&self, sentences: &[Sentence]) -> Result<Vec<AdeAnnotation>, ModelError> {
        Ok(self.predict_all(sentences)?.iter().map(PredictionRecord::to_annotation).collect())
    }

    /// Writes `params.bin`, `config.json` and `vocab.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        save_checkpoint(dir, &self.params, &self.config)?;
        let json = serde_json::to_vec(self.vocab.tokens()).expect("vocab serializes");
        let p = dir.join(VOCAB_FILE);
        write_atomic(&p, &json).map_err(|e| ModelError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let (params, config) = load_checkpoint(dir)?;
        let p = dir.join(VOCAB_FILE);
        let io = |message: String| ModelError::Io {
            path: p.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(&p).map_err(|e| io(e.to_string()))?;
        let tokens: Vec<String> = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        let vocab = Vocab::from_tokens(tokens)?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::Invalid("vocabulary size differs from config".into()));
        }
        let fresh = Self::new(config.clone(), vocab.clone())?;
        if !fresh.params.same_layout(&params) {
            return Err(ModelError::Invalid("checkpoint parameters do not match the config".into()));
        }
        Ok(Self {
            config,
            vocab,
            params,
            threshold: super::DEFAULT_THRESHOLD,
        })
    }
}

/// Sum over the group's examples of the per-example mean token BCE. When
/// `grads` is given, the gradient of that sum is accumulated into it.
pub(crate) fn group_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    g: &Group,
    grads: Option<&mut ParamSet>,
) -> Result<f64, ModelError> {
    if g.examples.is_empty() || g.ids.is_empty() {
        return Ok(0.0);
    }
    let (h, cache) = forward_encoder_cached(&g.ids, None, params, cfg)?;
    let (t, d) = (g.ids.len(), cfg.d_model);
    let w = params.t("head.w").data();
    let (wh, wd) = w.split_at(d);
    let b = params.t("head.b").data()[0];
    let base: Vec<f64> = (0..t).map(|i| dot(wh, h.row(i))).collect();

    let mut loss = 0.0;
    let mut dh = grads.as_ref().map(|_| vec![0.0; t * d]);
    let mut dw = vec![0.0; 2 * d];
    let mut db = 0.0;
    for ex in &g.examples {
        let dbar = pool_drug(&h, &ex.drug_tokens)?;
        let shift = dot(wd, dbar.data()) + b;
        let p: Vec<f64> = base.iter().map(|z| sigmoid(z + shift)).collect();
        loss += bce_mean(&p, &ex.labels);
        if let Some(dh) = dh.as_mut() {
            let inv_t = 1.0 / t as f64;
            let mut s = 0.0;
            for i in 0..t {
                let dz = (p[i] - ex.labels[i]) * inv_t;
                s += dz;
                for c in 0..d {
                    dw[c] += dz * h.row(i)[c];
                    dh[i * d + c] += dz * wh[c];
                }
            }
            for c in 0..d {
                dw[d + c] += s * dbar.data()[c];
            }
            db += s;
            let share = s / ex.drug_tokens.len() as f64;
            for &k in &ex.drug_tokens {
                for c in 0..d {
                    dh[k * d + c] += share * wd[c];
                }
            }
        }
    }
    if let (Some(grads), Some(dh)) = (grads, dh) {
        grads.t_mut("head.w").data_mut().iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        grads.t_mut("head.b").data_mut()[0] += db;
        encoder_backward(&cache, &dh, params, grads, cfg);
    }
    Ok(loss)
}

/// Mean example loss over `groups` and its analytic gradient.
pub(crate) fn batch_loss_grad(
    params: &ParamSet,
    cfg: &ModelConfig,
    groups: &[&Group],
    grads: &mut ParamSet,
) -> Result<f64, ModelError> {
    grads.zero();
    let n: usize = groups.iter().map(|g| g.examples.len()).sum();
    if n == 0 {
        return Ok(0.0);
    }
    let mut loss = 0.0;
    for g in groups {
        loss += group_loss(params, cfg, g, Some(grads))?;
    }
    let inv = 1.0 / n as f64;
    grads.scale(inv);
    Ok(loss * inv)
}

/// Finite-difference check of the full model (encoder, pooling, head) on
/// the mean example loss over `groups`.
pub fn unified_grad_check(
    model: &UnifiedModel,
    groups: &[Group],
    eps: f64,
    coords: Coords,
) -> Result<GradCheckReport, ModelError> {
    let refs: Vec<&Group> = groups.iter().collect();
    let mut grads = model.params.zeros_like();
    batch_loss_grad(&model.params, &model.config, &refs, &mut grads)?;
    let n: usize = groups.iter().map(|g| g.examples.len()).sum::<usize>().max(1);
    let loss = |p: &ParamSet| {
        groups
            .iter()
            .map(|g| group_loss(p, &model.config, g, None).expect("forward pass on checked inputs"))
            .sum::<f64>()
            / n as f64
    };
    Ok(grad_check(&model.params, &grads, loss, eps, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocab;
    use crate::teacher::Provenance;

    fn labeled(text: &str, drugs: &[&str], events: &[(&str, &str)]) -> LabeledSentence {
        let mut s = Sentence::new("doc", 0, text);
        for d in drugs {
            let i = text.find(d).unwrap();
            s.drug_mentions.push(Mention::from_text(text, i, i + d.len()));
        }
        let anns = events
            .iter()
            .map(|(d, e)| {
                let i = text.find(d).unwrap();
                let j = text.find(e).unwrap();
                AdeAnnotation {
                    doc_id: "doc".into(),
                    sent_index: 0,
                    drug: Mention::from_text(text, i, i + d.len()),
                    events: vec![Mention::from_text(text, j, j + e.len())],
                    provenance: Provenance::Gold,
                }
            })
            .collect();
        LabeledSentence::new(s, anns, Provenance::Gold)
    }

    fn toy() -> (UnifiedModel, Vec<Group>) {
        let a = labeled("aspirin caused rash but heparin was fine", &["aspirin", "heparin"], &[("aspirin", "rash")]);
        let b = labeled("heparin led to severe bleeding in week two", &["heparin"], &[("heparin", "severe bleeding")]);
        let vocab = Vocab::build([&a.sentence, &b.sentence]);
        let m = UnifiedModel::new(ModelConfig::toy(0), vocab).unwrap();
        let groups = vec![m.group(&a), m.group(&b)];
        (m, groups)
    }

    #[test]
    fn full_model_gradient_matches_differences() {
        let (m, groups) = toy();
        assert!(groups.iter().all(|g| g.ids.len() <= 8));
        let r = unified_grad_check(&m, &groups, 1e-5, Coords::All).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        for group in ["head.w", "head.b", "enc.l0.wq", "enc.l1.wk", "enc.tok_emb"] {
            assert!(r.per_param.contains_key(group));
        }
    }

    #[test]
    fn unified_accounting() {
        let (m, _) = toy();
        let s = labeled("aspirin and heparin and warfarin today", &["aspirin", "heparin", "warfarin"], &[]);
        let (recs, rep) = m.predict(&s.sentence).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!((rep.encoder_passes, rep.head_passes, rep.m_drugs), (1, 3, 3));
        for r in &recs {
            for e in &r.events {
                assert!(e.end <= s.sentence.text.len() && e.start < e.end);
                assert_eq!(&s.sentence.text[e.start..e.end], e.surface);
            }
        }
        let none = Sentence::new("doc", 1, "nothing here");
        let (recs, rep) = m.predict(&none).unwrap();
        assert!(recs.is_empty());
        assert_eq!((rep.encoder_passes, rep.head_passes), (0, 0));
    }

    #[test]
    fn save_and_load() {
        let (m, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = UnifiedModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
    }
}
