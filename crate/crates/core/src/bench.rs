//! Inference cost sweep: the unified model against the pairwise baseline on
//! synthetic sentences with M drugs and N event spans.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;
use crate::lexicon::Mention;
use crate::model::{ComplexityReport, ModelError, PairwiseModel, TokenizedSentence, UnifiedModel, Vocab};
use crate::neural::ModelConfig;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("count mismatch at M={m}, N={n}: {what}")]
    Count { m: usize, n: usize, what: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Values swept for both M and N.
    pub sizes: Vec<usize>,
    /// Timed repetitions per cell; the median is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 4, 8, 16],
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m_drugs: usize,
    pub n_events: usize,
    pub tokens: usize,
    pub unified_encoder_passes: usize,
    pub head_passes: usize,
    pub pairwise_encoder_passes: usize,
    pub pairwise_units: usize,
    pub unified_ms: f64,
    pub pairwise_ms: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, m: usize, n: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.m_drugs == m && r.n_events == n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "m_drugs,n_events,tokens,unified_encoder_passes,head_passes,pairwise_encoder_passes,pairwise_units,unified_ms,pairwise_ms,speedup\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.6},{:.6},{:.3}",
                r.m_drugs,
                r.n_events,
                r.tokens,
                r.unified_encoder_passes,
                r.head_passes,
                r.pairwise_encoder_passes,
                r.pairwise_units,
                r.unified_ms,
                r.pairwise_ms,
                r.speedup
            );
        }
        s
    }
}

/// A sentence with `m` distinct single-token drugs and `n` single-token
/// event words, plus the token ranges of the events.
pub fn bench_sentence(m: usize, n: usize) -> (Sentence, Vec<Range<usize>>) {
    let mut text = String::from("Patient received");
    let mut drugs = Vec::with_capacity(m);
    for j in 0..m {
        text.push(' ');
        let start = text.len();
        let _ = write!(text, "drug{j}x");
        drugs.push((start, text.len()));
    }
    text.push_str(" and developed");
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        text.push(' ');
        let start = text.len();
        let _ = write!(text, "event{i}y");
        events.push((start, text.len()));
    }
    text.push('.');
    let mut s = Sentence::new("BENCH", 0, text);
    s.drug_mentions = drugs.iter().map(|&(a, b)| Mention::from_text(&s.text, a, b)).collect();
    let tokens = crate::model::tokenize(&s.text);
    let ranges = events
        .iter()
        .map(|&(a, _)| {
            let i = tokens.iter().position(|t| t.start == a).expect("event token");
            i..i + 1
        })
        .collect();
    (s, ranges)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        (xs[k / 2 - 1] + xs[k / 2]) / 2.0
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed().as_secs_f64() * 1e3)
}

fn check(m: usize, n: usize, what: &str, got: usize, want: usize) -> Result<(), BenchError> {
    if got == want {
        Ok(())
    } else {
        Err(BenchError::Count {
            m,
            n,
            what: format!("{what} = {got}, expected {want}"),
        })
    }
}

/// Runs every (M, N) cell. Pass counts are checked exactly and any mismatch
/// is an error; timings are medians over `repeats` runs of untrained models
/// sharing one encoder configuration.
pub fn run_bench(model: &ModelConfig, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.repeats == 0 || cfg.sizes.is_empty() {
        return Err(BenchError::Invalid("bench needs at least one size and one repeat".into()));
    }
    let max = cfg.sizes.iter().copied().max().unwrap_or(0);
    let (widest, _) = bench_sentence(max, max);
    let vocab = Vocab::build([&widest]);
    let unified = UnifiedModel::new(model.clone(), vocab.clone())?;
    let pairwise = PairwiseModel::new(model, vocab)?;
    let mut rows = Vec::new();
    for &m in &cfg.sizes {
        for &n in &cfg.sizes {
            let (s, cands) = bench_sentence(m, n);
            let ts = TokenizedSentence::new(&s, model.max_seq_len);
            if ts.drugs.len() != m || cands.iter().any(|r| r.end > ts.len()) {
                return Err(BenchError::Invalid(format!(
                    "M={m}, N={n} does not fit in max_seq_len {}",
                    model.max_seq_len
                )));
            }
            let mut ut = Vec::with_capacity(cfg.repeats);
            let mut pt = Vec::with_capacity(cfg.repeats);
            let mut ur = ComplexityReport::default();
            let mut pr = ComplexityReport::default();
            for _ in 0..cfg.repeats {
                let (r, ms) = timed(|| unified.predict_tokenized(&ts, &s.text));
                ur = r?.1;
                ut.push(ms);
                let (r, ms) = timed(|| pairwise.predict_with_candidates(&ts, &s.text, Some(&cands)));
                pr = r?.1;
                pt.push(ms);
            }
            check(m, n, "head_passes", ur.head_passes, m)?;
            check(m, n, "unified encoder_passes", ur.encoder_passes, 1)?;
            check(m, n, "pairwise_units", pr.pairwise_units, n * m)?;
            check(m, n, "pairwise encoder_passes", pr.encoder_passes, 1 + n * m)?;
            let (u, p) = (median(ut), median(pt));
            rows.push(BenchRow {
                m_drugs: m,
                n_events: n,
                tokens: ts.len(),
                unified_encoder_passes: ur.encoder_passes,
                head_passes: ur.head_passes,
                pairwise_encoder_passes: pr.encoder_passes,
                pairwise_units: pr.pairwise_units,
                unified_ms: u,
                pairwise_ms: p,
                speedup: p / u.max(f64::MIN_POSITIVE),
            });
        }
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_layout() {
        let (s, r) = bench_sentence(3, 2);
        assert_eq!(s.text, "Patient received drug0x drug1x drug2x and developed event0y event1y.");
        assert_eq!(s.drug_mentions.len(), 3);
        assert_eq!(r, vec![7..8, 8..9]);
    }

    #[test]
    fn counts_on_a_small_sweep() {
        let cfg = BenchConfig {
            sizes: vec![1, 3],
            repeats: 1,
        };
        let rep = run_bench(&ModelConfig { max_seq_len: 16, ..ModelConfig::toy(1) }, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 4);
        let r = rep.row(3, 3).unwrap();
        assert_eq!((r.head_passes, r.pairwise_units, r.pairwise_encoder_passes), (3, 9, 10));
        assert_eq!(rep.to_csv().lines().count(), 5);
    }

    #[test]
    fn too_long_is_rejected() {
        let cfg = BenchConfig {
            sizes: vec![8],
            repeats: 1,
        };
        assert!(matches!(run_bench(&ModelConfig::toy(1), &cfg), Err(BenchError::Invalid(_))));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
