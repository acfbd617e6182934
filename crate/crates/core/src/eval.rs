//! Triple-level scoring, dataset splits and the learning-curve harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{shuffle, SentenceKey};
use crate::teacher::AdeAnnotation;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("predictions reference {count} sentence(s) absent from the gold set, first: {first}")]
    SentenceSetMismatch { count: usize, first: SentenceKey },
    #[error("cannot make {k} folds from {n} items")]
    TooFewItems { n: usize, k: usize },
    #[error("learning-curve size {size} outside 1..={available}")]
    BadSize { size: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Strict,
    Lenient,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Strict => "strict",
            MatchMode::Lenient => "lenient",
        }
    }

    /// Whether `pred` may be matched to `gold`.
    pub fn accepts(self, pred: (usize, usize), gold: (usize, usize)) -> bool {
        match self {
            MatchMode::Strict => pred == gold,
            MatchMode::Lenient => overlap(pred, gold) >= 1,
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: MatchMode,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(mode: MatchMode, tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            mode,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Aligned text table, one row per report.
pub fn report_table(rows: &[(String, EvalReport)]) -> String {
    let header = ["run", "mode", "tp", "fp", "fn", "precision", "recall", "f1"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (name, r) in rows {
        cells.push(vec![
            name.clone(),
            r.mode.to_string(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            format!("{:.4}", r.precision),
            format!("{:.4}", r.recall),
            format!("{:.4}", r.f1),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

type GroupKey = (SentenceKey, (usize, usize));

/// Deduplicated event spans per (sentence, drug span).
fn triples(anns: &[AdeAnnotation]) -> BTreeMap<GroupKey, BTreeSet<(usize, usize)>> {
    let mut out: BTreeMap<GroupKey, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for a in anns {
        let slot = out.entry((a.key(), (a.drug.start, a.drug.end))).or_default();
        slot.extend(a.events.iter().map(|e| (e.start, e.end)));
    }
    out
}

/// Size of a maximum one-to-one matching between predicted and gold spans.
///
/// Predictions are tried in ascending start order and each tries golds with
/// larger overlap first; augmenting paths make the result maximum regardless.
pub fn match_count(preds: &[(usize, usize)], golds: &[(usize, usize)], mode: MatchMode) -> usize {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by_key(|&i| preds[i]);
    let cands: Vec<Vec<usize>> = preds
        .iter()
        .map(|&p| {
            let mut c: Vec<usize> = (0..golds.len()).filter(|&g| mode.accepts(p, golds[g])).collect();
            c.sort_by_key(|&g| (std::cmp::Reverse(overlap(p, golds[g])), golds[g]));
            c
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; golds.len()];

    fn augment(u: usize, cands: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &g in &cands[u] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|o| augment(o, cands, owner, seen)) {
                owner[g] = Some(u);
                return true;
            }
        }
        false
    }

    let mut matched = 0;
    for u in order {
        let mut seen = vec![false; golds.len()];
        if augment(u, &cands, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

/// Micro-averaged triple scoring. A prediction counts only under the exact
/// gold drug span; event spans are matched one-to-one per `mode`.
pub fn score(preds: &[AdeAnnotation], golds: &[AdeAnnotation], mode: MatchMode) -> Result<EvalReport, EvalError> {
    let gold_keys: BTreeSet<SentenceKey> = golds.iter().map(AdeAnnotation::key).collect();
    let missing: Vec<SentenceKey> = preds
        .iter()
        .map(AdeAnnotation::key)
        .filter(|k| !gold_keys.contains(k))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(first) = missing.first() {
        return Err(EvalError::SentenceSetMismatch {
            count: missing.len(),
            first: first.clone(),
        });
    }
    let p = triples(preds);
    let g = triples(golds);
    let n_pred: usize = p.values().map(BTreeSet::len).sum();
    let n_gold: usize = g.values().map(BTreeSet::len).sum();
    let mut tp = 0;
    for (key, pe) in &p {
        if let Some(ge) = g.get(key) {
            let pv: Vec<_> = pe.iter().copied().collect();
            let gv: Vec<_> = ge.iter().copied().collect();
            tp += match_count(&pv, &gv, mode);
        }
    }
    Ok(EvalReport::from_counts(mode, tp, n_pred - tp, n_gold - tp))
}

/// Seeded shuffle, then `floor(0.8 n)` / `floor(0.1 n)` / remainder.
pub fn split_8_1_1<T: Clone>(items: &[T], seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut v = items.to_vec();
    shuffle(&mut v, seed);
    let n = v.len();
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let test = v.split_off(n_train + n_dev);
    let dev = v.split_off(n_train);
    (v, dev, test)
}

/// Seeded k-fold partition; the first `n mod k` folds get one extra item.
/// Pair `i` is (everything outside fold `i`, fold `i`).
pub fn kfold<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<(Vec<T>, Vec<T>)>, EvalError> {
    let n = items.len();
    if k < 2 || n < k {
        return Err(EvalError::TooFewItems { n, k });
    }
    let mut v = items.to_vec();
    shuffle(&mut v, seed);
    let (base, extra) = (n / k, n % k);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for i in 0..k {
        bounds.push(bounds[i] + base + usize::from(i < extra));
    }
    Ok((0..k)
        .map(|i| {
            let (s, e) = (bounds[i], bounds[i + 1]);
            let train = v[..s].iter().chain(&v[e..]).cloned().collect();
            (train, v[s..e].to_vec())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub f1: f64,
}

/// Runs `fit_and_score` on nested prefixes of one seeded shuffle of `train`,
/// so each smaller subset is contained in every larger one.
pub fn learning_curve<T, F>(train: &[T], sizes: &[usize], seed: u64, mut fit_and_score: F) -> Result<Vec<CurvePoint>, EvalError>
where
    T: Clone,
    F: FnMut(&[T]) -> f64,
{
    if let Some(&size) = sizes.iter().find(|&&s| s == 0 || s > train.len()) {
        return Err(EvalError::BadSize {
            size,
            available: train.len(),
        });
    }
    let mut order = train.to_vec();
    shuffle(&mut order, seed);
    Ok(sizes
        .iter()
        .map(|&size| CurvePoint {
            size,
            f1: fit_and_score(&order[..size]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Mention;
    use crate::teacher::Provenance;

    const TEXT: &str = "aspirin caused a very bad headache and nausea today";

    fn ann(sent: usize, drug: (usize, usize), events: &[(usize, usize)]) -> AdeAnnotation {
        AdeAnnotation {
            doc_id: "d".into(),
            sent_index: sent,
            drug: Mention::from_text(TEXT, drug.0, drug.1),
            events: events.iter().map(|&(s, e)| Mention::from_text(TEXT, s, e)).collect(),
            provenance: Provenance::Gold,
        }
    }

    #[test]
    fn perfect_prediction() {
        let g = vec![ann(0, (0, 7), &[(5, 20), (30, 36)]), ann(1, (0, 7), &[])];
        for mode in [MatchMode::Strict, MatchMode::Lenient] {
            let r = score(&g, &g, mode).unwrap();
            assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn lenient_versus_strict() {
        let g = vec![ann(0, (0, 7), &[(5, 20)])];
        let p = vec![ann(0, (0, 7), &[(12, 18)])];
        let l = score(&p, &g, MatchMode::Lenient).unwrap();
        assert_eq!((l.tp, l.f1), (1, 1.0));
        let s = score(&p, &g, MatchMode::Strict).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_, s.f1), (0, 1, 1, 0.0));
    }

    #[test]
    fn drug_must_match_exactly() {
        let g = vec![ann(0, (0, 7), &[(5, 20)])];
        let p = vec![ann(0, (0, 6), &[(5, 20)])];
        let r = score(&p, &g, MatchMode::Lenient).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
    }

    #[test]
    fn duplicates_are_collapsed() {
        let g = vec![ann(0, (0, 7), &[(5, 20), (5, 20)]), ann(0, (0, 7), &[(5, 20)])];
        let p = vec![ann(0, (0, 7), &[(5, 20), (5, 20)])];
        let r = score(&p, &g, MatchMode::Strict).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
    }

    #[test]
    fn one_prediction_matches_one_gold() {
        // one wide prediction overlapping two golds
        let g = vec![ann(0, (0, 7), &[(8, 14), (15, 20)])];
        let p = vec![ann(0, (0, 7), &[(8, 20)])];
        let r = score(&p, &g, MatchMode::Lenient).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 1));
    }

    #[test]
    fn matching_is_maximum_not_first_fit() {
        // greedy by larger overlap would give p0 -> g1 and leave p1 unmatched
        let preds = [(0, 10), (9, 12)];
        let golds = [(0, 2), (3, 11)];
        assert_eq!(match_count(&preds, &golds, MatchMode::Lenient), 2);
    }

    #[test]
    fn unknown_sentence_rejected() {
        let g = vec![ann(0, (0, 7), &[])];
        let p = vec![ann(3, (0, 7), &[(5, 20)])];
        assert!(matches!(
            score(&p, &g, MatchMode::Lenient),
            Err(EvalError::SentenceSetMismatch { count: 1, .. })
        ));
    }

    #[test]
    fn empty_inputs_score_zero() {
        let r = score(&[], &[], MatchMode::Lenient).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn split_sizes() {
        let v: Vec<usize> = (0..4272).collect();
        let (a, b, c) = split_8_1_1(&v, 5);
        assert_eq!((a.len(), b.len(), c.len()), (3417, 427, 428));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, v);
        assert_eq!(split_8_1_1(&v, 5), (a, b, c));
        let (a, b, c) = split_8_1_1(&(0..10).collect::<Vec<_>>(), 1);
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
    }

    #[test]
    fn fold_sizes() {
        let v: Vec<usize> = (0..4272).collect();
        let folds = kfold(&v, 10, 2).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len()).collect();
        assert_eq!(sizes, [428, 428, 427, 427, 427, 427, 427, 427, 427, 427]);
        let mut all: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
        all.sort();
        assert_eq!(all, v);
        for (train, test) in &folds {
            assert_eq!(train.len() + test.len(), 4272);
        }
        let ones = kfold(&[1, 2, 3], 3, 0).unwrap();
        assert!(ones.iter().all(|(tr, te)| te.len() == 1 && tr.len() == 2));
        assert_eq!(kfold(&[1, 2], 3, 0), Err(EvalError::TooFewItems { n: 2, k: 3 }));
        assert!(kfold(&[1, 2], 1, 0).is_err());
    }

    #[test]
    fn curve_subsets_are_nested() {
        let v: Vec<usize> = (0..50).collect();
        let mut seen: Vec<Vec<usize>> = Vec::new();
        let pts = learning_curve(&v, &[5, 20, 50], 3, |s| {
            seen.push(s.to_vec());
            s.len() as f64
        })
        .unwrap();
        assert_eq!(pts.len(), 3);
        assert!(seen[0].iter().all(|x| seen[1].contains(x)));
        assert!(seen[1].iter().all(|x| seen[2].contains(x)));
        assert!(learning_curve(&v, &[], 3, |_| 0.0).unwrap().is_empty());
        assert!(learning_curve(&v, &[51], 3, |_| 0.0).is_err());
    }

    #[test]
    fn table_is_aligned() {
        let r = EvalReport::from_counts(MatchMode::Lenient, 3, 1, 2);
        let t = report_table(&[("student".into(), r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("run"));
        assert!(lines[1].contains("0.7500"));
        let json = serde_json::to_value(r).unwrap();
        assert_eq!(json["fn"], 2);
        assert_eq!(json["mode"], "lenient");
    }
}
