//! Corpus curation: documents in, drug-bearing sentences out.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{find_mentions, DrugTrie, Mention};

/// Default size of the teacher-annotated pool used for student training.
pub const DEFAULT_DISTILL_POOL_SIZE: usize = 40_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("document {0} has empty text")]
    EmptyDocument(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

/// Identifies a sentence within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceKey {
    pub doc_id: String,
    pub sent_index: usize,
}

impl SentenceKey {
    pub fn new(doc_id: impl Into<String>, sent_index: usize) -> Self {
        Self {
            doc_id: doc_id.into(),
            sent_index,
        }
    }
}

impl std::fmt::Display for SentenceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.sent_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub doc_id: String,
    pub sent_index: usize,
    pub text: String,
    #[serde(default)]
    pub drug_mentions: Vec<Mention>,
}

impl Sentence {
    pub fn new(doc_id: impl Into<String>, sent_index: usize, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            sent_index,
            text: text.into(),
            drug_mentions: Vec::new(),
        }
    }

    pub fn key(&self) -> SentenceKey {
        SentenceKey::new(self.doc_id.clone(), self.sent_index)
    }
}

/// Lower-cased tokens that end with a period but do not end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "i.v.", "i.m.", "s.c.", "p.o.", "b.i.d.", "t.i.d.", "q.i.d.", "q.d.", "dr.",
    "mr.", "mrs.", "ms.", "prof.", "vs.", "al.", "fig.", "figs.", "approx.", "ca.", "cf.",
    "no.", "nos.", "vol.", "pp.", "resp.", "inc.", "ltd.", "co.", "st.", "jr.", "sr.", "u.s.",
    "sp.",
    "spp.", "var.",
];

fn is_abbreviation(token: &str) -> bool {
    let token = token.trim_start_matches(['(', '[', '"', '\'']);
    let lower = token.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    // single-letter initials such as "J."
    let mut chars = token.chars();
    matches!((chars.next(), chars.next(), chars.next()), (Some(c), Some('.'), None) if c.is_uppercase())
}

/// Byte ranges of the sentences in `text`, trimmed of surrounding whitespace.
///
/// A sentence ends at `.`, `!` or `?` (plus any closing quotes or brackets)
/// followed by whitespace or the end of text. Periods inside numbers never
/// end a sentence; periods closing a listed abbreviation or an initial do
/// not either, and neither does any terminator followed by a lower-case
/// continuation.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < n {
        let c = chars[i].1;
        if matches!(c, '.' | '!' | '?') {
            let mut end = i + 1;
            while end < n && matches!(chars[end].1, '"' | '\'' | ')' | ']' | '”' | '’') {
                end += 1;
            }
            let followed_by_space = end == n || chars[end].1.is_whitespace();
            let mut boundary = followed_by_space;
            if boundary && c == '.' {
                let tok_start = (0..i)
                    .rev()
                    .find(|&k| chars[k].1.is_whitespace())
                    .map_or(0, |k| k + 1);
                let token = &text[byte_at(tok_start)..byte_at(i + 1)];
                if is_abbreviation(token) {
                    boundary = false;
                }
            }
            if boundary {
                let next = (end..n).find(|&k| !chars[k].1.is_whitespace());
                if let Some(k) = next {
                    if chars[k].1.is_lowercase() {
                        boundary = false;
                    }
                }
            }
            if boundary {
                push_trimmed(text, byte_at(start)..byte_at(end), &mut spans);
                start = end;
                i = end;
                continue;
            }
        }
        i += 1;
    }
    push_trimmed(text, byte_at(start)..text.len(), &mut spans);
    spans
}

fn push_trimmed(text: &str, range: Range<usize>, out: &mut Vec<Range<usize>>) {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if !trimmed.is_empty() {
        let s = range.start + lead;
        out.push(s..s + trimmed.len());
    }
}

pub fn split_sentences(doc: &Document) -> Result<Vec<Sentence>, CorpusError> {
    if doc.text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    Ok(sentence_spans(&doc.text)
        .into_iter()
        .enumerate()
        .map(|(i, r)| Sentence::new(doc.doc_id.clone(), i, &doc.text[r]))
        .collect())
}

/// Keeps sentences with at least one lexicon hit, attaching the hits.
pub fn filter_drug_sentences(sents: &[Sentence], trie: &DrugTrie) -> Vec<Sentence> {
    sents
        .iter()
        .filter_map(|s| {
            let mentions = find_mentions(&s.text, trie);
            (!mentions.is_empty()).then(|| Sentence {
                drug_mentions: mentions,
                ..s.clone()
            })
        })
        .collect()
}

/// Uniform index in `lo..hi` drawn from 64-bit output so results do not
/// depend on the platform's pointer width.
pub(crate) fn index_in(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo as u64..hi as u64) as usize
}

/// Seeded Fisher-Yates shuffle of the whole slice.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = items.len();
    for i in 0..n.saturating_sub(1) {
        let j = index_in(&mut rng, i, n);
        items.swap(i, j);
    }
}

/// Draws `min(n, len)` items without replacement using a partial
/// Fisher-Yates pass; the output order is the draw order.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    let k = n.min(items.len());
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k {
        let j = index_in(&mut rng, i, idx.len());
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| items[i].clone()).collect()
}

/// Counts from one curation run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationStats {
    pub documents: usize,
    pub empty_documents: usize,
    pub sentences: usize,
    pub kept: usize,
}

/// Split every document and keep the drug-bearing sentences, in input order.
pub fn curate(docs: &[Document], trie: &DrugTrie) -> (Vec<Sentence>, CurationStats) {
    let mut stats = CurationStats {
        documents: docs.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for doc in docs {
        match split_sentences(doc) {
            Ok(sents) => {
                stats.sentences += sents.len();
                kept.extend(filter_drug_sentences(&sents, trie));
            }
            Err(CorpusError::EmptyDocument(_)) => stats.empty_documents += 1,
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{build_trie, LexiconEntry};

    fn texts(doc: &str) -> Vec<String> {
        split_sentences(&Document {
            doc_id: "d".into(),
            text: doc.into(),
        })
        .unwrap()
        .into_iter()
        .map(|s| s.text)
        .collect()
    }

    #[test]
    fn two_sentences() {
        assert_eq!(texts("A b. C d."), vec!["A b.", "C d."]);
    }

    #[test]
    fn abbreviation_does_not_split() {
        assert_eq!(texts("Dose was 5 mg i.v. daily."), vec!["Dose was 5 mg i.v. daily."]);
        assert_eq!(
            texts("Agents, e.g. Cisplatin, were used. Then it stopped."),
            vec!["Agents, e.g. Cisplatin, were used.", "Then it stopped."]
        );
        assert_eq!(texts("Seen by Dr. Smith today."), vec!["Seen by Dr. Smith today."]);
        assert_eq!(texts("Reported by J. Smith et al. In 2001."), vec!["Reported by J. Smith et al. In 2001."]);
    }

    #[test]
    fn decimals_and_other_terminators() {
        assert_eq!(texts("Level was 2.5 mg. Why? Stop!"), vec!["Level was 2.5 mg.", "Why?", "Stop!"]);
        assert_eq!(texts("He said \"stop.\" Then left."), vec!["He said \"stop.\"", "Then left."]);
    }

    #[test]
    fn empty_document() {
        let err = split_sentences(&Document {
            doc_id: "x".into(),
            text: String::new(),
        })
        .unwrap_err();
        assert_eq!(err, CorpusError::EmptyDocument("x".into()));
    }

    #[test]
    fn spans_reconstruct_text() {
        let text = "  First one.  Second (i.e. this) one!\nThird?  ";
        let spans = sentence_spans(text);
        let mut rebuilt = String::new();
        let mut cursor = 0;
        for r in &spans {
            let gap = &text[cursor..r.start];
            assert!(gap.trim().is_empty());
            rebuilt.push_str(gap);
            rebuilt.push_str(&text[r.clone()]);
            cursor = r.end;
        }
        rebuilt.push_str(&text[cursor..]);
        assert_eq!(rebuilt, text);
        assert_eq!(spans.len(), 3);
    }

    #[test]
    fn filter_keeps_drug_sentences() {
        let trie = build_trie(&[LexiconEntry::new("C1", "clozapine")]).unwrap();
        let sents = vec![
            Sentence::new("d", 0, "Clozapine was reinstated."),
            Sentence::new("d", 1, "Nothing here."),
        ];
        let kept = filter_drug_sentences(&sents, &trie);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].sent_index, 0);
        assert_eq!(kept[0].drug_mentions.len(), 1);
        assert_eq!(kept[0].drug_mentions[0].surface, "Clozapine");
        assert!(filter_drug_sentences(&sents[1..], &trie).is_empty());
        assert_eq!(filter_drug_sentences(&kept, &trie), kept);
    }

    #[test]
    fn subsample_edges() {
        let items: Vec<u32> = (0..10).collect();
        assert!(subsample(&items, 0, 3).is_empty());
        let mut all = subsample(&items, 50, 3);
        assert_eq!(all.len(), 10);
        all.sort();
        assert_eq!(all, items);
        assert_eq!(subsample(&items, 4, 9), subsample(&items, 4, 9));
    }
}
