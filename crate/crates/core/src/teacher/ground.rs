use serde::{Deserialize, Serialize};

use super::parse::AdeMap;
use super::{AdeAnnotation, Provenance};
use crate::corpus::Sentence;
use crate::lexicon::{normalize, Mention};

/// Tallies from grounding one or more responses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingStats {
    pub drug_keys: usize,
    pub grounded_drugs: usize,
    pub ungrounded_drugs: usize,
    /// Event strings across all drug keys, grounded or not.
    pub event_strings: usize,
    pub grounded_events: usize,
    pub hallucinated_events: usize,
    /// Event mentions produced (an event string may occur several times).
    pub event_mentions: usize,
}

impl std::ops::AddAssign for GroundingStats {
    fn add_assign(&mut self, o: Self) {
        self.drug_keys += o.drug_keys;
        self.grounded_drugs += o.grounded_drugs;
        self.ungrounded_drugs += o.ungrounded_drugs;
        self.event_strings += o.event_strings;
        self.grounded_events += o.grounded_events;
        self.hallucinated_events += o.hallucinated_events;
        self.event_mentions += o.event_mentions;
    }
}

/// All non-overlapping, case-insensitive occurrences of `pattern` in `text`,
/// as byte ranges, scanning left to right.
pub fn find_all_ci(text: &str, pattern: &str) -> Vec<(usize, usize)> {
    let pattern: Vec<char> = pattern.chars().flat_map(char::to_lowercase).collect();
    if pattern.is_empty() {
        return Vec::new();
    }
    // folded[i] came from original char origin[i]
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut folded = Vec::with_capacity(chars.len());
    let mut origin = Vec::with_capacity(chars.len());
    for (ci, &(_, c)) in chars.iter().enumerate() {
        for lc in c.to_lowercase() {
            folded.push(lc);
            origin.push(ci);
        }
    }
    let char_end = |ci: usize| chars.get(ci + 1).map_or(text.len(), |&(b, _)| b);
    let mut hits = Vec::new();
    let mut i = 0;
    while i + pattern.len() <= folded.len() {
        let j = i + pattern.len();
        let aligned = (i == 0 || origin[i - 1] != origin[i])
            && (j == folded.len() || origin[j] != origin[j - 1]);
        if aligned && folded[i..j] == pattern[..] {
            hits.push((chars[origin[i]].0, char_end(origin[j - 1])));
            i = j;
        } else {
            i += 1;
        }
    }
    hits
}

/// Turns teacher strings into offset mentions by string matching.
///
/// A drug key grounds to the first lexicon drug mention with the same
/// normalized surface; keys that ground to the same mention merge. Every
/// occurrence of an event string becomes an event mention. Annotations are
/// returned in drug-mention order with events sorted by offset.
pub fn ground_spans(
    sentence: &Sentence,
    parsed: &AdeMap,
    provenance: Provenance,
) -> (Vec<AdeAnnotation>, GroundingStats) {
    let mut stats = GroundingStats::default();
    let mut per_mention: Vec<Option<Vec<Mention>>> = vec![None; sentence.drug_mentions.len()];
    for (drug, events) in parsed {
        stats.drug_keys += 1;
        let key = normalize(drug);
        let slot = sentence
            .drug_mentions
            .iter()
            .position(|m| normalize(&m.surface) == key);
        let mut found = Vec::new();
        for event in events {
            stats.event_strings += 1;
            let hits = find_all_ci(&sentence.text, event.trim());
            if hits.is_empty() {
                stats.hallucinated_events += 1;
            } else {
                stats.grounded_events += 1;
                found.extend(hits.into_iter().map(|(s, e)| Mention::from_text(&sentence.text, s, e)));
            }
        }
        match slot {
            Some(idx) => {
                stats.grounded_drugs += 1;
                per_mention[idx].get_or_insert_with(Vec::new).extend(found);
            }
            None => stats.ungrounded_drugs += 1,
        }
    }
    let key = sentence.key();
    let annotations: Vec<AdeAnnotation> = per_mention
        .into_iter()
        .enumerate()
        .filter_map(|(idx, events)| {
            let mut events = events?;
            events.sort_by_key(|m| (m.start, m.end));
            events.dedup_by_key(|m| (m.start, m.end));
            Some(AdeAnnotation {
                doc_id: key.doc_id.clone(),
                sent_index: key.sent_index,
                drug: sentence.drug_mentions[idx].clone(),
                events,
                provenance,
            })
        })
        .collect();
    stats.event_mentions = annotations.iter().map(|a| a.events.len()).sum();
    (annotations, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{build_trie, LexiconEntry};

    fn sentence(text: &str, drugs: &[&str]) -> Sentence {
        let entries: Vec<_> = drugs
            .iter()
            .enumerate()
            .map(|(i, d)| LexiconEntry::new(format!("C{i}"), *d))
            .collect();
        let trie = build_trie(&entries).unwrap();
        let mut s = Sentence::new("doc", 0, text);
        s.drug_mentions = trie.find_mentions(text);
        s
    }

    fn parsed(pairs: &[(&str, &[&str])]) -> AdeMap {
        pairs
            .iter()
            .map(|(d, es)| (d.to_string(), es.iter().map(|e| e.to_string()).collect()))
            .collect()
    }

    const TEXT: &str = "clozapine was reinstated; serum triglyceride levels increased";

    #[test]
    fn grounds_event_span() {
        let s = sentence(TEXT, &["clozapine"]);
        let (anns, stats) = ground_spans(
            &s,
            &parsed(&[("clozapine", &["serum triglyceride levels increased"])]),
            Provenance::Teacher,
        );
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].drug.surface, "clozapine");
        assert_eq!(anns[0].events.len(), 1);
        let ev = &anns[0].events[0];
        assert_eq!((ev.start, ev.end), (26, 61));
        assert_eq!(ev.surface, "serum triglyceride levels increased");
        assert_eq!(stats.hallucinated_events, 0);
    }

    #[test]
    fn hallucinated_event() {
        let s = sentence(TEXT, &["clozapine"]);
        let (anns, stats) = ground_spans(
            &s,
            &parsed(&[("clozapine", &["cardiac tamponade"])]),
            Provenance::Teacher,
        );
        assert_eq!(anns.len(), 1);
        assert!(anns[0].events.is_empty());
        assert_eq!(stats.hallucinated_events, 1);
    }

    #[test]
    fn ungrounded_drug_dropped() {
        let s = sentence(TEXT, &["clozapine"]);
        let (anns, stats) = ground_spans(
            &s,
            &parsed(&[("aspirin", &["serum triglyceride levels increased"])]),
            Provenance::Teacher,
        );
        assert!(anns.is_empty());
        assert_eq!(stats.ungrounded_drugs, 1);
        assert_eq!(stats.grounded_events + stats.hallucinated_events, stats.event_strings);
    }

    #[test]
    fn all_occurrences_and_case() {
        let s = sentence("Rash after Cisplatin; later RASH again.", &["cisplatin"]);
        let (anns, stats) = ground_spans(&s, &parsed(&[("CISPLATIN", &["rash"])]), Provenance::Mock);
        assert_eq!(anns[0].events.len(), 2);
        assert_eq!(anns[0].events[1].surface, "RASH");
        assert_eq!(stats.event_mentions, 2);
        assert_eq!(stats.grounded_events, 1);
    }

    #[test]
    fn case_insensitive_search_with_expanding_lowercase() {
        // 'İ' lowercases to two chars; matches must stay on char boundaries.
        let text = "İx and ix";
        let hits = find_all_ci(text, "ix");
        assert_eq!(hits, vec![(8, 10)]);
        assert!(find_all_ci(text, "").is_empty());
        assert_eq!(find_all_ci("aaaa", "aa"), vec![(0, 2), (2, 4)]);
    }
}
