//! Teacher annotation: prompting, response parsing, span grounding, and a
//! seeded mock teacher that stands in for a hosted model.

mod client;
mod ground;
mod mock;
mod parse;
mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SentenceKey;
use crate::lexicon::Mention;

pub use client::{
    annotate, cache_key, AnnotateOptions, AnnotateOutcome, AnnotationFailure, ClientError,
    HttpClient, ResponseCache, RetryPolicy, TeacherClient, API_KEY_ENV,
};
pub use ground::{find_all_ci, ground_spans, GroundingStats};
pub use mock::{mock_teacher, MockClient, NoiseConfig};
pub use parse::{parse_response, render_response, AdeMap, ParsedResponse};
pub use prompt::{build_prompt, prompt_prefix, query_of, PromptMode, FEW_SHOT_EXAMPLES, INSTRUCTION};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("sentence text is empty")]
    EmptySentence,
    #[error("environment variable {API_KEY_ENV} is not set")]
    MissingApiKey,
    #[error("all retries exhausted for {key}: {last_error}")]
    AllRetriesExhausted { key: SentenceKey, last_error: String },
    #[error("invalid noise config: {0}")]
    InvalidNoise(String),
    #[error("cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Teacher,
    Gold,
    Mock,
    Student,
}

/// One drug mention and the adverse-event mentions attributed to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdeAnnotation {
    pub doc_id: String,
    pub sent_index: usize,
    pub drug: Mention,
    pub events: Vec<Mention>,
    pub provenance: Provenance,
}

impl AdeAnnotation {
    pub fn key(&self) -> SentenceKey {
        SentenceKey::new(self.doc_id.clone(), self.sent_index)
    }
}

/// A raw teacher reply and its parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherResponse {
    pub doc_id: String,
    pub sent_index: usize,
    pub raw: String,
    pub parsed: AdeMap,
    #[serde(default)]
    pub malformed_lines: usize,
}

impl TeacherResponse {
    pub fn from_raw(key: &SentenceKey, raw: String) -> Self {
        let parsed = parse_response(&raw);
        Self {
            doc_id: key.doc_id.clone(),
            sent_index: key.sent_index,
            raw,
            parsed: parsed.map,
            malformed_lines: parsed.malformed_lines,
        }
    }

    pub fn key(&self) -> SentenceKey {
        SentenceKey::new(self.doc_id.clone(), self.sent_index)
    }
}

/// Keeps sentences (given as their grounded annotations) that have at least
/// one annotation with at least one event.
pub fn filter_positive<T, F>(items: Vec<T>, annotations_of: F) -> Vec<T>
where
    F: Fn(&T) -> &[AdeAnnotation],
{
    items
        .into_iter()
        .filter(|item| annotations_of(item).iter().any(|a| !a.events.is_empty()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(events: usize) -> AdeAnnotation {
        AdeAnnotation {
            doc_id: "d".into(),
            sent_index: 0,
            drug: Mention::from_text("drug x", 0, 4),
            events: (0..events).map(|_| Mention::from_text("drug x", 5, 6)).collect(),
            provenance: Provenance::Teacher,
        }
    }

    #[test]
    fn filter_positive_rules() {
        let items: Vec<Vec<AdeAnnotation>> = vec![
            vec![ann(1)],
            vec![ann(0)],
            vec![],
            vec![ann(0), ann(2)],
        ];
        let kept = filter_positive(items, |v| v.as_slice());
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn filter_positive_mixed_fixture() {
        // 10 sentences: indices 1, 4, 5 and 8 carry a grounded event.
        let items: Vec<(usize, Vec<AdeAnnotation>)> = (0..10)
            .map(|i| {
                let anns = match i {
                    1 | 4 | 8 => vec![ann(1)],
                    5 => vec![ann(0), ann(3)],
                    2 | 7 => vec![ann(0)],
                    _ => vec![],
                };
                (i, anns)
            })
            .collect();
        let kept = filter_positive(items, |(_, a)| a.as_slice());
        assert_eq!(kept.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![1, 4, 5, 8]);
    }

    #[test]
    fn annotation_json_shape() {
        let a = ann(1);
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        assert_eq!(v["doc_id"], "d");
        assert_eq!(v["drug"]["surface"], "drug");
        assert_eq!(v["events"][0]["start"], 5);
        assert_eq!(v["provenance"], "teacher");
    }
}
