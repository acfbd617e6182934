use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::client::{ClientError, TeacherClient};
use super::parse::{render_response, AdeMap};
use super::prompt::query_of;
use super::{AdeAnnotation, TeacherError, TeacherResponse};
use crate::corpus::Sentence;
use crate::lexicon::normalize;

/// Corruption applied by the mock teacher to gold annotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Probability of omitting each gold event.
    pub drop_rate: f64,
    /// Probability, per drug, of inventing one event from nearby words.
    pub spurious_rate: f64,
    /// Probability of moving one boundary of a kept event by one word.
    pub jitter_rate: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn none(seed: u64) -> Self {
        Self {
            drop_rate: 0.0,
            spurious_rate: 0.0,
            jitter_rate: 0.0,
            seed,
        }
    }

    pub fn new(drop_rate: f64, spurious_rate: f64, jitter_rate: f64, seed: u64) -> Result<Self, TeacherError> {
        let n = Self {
            drop_rate,
            spurious_rate,
            jitter_rate,
            seed,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        for (name, v) in [
            ("drop_rate", self.drop_rate),
            ("spurious_rate", self.spurious_rate),
            ("jitter_rate", self.jitter_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TeacherError::InvalidNoise(format!("{name}={v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for NoiseConfig {
    type Err = TeacherError;

    /// `drop,spurious,jitter,seed`, e.g. `0.1,0.05,0.1,13`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || TeacherError::InvalidNoise(format!("expected drop,spurious,jitter,seed; got {s:?}"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let rate = |p: &str| p.parse::<f64>().map_err(|_| bad());
        NoiseConfig::new(
            rate(parts[0])?,
            rate(parts[1])?,
            rate(parts[2])?,
            parts[3].parse().map_err(|_| bad())?,
        )
    }
}

fn rng_for(text: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

/// Byte ranges of alphanumeric word runs.
fn words(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

fn jitter(span: (usize, usize), words: &[(usize, usize)], rng: &mut ChaCha8Rng) -> (usize, usize) {
    let (s, e) = span;
    let inside: Vec<usize> = (0..words.len())
        .filter(|&i| words[i].0 >= s && words[i].1 <= e)
        .collect();
    let mut options = Vec::with_capacity(4);
    if let Some(prev) = words.iter().rev().find(|w| w.1 <= s) {
        options.push((prev.0, e));
    }
    if let Some(next) = words.iter().find(|w| w.0 >= e) {
        options.push((s, next.1));
    }
    if inside.len() >= 2 {
        options.push((words[inside[1]].0, e));
        options.push((s, words[inside[inside.len() - 2]].1));
    }
    if options.is_empty() {
        return span;
    }
    options[rng.random_range(0..options.len())]
}

/// Simulates a teacher reply for `sentence` from its gold annotations.
///
/// With all rates zero the reply parses and grounds back to exactly the gold
/// annotations that have events. Randomness is keyed on the sentence text and
/// the noise seed, so identical prompts always get identical replies.
pub fn mock_teacher(sentence: &Sentence, gold: &[AdeAnnotation], noise: &NoiseConfig) -> TeacherResponse {
    let mut rng = rng_for(&sentence.text, noise.seed);
    let text = &sentence.text;
    let word_spans = words(text);
    let free_words: Vec<(usize, usize)> = word_spans
        .iter()
        .copied()
        .filter(|w| !sentence.drug_mentions.iter().any(|m| m.start < w.1 && w.0 < m.end))
        .collect();

    // one entry per distinct drug, in mention order
    let mut drugs: Vec<(String, String)> = Vec::new();
    for m in &sentence.drug_mentions {
        let key = normalize(&m.surface);
        if !drugs.iter().any(|(k, _)| *k == key) {
            drugs.push((key, m.surface.clone()));
        }
    }

    let mut map = AdeMap::new();
    for (key, surface) in &drugs {
        let mut events: Vec<(usize, usize)> = gold
            .iter()
            .filter(|a| normalize(&a.drug.surface) == *key)
            .flat_map(|a| a.events.iter().map(|m| (m.start, m.end)))
            .collect();
        events.sort_unstable();
        events.dedup();
        let mut strings: Vec<String> = Vec::new();
        let push = |s: &str, out: &mut Vec<String>| {
            if !out.iter().any(|x| x == s) {
                out.push(s.to_string());
            }
        };
        for span in events {
            if rng.random::<f64>() < noise.drop_rate {
                continue;
            }
            let span = if rng.random::<f64>() < noise.jitter_rate {
                jitter(span, &word_spans, &mut rng)
            } else {
                span
            };
            push(&text[span.0..span.1], &mut strings);
        }
        if !free_words.is_empty() && rng.random::<f64>() < noise.spurious_rate {
            let first = rng.random_range(0..free_words.len());
            let len = rng.random_range(1..=3usize);
            let mut last = first;
            while last + 1 < free_words.len() && last + 1 < first + len {
                last += 1;
            }
            push(&text[free_words[first].0..free_words[last].1], &mut strings);
        }
        if !strings.is_empty() {
            map.insert(surface.clone(), strings);
        }
    }
    TeacherResponse::from_raw(&sentence.key(), render_response(&map))
}

/// A [`TeacherClient`] that answers prompts with [`mock_teacher`] using a
/// table of known sentences and their gold annotations.
pub struct MockClient {
    by_text: HashMap<String, (Sentence, Vec<AdeAnnotation>)>,
    noise: NoiseConfig,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn new(sentences: &[Sentence], gold: &[AdeAnnotation], noise: NoiseConfig) -> Self {
        let mut gold_by_key: HashMap<_, Vec<AdeAnnotation>> = HashMap::new();
        for a in gold {
            gold_by_key.entry(a.key()).or_default().push(a.clone());
        }
        let mut by_text = HashMap::new();
        for s in sentences {
            let g = gold_by_key.get(&s.key()).cloned().unwrap_or_default();
            by_text.entry(s.text.clone()).or_insert_with(|| (s.clone(), g));
        }
        Self {
            by_text,
            noise,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TeacherClient for MockClient {
    fn model_name(&self) -> String {
        let n = &self.noise;
        format!(
            "mock-teacher(drop={},spurious={},jitter={},seed={})",
            n.drop_rate, n.spurious_rate, n.jitter_rate, n.seed
        )
    }

    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let query = query_of(prompt).ok_or_else(|| ClientError::Permanent("unrecognized prompt".into()))?;
        Ok(match self.by_text.get(query) {
            Some((sentence, gold)) => mock_teacher(sentence, gold, &self.noise).raw,
            None => "None".to_string(),
        })
    }
}
