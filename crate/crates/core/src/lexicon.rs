//! Drug lexicon compiled into a character trie for dictionary matching.
//!
//! Surfaces are normalized by lower-casing every character and collapsing
//! whitespace runs into a single space. Matching walks the original text so
//! that reported offsets are byte offsets into it, and only accepts matches
//! whose flanking characters are non-alphanumeric (or string boundaries).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexiconError {
    #[error("lexicon has no entries")]
    EmptyLexicon,
    #[error("entry {0} has an empty surface after normalization")]
    EmptySurface(String),
    #[error("duplicate concept id {0}")]
    DuplicateConcept(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading lexicon: {0}")]
    Io(String),
}

/// One concept with its preferred name and alternative surfaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub concept_id: String,
    pub preferred_name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl LexiconEntry {
    pub fn new(concept_id: impl Into<String>, preferred_name: impl Into<String>) -> Self {
        Self {
            concept_id: concept_id.into(),
            preferred_name: preferred_name.into(),
            synonyms: Vec::new(),
        }
    }

    pub fn with_synonyms<I, S>(mut self, synonyms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.synonyms = synonyms.into_iter().map(Into::into).collect();
        self
    }

    /// Normalized, deduplicated surfaces: preferred name first, then synonyms.
    pub fn surfaces(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        std::iter::once(&self.preferred_name)
            .chain(&self.synonyms)
            .map(|s| normalize(s))
            .filter(|s| seen.insert(s.clone()))
            .collect()
    }
}

/// Lower-case, collapse whitespace runs to one space, trim.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(c.to_lowercase());
    }
    out
}

/// A dictionary hit in a piece of text. Offsets are UTF-8 byte offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_id: Option<String>,
}

impl Mention {
    /// Builds a mention from a slice of `text`. Panics if the range is not on
    /// char boundaries.
    pub fn from_text(text: &str, start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            surface: text[start..end].to_string(),
            concept_id: None,
        }
    }

    pub fn with_concept(mut self, concept_id: impl Into<String>) -> Self {
        self.concept_id = Some(concept_id.into());
        self
    }

    pub fn overlaps(&self, other: &Mention) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// True if the offsets are in range, on char boundaries and the surface
    /// equals the slice they cover.
    pub fn is_valid_in(&self, text: &str) -> bool {
        self.start < self.end
            && self.end <= text.len()
            && text.get(self.start..self.end) == Some(self.surface.as_str())
    }
}

#[derive(Debug, Default, Clone)]
struct Node {
    children: BTreeMap<char, usize>,
    concept: Option<String>,
}

/// Immutable trie over normalized surfaces.
#[derive(Debug, Clone)]
pub struct DrugTrie {
    nodes: Vec<Node>,
    surfaces: usize,
}

impl DrugTrie {
    pub fn build(entries: &[LexiconEntry]) -> Result<Self, LexiconError> {
        build_trie(entries)
    }

    fn child(&self, node: usize, c: char) -> Option<usize> {
        self.nodes[node].children.get(&c).copied()
    }

    /// Exact lookup of a surface (normalized before lookup).
    pub fn lookup(&self, surface: &str) -> Option<&str> {
        let mut node = 0;
        for c in normalize(surface).chars() {
            node = self.child(node, c)?;
        }
        self.nodes[node].concept.as_deref()
    }

    pub fn len(&self) -> usize {
        self.surfaces
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces == 0
    }

    /// Every stored surface with its concept id, in lexicographic order.
    pub fn surfaces(&self) -> Vec<(String, String)> {
        let mut out = Vec::with_capacity(self.surfaces);
        let mut stack = vec![(0usize, String::new())];
        while let Some((node, prefix)) = stack.pop() {
            if let Some(c) = &self.nodes[node].concept {
                out.push((prefix.clone(), c.clone()));
            }
            for (&ch, &next) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(ch);
                stack.push((next, p));
            }
        }
        out
    }

    pub fn find_mentions(&self, text: &str) -> Vec<Mention> {
        find_mentions(text, self)
    }
}

pub fn build_trie(entries: &[LexiconEntry]) -> Result<DrugTrie, LexiconError> {
    if entries.is_empty() {
        return Err(LexiconError::EmptyLexicon);
    }
    let mut trie = DrugTrie {
        nodes: vec![Node::default()],
        surfaces: 0,
    };
    for entry in entries {
        for surface in entry.surfaces() {
            if surface.is_empty() {
                return Err(LexiconError::EmptySurface(entry.concept_id.clone()));
            }
            let mut node = 0;
            for c in surface.chars() {
                node = match trie.child(node, c) {
                    Some(n) => n,
                    None => {
                        trie.nodes.push(Node::default());
                        let n = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(c, n);
                        n
                    }
                };
            }
            let slot = &mut trie.nodes[node].concept;
            match slot {
                None => {
                    *slot = Some(entry.concept_id.clone());
                    trie.surfaces += 1;
                }
                Some(existing) if entry.concept_id < *existing => {
                    *existing = entry.concept_id.clone();
                }
                Some(_) => {}
            }
        }
    }
    Ok(trie)
}

/// Leftmost-longest, non-overlapping, case-insensitive matches with
/// alphanumeric word boundaries on both sides.
pub fn find_mentions(text: &str, trie: &DrugTrie) -> Vec<Mention> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < n {
        let starts_word = i == 0 || !chars[i - 1].1.is_alphanumeric();
        if !starts_word || chars[i].1.is_whitespace() {
            i += 1;
            continue;
        }
        let mut node = 0;
        let mut j = i;
        let mut best: Option<(usize, usize)> = None;
        'walk: while j < n {
            let c = chars[j].1;
            if c.is_whitespace() {
                match trie.child(node, ' ') {
                    Some(next) => node = next,
                    None => break,
                }
                while j < n && chars[j].1.is_whitespace() {
                    j += 1;
                }
                continue;
            }
            for lc in c.to_lowercase() {
                match trie.child(node, lc) {
                    Some(next) => node = next,
                    None => break 'walk,
                }
            }
            j += 1;
            let ends_word = j == n || !chars[j].1.is_alphanumeric();
            if ends_word && trie.nodes[node].concept.is_some() {
                best = Some((j, node));
            }
        }
        match best {
            Some((end, node)) => {
                let (s, e) = (byte_at(i), byte_at(end));
                mentions.push(Mention {
                    start: s,
                    end: e,
                    surface: text[s..e].to_string(),
                    concept_id: trie.nodes[node].concept.clone(),
                });
                i = end;
            }
            None => i += 1,
        }
    }
    mentions
}

/// Reads the tab-separated lexicon format: `concept_id`, `preferred_name` and a
/// `|`-separated synonym list. Blank lines and lines starting with `#` are
/// skipped, as is a leading header row.
pub fn read_lexicon_tsv<R: BufRead>(reader: R) -> Result<Vec<LexiconEntry>, LexiconError> {
    let mut entries = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| LexiconError::Io(e.to_string()))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if entries.is_empty() && seen.is_empty() && cols.first() == Some(&"concept_id") {
            continue;
        }
        if cols.len() < 2 || cols.len() > 3 {
            return Err(LexiconError::Parse {
                line: line_no,
                message: format!("expected 2 or 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let concept_id = cols[0].trim().to_string();
        if concept_id.is_empty() {
            return Err(LexiconError::Parse {
                line: line_no,
                message: "empty concept id".into(),
            });
        }
        if seen.insert(concept_id.clone(), line_no).is_some() {
            return Err(LexiconError::DuplicateConcept(concept_id));
        }
        let synonyms = cols
            .get(2)
            .map(|s| {
                s.split('|')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();
        let entry = LexiconEntry {
            concept_id,
            preferred_name: cols[1].trim().to_string(),
            synonyms,
        };
        if normalize(&entry.preferred_name).is_empty() {
            return Err(LexiconError::EmptySurface(entry.concept_id));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_lexicon_tsv(entries: &[LexiconEntry]) -> String {
    let mut out = String::from("concept_id\tpreferred_name\tsynonyms\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.concept_id,
            e.preferred_name,
            e.synonyms.join("|")
        ));
    }
    out
}

/// The sample lexicon bundled with the crate.
pub fn sample_lexicon() -> Vec<LexiconEntry> {
    read_lexicon_tsv(SAMPLE_LEXICON_TSV.as_bytes()).expect("bundled lexicon is well formed")
}

pub const SAMPLE_LEXICON_TSV: &str = include_str!("../../../data/lexicon.tsv");
