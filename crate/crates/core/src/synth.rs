//! Template-based synthetic corpus with gold annotations.
//!
//! Each drug sentence has either one causative drug or two co-causative drugs
//! sharing the same events, plus optional distractor drugs that have none.
//! Sentences that would ground ambiguously are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{curate, index_in, sentence_spans, Document};
use crate::io::{sha256_hex, to_jsonl};
use crate::lexicon::{find_mentions, sample_lexicon, DrugTrie, LexiconEntry, Mention};
use crate::model::{join_annotations, LabeledSentence};
use crate::teacher::{find_all_ci, AdeAnnotation, Provenance};

pub const AE_PHRASES: &[&str] = &[
    "severe neutropenia",
    "oral mucositis",
    "acute renal failure",
    "hepatotoxicity",
    "peripheral neuropathy",
    "skin rash",
    "nausea",
    "vomiting",
    "diarrhea",
    "alopecia",
    "thrombocytopenia",
    "febrile neutropenia",
    "interstitial pneumonitis",
    "cardiomyopathy",
    "QT prolongation",
    "hypokalemia",
    "hyperglycemia",
    "agranulocytosis",
    "myocarditis",
    "seizures",
    "tardive dyskinesia",
    "lactic acidosis",
    "hemorrhagic cystitis",
    "ototoxicity",
    "pancreatitis",
    "hypothyroidism",
    "Stevens-Johnson syndrome",
    "toxic epidermal necrolysis",
    "angioedema",
    "anaphylaxis",
    "cholestatic hepatitis",
    "rhabdomyolysis",
    "pulmonary fibrosis",
    "bradycardia",
    "hyponatremia",
    "neuroleptic malignant syndrome",
    "macular edema",
    "hypercalcemia",
    "uterine rupture",
    "eyelash growth",
];

pub const INDICATIONS: &[&str] = &[
    "metastatic breast cancer",
    "schizophrenia",
    "acute myeloid leukemia",
    "hypercholesterolemia",
    "glaucoma",
    "tuberculosis",
    "rheumatoid arthritis",
    "ovarian carcinoma",
    "psoriasis",
    "bipolar disorder",
    "atrial fibrillation",
    "colorectal cancer",
];

const POSITIVE: &[&str] = &[
    "{C} induced {E}.",
    "The patient developed {E} after treatment with {C}.",
    "{E} developed shortly after {C} was started.",
    "We describe {E} caused by {C}.",
    "Administration of {C} resulted in {E}.",
    "{E} was attributed to {C}.",
    "Treatment with {C} was complicated by {E}.",
    "{E} occurred during therapy with {C}.",
    "After two cycles of {C}, the patient presented with {E}.",
    "{C} was discontinued because of {E}.",
];

const NEGATIVE: &[&str] = &[
    "{X} was given for {I}.",
    "The patient was treated with {X} for {I}.",
    "{X} was well tolerated.",
    "Therapy with {X} was continued without complications.",
    "The patient had received {X} for {I} for several years.",
];

const DISTRACTOR_SUFFIX: &[&str] = &[
    ", while {X} was continued without complications.",
    ", and {X} had been given for {I}.",
    "; {X} was well tolerated.",
    ", although {X} had been used safely for years.",
];

const DISTRACTOR_PREFIX: &[&str] = &["In a patient receiving {X} for {I}, ", "Despite uneventful use of {X}, "];

const FILLER: &[&str] = &[
    "The patient was a 54-year-old woman.",
    "Laboratory values were otherwise unremarkable.",
    "She recovered completely within two weeks.",
    "Symptoms resolved after supportive care.",
    "Informed consent was obtained.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of drug-bearing sentences.
    pub n_sentences: usize,
    pub seed: u64,
    pub positive_rate: f64,
    pub co_cause_rate: f64,
    pub distractor_rate: f64,
    pub synonym_rate: f64,
    pub filler_rate: f64,
    pub max_sentences_per_doc: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sentences: 2000,
            seed: 1,
            positive_rate: 0.8,
            co_cause_rate: 0.15,
            distractor_rate: 0.5,
            synonym_rate: 0.2,
            filler_rate: 0.3,
            max_sentences_per_doc: 4,
        }
    }
}

impl SynthConfig {
    pub fn new(n_sentences: usize, seed: u64) -> Self {
        Self {
            n_sentences,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub documents: Vec<Document>,
    /// One annotation per drug of every drug sentence, zero-event ones included.
    pub gold: Vec<AdeAnnotation>,
}

impl SynthCorpus {
    /// sha256 over the documents and gold JSONL renderings.
    pub fn hash(&self) -> String {
        let mut s = to_jsonl(&self.documents);
        s.push_str(&to_jsonl(&self.gold));
        sha256_hex(s.as_bytes())
    }

    /// Curated drug sentences paired with their gold annotations.
    pub fn labeled(&self, trie: &DrugTrie) -> Vec<LabeledSentence> {
        let (sents, _) = curate(&self.documents, trie);
        join_annotations(&sents, &self.gold, Provenance::Gold)
    }
}

/// A drug sentence under construction: text plus recorded spans.
#[derive(Default)]
struct Draft {
    text: String,
    /// (start, end, concept, causative)
    drugs: Vec<(usize, usize, String, bool)>,
    events: Vec<(usize, usize)>,
}

impl Draft {
    fn lit(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn drug(&mut self, surface: &str, concept: &str, causative: bool) {
        let s = self.text.len();
        self.text.push_str(surface);
        self.drugs.push((s, self.text.len(), concept.to_string(), causative));
    }

    fn event(&mut self, phrase: &str) {
        let s = self.text.len();
        self.text.push_str(phrase);
        self.events.push((s, self.text.len()));
    }
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    cfg: &'a SynthConfig,
    lexicon: &'a [LexiconEntry],
}

impl Gen<'_> {
    fn pick<'b>(&mut self, items: &'b [&'b str]) -> &'b str {
        items[index_in(&mut self.rng, 0, items.len())]
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    /// `k` distinct indices below `n`.
    fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(k);
        while out.len() < k {
            let i = index_in(&mut self.rng, 0, n);
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }

    fn surface(&mut self, e: &LexiconEntry) -> String {
        if !e.synonyms.is_empty() && self.chance(self.cfg.synonym_rate) {
            e.synonyms[index_in(&mut self.rng, 0, e.synonyms.len())].clone()
        } else {
            e.preferred_name.clone()
        }
    }

    fn fill(&mut self, d: &mut Draft, template: &str, causes: &[usize], others: &[usize], events: &[&str]) {
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            d.lit(&rest[..open]);
            let slot = &rest[open + 1..open + 2];
            rest = &rest[open + 3..];
            match slot {
                "C" | "X" => {
                    let (ids, causative) = if slot == "C" { (causes, true) } else { (others, false) };
                    for (k, &i) in ids.iter().enumerate() {
                        if k > 0 {
                            d.lit(" and ");
                        }
                        let e = &self.lexicon[i];
                        let surf = self.surface(e);
                        d.drug(&surf, &e.concept_id, causative);
                    }
                }
                "E" => {
                    for (k, ev) in events.iter().enumerate() {
                        if k > 0 {
                            d.lit(if k + 1 == events.len() { " and " } else { ", " });
                        }
                        d.event(ev);
                    }
                }
                "I" => {
                    let ind = self.pick(INDICATIONS);
                    d.lit(ind);
                }
                _ => unreachable!("unknown template slot {slot}"),
            }
        }
        d.lit(rest);
    }

    fn draft(&mut self) -> Draft {
        let n_lex = self.lexicon.len();
        let mut d = Draft::default();
        if self.chance(self.cfg.positive_rate) {
            let n_causes = if self.chance(self.cfg.co_cause_rate) { 2 } else { 1 };
            let n_distract = if n_lex > n_causes && self.chance(self.cfg.distractor_rate) { 1 } else { 0 };
            let drugs = self.distinct(n_lex, n_causes + n_distract);
            let n_events = 1 + index_in(&mut self.rng, 0, 3);
            let events: Vec<&str> = self.distinct(AE_PHRASES.len(), n_events).into_iter().map(|i| AE_PHRASES[i]).collect();
            let tpl = self.pick(POSITIVE);
            let (causes, others) = drugs.split_at(n_causes);
            if n_distract == 1 && self.chance(0.3) {
                let pre = self.pick(DISTRACTOR_PREFIX);
                self.fill(&mut d, pre, &[], others, &[]);
                let body_start = d.text.len();
                self.fill(&mut d, tpl, causes, &[], &events);
                lower_first(&mut d.text, body_start);
            } else {
                let body = tpl.strip_suffix('.').unwrap_or(tpl);
                self.fill(&mut d, body, causes, &[], &events);
                if n_distract == 1 {
                    let suf = self.pick(DISTRACTOR_SUFFIX);
                    self.fill(&mut d, suf, &[], others, &[]);
                } else {
                    d.lit(".");
                }
            }
        } else {
            let n = 1 + usize::from(n_lex > 1 && self.chance(self.cfg.distractor_rate));
            let drugs = self.distinct(n_lex, n);
            let tpl = self.pick(NEGATIVE);
            self.fill(&mut d, tpl, &[], &drugs, &[]);
        }
        upper_first(&mut d.text);
        d
    }

    /// Checks that the lexicon finds exactly the placed drugs, every event
    /// phrase occurs once, and the text is one sentence.
    fn accept(&self, d: &Draft, trie: &DrugTrie) -> bool {
        let found: Vec<(usize, usize)> = find_mentions(&d.text, trie).iter().map(|m| (m.start, m.end)).collect();
        let placed: Vec<(usize, usize)> = d.drugs.iter().map(|x| (x.0, x.1)).collect();
        if found != placed {
            return false;
        }
        let spans = sentence_spans(&d.text);
        if spans.len() != 1 || spans[0] != (0..d.text.len()) {
            return false;
        }
        // must still end a sentence when more text follows, e.g. not "mitomycin C."
        if sentence_spans(&format!("{} Next.", d.text)).len() != 2 {
            return false;
        }
        d.events
            .iter()
            .all(|&(s, e)| find_all_ci(&d.text, &d.text[s..e]) == vec![(s, e)])
    }
}

fn upper_first(s: &mut String) {
    if let Some(c) = s.chars().next() {
        let up: String = c.to_uppercase().collect();
        s.replace_range(..c.len_utf8(), &up);
    }
}

fn lower_first(s: &mut String, at: usize) {
    // only a leading template word is lowered; drug and event surfaces keep case
    let rest = &s[at..];
    if rest.starts_with("The ") || rest.starts_with("We ") || rest.starts_with("Administration ")
        || rest.starts_with("Treatment ") || rest.starts_with("After ")
    {
        let c = rest.chars().next().unwrap();
        let low: String = c.to_lowercase().collect();
        s.replace_range(at..at + c.len_utf8(), &low);
    }
}

/// Generate a corpus over `lexicon`.
pub fn synth_corpus_with(cfg: &SynthConfig, lexicon: &[LexiconEntry]) -> SynthCorpus {
    let trie = DrugTrie::build(lexicon).expect("lexicon builds");
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg,
        lexicon,
    };
    let mut documents = Vec::new();
    let mut gold = Vec::new();
    let mut made = 0;
    while made < cfg.n_sentences {
        let doc_id = format!("SYN{:06}", documents.len() + 1);
        let want = (1 + index_in(&mut g.rng, 0, cfg.max_sentences_per_doc.max(1))).min(cfg.n_sentences - made);
        let mut parts: Vec<String> = Vec::new();
        for _ in 0..want {
            if g.chance(cfg.filler_rate) {
                parts.push(g.pick(FILLER).to_string());
            }
            let d = loop {
                let d = g.draft();
                if g.accept(&d, &trie) {
                    break d;
                }
            };
            let idx = parts.len();
            for &(s, e, ref concept, causative) in &d.drugs {
                let events = if causative {
                    d.events.iter().map(|&(a, b)| Mention::from_text(&d.text, a, b)).collect()
                } else {
                    Vec::new()
                };
                gold.push(AdeAnnotation {
                    doc_id: doc_id.clone(),
                    sent_index: idx,
                    drug: Mention::from_text(&d.text, s, e).with_concept(concept.clone()),
                    events,
                    provenance: Provenance::Gold,
                });
            }
            parts.push(d.text);
            made += 1;
        }
        documents.push(Document {
            doc_id,
            text: parts.join(" "),
        });
    }
    SynthCorpus { documents, gold }
}

/// Generate a corpus over the bundled sample lexicon.
pub fn synth_corpus(cfg: &SynthConfig) -> SynthCorpus {
    synth_corpus_with(cfg, &sample_lexicon())
}
