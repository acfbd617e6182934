use serde::{Deserialize, Serialize};

use super::TeacherError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    #[serde(rename = "zero", alias = "zero_shot")]
    ZeroShot,
    #[serde(rename = "few", alias = "few_shot5")]
    FewShot5,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero",
            PromptMode::FewShot5 => "few",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" | "zero-shot" | "zero_shot" => Ok(PromptMode::ZeroShot),
            "few" | "five" | "few-shot" | "few_shot5" => Ok(PromptMode::FewShot5),
            other => Err(format!("unknown prompt mode {other:?} (expected zero|few)")),
        }
    }
}

pub const INSTRUCTION: &str =
    "Extract the adverse events each drug causes in the Message. If no ADE is found, return None.";

/// The fixed in-context examples, as (message, annotations) pairs.
pub const FEW_SHOT_EXAMPLES: [(&str, &str); 5] = [
    (
        "We postulate that the bolus of sulprostone resulted in possible coronary spasm that resulted in cardiac arrest.",
        "sulprostone: cardiac arrest|coronary spasm",
    ),
    (
        "In each of the three reported patients, alteration of eyelid appearance with deepening of the lid sulcus was evident as the result of topical bimatoprost therapy.",
        "bimatoprost: alteration of eyelid appearance|deepening of the lid sulcus",
    ),
    (
        "Immobilization, while Paget's bone disease was present, and perhaps enhanced activation of dihydrotachysterol by rifampicin, could have led to increased calcium - release into the circulation.",
        "dihydrotachysterol: increased calcium - release",
    ),
    (
        "In two patients clozapine was reinstated after risperidone was discontinued; serum triglyceride levels increased.",
        "clozapine: serum triglyceride levels increased",
    ),
    (
        "The cause of these previously unreported side effects of niacin therapy is uncertain but may be related to prostaglandin - mediated vasodilatation, hyperalgesia of sensory nerve receptors, and potentiation of inflammation in the gingiva with referral of pain to the teeth.",
        "niacin: hyperalgesia of sensory nerve receptors|pain to the teeth|potentiation of inflammation in the gingiva|prostaglandin - mediated vasodilatation",
    ),
];

const MESSAGE_PREFIX: &str = "Message: ";

/// Everything in the prompt that precedes the query sentence.
///
/// Layout: the instruction line, a blank line, then (five-shot only) each
/// example as `Example k:` / `Message: ...` / `Annotations: ...` followed by
/// a blank line, and finally `Message: ` for the query.
pub fn prompt_prefix(mode: PromptMode) -> String {
    let mut out = String::with_capacity(2048);
    out.push_str(INSTRUCTION);
    out.push_str("\n\n");
    if mode == PromptMode::FewShot5 {
        for (i, (message, annotations)) in FEW_SHOT_EXAMPLES.iter().enumerate() {
            out.push_str(&format!(
                "Example {}:\n{MESSAGE_PREFIX}{message}\nAnnotations: {annotations}\n\n",
                i + 1
            ));
        }
    }
    out.push_str(MESSAGE_PREFIX);
    out
}

/// Renders the teacher prompt for one sentence.
pub fn build_prompt(sentence_text: &str, mode: PromptMode) -> Result<String, TeacherError> {
    if sentence_text.trim().is_empty() {
        return Err(TeacherError::EmptySentence);
    }
    let mut out = prompt_prefix(mode);
    out.push_str(sentence_text);
    Ok(out)
}

/// Recovers the query sentence from a prompt built by [`build_prompt`].
pub fn query_of(prompt: &str) -> Option<&str> {
    [PromptMode::FewShot5, PromptMode::ZeroShot]
        .into_iter()
        .find_map(|mode| prompt.strip_prefix(prompt_prefix(mode).as_str()))
}
