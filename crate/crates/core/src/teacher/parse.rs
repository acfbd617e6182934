use std::collections::BTreeMap;

/// Drug string to the event strings the teacher attributes to it.
pub type AdeMap = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedResponse {
    pub map: AdeMap,
    /// Non-blank lines that did not match `drug: e1|e2|...`.
    pub malformed_lines: usize,
}

fn is_none(s: &str) -> bool {
    s.trim().trim_end_matches('.').eq_ignore_ascii_case("none")
}

/// Parses the `drug: event|event` line format. Never fails: lines that cannot
/// be read are counted in [`ParsedResponse::malformed_lines`].
///
/// A leading `Annotations:` label on a line is tolerated, repeated drug keys
/// merge, and duplicate events under one drug are kept once.
pub fn parse_response(raw: &str) -> ParsedResponse {
    let mut out = ParsedResponse::default();
    if is_none(raw) {
        return out;
    }
    for line in raw.lines() {
        let mut line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.len() >= 12 && line[..12].eq_ignore_ascii_case("annotations:") {
            line = line[12..].trim();
            if line.is_empty() || is_none(line) {
                continue;
            }
        }
        let Some((drug, events)) = line.split_once(':') else {
            out.malformed_lines += 1;
            continue;
        };
        let drug = drug.trim();
        let events: Vec<&str> = events
            .split('|')
            .map(str::trim)
            .filter(|e| !e.is_empty())
            .collect();
        if drug.is_empty() || events.is_empty() {
            out.malformed_lines += 1;
            continue;
        }
        let slot = out.map.entry(drug.to_string()).or_default();
        for e in events {
            if !slot.iter().any(|x| x == e) {
                slot.push(e.to_string());
            }
        }
    }
    out
}

/// Inverse of [`parse_response`] for well-formed maps; `None` when empty.
pub fn render_response(map: &AdeMap) -> String {
    let lines: Vec<String> = map
        .iter()
        .filter(|(_, events)| !events.is_empty())
        .map(|(drug, events)| format!("{drug}: {}", events.join("|")))
        .collect();
    if lines.is_empty() {
        "None".to_string()
    } else {
        lines.join("\n")
    }
}
