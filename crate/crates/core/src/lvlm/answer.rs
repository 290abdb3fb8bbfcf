use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsedAnswer {
    Yes,
    No,
    Refusal,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A leading "yes"/"no" token decides; otherwise the first sentence must
/// contain exactly one of the two words. Everything else is a refusal.
pub fn parse_answer(raw: &str) -> ParsedAnswer {
    let all = words(raw);
    match all.first().map(String::as_str) {
        Some("yes") => return ParsedAnswer::Yes,
        Some("no") => return ParsedAnswer::No,
        _ => {}
    }
    let first_sentence = raw
        .trim_start()
        .split(['.', '!', '?', '\n'])
        .next()
        .unwrap_or("");
    let w = words(first_sentence);
    let yes = w.iter().any(|t| t == "yes");
    let no = w.iter().any(|t| t == "no");
    match (yes, no) {
        (true, false) => ParsedAnswer::Yes,
        (false, true) => ParsedAnswer::No,
        _ => ParsedAnswer::Refusal,
    }
}
