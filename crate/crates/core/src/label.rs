//! Sentiment labels, label schemes, messages, and the prose-to-label parser.
//!
//! Agents answer in free text ("The sentiment is negative. Decline and soften
//! indicate ..."), so every opinion goes through [`parse_label`] before it can
//! be counted or compared.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Positive,
    Negative,
    Neutral,
}

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 3] = [Self::Positive, Self::Negative, Self::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::Neutral => "neutral",
        }
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown sentiment label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for SentimentLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            "neutral" => Ok(Self::Neutral),
            _ => Err(UnknownLabel(s.to_owned())),
        }
    }
}

/// Binary corpora carry only polar labels; ternary ones add neutral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    Binary,
    Ternary,
}

impl LabelScheme {
    /// Labels admitted by the scheme, in confusion-matrix order.
    pub fn labels(self) -> &'static [SentimentLabel] {
        match self {
            Self::Binary => &[SentimentLabel::Positive, SentimentLabel::Negative],
            Self::Ternary => &SentimentLabel::ALL,
        }
    }

    pub fn admits(self, label: SentimentLabel) -> bool {
        self == Self::Ternary || label != SentimentLabel::Neutral
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Binary => "binary",
            Self::Ternary => "ternary",
        })
    }
}

/// Result of reading a label out of free text. `label == None` means the text
/// was unparseable; `evidence` is then empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLabel {
    pub label: Option<SentimentLabel>,
    pub evidence: String,
}

impl ParsedLabel {
    pub fn unparseable() -> Self {
        Self {
            label: None,
            evidence: String::new(),
        }
    }

    fn found(label: SentimentLabel, evidence: &str) -> Self {
        Self {
            label: Some(label),
            evidence: evidence.trim().to_owned(),
        }
    }

    pub fn is_parseable(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MessageError {
    #[error("message `{0}` has empty text")]
    EmptyText(String),
}

/// One input to be classified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
}

impl Message {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, MessageError> {
        let id = id.into();
        let text = text.into();
        if text.trim().is_empty() {
            return Err(MessageError::EmptyText(id));
        }
        Ok(Self {
            id,
            text,
            target: None,
        })
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target = Some(target.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn target(&self) -> Option<&str> {
        self.target.as_deref()
    }
}

static SENTENCE_END: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.!?]+(\s+|$)").unwrap());
static KEYWORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(positiv|negativ|neutral)\w*").unwrap());
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z']+").unwrap());
// A subject + copula right before the keyword, allowing hedges:
// "the sentiment of the speaker is likely positive", "sentiment appears to be neutral".
static COPULA_CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(sentiment|speaker|tone|polarity|answer|verdict|message|it)\b[^,;:]*?\b(is|are|was|be|remains)\s+((likely|generally|somewhat|mostly|overall|probably|slightly|rather|quite|more|very|clearly|mildly|largely|predominantly|leaning|a|an)\s+)*[\x22'“(]*$",
    )
    .unwrap()
});
static LABEL_COLON_CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(sentiment|answer|verdict|label|polarity)\s*[:=]\s*[\x22'“(]*$").unwrap()
});
static OVERALL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\boverall\b").unwrap());
static LEADING_FILLER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^[\s\x22'“*(\[]*((overall|mostly|somewhat|slightly|mildly|generally|clearly)[\s,]+)*$")
        .unwrap()
});
// Technical terms that contain a polarity word but are not a verdict.
static NON_VERDICT_PHRASE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^negative\s+(assertions?|statements?\s+about\s+sarcasm)\b").unwrap()
});

const NEGATION_WINDOW: usize = 5;
const NEGATORS: &[&str] = &["no", "not", "without", "neither", "nor", "never", "lacks", "lack", "absence"];
// A copula between a determiner-like negator and the keyword closes the
// negation scope: "no surprise the sentiment is negative" is still negative.
const DETERMINER_NEGATORS: &[&str] = &["no", "without", "lack", "lacks", "absence"];
const SCOPE_BREAKERS: &[&str] = &["is", "are", "was", "were", "be", "seems", "appears"];

#[derive(Debug, Clone, Copy)]
struct Occurrence {
    label: SentimentLabel,
    start: usize,
}

#[derive(Debug)]
struct Sentence<'a> {
    text: &'a str,
    occurrences: Vec<Occurrence>,
}

impl Sentence<'_> {
    fn families(&self) -> Vec<SentimentLabel> {
        let mut out: Vec<SentimentLabel> = Vec::new();
        for occ in &self.occurrences {
            if !out.contains(&occ.label) {
                out.push(occ.label);
            }
        }
        out
    }

    /// Families introduced by a copula/colon cue or by a preceding "overall".
    fn strongly_cued(&self) -> Vec<SentimentLabel> {
        let mut out = Vec::new();
        for (i, occ) in self.occurrences.iter().enumerate() {
            let before = &self.text[..occ.start];
            let copula = COPULA_CUE.is_match(before) || LABEL_COLON_CUE.is_match(before);
            let overall = OVERALL.find_iter(before).last().is_some_and(|m| {
                // no keyword of another family between "overall" and this one
                self.occurrences[..i]
                    .iter()
                    .all(|o| o.start < m.start() || o.label == occ.label)
            });
            if (copula || overall) && !out.contains(&occ.label) {
                out.push(occ.label);
            }
        }
        out
    }

    fn starts_with_label(&self) -> Option<SentimentLabel> {
        let first = self.occurrences.first()?;
        LEADING_FILLER
            .is_match(&self.text[..first.start])
            .then_some(first.label)
    }

    /// The label this sentence states as a verdict, if it states exactly one.
    fn verdict(&self) -> Option<SentimentLabel> {
        let families = self.families();
        let strong = self.strongly_cued();
        match (families.len(), strong.len()) {
            (0, _) => None,
            (_, 1) => Some(strong[0]),
            (1, 0) => self.starts_with_label(),
            _ => None,
        }
    }

    /// The single family mentioned, or the strongly cued one when several are.
    fn mention(&self) -> Option<SentimentLabel> {
        let families = self.families();
        match families.len() {
            1 => Some(families[0]),
            0 => None,
            _ => {
                let strong = self.strongly_cued();
                (strong.len() == 1).then(|| strong[0])
            }
        }
    }
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for m in SENTENCE_END.find_iter(text) {
        let piece = &text[start..m.end()];
        if !piece.trim().is_empty() {
            out.push(piece);
        }
        start = m.end();
    }
    if start < text.len() && !text[start..].trim().is_empty() {
        out.push(&text[start..]);
    }
    out
}

fn is_negated(sentence: &str, keyword_start: usize) -> bool {
    let before = &sentence[..keyword_start];
    let clause_start = before.rfind([',', ';', ':']).map_or(0, |i| i + 1);
    let words: Vec<String> = WORD
        .find_iter(&before[clause_start..])
        .map(|w| w.as_str().to_ascii_lowercase())
        .collect();
    let window_start = words.len().saturating_sub(NEGATION_WINDOW);
    for (i, w) in words.iter().enumerate().skip(window_start).rev() {
        if NEGATORS.contains(&w.as_str()) {
            if DETERMINER_NEGATORS.contains(&w.as_str())
                && words[i + 1..].iter().any(|b| SCOPE_BREAKERS.contains(&b.as_str()))
            {
                return false;
            }
            return true;
        }
    }
    false
}

fn scan<'a>(piece: &'a str, scheme: LabelScheme) -> Sentence<'a> {
    let occurrences = KEYWORD
        .captures_iter(piece)
        .filter_map(|c| {
            let m = c.get(0).unwrap();
            let label = match c[1].to_ascii_lowercase().as_str() {
                "positiv" => SentimentLabel::Positive,
                "negativ" => SentimentLabel::Negative,
                _ => SentimentLabel::Neutral,
            };
            if !scheme.admits(label)
                || NON_VERDICT_PHRASE.is_match(&piece[m.start()..])
                || is_negated(piece, m.start())
            {
                return None;
            }
            Some(Occurrence {
                label,
                start: m.start(),
            })
        })
        .collect();
    Sentence {
        text: piece,
        occurrences,
    }
}

/// Reads a sentiment label out of free text.
///
/// Polarity words that are negated ("no indication of positive or negative
/// sentiment") or that name a rhetorical device ("negative assertion") are
/// ignored. Then, scanning sentences from the last one backward:
///
/// 1. the first sentence that states a verdict wins, where a verdict is a
///    polarity word introduced by a cue ("the sentiment is", "overall",
///    "answer:") or a sentence led by a lone polarity word ("Neutral.");
/// 2. otherwise the first sentence mentioning exactly one polarity family wins
///    (a sentence mentioning several is skipped unless a cue singles one out);
/// 3. otherwise the family with the strictly highest count over the whole text;
/// 4. otherwise the text is unparseable.
///
/// Under [`LabelScheme::Binary`] neutral words are ignored throughout. "Mixed"
/// is not a polarity family: a mixed verdict leaves the opinion unparseable.
pub fn parse_label(text: &str, scheme: LabelScheme) -> ParsedLabel {
    let sentences: Vec<Sentence<'_>> = split_sentences(text)
        .into_iter()
        .map(|s| scan(s, scheme))
        .collect();

    for s in sentences.iter().rev() {
        if let Some(label) = s.verdict() {
            return ParsedLabel::found(label, s.text);
        }
    }
    for s in sentences.iter().rev() {
        if let Some(label) = s.mention() {
            return ParsedLabel::found(label, s.text);
        }
    }

    let mut counts = [0usize; 3];
    for occ in sentences.iter().flat_map(|s| &s.occurrences) {
        counts[occ.label as usize] += 1;
    }
    let best = (0..3).max_by_key(|&i| counts[i]).unwrap();
    let unique = counts[best] > 0 && counts.iter().filter(|&&c| c == counts[best]).count() == 1;
    if unique {
        return ParsedLabel::found(SentimentLabel::ALL[best], text);
    }
    ParsedLabel::unparseable()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(text: &str, scheme: LabelScheme) -> Option<SentimentLabel> {
        parse_label(text, scheme).label
    }

    #[test]
    fn leading_verdict_beats_later_reasoning() {
        let text = "The sentiment is negative. Decline and soften indicate a decrease in the demand for gold.";
        let parsed = parse_label(text, LabelScheme::Ternary);
        assert_eq!(parsed.label, Some(SentimentLabel::Negative));
        assert_eq!(parsed.evidence, "The sentiment is negative.");
    }

    #[test]
    fn bare_label() {
        assert_eq!(label("Neutral.", LabelScheme::Ternary), Some(SentimentLabel::Neutral));
        assert_eq!(label("NEGATIVE", LabelScheme::Binary), Some(SentimentLabel::Negative));
    }

    #[test]
    fn no_keyword_is_unparseable() {
        let parsed = parse_label("The stock moved today.", LabelScheme::Ternary);
        assert_eq!(parsed, ParsedLabel::unparseable());
        assert!(parse_label("", LabelScheme::Ternary).label.is_none());
    }

    #[test]
    fn cue_resolves_mixed_sentence() {
        let text = "Positive early on; however, overall the sentiment is negative.";
        assert_eq!(label(text, LabelScheme::Ternary), Some(SentimentLabel::Negative));
    }

    #[test]
    fn binary_ignores_neutral() {
        assert_eq!(label("Neutral.", LabelScheme::Binary), None);
        let text = "The sentiment is neutral. Prices could rise, a positive sign.";
        assert_eq!(label(text, LabelScheme::Binary), Some(SentimentLabel::Positive));
        assert_eq!(label(text, LabelScheme::Ternary), Some(SentimentLabel::Neutral));
    }

    #[test]
    fn negated_mentions_are_ignored() {
        let text = "Neutral. No indications of sarcasm or negative assertion in the message.";
        assert_eq!(label(text, LabelScheme::Ternary), Some(SentimentLabel::Neutral));
        let text = "It gives a forecast without expressing positive or negative views.";
        assert_eq!(label(text, LabelScheme::Ternary), None);
        let text = "No surprise here: the sentiment is negative.";
        assert_eq!(label(text, LabelScheme::Ternary), Some(SentimentLabel::Negative));
    }

    #[test]
    fn mixed_verdict_is_unparseable() {
        let text = "Mixed sentiment. Drive markets higher suggests a positive sentiment, while Barclays falls indicates a negative sentiment.";
        assert_eq!(label(text, LabelScheme::Ternary), None);
    }

    #[test]
    fn summarizer_style_verdict_last() {
        let text = "Expert A3 saw a positive tone. The other experts disagreed. Therefore the final sentiment is negative.";
        assert_eq!(label(text, LabelScheme::Ternary), Some(SentimentLabel::Negative));
    }

    #[test]
    fn counting_breaks_remaining_ambiguity() {
        // every sentence names two families with no cue, but negative dominates
        let text = "Negative news and positive hopes, negative flows.";
        assert_eq!(label(text, LabelScheme::Ternary), Some(SentimentLabel::Negative));
        let text = "Negative news and positive hopes.";
        assert_eq!(label(text, LabelScheme::Ternary), None);
    }

    #[test]
    fn sentence_split_keeps_decimals() {
        assert_eq!(split_sentences("Price 4.5 is up. Positive!"), vec!["Price 4.5 is up. ", "Positive!"]);
    }

    #[test]
    fn message_rejects_blank_text() {
        assert!(Message::new("m1", "  \n").is_err());
        let m = Message::new("m1", "X falls").unwrap().with_target("X");
        assert_eq!(m.target(), Some("X"));
    }

    fn scheme() -> impl Strategy<Value = LabelScheme> {
        prop_oneof![Just(LabelScheme::Binary), Just(LabelScheme::Ternary)]
    }

    proptest! {
        #[test]
        fn total_and_deterministic(text in "\\PC{0,200}", s in scheme()) {
            prop_assert_eq!(parse_label(&text, s), parse_label(&text, s));
        }

        #[test]
        fn evidence_names_the_label(
            words in prop::collection::vec(prop_oneof![
                Just("positive"), Just("negative"), Just("neutral"), Just("mixed"),
                Just("not"), Just("the sentiment is"), Just("overall"), Just("stock"),
                Just("."), Just(","), Just("falls"),
            ], 0..30),
            s in scheme(),
        ) {
            let text = words.join(" ");
            let parsed = parse_label(&text, s);
            match parsed.label {
                Some(l) => {
                    prop_assert!(s.admits(l));
                    prop_assert!(parsed.evidence.to_lowercase().contains(l.as_str()));
                }
                None => prop_assert!(parsed.evidence.is_empty()),
            }
        }

        #[test]
        fn bare_word_round_trips(l in prop::sample::select(SentimentLabel::ALL.to_vec()), s in scheme(), upper in any::<bool>()) {
            prop_assume!(s.admits(l));
            let word = if upper { l.as_str().to_uppercase() } else { l.as_str().to_owned() };
            prop_assert_eq!(parse_label(&word, s).label, Some(l));
        }
    }
}
