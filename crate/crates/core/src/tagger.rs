//! Number detection and special-token annotation.
//!
//! Numbers in a text (digit numerals, number words, ordinals and a small set of
//! relative temporal phrases) are located and rewritten with a role-specific
//! token appended after the matched surface, e.g. `53 - yard@N9`. The bindings
//! collected along the way form the environment programs are executed against.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token name to numeric value.
pub type Environment = BTreeMap<String, f64>;

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("duplicate token {0} across tagged texts")]
    DuplicateToken(String),
    #[error("cannot read lexicon {path}: {source}")]
    LexiconIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed lexicon: {0}")]
    LexiconFormat(#[from] serde_json::Error),
    #[error("unknown role {0:?}")]
    UnknownRole(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Passage,
    Question,
    Premise,
    Hypothesis,
}

impl Role {
    pub fn letter(self) -> char {
        match self {
            Role::Passage | Role::Hypothesis => 'N',
            Role::Question => 'Q',
            Role::Premise => 'M',
        }
    }

    /// Questions are numbered from 0, everything else from 1.
    pub fn default_index_base(self) -> usize {
        match self {
            Role::Question => 0,
            _ => 1,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Passage => "passage",
            Role::Question => "question",
            Role::Premise => "premise",
            Role::Hypothesis => "hypothesis",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = TaggerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "passage" => Ok(Role::Passage),
            "question" => Ok(Role::Question),
            "premise" => Ok(Role::Premise),
            "hypothesis" => Ok(Role::Hypothesis),
            _ => Err(TaggerError::UnknownRole(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumberKind {
    Cardinal,
    Ordinal,
    Word,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumberBinding {
    #[serde(rename = "token")]
    pub token_name: String,
    pub value: f64,
    pub surface: String,
    /// Character offset (not byte offset) into the original text.
    pub start: usize,
    pub end: usize,
    pub kind: NumberKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedText {
    pub original: String,
    pub annotated: String,
    pub role: Role,
    pub bindings: Vec<NumberBinding>,
}

impl TaggedText {
    /// Reconstructs the original text by dropping exactly the inserted tokens.
    pub fn strip_annotations(&self) -> String {
        let mut out = self.annotated.clone();
        // Walk right to left so earlier byte positions stay valid.
        let mut offsets: Vec<(usize, usize)> = Vec::with_capacity(self.bindings.len());
        let mut shift = 0;
        let mut char_to_byte = char_byte_offsets(&self.original);
        char_to_byte.push(self.original.len());
        for b in &self.bindings {
            let at = char_to_byte[b.end] + shift;
            let len = 1 + b.token_name.len();
            offsets.push((at, len));
            shift += len;
        }
        for (at, len) in offsets.into_iter().rev() {
            out.replace_range(at..at + len, "");
        }
        out
    }

    pub fn environment(&self) -> Environment {
        self.bindings
            .iter()
            .map(|b| (b.token_name.clone(), b.value))
            .collect()
    }
}

/// Word, ordinal and phrase tables used for non-digit numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumberLexicon {
    #[serde(default)]
    pub words: BTreeMap<String, f64>,
    #[serde(default)]
    pub ordinals: BTreeMap<String, f64>,
    #[serde(default)]
    pub phrases: BTreeMap<String, f64>,
}

const CARDINAL_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];
const TENS_WORDS: [(&str, f64); 7] = [
    ("thirty", 30.0),
    ("forty", 40.0),
    ("fifty", 50.0),
    ("sixty", 60.0),
    ("seventy", 70.0),
    ("eighty", 80.0),
    ("ninety", 90.0),
];
const ORDINAL_WORDS: [&str; 20] = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
    "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth", "sixteenth", "seventeenth",
    "eighteenth", "nineteenth", "twentieth",
];

impl Default for NumberLexicon {
    fn default() -> Self {
        let mut words: BTreeMap<String, f64> = CARDINAL_WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_string(), i as f64))
            .collect();
        words.extend(TENS_WORDS.iter().map(|(w, v)| (w.to_string(), *v)));
        let ordinals = ORDINAL_WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_string(), (i + 1) as f64))
            .collect();
        let phrases = [("next year", 1.0), ("next season", 1.0)]
            .into_iter()
            .map(|(p, v)| (p.to_string(), v))
            .collect();
        NumberLexicon {
            words,
            ordinals,
            phrases,
        }
    }
}

impl NumberLexicon {
    pub fn from_json(text: &str) -> Result<Self, TaggerError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaggerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaggerError::LexiconIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// A lexicon compiled into matchers. Build once and reuse across a corpus.
#[derive(Debug, Clone)]
pub struct Tagger {
    entries: HashMap<String, (f64, NumberKind)>,
    lexical: Option<Regex>,
}

fn numeral_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // Thousands-grouped form first so "1,000" beats "1".
        Regex::new(r"[0-9]{1,3}(?:,[0-9]{3})+(?:\.[0-9]+)?|[0-9]+(?:\.[0-9]+)?").unwrap()
    })
}

fn compound_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Unit compounds such as "53 - yard" or "54-yarder" keep the token after the unit.
    RE.get_or_init(|| Regex::new(r"^ *- *[A-Za-z]+").unwrap())
}

impl Tagger {
    pub fn new(lexicon: &NumberLexicon) -> Self {
        let mut entries = HashMap::new();
        for (w, v) in &lexicon.words {
            entries.insert(normalize_key(w), (*v, NumberKind::Word));
        }
        for (w, v) in &lexicon.ordinals {
            entries.insert(normalize_key(w), (*v, NumberKind::Ordinal));
        }
        for (w, v) in &lexicon.phrases {
            entries.insert(normalize_key(w), (*v, NumberKind::Relative));
        }
        let mut keys: Vec<&String> = entries.keys().filter(|k| !k.is_empty()).collect();
        // Longest alternatives first; ties alphabetical for a stable pattern.
        keys.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let lexical = if keys.is_empty() {
            None
        } else {
            let alternation = keys
                .iter()
                .map(|k| {
                    k.split(' ')
                        .map(regex::escape)
                        .collect::<Vec<_>>()
                        .join(r"\s+")
                })
                .collect::<Vec<_>>()
                .join("|");
            Some(Regex::new(&format!(r"(?i)\b(?:{alternation})\b")).expect("escaped lexicon"))
        };
        Tagger { entries, lexical }
    }

    pub fn tag(&self, text: &str, role: Role, index_base: usize) -> TaggedText {
        let mut candidates: Vec<Candidate> = Vec::new();
        let bytes = text.as_bytes();

        for m in numeral_regex().find_iter(text) {
            let (start, mut end) = (m.start(), m.end());
            if is_token_suffix(bytes, start) {
                continue;
            }
            let value: f64 = match m.as_str().replace(',', "").parse() {
                Ok(v) => v,
                Err(_) => continue,
            };
            if let Some(unit) = compound_regex().find(&text[end..]) {
                let after = end + unit.end();
                if !text[after..].starts_with(|c: char| c.is_alphanumeric()) {
                    end = after;
                }
            }
            candidates.push(Candidate {
                start,
                end,
                value,
                kind: NumberKind::Cardinal,
            });
        }

        if let Some(re) = &self.lexical {
            for m in re.find_iter(text) {
                let key = normalize_key(m.as_str());
                if let Some(&(value, kind)) = self.entries.get(&key) {
                    candidates.push(Candidate {
                        start: m.start(),
                        end: m.end(),
                        value,
                        kind,
                    });
                }
            }
        }

        // Leftmost-longest, non-overlapping.
        candidates.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
        let mut chosen: Vec<Candidate> = Vec::new();
        let mut cursor = 0;
        for c in candidates {
            if c.start >= cursor {
                cursor = c.end;
                chosen.push(c);
            }
        }

        let letter = role.letter();
        let mut annotated = String::with_capacity(text.len() + chosen.len() * 5);
        let mut bindings = Vec::with_capacity(chosen.len());
        let mut last = 0;
        let mut char_pos = 0;
        for (i, c) in chosen.into_iter().enumerate() {
            let token_name = format!("{letter}{}", index_base + i);
            char_pos += text[last..c.start].chars().count();
            let start_char = char_pos;
            let surface = &text[c.start..c.end];
            char_pos += surface.chars().count();
            annotated.push_str(&text[last..c.end]);
            annotated.push('@');
            annotated.push_str(&token_name);
            bindings.push(NumberBinding {
                token_name,
                value: c.value,
                surface: surface.to_string(),
                start: start_char,
                end: char_pos,
                kind: c.kind,
            });
            last = c.end;
        }
        annotated.push_str(&text[last..]);

        TaggedText {
            original: text.to_string(),
            annotated,
            role,
            bindings,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    start: usize,
    end: usize,
    value: f64,
    kind: NumberKind,
}

fn normalize_key(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when the digits at `start` belong to an existing `@N9`-style token.
fn is_token_suffix(bytes: &[u8], start: usize) -> bool {
    start >= 2 && matches!(bytes[start - 1], b'N' | b'Q' | b'M') && bytes[start - 2] == b'@'
}

fn char_byte_offsets(s: &str) -> Vec<usize> {
    s.char_indices().map(|(i, _)| i).collect()
}

/// Tags `text` with a freshly compiled tagger. Prefer [`Tagger`] for corpora.
pub fn tag(text: &str, role: Role, lexicon: &NumberLexicon, index_base: usize) -> TaggedText {
    Tagger::new(lexicon).tag(text, role, index_base)
}

pub fn render(tagged: &TaggedText) -> &str {
    &tagged.annotated
}

/// Merges the bindings of several tagged texts into one lookup table.
pub fn environment<'a, I>(tagged: I) -> Result<Environment, TaggerError>
where
    I: IntoIterator<Item = &'a TaggedText>,
{
    let mut env = Environment::new();
    for t in tagged {
        for b in &t.bindings {
            if env.insert(b.token_name.clone(), b.value).is_some() {
                return Err(TaggerError::DuplicateToken(b.token_name.clone()));
            }
        }
    }
    Ok(env)
}

/// Removes every `@N12`-style token from an annotated string.
///
/// Unlike [`TaggedText::strip_annotations`] this works on bare strings and will
/// also remove token-like sequences that were present in the source text.
pub fn strip_tokens(annotated: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"@[NQM][0-9]+").unwrap());
    re.replace_all(annotated, "").into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(t: &TaggedText) -> Vec<(&str, f64)> {
        t.bindings
            .iter()
            .map(|b| (b.token_name.as_str(), b.value))
            .collect()
    }

    #[test]
    fn field_goal_compounds() {
        let t = tag(
            "a 53 - yard and a 24 - yard field goal",
            Role::Passage,
            &NumberLexicon::default(),
            9,
        );
        assert_eq!(pairs(&t), vec![("N9", 53.0), ("N10", 24.0)]);
        assert!(t.annotated.contains("53 - yard@N9"));
        assert!(t.annotated.contains("24 - yard@N10"));
        assert_eq!(t.bindings[0].surface, "53 - yard");
    }

    #[test]
    fn empty_text() {
        let t = tag("", Role::Passage, &NumberLexicon::default(), 1);
        assert!(t.bindings.is_empty());
        assert_eq!(t.annotated, "");
    }

    #[test]
    fn words_and_ordinals() {
        let t = tag(
            "two more field goals in the second quarter",
            Role::Passage,
            &NumberLexicon::default(),
            1,
        );
        assert_eq!(pairs(&t), vec![("N1", 2.0), ("N2", 2.0)]);
        assert_eq!(t.bindings[0].kind, NumberKind::Word);
        assert_eq!(t.bindings[1].kind, NumberKind::Ordinal);
        assert_eq!(t.annotated, "two@N1 more field goals in the second@N2 quarter");
    }

    #[test]
    fn premise_rendering() {
        let t = tag(
            "In a school, there are 542 girls and 387 boys.",
            Role::Premise,
            &NumberLexicon::default(),
            1,
        );
        assert_eq!(
            render(&t),
            "In a school, there are 542@M1 girls and 387@M2 boys."
        );
    }

    #[test]
    fn decimals_keep_surface() {
        let t = tag(
            "Sam had 98.0 pennies in his bank and he spent 93.0 of his pennies.",
            Role::Premise,
            &NumberLexicon::default(),
            1,
        );
        assert_eq!(pairs(&t), vec![("M1", 98.0), ("M2", 93.0)]);
        assert_eq!(t.bindings[0].surface, "98.0");
        assert_eq!(t.bindings[0].kind, NumberKind::Cardinal);
    }

    #[test]
    fn thousands_separator_vs_list() {
        let t = tag(
            "1,000 fans; notes of 1, 5 and 10 pesos",
            Role::Passage,
            &NumberLexicon::default(),
            1,
        );
        assert_eq!(
            pairs(&t),
            vec![("N1", 1000.0), ("N2", 1.0), ("N3", 5.0), ("N4", 10.0)]
        );
    }

    #[test]
    fn relative_phrase_and_year() {
        let t = tag(
            "The first issue in 1942. The next year brought notes",
            Role::Passage,
            &NumberLexicon::default(),
            1,
        );
        assert_eq!(pairs(&t), vec![("N1", 1.0), ("N2", 1942.0), ("N3", 1.0)]);
        assert_eq!(t.bindings[2].kind, NumberKind::Relative);
        assert!(t.annotated.contains("The next year@N3 brought"));
    }

    #[test]
    fn question_role_uses_q() {
        let t = tag(
            "first three",
            Role::Question,
            &NumberLexicon::default(),
            Role::Question.default_index_base(),
        );
        assert_eq!(pairs(&t), vec![("Q0", 1.0), ("Q1", 3.0)]);
    }

    #[test]
    fn existing_tokens_are_not_retagged() {
        let lex = NumberLexicon::default();
        let once = tag("He has 5.0 pennies now.", Role::Hypothesis, &lex, 1);
        let twice = tag(&once.annotated, Role::Hypothesis, &lex, 1);
        assert!(twice.bindings.iter().all(|b| !b.surface.starts_with('1')));
        assert_eq!(twice.bindings.len(), 1);
    }

    #[test]
    fn words_need_boundaries() {
        let t = tag("someone tone twentyish", Role::Passage, &NumberLexicon::default(), 1);
        assert!(t.bindings.is_empty());
    }

    #[test]
    fn unicode_offsets_are_chars() {
        let t = tag("café 12 ü", Role::Passage, &NumberLexicon::default(), 1);
        assert_eq!(t.bindings[0].start, 5);
        assert_eq!(t.bindings[0].end, 7);
        assert_eq!(t.strip_annotations(), "café 12 ü");
    }

    #[test]
    fn environment_merges_and_rejects_duplicates() {
        let lex = NumberLexicon::default();
        let p = tag(
            "Sam had 98.0 pennies and spent 93.0 of them.",
            Role::Premise,
            &lex,
            1,
        );
        let h = tag("He has 5.0 pennies now.", Role::Hypothesis, &lex, 1);
        let env = environment([&p, &h]).unwrap();
        assert_eq!(env.len(), 3);
        assert_eq!(env["M1"], 98.0);
        assert_eq!(env["M2"], 93.0);
        assert_eq!(env["N1"], 5.0);

        assert!(environment(std::iter::empty::<&TaggedText>()).unwrap().is_empty());

        let a = tag("7 apples", Role::Passage, &lex, 1);
        let b = tag("8 pears", Role::Hypothesis, &lex, 1);
        assert!(matches!(
            environment([&a, &b]),
            Err(TaggerError::DuplicateToken(t)) if t == "N1"
        ));
    }

    #[test]
    fn lexicon_json_roundtrip_and_custom_phrase() {
        let lex = NumberLexicon::from_json(
            r#"{"words": {"dozen": 12}, "ordinals": {}, "phrases": {"last decade": 10}}"#,
        )
        .unwrap();
        let t = tag("a dozen eggs in the last  decade", Role::Passage, &lex, 1);
        assert_eq!(pairs(&t), vec![("N1", 12.0), ("N2", 10.0)]);
        assert!(NumberLexicon::from_json("[1,2]").is_err());
    }

    #[test]
    fn strip_tokens_matches_binding_strip() {
        let t = tag("a 53 - yard and 7 more", Role::Passage, &NumberLexicon::default(), 1);
        assert_eq!(strip_tokens(&t.annotated), t.original);
        assert_eq!(t.strip_annotations(), t.original);
    }

    #[test]
    fn serialized_shape() {
        let t = tag("3 cats", Role::Passage, &NumberLexicon::default(), 1);
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["role"], "passage");
        assert_eq!(v["bindings"][0]["token"], "N1");
        assert_eq!(v["bindings"][0]["kind"], "cardinal");
        assert_eq!(v["bindings"][0]["start"], 0);
        assert_eq!(v["bindings"][0]["end"], 1);
    }
}
