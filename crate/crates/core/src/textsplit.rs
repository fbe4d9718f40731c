//! Rule-based text decoupling over the controlled grammar: tokens get one of
//! five component labels (plus Other), then split into the target-object
//! stream and the surrounding stream.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{CATEGORIES, COLORS, RELATIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    MainObject,
    Attribute,
    Pronoun,
    AuxiliaryObject,
    Relationship,
    Other,
}

impl Label {
    pub const ALL: [Label; 6] = [Label::MainObject, Label::Attribute, Label::Pronoun, Label::AuxiliaryObject, Label::Relationship, Label::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::MainObject => "MainObject",
            Label::Attribute => "Attribute",
            Label::Pronoun => "Pronoun",
            Label::AuxiliaryObject => "AuxiliaryObject",
            Label::Relationship => "Relationship",
            Label::Other => "Other",
        }
    }

    pub fn is_target(self) -> bool {
        matches!(self, Label::MainObject | Label::Attribute)
    }

    pub fn is_surrounding(self) -> bool {
        matches!(self, Label::AuxiliaryObject | Label::Pronoun | Label::Relationship)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Label::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| Error::Text(format!("unknown label `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordRole {
    Noun,
    Adjective,
    Pronoun,
    Function,
}

/// Word roles plus multi-word relation phrases.
#[derive(Clone, Debug)]
pub struct Lexicon {
    words: HashMap<String, WordRole>,
    /// Longest phrases first so "in front of" wins over "in".
    relations: Vec<Vec<String>>,
}

const EXTRA_NOUNS: [&str; 3] = ["kitchen", "room", "floor"];
const EXTRA_ADJECTIVES: [&str; 6] = ["dark", "light", "brown", "wooden", "small", "large"];
const PRONOUNS: [&str; 4] = ["it", "its", "they", "them"];
const FUNCTION_WORDS: [&str; 8] = ["the", "a", "an", "there", "is", "placed", "of", "."];

impl Lexicon {
    pub fn new() -> Self {
        Self { words: HashMap::new(), relations: Vec::new() }
    }

    /// Vocabulary of the scene generator plus the few extra words needed for
    /// free-standing descriptions such as "a dark brown wooden chair placed in
    /// the table of the kitchen".
    pub fn standard() -> Self {
        let mut lex = Self::new();
        for w in FUNCTION_WORDS {
            lex.add_word(w, WordRole::Function);
        }
        for c in CATEGORIES.iter().map(|c| c.name).chain(EXTRA_NOUNS) {
            lex.add_word(c, WordRole::Noun);
        }
        for a in COLORS.iter().map(|c| c.name).chain(EXTRA_ADJECTIVES) {
            lex.add_word(a, WordRole::Adjective);
        }
        for p in PRONOUNS {
            lex.add_word(p, WordRole::Pronoun);
        }
        for r in RELATIONS.iter().map(|r| r.phrase()).chain(["in"]) {
            lex.add_relation(r);
        }
        lex
    }

    pub fn add_word(&mut self, word: &str, role: WordRole) {
        self.words.insert(word.to_string(), role);
    }

    pub fn add_relation(&mut self, phrase: &str) {
        let words: Vec<String> = phrase.split_whitespace().map(str::to_string).collect();
        if !words.is_empty() && !self.relations.contains(&words) {
            self.relations.push(words);
            self.relations.sort_by(|a, b| b.len().cmp(&a.len()));
        }
    }

    pub fn role(&self, word: &str) -> Option<WordRole> {
        self.words.get(word).copied()
    }

    /// Every word the lexicon knows, sorted.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self.words.keys().cloned().chain(self.relations.iter().flatten().cloned()).collect();
        v.sort();
        v.dedup();
        v
    }

    fn relation_at(&self, tokens: &[String], i: usize) -> Option<usize> {
        self.relations
            .iter()
            .find(|p| tokens.len() >= i + p.len() && tokens[i..i + p.len()].iter().zip(p.iter()).all(|(a, b)| a == b))
            .map(Vec::len)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::standard()
    }
}

/// Lowercase, split on whitespace, and split punctuation off into its own
/// tokens.
pub fn tokenize(utterance: &str) -> Result<Vec<String>> {
    if !utterance.is_ascii() {
        return Err(Error::Text("utterance must be ASCII".into()));
    }
    let mut out = Vec::new();
    for chunk in utterance.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch.to_ascii_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    if out.is_empty() {
        return Err(Error::Text("empty utterance".into()));
    }
    Ok(out)
}

/// The first noun before any relation phrase is the main object and the
/// adjectives directly in front of it are its attributes. Once a relation
/// phrase has appeared, every later noun is an auxiliary object.
pub fn label_components(tokens: &[String], lex: &Lexicon) -> Result<Vec<Label>> {
    let mut labels = vec![Label::Other; tokens.len()];
    let mut main = None;
    let mut in_clause = false;
    let mut i = 0;
    while i < tokens.len() {
        if let Some(len) = lex.relation_at(tokens, i) {
            labels[i..i + len].fill(Label::Relationship);
            in_clause = true;
            i += len;
            continue;
        }
        match lex.role(&tokens[i]) {
            Some(WordRole::Pronoun) => labels[i] = Label::Pronoun,
            Some(WordRole::Noun) => {
                if !in_clause && main.is_none() {
                    main = Some(i);
                    labels[i] = Label::MainObject;
                } else {
                    labels[i] = Label::AuxiliaryObject;
                }
            }
            _ => {}
        }
        i += 1;
    }
    let main = main.ok_or_else(|| Error::Text(format!("no main object in `{}`", tokens.join(" "))))?;
    for j in (0..main).rev() {
        if lex.role(&tokens[j]) != Some(WordRole::Adjective) {
            break;
        }
        labels[j] = Label::Attribute;
    }
    Ok(labels)
}

/// Index sets of the two decoder streams; Other tokens go to neither.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitResult {
    pub target_indices: Vec<usize>,
    pub surrounding_indices: Vec<usize>,
    pub other_indices: Vec<usize>,
}

pub fn partition_tokens(tokens: &[String], labels: &[Label]) -> Result<SplitResult> {
    if tokens.len() != labels.len() {
        return Err(Error::Text(format!("{} tokens but {} labels", tokens.len(), labels.len())));
    }
    if !labels.contains(&Label::MainObject) {
        return Err(Error::Text("no main object label".into()));
    }
    let mut s = SplitResult::default();
    for (i, l) in labels.iter().enumerate() {
        if l.is_target() {
            s.target_indices.push(i);
        } else if l.is_surrounding() {
            s.surrounding_indices.push(i);
        } else {
            s.other_indices.push(i);
        }
    }
    Ok(s)
}

/// Tokens with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSet {
    pub tokens: Vec<String>,
    pub labels: Vec<Label>,
}

impl TokenSet {
    pub fn parse(utterance: &str, lex: &Lexicon) -> Result<Self> {
        let tokens = tokenize(utterance)?;
        let labels = label_components(&tokens, lex)?;
        Ok(Self { tokens, labels })
    }

    pub fn split(&self) -> Result<SplitResult> {
        partition_tokens(&self.tokens, &self.labels)
    }
}

/// `token/Label` pairs joined by tabs.
pub fn format_decoupled(tokens: &[String], labels: &[Label]) -> String {
    tokens.iter().zip(labels).map(|(t, l)| format!("{t}/{l}")).collect::<Vec<_>>().join("\t")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(toks("the red chair."), ["the", "red", "chair", "."]);
        assert_eq!(toks("  a  b "), ["a", "b"]);
        assert_eq!(toks("The Red CHAIR"), ["the", "red", "chair"]);
        assert!(tokenize("   ").is_err());
        assert!(tokenize("").is_err());
        assert!(tokenize("chaise longue \u{e9}").is_err());
    }

    #[test]
    fn worked_example() {
        let lex = Lexicon::standard();
        let t = toks("there is a dark brown wooden chair . placed in the table of the kitchen .");
        let l = label_components(&t, &lex).unwrap();
        let get = |w: &str| l[t.iter().position(|x| x == w).unwrap()];
        assert_eq!(get("chair"), Label::MainObject);
        for w in ["dark", "brown", "wooden"] {
            assert_eq!(get(w), Label::Attribute);
        }
        assert_eq!(get("in"), Label::Relationship);
        assert_eq!(get("table"), Label::AuxiliaryObject);
        assert_eq!(get("kitchen"), Label::AuxiliaryObject);
        assert_eq!(get("placed"), Label::Other);
        assert_eq!(get("of"), Label::Other);

        let s = partition_tokens(&t, &l).unwrap();
        let words = |ix: &[usize]| ix.iter().map(|&i| t[i].as_str()).collect::<Vec<_>>();
        assert_eq!(words(&s.target_indices), ["dark", "brown", "wooden", "chair"]);
        assert_eq!(words(&s.surrounding_indices), ["in", "table", "kitchen"]);
    }

    #[test]
    fn lone_main_object() {
        let lex = Lexicon::standard();
        let t = toks("the chair .");
        let l = label_components(&t, &lex).unwrap();
        assert_eq!(l, [Label::Other, Label::MainObject, Label::Other]);
        let s = partition_tokens(&t, &l).unwrap();
        assert!(s.surrounding_indices.is_empty());
        assert_eq!(s.target_indices, [1]);
    }

    #[test]
    fn multiword_relations_and_pronouns() {
        let lex = Lexicon::standard();
        let t = toks("there is a red chair . it is in front of the table .");
        let l = label_components(&t, &lex).unwrap();
        let rel: Vec<&str> = t.iter().zip(&l).filter(|(_, l)| **l == Label::Relationship).map(|(t, _)| t.as_str()).collect();
        assert_eq!(rel, ["in", "front", "of"]);
        assert_eq!(l[6], Label::Pronoun);
        assert_eq!(l[3], Label::Attribute);
    }

    #[test]
    fn no_noun_is_error() {
        let lex = Lexicon::standard();
        assert!(label_components(&toks("the red ."), &lex).is_err());
        assert!(label_components(&toks("near the chair"), &lex).is_err());
    }

    #[test]
    fn label_names_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
        }
        let t = toks("the chair");
        assert_eq!(format_decoupled(&t, &[Label::Other, Label::MainObject]), "the/Other\tchair/MainObject");
    }
}
