//! Template grammar for yes/no relational questions.
//!
//! Questions of the form `<Aux> [article] SUBJECT RELATION [article] OBJECT
//! [in the image]?` are split into a [`RelationTriple`], which then seeds the
//! five perspective sub-questions of a reasoning chain.
//!
//! The grammar is closed on purpose. Anything it cannot place is rejected as
//! [`ParseError::Unparseable`] instead of being guessed at.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("unparseable question {text:?}: {reason}")]
    Unparseable { text: String, reason: String },
    #[error("failed to read lexicon: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
}

fn unparseable<T>(text: &str, reason: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError::Unparseable {
        text: text.to_string(),
        reason: reason.into(),
    })
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const SCENE_SUFFIXES: [&[&str]; 4] = [
    &["in", "the", "image"],
    &["in", "this", "image"],
    &["in", "the", "picture"],
    &["in", "this", "picture"],
];

fn is_article(tok: &str) -> bool {
    ARTICLES.contains(&tok)
}

/// Spatial and prepositional predicates, matched longest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLexicon {
    spatial_phrases: Vec<String>,
    #[serde(skip)]
    tokenized: Vec<Vec<String>>,
}

impl RelationLexicon {
    pub fn new<I, S>(phrases: I) -> Result<Self, ParseError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut spatial_phrases: Vec<String> = Vec::new();
        for p in phrases {
            let norm = tokenize(p.as_ref()).join(" ");
            if norm.is_empty() {
                return Err(ParseError::Lexicon("empty phrase".into()));
            }
            if !spatial_phrases.contains(&norm) {
                spatial_phrases.push(norm);
            }
        }
        // Longest first; stable so equal-length phrases keep file order.
        spatial_phrases.sort_by_key(|p| std::cmp::Reverse(p.split(' ').count()));
        let tokenized = spatial_phrases
            .iter()
            .map(|p| p.split(' ').map(str::to_string).collect())
            .collect();
        Ok(Self {
            spatial_phrases,
            tokenized,
        })
    }

    /// Loads `{"spatial_phrases": [...]}`.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ParseError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ParseError> {
        #[derive(Deserialize)]
        struct Raw {
            spatial_phrases: Vec<String>,
        }
        let raw: Raw =
            serde_json::from_str(text).map_err(|e| ParseError::Lexicon(e.to_string()))?;
        Self::new(raw.spatial_phrases)
    }

    pub fn phrases(&self) -> &[String] {
        &self.spatial_phrases
    }

    /// Longest phrase starting at `tokens[start..]`, as a token count.
    fn match_at(&self, tokens: &[String], start: usize) -> Option<usize> {
        self.tokenized
            .iter()
            .find(|p| tokens[start..].starts_with(p))
            .map(Vec::len)
    }

    /// Longest phrase that ends exactly at the end of `tokens`, as a start index.
    fn suffix_match(&self, tokens: &[String]) -> Option<usize> {
        self.tokenized
            .iter()
            .find(|p| p.len() <= tokens.len() && tokens.ends_with(p))
            .map(|p| tokens.len() - p.len())
    }

    fn contains_token(&self, tok: &str) -> bool {
        self.tokenized.iter().any(|p| p.iter().any(|t| t == tok))
    }
}

impl Default for RelationLexicon {
    fn default() -> Self {
        Self::new([
            "to the left of",
            "to the right of",
            "on top of",
            "in front of",
            "on the left of",
            "on the right of",
            "next to",
            "close to",
            "far from",
            "on the side of",
            "in the middle of",
            "under",
            "underneath",
            "beneath",
            "behind",
            "above",
            "below",
            "beside",
            "near",
            "inside",
            "outside",
            "over",
            "on",
            "in",
            "at",
            "into",
            "onto",
            "with",
            "across",
            "along",
            "around",
            "against",
            "through",
            "between",
        ])
        .expect("default lexicon is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auxiliary {
    Does,
    Do,
    Is,
    Are,
}

impl Auxiliary {
    fn parse(tok: &str) -> Option<Self> {
        match tok {
            "does" => Some(Self::Does),
            "do" => Some(Self::Do),
            "is" => Some(Self::Is),
            "are" => Some(Self::Are),
            _ => None,
        }
    }

    fn is_verbal(self) -> bool {
        matches!(self, Self::Does | Self::Do)
    }

    pub fn capitalized(self) -> &'static str {
        match self {
            Self::Does => "Does",
            Self::Do => "Do",
            Self::Is => "Is",
            Self::Are => "Are",
        }
    }
}

/// `(subject, relation, object)` extracted from a relational question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub auxiliary: Auxiliary,
    pub raw: String,
}

impl RelationTriple {
    /// Builds a triple from already-normalized phrases; `raw` is set to the
    /// canonical question.
    pub fn new(
        subject: &str,
        relation: &str,
        object: &str,
        auxiliary: Auxiliary,
    ) -> Result<Self, ParseError> {
        let norm = |s: &str| tokenize(s).join(" ");
        let (subject, relation, object) = (norm(subject), norm(relation), norm(object));
        if subject.is_empty() || relation.is_empty() || object.is_empty() {
            return Err(ParseError::Unparseable {
                text: format!("{subject}|{relation}|{object}"),
                reason: "empty triple component".into(),
            });
        }
        let mut t = Self {
            subject,
            relation,
            object,
            auxiliary,
            raw: String::new(),
        };
        t.raw = canonical_question(&t);
        Ok(t)
    }

    /// True when the relation carries a negation (`not`, `n't`).
    pub fn is_negated(&self) -> bool {
        self.relation.split(' ').any(|t| t == "not" || t == "never")
    }

    /// Relation with negation tokens removed.
    pub fn positive_relation(&self) -> String {
        self.relation
            .split(' ')
            .filter(|t| *t != "not" && *t != "never")
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Component equality ignoring `raw`.
    pub fn same_parts(&self, other: &Self) -> bool {
        self.subject == other.subject
            && self.relation == other.relation
            && self.object == other.object
            && self.auxiliary == other.auxiliary
    }
}

impl fmt::Display for RelationTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

/// Lowercases, splits on whitespace and strips surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'' && c != '-')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Removes articles from a noun phrase and joins the rest.
pub fn strip_articles(phrase: &str) -> String {
    tokenize(phrase)
        .into_iter()
        .filter(|t| !is_article(t))
        .collect::<Vec<_>>()
        .join(" ")
}

// Nouns that look like verb forms.
const VERBLIKE_NOUNS: [&str; 10] = [
    "bed", "shed", "sled", "building", "ceiling", "painting", "clothing", "railing", "awning",
    "pudding",
];

fn is_gerund_or_participle(tok: &str) -> bool {
    !VERBLIKE_NOUNS.contains(&tok)
        && ((tok.len() > 4 && tok.ends_with("ing")) || (tok.len() > 3 && tok.ends_with("ed")))
}

fn is_negation(tok: &str) -> bool {
    tok == "not" || tok == "never"
}

/// Parses a yes/no relational question into a triple.
pub fn parse_relational_question(
    text: &str,
    lexicon: &RelationLexicon,
) -> Result<RelationTriple, ParseError> {
    let mut tokens = tokenize(&text.replace("n't", " not"));
    if tokens.is_empty() {
        return unparseable(text, "empty question");
    }
    let Some(auxiliary) = Auxiliary::parse(&tokens[0]) else {
        return unparseable(text, "missing leading auxiliary (does/is/are)");
    };
    tokens.remove(0);
    // "Doesn't the dog ..." puts the negation before the subject.
    let fronted_negation = tokens.first().is_some_and(|t| is_negation(t));
    if fronted_negation {
        tokens.remove(0);
    }
    for suffix in SCENE_SUFFIXES {
        let tail = tokens.len().saturating_sub(suffix.len());
        if tokens.len() > suffix.len() && tokens[tail..].iter().eq(suffix.iter()) {
            tokens.truncate(tokens.len() - suffix.len());
            break;
        }
    }
    if tokens.first().is_some_and(|t| t == "there") {
        return unparseable(text, "existential questions are not relational");
    }
    if tokens.first().is_some_and(|t| is_article(t)) {
        tokens.remove(0);
    }
    if tokens.is_empty() {
        return unparseable(text, "no subject");
    }

    // Mark tokens covered by lexicon phrases so that articles inside
    // "to the left of" are not taken as the object determiner.
    let mut covered = vec![false; tokens.len()];
    let mut i = 1;
    while i < tokens.len() {
        if let Some(len) = lexicon.match_at(&tokens, i) {
            covered[i..i + len].iter_mut().for_each(|c| *c = true);
            i += len;
        } else {
            i += 1;
        }
    }

    let object_article = (1..tokens.len())
        .rev()
        .find(|&j| is_article(&tokens[j]) && !covered[j] && j + 1 < tokens.len());
    let (head, object): (&[String], Vec<String>) = match object_article {
        Some(j) => (&tokens[..j], tokens[j + 1..].to_vec()),
        None => {
            // No determiner before the object: split after the last phrase.
            let mut last = None;
            let mut i = 1;
            while i < tokens.len() {
                if let Some(len) = lexicon.match_at(&tokens, i) {
                    last = Some(i + len);
                    i += len;
                } else {
                    i += 1;
                }
            }
            match last {
                Some(end) if end < tokens.len() => (&tokens[..end], tokens[end..].to_vec()),
                _ => return unparseable(text, "no object noun phrase found"),
            }
        }
    };
    let object: Vec<String> = object.into_iter().filter(|t| !is_article(t)).collect();
    if object.is_empty() {
        return unparseable(text, "empty object");
    }
    if head.len() < 2 {
        return unparseable(text, "cannot separate subject from relation");
    }

    let rel_start = split_subject_relation(head, auxiliary, lexicon);
    let Some(rel_start) = rel_start.filter(|&s| s >= 1 && s < head.len()) else {
        return unparseable(text, "no relation found");
    };
    let subject: Vec<&str> = head[..rel_start]
        .iter()
        .map(String::as_str)
        .filter(|t| !is_article(t))
        .collect();
    if subject.is_empty() {
        return unparseable(text, "empty subject");
    }
    let mut relation = head[rel_start..].join(" ");
    if fronted_negation {
        relation = format!("not {relation}");
    }
    Ok(RelationTriple {
        subject: subject.join(" "),
        relation,
        object: object.join(" "),
        auxiliary,
        raw: text.to_string(),
    })
}

/// Index in `head` where the relation begins.
fn split_subject_relation(
    head: &[String],
    aux: Auxiliary,
    lexicon: &RelationLexicon,
) -> Option<usize> {
    let extend_left = |mut start: usize, verbal: bool| {
        // A verb question keeps the bare verb in front of its particle.
        if verbal && start >= 2 && !is_negation(&head[start - 1]) {
            start -= 1;
        }
        while start >= 2
            && (is_negation(&head[start - 1])
                || (!verbal && is_gerund_or_participle(&head[start - 1])))
        {
            start -= 1;
        }
        start
    };

    if let Some(p) = lexicon.suffix_match(head).filter(|&p| p >= 1) {
        return Some(extend_left(p, aux.is_verbal()));
    }
    let last = head.len() - 1;
    if head[last] == "than" && head.len() >= 3 {
        // "bigger than", "more colorful than"
        let mut start = last - 1;
        if start >= 2 && matches!(head[start - 1].as_str(), "more" | "less") {
            start -= 1;
        }
        return Some(extend_left(start, false));
    }
    if aux.is_verbal() {
        let mut start = last;
        while start >= 2 && is_negation(&head[start - 1]) {
            start -= 1;
        }
        return Some(start);
    }
    if let Some(first_verb) =
        (1..head.len()).find(|&i| is_gerund_or_participle(&head[i]) || is_negation(&head[i]))
    {
        return Some(first_verb);
    }
    Some(last)
}

/// Which component a sub-question focuses on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    LocateSubject,
    LocateObject,
    MaskObject,
    MaskSubject,
    MaskRelation,
    /// The original question, asked last.
    Original,
}

impl Role {
    pub const PERSPECTIVES: [Role; 5] = [
        Role::LocateSubject,
        Role::LocateObject,
        Role::MaskObject,
        Role::MaskSubject,
        Role::MaskRelation,
    ];

    /// Relation-focused steps are the ones that record visual memory.
    pub fn is_relation_focused(self) -> bool {
        matches!(
            self,
            Role::MaskObject | Role::MaskSubject | Role::MaskRelation
        )
    }

    pub fn slug(self) -> &'static str {
        match self {
            Role::LocateSubject => "locate-subject",
            Role::LocateObject => "locate-object",
            Role::MaskObject => "mask-object",
            Role::MaskSubject => "mask-subject",
            Role::MaskRelation => "mask-relation",
            Role::Original => "original",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub index: usize,
    pub role: Role,
    pub text: String,
    pub keywords: Vec<String>,
}

/// The five perspective questions, in chain order.
pub fn generate_subquestions(t: &RelationTriple) -> [SubQuestion; 5] {
    let (s, r, o) = (&t.subject, &t.relation, &t.object);
    let make = |index: usize, role: Role, text: String, keywords: &[&String]| SubQuestion {
        index,
        role,
        text,
        keywords: keywords.iter().map(|k| k.to_string()).collect(),
    };
    [
        make(1, Role::LocateSubject, format!("Where is the {s}?"), &[s]),
        make(2, Role::LocateObject, format!("Where is the {o}?"), &[o]),
        make(3, Role::MaskObject, format!("What is the {s} {r}?"), &[s]),
        make(4, Role::MaskSubject, format!("What is {r} the {o}?"), &[o]),
        make(
            5,
            Role::MaskRelation,
            format!("What is the relationship between the {s} and the {o}?"),
            &[s, o],
        ),
    ]
}

/// `"<Aux> a S R a O in the image?"`
pub fn canonical_question(t: &RelationTriple) -> String {
    format!(
        "{} a {} {} a {} in the image?",
        t.auxiliary.capitalized(),
        t.subject,
        t.relation,
        t.object
    )
}

/// True if the word could confuse the grammar when used inside a noun.
pub fn is_reserved_word(word: &str, lexicon: &RelationLexicon) -> bool {
    is_article(word)
        || is_negation(word)
        || word == "than"
        || word == "there"
        || Auxiliary::parse(word).is_some()
        || lexicon.contains_token(word)
        || is_gerund_or_participle(word)
}
