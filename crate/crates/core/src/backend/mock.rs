//! Deterministic scene-graph stand-in for a vision-language model.
//!
//! A scene is a patch grid with named objects, gold relations and scripted
//! language-prior errors. Yes/no questions matching a prior get the scripted
//! (wrong) answer unless the request's bias puts at least `θ` mass on the
//! subject and object patches. Localization and open relation questions are
//! answered from the scene graph, and keyword attention is synthesized from
//! object patch sets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendError, BackendRequest, BackendResponse, ImageSource};
use crate::question::{parse_relational_question, strip_articles, tokenize, RelationLexicon};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read scene file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scene JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scene {scene:?}: {reason}")]
    Invalid { scene: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    /// Flat patch indices, row-major.
    #[serde(default)]
    pub patches: BTreeSet<usize>,
    /// `[row, col, rows, cols]` block, merged into `patches` on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRelation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    /// Other phrasings that also count as this relation ("ride", "rides on").
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl GoldRelation {
    fn matches_predicate(&self, relation: &str) -> bool {
        let norm = |s: &str| tokenize(s).join(" ");
        norm(&self.predicate) == relation || self.aliases.iter().any(|a| norm(a) == relation)
    }
}

/// A scripted language-prior error: questions containing `pattern` get
/// `answer` unless corrected by bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub pattern: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfidence {
    pub localization: f64,
    pub relation: f64,
    #[serde(rename = "final")]
    pub final_answer: f64,
}

impl Default for ScriptedConfidence {
    fn default() -> Self {
        Self {
            localization: 0.9,
            relation: 0.7,
            final_answer: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    /// `[rows, cols]` of the patch grid.
    pub grid: [usize; 2],
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub relations: Vec<GoldRelation>,
    #[serde(default)]
    pub priors: Vec<Prior>,
    pub noise_epsilon: f64,
    pub correction_threshold: f64,
    #[serde(default)]
    pub confidence: ScriptedConfidence,
}

impl SceneSpec {
    pub fn visual_token_count(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Resolves `rect` blocks and checks invariants.
    pub fn validated(mut self) -> Result<Self, SceneError> {
        let invalid = |reason: String| SceneError::Invalid {
            scene: self.id.clone(),
            reason,
        };
        let [rows, cols] = self.grid;
        let m = rows * cols;
        if m == 0 {
            return Err(invalid("grid has no patches".into()));
        }
        if !(0.0..1.0).contains(&self.noise_epsilon) {
            return Err(invalid(format!(
                "noise_epsilon {} outside [0, 1)",
                self.noise_epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.correction_threshold) {
            return Err(invalid(format!(
                "correction_threshold {} outside [0, 1]",
                self.correction_threshold
            )));
        }
        let c = self.confidence;
        for v in [c.localization, c.relation, c.final_answer] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("scripted confidence {v} outside [0, 1]")));
            }
        }
        let mut names = BTreeSet::new();
        for obj in &mut self.objects {
            obj.name = strip_articles(&obj.name);
            if obj.name.is_empty() || !names.insert(obj.name.clone()) {
                return Err(SceneError::Invalid {
                    scene: self.id.clone(),
                    reason: format!("object name {:?} is empty or duplicated", obj.name),
                });
            }
            if let Some([r0, c0, h, w]) = obj.rect.take() {
                if r0 + h > rows || c0 + w > cols {
                    return Err(SceneError::Invalid {
                        scene: self.id.clone(),
                        reason: format!("rect of {:?} leaves the grid", obj.name),
                    });
                }
                for r in r0..r0 + h {
                    obj.patches.extend((c0..c0 + w).map(|c| r * cols + c));
                }
            }
            if obj.patches.is_empty() || obj.patches.iter().any(|&p| p >= m) {
                return Err(SceneError::Invalid {
                    scene: self.id.clone(),
                    reason: format!("patches of {:?} empty or outside [0, {m})", obj.name),
                });
            }
        }
        for rel in &mut self.relations {
            rel.subject = strip_articles(&rel.subject);
            rel.object = strip_articles(&rel.object);
            for end in [&rel.subject, &rel.object] {
                if !names.contains(end) {
                    return Err(SceneError::Invalid {
                        scene: self.id.clone(),
                        reason: format!("relation mentions unknown object {end:?}"),
                    });
                }
            }
        }
        Ok(self)
    }

    pub fn object(&self, name: &str) -> Option<&SceneObject> {
        let name = strip_articles(name);
        self.objects.iter().find(|o| o.name == name)
    }

    /// Reads a file holding one scene object or an array of scenes.
    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<SceneSpec>, SceneError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_all(&text)
    }

    pub fn parse_all(text: &str) -> Result<Vec<SceneSpec>, SceneError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum OneOrMany {
            Many(Vec<SceneSpec>),
            Suite { scenes: Vec<SceneSpec> },
            One(Box<SceneSpec>),
        }
        let scenes = match serde_json::from_str::<OneOrMany>(text) {
            Ok(OneOrMany::Many(v)) | Ok(OneOrMany::Suite { scenes: v }) => v,
            Ok(OneOrMany::One(s)) => vec![*s],
            // Re-parse as a single scene for a precise error message.
            Err(_) => vec![serde_json::from_str::<SceneSpec>(text)?],
        };
        scenes.into_iter().map(SceneSpec::validated).collect()
    }

    /// Coarse region name for an object's patch centroid.
    fn region_of(&self, obj: &SceneObject) -> &'static str {
        let [rows, cols] = self.grid;
        let n = obj.patches.len() as f64;
        let (r, c) = obj.patches.iter().fold((0.0, 0.0), |(r, c), &p| {
            (r + (p / cols) as f64 + 0.5, c + (p % cols) as f64 + 0.5)
        });
        let third =
            |x: f64, extent: usize| ((x / n) * 3.0 / extent as f64).floor().min(2.0) as usize;
        const REGIONS: [[&str; 3]; 3] = [
            ["top-left", "top", "top-right"],
            ["left", "center", "right"],
            ["bottom-left", "bottom", "bottom-right"],
        ];
        REGIONS[third(r, rows)][third(c, cols)]
    }
}

/// The kind of question, recovered from the chain's templates.
#[derive(Debug, Clone, PartialEq)]
enum QuestionForm {
    Locate(String),
    SubjectKnown(String),
    ObjectKnown(String),
    Pair(String, String),
    YesNo(crate::question::RelationTriple),
    Unknown,
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    scenes: BTreeMap<String, SceneSpec>,
    n_layers: usize,
    lexicon: RelationLexicon,
}

impl MockBackend {
    pub const DEFAULT_LAYERS: usize = 3;

    pub fn new(scenes: impl IntoIterator<Item = SceneSpec>) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.id.clone(), s)).collect(),
            n_layers: Self::DEFAULT_LAYERS,
            lexicon: RelationLexicon::default(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        Ok(Self::new(SceneSpec::load_all(path)?))
    }

    /// Number of synthesized attention layers per response.
    pub fn with_layers(mut self, n_layers: usize) -> Self {
        self.n_layers = n_layers.max(1);
        self
    }

    pub fn with_lexicon(mut self, lexicon: RelationLexicon) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn scene(&self, id: &str) -> Option<&SceneSpec> {
        self.scenes.get(id)
    }

    pub fn scenes(&self) -> impl Iterator<Item = &SceneSpec> {
        self.scenes.values()
    }

    fn find_object_at_start<'s>(scene: &'s SceneSpec, words: &[String]) -> Option<&'s SceneObject> {
        scene
            .objects
            .iter()
            .filter(|o| {
                let name: Vec<String> = o.name.split(' ').map(str::to_string).collect();
                words.starts_with(&name)
            })
            .max_by_key(|o| o.name.len())
    }

    fn find_object_at_end<'s>(scene: &'s SceneSpec, words: &[String]) -> Option<&'s SceneObject> {
        scene
            .objects
            .iter()
            .filter(|o| {
                let name: Vec<String> = o.name.split(' ').map(str::to_string).collect();
                words.ends_with(&name)
            })
            .max_by_key(|o| o.name.len())
    }

    fn classify(&self, scene: &SceneSpec, question: &str) -> QuestionForm {
        let words = tokenize(question);
        let w: Vec<&str> = words.iter().map(String::as_str).collect();
        let noun_phrase = |ws: &[String]| {
            ws.iter()
                .map(String::as_str)
                .filter(|t| !matches!(*t, "a" | "an" | "the"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        match w.as_slice() {
            ["where", "is", rest @ ..] if !rest.is_empty() => {
                QuestionForm::Locate(noun_phrase(&words[2..]))
            }
            ["what", "is", "the", "relationship", "between", ..] => {
                let rest = &words[5..];
                match rest.iter().position(|t| t == "and") {
                    Some(i) => {
                        QuestionForm::Pair(noun_phrase(&rest[..i]), noun_phrase(&rest[i + 1..]))
                    }
                    None => QuestionForm::Unknown,
                }
            }
            ["what", "is", "the", ..] => {
                let rest: Vec<String> = words[3..].to_vec();
                match Self::find_object_at_start(scene, &rest) {
                    Some(o) => QuestionForm::SubjectKnown(o.name.clone()),
                    None => QuestionForm::Unknown,
                }
            }
            ["what", "is", ..] => match Self::find_object_at_end(scene, &words[2..]) {
                Some(o) => QuestionForm::ObjectKnown(o.name.clone()),
                None => QuestionForm::Unknown,
            },
            _ => match parse_relational_question(question, &self.lexicon) {
                Ok(t) => QuestionForm::YesNo(t),
                Err(_) => QuestionForm::Unknown,
            },
        }
    }

    fn describe(rel: &GoldRelation) -> String {
        format!(
            "The {} is {} the {}.",
            rel.subject, rel.predicate, rel.object
        )
    }

    fn relations_where(
        scene: &SceneSpec,
        pred: impl Fn(&GoldRelation) -> bool,
    ) -> Vec<&GoldRelation> {
        scene.relations.iter().filter(|r| pred(r)).collect()
    }

    fn answer(
        &self,
        scene: &SceneSpec,
        req: &BackendRequest,
    ) -> Result<(String, f64), BackendError> {
        let conf = scene.confidence;
        let joined = |rels: Vec<&GoldRelation>| {
            rels.into_iter()
                .map(Self::describe)
                .collect::<Vec<_>>()
                .join(" ")
        };
        Ok(match self.classify(scene, &req.question) {
            QuestionForm::Locate(name) => match scene.object(&name) {
                Some(o) => (
                    format!(
                        "The {} is in the {} of the image.",
                        o.name,
                        scene.region_of(o)
                    ),
                    conf.localization,
                ),
                None => (
                    format!("There is no {name} in the image."),
                    conf.localization,
                ),
            },
            QuestionForm::SubjectKnown(s) => {
                let rels = Self::relations_where(scene, |r| r.subject == s);
                if rels.is_empty() {
                    (
                        format!("The {s} is not interacting with anything."),
                        conf.relation,
                    )
                } else {
                    (joined(rels), conf.relation)
                }
            }
            QuestionForm::ObjectKnown(o) => {
                let rels = Self::relations_where(scene, |r| r.object == o);
                if rels.is_empty() {
                    (
                        format!("Nothing is interacting with the {o}."),
                        conf.relation,
                    )
                } else {
                    (joined(rels), conf.relation)
                }
            }
            QuestionForm::Pair(s, o) => {
                let rels = Self::relations_where(scene, |r| {
                    (r.subject == s && r.object == o) || (r.subject == o && r.object == s)
                });
                if rels.is_empty() {
                    (
                        format!("There is no clear relationship between the {s} and the {o}."),
                        conf.relation,
                    )
                } else {
                    (joined(rels), conf.relation)
                }
            }
            QuestionForm::YesNo(t) => {
                let m = scene.visual_token_count();
                let mut focus = BTreeSet::new();
                for name in [&t.subject, &t.object] {
                    if let Some(o) = scene.object(name) {
                        focus.extend(o.patches.iter().copied());
                    }
                }
                let corrected = match &req.bias {
                    Some(b) => {
                        b.to_dense(m)?;
                        b.mass_on(&focus) >= scene.correction_threshold
                    }
                    None => false,
                };
                let normalized = format!(" {} ", tokenize(&req.question).join(" "));
                let prior = scene.priors.iter().find(|p| {
                    normalized.contains(&format!(" {} ", tokenize(&p.pattern).join(" ")))
                });
                match prior {
                    Some(p) if !corrected => (p.answer.clone(), conf.final_answer),
                    _ => {
                        let relation = t.positive_relation();
                        let holds = scene.relations.iter().any(|r| {
                            r.subject == t.subject
                                && r.object == t.object
                                && r.matches_predicate(&relation)
                        });
                        let truth = holds != t.is_negated();
                        let text = if truth {
                            "Yes.".to_string()
                        } else {
                            match scene
                                .relations
                                .iter()
                                .find(|r| r.subject == t.subject && r.object == t.object)
                            {
                                Some(r) if !t.is_negated() => {
                                    format!("No, {}", lowercase_first(&Self::describe(r)))
                                }
                                _ => "No.".to_string(),
                            }
                        };
                        (text, conf.final_answer)
                    }
                }
            }
            QuestionForm::Unknown => ("I cannot tell from the image.".to_string(), conf.relation),
        })
    }

    /// One row per keyword: `1-ε` spread over the object's patches, `ε`
    /// over the rest. Unknown keywords get a uniform row.
    pub fn attention_row(scene: &SceneSpec, keyword: &str) -> (Vec<f64>, bool) {
        let m = scene.visual_token_count();
        match scene.object(keyword) {
            Some(o) if o.patches.len() < m => {
                let eps = scene.noise_epsilon;
                let inside = (1.0 - eps) / o.patches.len() as f64;
                let outside = eps / (m - o.patches.len()) as f64;
                let row = (0..m)
                    .map(|i| {
                        if o.patches.contains(&i) {
                            inside
                        } else {
                            outside
                        }
                    })
                    .collect();
                (row, true)
            }
            Some(_) => (vec![1.0 / m as f64; m], true),
            None => (vec![1.0 / m as f64; m], false),
        }
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

impl Backend for MockBackend {
    fn step(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let scene = match &req.image {
            ImageSource::Ref(id) => self
                .scenes
                .get(id)
                .ok_or_else(|| BackendError::NotFound(id.clone()))?,
            ImageSource::Inline(_) => {
                return Err(BackendError::NotFound(
                    "mock backend only serves scenes by image_ref".into(),
                ))
            }
        };
        if let Some(b) = &req.bias {
            if b.indices.len() != b.weights.len()
                || b.weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            {
                return Err(BackendError::InvalidRequest(
                    "bias weights must be finite, nonnegative and paired with indices".into(),
                ));
            }
        }
        if req.want_attention && req.keywords.is_empty() {
            return Err(BackendError::InvalidRequest(
                "want_attention requires keywords".into(),
            ));
        }
        let (answer, confidence) = self.answer(scene, req)?;
        let mut warnings = Vec::new();
        let attention = req.want_attention.then(|| {
            let rows: Vec<Vec<f64>> = req
                .keywords
                .iter()
                .map(|k| {
                    let (row, found) = Self::attention_row(scene, k);
                    if !found {
                        warnings.push(format!(
                            "keyword {k:?} not found in scene; uniform attention"
                        ));
                    }
                    row
                })
                .collect();
            vec![rows; self.n_layers]
        });
        Ok(BackendResponse {
            answer,
            confidence,
            visual_token_count: scene.visual_token_count(),
            attention,
            warnings,
            grid: Some(scene.grid),
        })
    }
}
