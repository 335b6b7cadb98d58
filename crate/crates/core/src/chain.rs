//! The interleaved reasoning chain.
//!
//! One run asks the five perspective questions in order and then the
//! original question. Localization steps see nothing but the image. Every
//! later step receives the textual answers so far and, when visual memory is
//! on, the fused bias of all masks recorded before it. Masks come from the
//! relation-focused steps only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, BackendRequest, BackendResponse, Bias, ContextTurn, Enhance, ImageSource,
};
use crate::memory::{
    adaptive_k, aggregate_attention, build_mask, compute_alpha, fuse_masks, FusionMode,
    MemoryError, TextualMemory, VisualMemory,
};
use crate::question::{
    generate_subquestions, parse_relational_question, ParseError, RelationLexicon, RelationTriple,
    Role,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub lambda: f64,
    pub k_max: usize,
    pub n_layers: usize,
    pub fusion_mode: FusionMode,
    pub enhance_enabled: bool,
    pub enhance_residual: bool,
    pub multi_perspective_enabled: bool,
    pub visual_memory_enabled: bool,
    /// Keep aggregated attention of every step in the transcript.
    pub keep_attention: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            k_max: 20,
            n_layers: 3,
            fusion_mode: FusionMode::ScaledAverage,
            enhance_enabled: true,
            enhance_residual: false,
            multi_perspective_enabled: true,
            visual_memory_enabled: true,
            keep_attention: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), ChainError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(ChainError::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.k_max == 0 {
            return Err(ChainError::Config("k_max must be at least 1".into()));
        }
        if self.n_layers == 0 {
            return Err(ChainError::Config("n_layers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Yes,
    No,
    Unparseable,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Yes => "yes",
            Label::No => "no",
            Label::Unparseable => "unparseable",
        })
    }
}

/// Reads a yes/no decision out of free-form answer text.
pub fn answer_to_label(text: &str) -> Label {
    let decide = |tok: &str| match tok {
        "yes" => Some(Label::Yes),
        "no" => Some(Label::No),
        _ => None,
    };
    let words = |s: &str| -> Vec<String> {
        s.split(|c: char| !c.is_alphanumeric() && c != '\'')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    };
    let all = words(text);
    if let Some(label) = all.first().and_then(|w| decide(w)) {
        return label;
    }
    let first_sentence = text
        .split_terminator(['.', '!', '?', '\n'])
        .next()
        .unwrap_or("");
    words(first_sentence)
        .iter()
        .find_map(|w| decide(w))
        .unwrap_or(Label::Unparseable)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub role: Role,
    pub question: String,
    pub answer: String,
    pub confidence: f64,
    pub k: Option<usize>,
    pub topk_indices: Option<Vec<usize>>,
    pub alpha: Option<f64>,
    pub bias_applied: bool,
    /// Total bias weight delivered with this step's request.
    pub bias_mass: f64,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTranscript {
    pub image_ref: String,
    pub question: String,
    pub triple: RelationTriple,
    pub config: ChainConfig,
    pub visual_token_count: Option<usize>,
    pub grid: Option<[usize; 2]>,
    pub steps: Vec<StepRecord>,
    pub final_answer: String,
    pub final_label: Label,
    pub warnings: Vec<String>,
}

impl ChainTranscript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid chain config: {0}")]
    Config(String),
    #[error("backend failed at step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error("attention memory failed at step {step}: {source}")]
    Memory {
        step: usize,
        #[source]
        source: MemoryError,
    },
    #[error("backend protocol violation at step {step}: {message}")]
    Protocol { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaAnswer {
    pub answer: String,
    pub label: Label,
    pub confidence: f64,
}

/// The request a single-shot baseline sends.
pub fn vanilla_request(image_ref: &str, question: &str) -> BackendRequest {
    BackendRequest::plain(image_ref, question)
}

/// Asks the original question once, with no chain.
pub fn run_vanilla<B: Backend + ?Sized>(
    backend: &B,
    image_ref: &str,
    question: &str,
) -> Result<VanillaAnswer, BackendError> {
    let resp = backend.step(&vanilla_request(image_ref, question))?;
    Ok(VanillaAnswer {
        label: answer_to_label(&resp.answer),
        answer: resp.answer,
        confidence: resp.confidence,
    })
}

pub fn run_chain<B: Backend + ?Sized>(
    backend: &B,
    image_ref: &str,
    question: &str,
    config: &ChainConfig,
) -> Result<ChainTranscript, ChainError> {
    run_chain_with_lexicon(
        backend,
        image_ref,
        question,
        config,
        &RelationLexicon::default(),
    )
}

struct Step<'a> {
    index: usize,
    role: Role,
    question: &'a str,
    keywords: Vec<String>,
}

struct Runner<'a, B: ?Sized> {
    backend: &'a B,
    image_ref: &'a str,
    config: &'a ChainConfig,
    enhance: Enhance,
    text: TextualMemory,
    visual: VisualMemory,
    visual_token_count: Option<usize>,
    grid: Option<[usize; 2]>,
    steps: Vec<StepRecord>,
}

impl<B: Backend + ?Sized> Runner<'_, B> {
    fn context(&self) -> Vec<ContextTurn> {
        self.text
            .entries()
            .iter()
            .map(|e| ContextTurn {
                q: e.question.clone(),
                a: e.answer.clone(),
            })
            .collect()
    }

    fn check_response(&mut self, step: usize, resp: &BackendResponse) -> Result<(), ChainError> {
        let protocol = |message: String| ChainError::Protocol { step, message };
        if !(0.0..=1.0).contains(&resp.confidence) {
            return Err(protocol(format!(
                "confidence {} outside [0, 1]",
                resp.confidence
            )));
        }
        match self.visual_token_count {
            Some(m) if m != resp.visual_token_count => {
                return Err(protocol(format!(
                    "visual_token_count changed from {m} to {}",
                    resp.visual_token_count
                )))
            }
            _ => self.visual_token_count = Some(resp.visual_token_count),
        }
        if self.grid.is_none() {
            self.grid = resp.grid;
        }
        Ok(())
    }

    fn run_step(&mut self, step: Step<'_>) -> Result<StepRecord, ChainError> {
        let Step {
            index,
            role,
            question,
            keywords,
        } = step;
        let relation_step = role.is_relation_focused();
        let sees_memory = index >= 3;
        let mut warnings = Vec::new();

        let bias = if sees_memory && self.config.visual_memory_enabled && !self.visual.is_empty() {
            let fused = fuse_masks(&self.visual, self.config.fusion_mode).map_err(|source| {
                ChainError::Memory {
                    step: index,
                    source,
                }
            })?;
            Some(Bias::from_dense(&fused)).filter(|b| !b.is_empty())
        } else {
            None
        };
        let want_attention = relation_step || self.config.keep_attention;
        let req = BackendRequest {
            image: ImageSource::Ref(self.image_ref.to_string()),
            question: question.to_string(),
            want_attention: want_attention && !keywords.is_empty(),
            keywords,
            context: if sees_memory {
                self.context()
            } else {
                Vec::new()
            },
            bias,
            enhance: self.enhance.clone(),
        };
        let resp = self
            .backend
            .step(&req)
            .map_err(|source| ChainError::Backend {
                step: index,
                source,
            })?;
        self.check_response(index, &resp)?;
        warnings.extend(resp.warnings.iter().cloned());

        let mut record = StepRecord {
            index,
            role,
            question: question.to_string(),
            answer: resp.answer.clone(),
            confidence: resp.confidence,
            k: None,
            topk_indices: None,
            alpha: None,
            bias_applied: req.bias.is_some(),
            bias_mass: req.bias.as_ref().map_or(0.0, Bias::total_mass),
            warnings: Vec::new(),
            attention: None,
        };

        if req.want_attention {
            match &resp.attention {
                None => warnings.push("backend returned no attention".into()),
                Some(layers) => {
                    let n = self.config.n_layers;
                    if layers.len() < n {
                        warnings.push(format!(
                            "backend returned {} attention layers, fewer than n_layers = {n}",
                            layers.len()
                        ));
                    }
                    let last = &layers[layers.len().saturating_sub(n)..];
                    let memory_err = |source| ChainError::Memory {
                        step: index,
                        source,
                    };
                    let agg = aggregate_attention(last, index).map_err(memory_err)?;
                    if agg.len() != resp.visual_token_count {
                        return Err(ChainError::Protocol {
                            step: index,
                            message: format!(
                                "attention rows have length {}, visual_token_count is {}",
                                agg.len(),
                                resp.visual_token_count
                            ),
                        });
                    }
                    if relation_step {
                        let k = adaptive_k(&agg, self.config.k_max).map_err(memory_err)?;
                        let alpha = compute_alpha(resp.confidence, self.config.lambda)
                            .map_err(memory_err)?;
                        let mask = build_mask(&agg, k, alpha).map_err(memory_err)?;
                        record.k = Some(k);
                        record.topk_indices = Some(mask.topk_indices.clone());
                        record.alpha = Some(alpha);
                        if self.config.visual_memory_enabled {
                            self.visual.push(mask).map_err(memory_err)?;
                        }
                    }
                    if self.config.keep_attention {
                        record.attention = Some(agg.values().to_vec());
                    }
                }
            }
        }

        self.text.push(question, &resp.answer, resp.confidence);
        record.warnings = warnings;
        Ok(record)
    }
}

/// Runs the full chain for one question.
pub fn run_chain_with_lexicon<B: Backend + ?Sized>(
    backend: &B,
    image_ref: &str,
    question: &str,
    config: &ChainConfig,
    lexicon: &RelationLexicon,
) -> Result<ChainTranscript, ChainError> {
    config.validate()?;
    let triple = parse_relational_question(question, lexicon)?;
    let subquestions = generate_subquestions(&triple);
    let entity_keywords = vec![triple.subject.clone(), triple.object.clone()];

    let mut transcript_warnings = Vec::new();
    if triple.is_negated() {
        transcript_warnings.push(format!(
            "negated question: relation {:?} carries a negation",
            triple.relation
        ));
    }

    let mut runner = Runner {
        backend,
        image_ref,
        config,
        enhance: Enhance {
            enabled: config.enhance_enabled,
            keywords: if config.enhance_enabled {
                entity_keywords.clone()
            } else {
                Vec::new()
            },
            residual: config.enhance_enabled && config.enhance_residual,
        },
        text: TextualMemory::default(),
        visual: VisualMemory::default(),
        visual_token_count: None,
        grid: None,
        steps: Vec::new(),
    };

    let schedule: Vec<_> = if config.multi_perspective_enabled {
        subquestions.iter().collect()
    } else {
        vec![&subquestions[4]]
    };
    for sq in schedule {
        let record = runner.run_step(Step {
            index: sq.index,
            role: sq.role,
            question: &sq.text,
            keywords: sq.keywords.clone(),
        })?;
        runner.steps.push(record);
    }

    let final_keywords = if config.keep_attention {
        entity_keywords
    } else {
        Vec::new()
    };
    let final_record = runner.run_step(Step {
        index: 6,
        role: Role::Original,
        question,
        keywords: final_keywords,
    })?;
    let final_answer = final_record.answer.clone();
    runner.steps.push(final_record);

    let final_label = answer_to_label(&final_answer);
    if final_label == Label::Unparseable {
        transcript_warnings.push("final answer carries no yes/no decision".into());
    }
    Ok(ChainTranscript {
        image_ref: image_ref.to_string(),
        question: question.to_string(),
        triple,
        config: config.clone(),
        visual_token_count: runner.visual_token_count,
        grid: runner.grid,
        steps: runner.steps,
        final_answer,
        final_label,
        warnings: transcript_warnings,
    })
}
