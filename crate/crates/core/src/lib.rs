//! Training-free relation reasoning chains for vision-language models.
//!
//! A yes/no relational question ("Does a man stand on a surfboard?") is
//! parsed into subject, relation and object, decomposed into five
//! perspective questions, and asked step by step against a [`Backend`].
//! Answers accumulate as textual context; keyword attention from the
//! relation-focused steps becomes top-k bias masks that steer visual
//! attention in later steps.
//!
//! Modules:
//! - [`tensor`]: softmax, biased attention, keyword cross-attention, entropy
//! - [`question`]: relational question grammar and sub-question templates
//! - [`memory`]: attention aggregation, adaptive top-k masks, mask fusion
//! - [`backend`]: backend trait, wire protocol, mock scenes, HTTP client
//! - [`chain`]: the reasoning chain and the single-shot baseline
//! - [`bench`]: dataset loading, metrics, evaluation and sweeps
//! - [`heatmap`]: PGM heat maps of recorded attention

pub mod backend;
pub mod bench;
pub mod chain;
pub mod heatmap;
pub mod memory;
pub mod question;
pub mod tensor;

pub use backend::{Backend, BackendError, BackendRequest, BackendResponse, MockBackend, SceneSpec};
pub use chain::{answer_to_label, run_chain, run_vanilla, ChainConfig, ChainTranscript, Label};
pub use memory::FusionMode;
pub use question::{parse_relational_question, RelationLexicon, RelationTriple};
