//! Browser bindings for the interactive demo page.
//!
//! Every export takes plain values and returns a JSON string, so the page
//! needs nothing beyond `JSON.parse`. Errors come back as `{"error": "..."}`.

use chainmpq_core::memory::{adaptive_k, build_mask, AggregatedAttention};
use chainmpq_core::question::generate_subquestions;
use chainmpq_core::tensor::normalized_entropy_of;
use chainmpq_core::{
    parse_relational_question, run_chain, run_vanilla, ChainConfig, FusionMode, MockBackend,
    RelationLexicon, SceneSpec,
};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Scenes bundled with the page.
pub const BUNDLED_SCENES: &str = include_str!("../../core/fixtures/scenes/suite.json");

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// The bundled scene file as JSON.
#[wasm_bindgen]
pub fn bundled_scenes() -> String {
    BUNDLED_SCENES.to_string()
}

/// Parses a question into its triple and the five perspective questions.
#[wasm_bindgen]
pub fn parse_question(question: &str) -> String {
    respond(
        parse_relational_question(question, &RelationLexicon::default())
            .map(|t| {
                let subs = generate_subquestions(&t);
                json!({
                    "triple": t,
                    "negated": t.is_negated(),
                    "subquestions": subs,
                })
            })
            .map_err(|e| e.to_string()),
    )
}

/// Runs the baseline and the chain on one scene with attention kept.
///
/// `ablations` is a comma-separated subset of `enhancement,multi,interleaved`.
/// `fusion` is `scaled-average` or `eq6-literal`.
#[wasm_bindgen]
pub fn run_chain_demo(
    scene_json: &str,
    image: &str,
    question: &str,
    lambda: f64,
    k_max: usize,
    fusion: &str,
    ablations: &str,
) -> String {
    respond(chain_demo(
        scene_json, image, question, lambda, k_max, fusion, ablations,
    ))
}

fn chain_demo(
    scene_json: &str,
    image: &str,
    question: &str,
    lambda: f64,
    k_max: usize,
    fusion: &str,
    ablations: &str,
) -> Result<Value, String> {
    let scenes = SceneSpec::parse_all(scene_json).map_err(|e| e.to_string())?;
    let backend = MockBackend::new(scenes);
    let mut config = ChainConfig {
        lambda,
        k_max,
        keep_attention: true,
        ..ChainConfig::default()
    };
    config.fusion_mode = match fusion {
        "" | "scaled-average" => FusionMode::ScaledAverage,
        "eq6-literal" => FusionMode::Eq6Literal,
        other => return Err(format!("unknown fusion mode {other:?}")),
    };
    for name in ablations
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        match name {
            "enhancement" => config.enhance_enabled = false,
            "multi" => config.multi_perspective_enabled = false,
            "interleaved" => config.visual_memory_enabled = false,
            other => return Err(format!("unknown ablation {other:?}")),
        }
    }
    config.validate().map_err(|e| e.to_string())?;
    let vanilla = run_vanilla(&backend, image, question).map_err(|e| e.to_string())?;
    let transcript = run_chain(&backend, image, question, &config).map_err(|e| e.to_string())?;
    Ok(json!({
        "vanilla": { "answer": vanilla.answer, "label": vanilla.label.to_string() },
        "transcript": transcript,
    }))
}

/// Synthetic attention peaked at patch `(row, col)` of a `rows x cols` grid.
///
/// `sharpness` 0 gives a uniform map; larger values concentrate it. Returns
/// the map, its normalized entropy, the adaptive k and the resulting mask.
#[wasm_bindgen]
pub fn explore_mask(
    rows: usize,
    cols: usize,
    row: usize,
    col: usize,
    sharpness: f64,
    k_max: usize,
) -> String {
    respond(mask_explorer(rows, cols, row, col, sharpness, k_max))
}

fn mask_explorer(
    rows: usize,
    cols: usize,
    row: usize,
    col: usize,
    sharpness: f64,
    k_max: usize,
) -> Result<Value, String> {
    if rows == 0 || cols == 0 || rows * cols > 4096 {
        return Err(format!(
            "grid {rows}x{cols} must have between 1 and 4096 patches"
        ));
    }
    if !(sharpness.is_finite() && sharpness >= 0.0) {
        return Err(format!(
            "sharpness must be a nonnegative number, got {sharpness}"
        ));
    }
    if k_max == 0 {
        return Err("k_max must be at least 1".into());
    }
    let logits: Vec<f64> = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            let d2 = (r - row as f64).powi(2) + (c - col as f64).powi(2);
            -sharpness * d2.sqrt()
        })
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    let values: Vec<f64> = exp.iter().map(|e| e / z).collect();

    let entropy = normalized_entropy_of(&values).map_err(|e| e.to_string())?;
    let attn = AggregatedAttention::new(values.clone(), 0).map_err(|e| e.to_string())?;
    let k = adaptive_k(&attn, k_max).map_err(|e| e.to_string())?;
    let mask = build_mask(&attn, k, 1.0).map_err(|e| e.to_string())?;
    Ok(json!({
        "grid": [rows, cols],
        "attention": values,
        "entropy": entropy,
        "k": k,
        "mask": mask.values,
        "topk_indices": mask.topk_indices,
    }))
}
