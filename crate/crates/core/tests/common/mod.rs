//! Shared fixtures, oracles and backends for the integration tests.
//!
//! The oracles here deliberately avoid the library's own helpers: entropy is
//! computed in base 2, top-k by repeated argmax, fusion by explicit sums.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Mutex;

use chainmpq_core::backend::{Backend, BackendError, BackendRequest, BackendResponse};
use chainmpq_core::bench::{load_dataset, BenchSample};
use chainmpq_core::question::{is_reserved_word, Auxiliary, RelationLexicon, RelationTriple};
use chainmpq_core::MockBackend;
use proptest::prelude::*;

pub mod props;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(rel)
}

pub fn surfboard_backend() -> MockBackend {
    MockBackend::from_file(fixture("scenes/surfboard.json")).expect("surfboard fixture loads")
}

pub fn suite_backend() -> MockBackend {
    MockBackend::from_file(fixture("scenes/suite.json")).expect("suite fixture loads")
}

pub fn suite_dataset() -> Vec<BenchSample> {
    load_dataset(fixture("datasets/suite.jsonl")).expect("suite dataset loads")
}

pub const SURFBOARD_QUESTION: &str = "Does a man stand on a surfboard in the image?";

// ---- oracles ----

/// Entropy via log2, normalized by log2(M).
pub fn oracle_normalized_entropy(p: &[f64]) -> f64 {
    let total: f64 = p.iter().sum();
    let h: f64 = p
        .iter()
        .map(|x| x / total)
        .filter(|x| *x > 0.0)
        .map(|x| -x * x.log2())
        .sum();
    if p.len() <= 1 {
        0.0
    } else {
        h / (p.len() as f64).log2()
    }
}

/// Column means of every row in every layer, accumulated column-first.
pub fn oracle_mean_rows(layers: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let rows: Vec<&Vec<f64>> = layers.iter().flatten().collect();
    let m = rows[0].len();
    (0..m)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Top-k by repeated argmax; the first maximum wins ties.
pub fn oracle_topk(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(values.len()) {
        let mut best: Option<usize> = None;
        for i in 0..values.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if values[i] <= values[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn oracle_mask(values: &[f64], k: usize) -> Vec<f64> {
    let keep = oracle_topk(values, k);
    let mass: f64 = keep.iter().map(|&i| values[i]).sum();
    let mut out = vec![0.0; values.len()];
    for i in keep {
        out[i] = values[i] / mass;
    }
    out
}

/// Weighted average of masks; with `scaled`, times the mean weight.
pub fn oracle_fuse(masks: &[Vec<f64>], alphas: &[f64], scaled: bool) -> Vec<f64> {
    let m = masks[0].len();
    let total: f64 = alphas.iter().sum();
    if total == 0.0 {
        return vec![0.0; m];
    }
    let mut out = vec![0.0; m];
    for j in 0..m {
        let mut acc = 0.0;
        for (mask, a) in masks.iter().zip(alphas) {
            acc += a * mask[j];
        }
        out[j] = acc / total;
        if scaled {
            out[j] *= total / masks.len() as f64;
        }
    }
    out
}

/// Confusion counts by brute force: (tp, fp, fn, tn, unparseable).
pub fn oracle_confusion(pairs: &[(bool, Option<bool>)]) -> (usize, usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0, 0);
    for &(gold, pred) in pairs {
        match pred {
            None => c.4 += 1,
            Some(true) if gold => c.0 += 1,
            Some(true) => c.1 += 1,
            Some(false) if gold => c.2 += 1,
            Some(false) => c.3 += 1,
        }
    }
    c
}

// ---- backends ----

/// Forwards to an inner backend and keeps every request.
pub struct RecordingBackend<B> {
    pub inner: B,
    pub requests: Mutex<Vec<BackendRequest>>,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<BackendRequest> {
        std::mem::take(&mut self.requests.lock().unwrap())
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn step(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.requests.lock().unwrap().push(req.clone());
        self.inner.step(req)
    }
}

// ---- fuzzed triples ----

const NOUNS: &[&str] = &[
    "dog",
    "cat",
    "man",
    "woman",
    "child",
    "horse",
    "table",
    "chair",
    "lamp",
    "sofa",
    "bus",
    "car",
    "truck",
    "bike",
    "kite",
    "ball",
    "tree",
    "bench",
    "cup",
    "plate",
    "bottle",
    "laptop",
    "phone",
    "bag",
    "umbrella",
    "boat",
    "dock",
    "trash",
    "bin",
    "coffee",
    "window",
    "door",
    "shelf",
    "book",
    "clock",
    "vase",
    "flower",
    "pillow",
    "blanket",
    "mirror",
    "sink",
    "towel",
    "giraffe",
    "zebra",
    "elephant",
    "bear",
    "bird",
    "fence",
    "pole",
    "sign",
    "tower",
    "bridge",
    "train",
    "track",
    "helmet",
    "glove",
    "jacket",
    "shirt",
    "hat",
    "racket",
    "skateboard",
    "surfboard",
    "wave",
    "sand",
    "rock",
    "cloud",
    "sky",
    "grass",
    "field",
    "road",
    "wall",
];

const VERBS: &[&str] = &[
    "hold", "chase", "eat", "ride", "carry", "stand", "sit", "watch", "wear", "push", "pull",
    "touch", "cover", "face", "hit", "kick", "throw", "catch", "feed", "follow", "lean",
];

const GERUNDS: &[&str] = &[
    "holding", "chasing", "eating", "riding", "carrying", "standing", "sitting", "watching",
    "wearing", "pushing", "pulling", "touching", "covering", "facing", "leaning", "lying",
];

const COMPARATIVES: &[&str] = &[
    "bigger", "smaller", "taller", "shorter", "larger", "closer", "higher", "older",
];

pub fn noun_vocabulary(lexicon: &RelationLexicon) -> Vec<&'static str> {
    NOUNS
        .iter()
        .copied()
        .filter(|w| !is_reserved_word(w, lexicon))
        .collect()
}

fn noun_phrase(vocab: Vec<&'static str>) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vocab), 1..=2).prop_map(|ws| ws.join(" "))
}

fn spatial(lexicon: &RelationLexicon) -> impl Strategy<Value = String> {
    prop::sample::select(lexicon.phrases().to_vec())
}

/// Triples whose canonical question the grammar must read back exactly.
pub fn triple_strategy() -> impl Strategy<Value = RelationTriple> {
    let lexicon = RelationLexicon::default();
    let vocab = noun_vocabulary(&lexicon);
    let verbal = prop_oneof![
        prop::sample::select(VERBS).prop_map(str::to_string),
        (prop::sample::select(VERBS), spatial(&lexicon)).prop_map(|(v, p)| format!("{v} {p}")),
    ];
    let copular = prop_oneof![
        spatial(&lexicon),
        prop::sample::select(GERUNDS).prop_map(str::to_string),
        (prop::sample::select(GERUNDS), spatial(&lexicon)).prop_map(|(g, p)| format!("{g} {p}")),
        prop::sample::select(COMPARATIVES).prop_map(|c| format!("{c} than")),
    ];
    let relation_and_aux = prop_oneof![
        (
            verbal,
            prop::sample::select(vec![Auxiliary::Does, Auxiliary::Do])
        ),
        (
            copular,
            prop::sample::select(vec![Auxiliary::Is, Auxiliary::Are])
        ),
    ];
    (
        noun_phrase(vocab.clone()),
        relation_and_aux,
        noun_phrase(vocab),
    )
        .prop_map(|(s, (r, aux), o)| RelationTriple::new(&s, &r, &o, aux).expect("nonempty parts"))
}
