//! Equation properties as plain check functions over generated inputs, so
//! both the proptest suites and the acceptance runner drive the same code.

use chainmpq_core::memory::{
    adaptive_k, aggregate_attention, build_mask, compute_alpha, fuse_masks, AggregatedAttention,
    FusionMode, VisualMemory,
};
use chainmpq_core::tensor::{
    attention_with_bias, cross_attention_enhance, normalized_entropy_of, softmax_rows, Matrix,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use super::{oracle_fuse, oracle_mask, oracle_mean_rows, oracle_normalized_entropy, oracle_topk};

const EPS: f64 = 1e-9;

fn close(a: f64, b: f64, what: &str) -> Result<(), TestCaseError> {
    prop_assert!(
        (a - b).abs() <= EPS * (1.0 + a.abs().max(b.abs())),
        "{what}: {a} vs {b}"
    );
    Ok(())
}

pub fn matrix(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-8.0f64..8.0, r * c).prop_map(move |v| Matrix::new(r, c, v).unwrap())
    })
}

/// Strictly positive attention-like vector.
pub fn positive_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3f64..1.0, len)
}

// ---- softmax, biased attention, enhancement ----

pub fn softmax_normalizes((m, shift): (Matrix, f64)) -> Result<(), TestCaseError> {
    let s = softmax_rows(&m).unwrap();
    for r in 0..s.rows() {
        close(s.row(r).iter().sum(), 1.0, "row sum")?;
        prop_assert!(s.row(r).iter().all(|&x| x > 0.0));
    }
    let shifted = Matrix::new(
        m.rows(),
        m.cols(),
        m.values().iter().map(|v| v + shift).collect(),
    )
    .unwrap();
    let t = softmax_rows(&shifted).unwrap();
    for (a, b) in s.values().iter().zip(t.values()) {
        close(*a, *b, "shift invariance")?;
    }
    Ok(())
}

pub fn softmax_input() -> impl Strategy<Value = (Matrix, f64)> {
    (matrix(1..5, 1..9), -50.0f64..50.0)
}

/// Zero bias reproduces plain attention; a row-constant bias changes nothing.
pub fn bias_neutral_cases(
    (q, k, v, c): (Matrix, Matrix, Matrix, f64),
) -> Result<(), TestCaseError> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let zero = Matrix::zeros(q.rows(), k.rows());
    let plain = softmax_rows(&q.matmul(&k.transpose()).unwrap().scale(scale))
        .unwrap()
        .matmul(&v)
        .unwrap();
    let a = attention_with_bias(&q, &k, &v, &zero, scale).unwrap();
    let constant = Matrix::new(q.rows(), k.rows(), vec![c; q.rows() * k.rows()]).unwrap();
    let b = attention_with_bias(&q, &k, &v, &constant, scale).unwrap();
    for ((x, y), z) in plain.values().iter().zip(a.values()).zip(b.values()) {
        close(*x, *y, "zero bias")?;
        close(*x, *z, "constant bias")?;
    }
    Ok(())
}

pub fn attention_input() -> impl Strategy<Value = (Matrix, Matrix, Matrix, f64)> {
    (1usize..4, 1usize..6, 1usize..5, 1usize..4).prop_flat_map(|(nq, nk, d, dv)| {
        (
            matrix(nq..nq + 1, d..d + 1),
            matrix(nk..nk + 1, d..d + 1),
            matrix(nk..nk + 1, dv..dv + 1),
            -5.0f64..5.0,
        )
    })
}

/// Every enhanced token is a convex combination of keyword rows.
pub fn enhance_is_convex((v, x): (Matrix, Matrix)) -> Result<(), TestCaseError> {
    let out = cross_attention_enhance(&v, &x).unwrap();
    prop_assert_eq!(out.rows(), v.rows());
    prop_assert_eq!(out.cols(), x.cols());
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let col: Vec<f64> = (0..x.rows()).map(|i| x.get(i, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.get(r, c) >= lo - EPS && out.get(r, c) <= hi + EPS);
        }
    }
    // A single keyword row is copied to every visual token.
    let one = Matrix::from_rows(&[x.row(0).to_vec()]).unwrap();
    let copied = cross_attention_enhance(&v, &one).unwrap();
    for r in 0..copied.rows() {
        for (a, b) in copied.row(r).iter().zip(x.row(0)) {
            close(*a, *b, "single keyword")?;
        }
    }
    Ok(())
}

pub fn enhance_input() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..5, 1usize..5, 1usize..6)
        .prop_flat_map(|(nv, nx, d)| (matrix(nv..nv + 1, d..d + 1), matrix(nx..nx + 1, d..d + 1)))
}

// ---- entropy and adaptive k ----

pub fn entropy_matches_oracle(p: Vec<f64>) -> Result<(), TestCaseError> {
    let total: f64 = p.iter().sum();
    let normalized: Vec<f64> = p.iter().map(|x| x / total).collect();
    let h = normalized_entropy_of(&normalized).unwrap();
    prop_assert!((0.0..=1.0).contains(&h));
    close(h, oracle_normalized_entropy(&p), "entropy")?;
    Ok(())
}

pub fn adaptive_k_bounds((p, q, k_max): (Vec<f64>, Vec<f64>, usize)) -> Result<(), TestCaseError> {
    let m = p.len();
    let a = AggregatedAttention::new(p.clone(), 3).unwrap();
    let k = adaptive_k(&a, k_max).unwrap();
    prop_assert!(k >= 1 && k <= k_max.min(m), "k = {k}");
    // monotone in k_max
    let k_more = adaptive_k(&a, k_max + 7).unwrap();
    prop_assert!(k_more >= k);
    // monotone in entropy for a same-length second vector
    let q: Vec<f64> = q.into_iter().cycle().take(m).collect();
    let b = AggregatedAttention::new(q.clone(), 3).unwrap();
    let (hp, hq) = (oracle_normalized_entropy(&p), oracle_normalized_entropy(&q));
    let kb = adaptive_k(&b, k_max).unwrap();
    if hp + 1e-12 < hq {
        prop_assert!(k <= kb);
    }
    // extremes
    let uniform = AggregatedAttention::new(vec![1.0; m], 3).unwrap();
    prop_assert_eq!(adaptive_k(&uniform, k_max).unwrap(), k_max.min(m));
    let mut hot = vec![0.0; m];
    hot[m / 2] = 1.0;
    let one_hot = AggregatedAttention::new(hot, 3).unwrap();
    prop_assert_eq!(adaptive_k(&one_hot, k_max).unwrap(), 1);
    Ok(())
}

pub fn adaptive_k_input() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (positive_vec(2..200), positive_vec(1..50), 1usize..150)
}

// ---- aggregation ----

/// Two layer stacks of equal shape and two mixing weights.
pub type AggregationCase = (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>, f64, f64);

pub fn aggregation_linear((layers, other, a, b): AggregationCase) -> Result<(), TestCaseError> {
    let agg = aggregate_attention(&layers, 3).unwrap();
    for (x, y) in agg.values().iter().zip(oracle_mean_rows(&layers)) {
        close(*x, y, "mean oracle")?;
    }
    let combo: Vec<Vec<Vec<f64>>> = layers
        .iter()
        .zip(&other)
        .map(|(l1, l2)| {
            l1.iter()
                .zip(l2)
                .map(|(r1, r2)| r1.iter().zip(r2).map(|(x, y)| a * x + b * y).collect())
                .collect()
        })
        .collect();
    let lhs = aggregate_attention(&combo, 3).unwrap();
    let rhs = aggregate_attention(&other, 3).unwrap();
    for ((l, x), y) in lhs.values().iter().zip(agg.values()).zip(rhs.values()) {
        close(*l, a * x + b * y, "linearity")?;
    }
    // identity: one layer, one row
    let single = vec![vec![layers[0][0].clone()]];
    let single_agg = aggregate_attention(&single, 3).unwrap();
    prop_assert_eq!(single_agg.values(), &layers[0][0][..]);
    // identical rows everywhere
    let same = vec![vec![layers[0][0].clone(); 3]; 4];
    for (x, y) in aggregate_attention(&same, 3)
        .unwrap()
        .values()
        .iter()
        .zip(&layers[0][0])
    {
        close(*x, *y, "identical rows")?;
    }
    Ok(())
}

pub fn aggregation_input() -> impl Strategy<Value = AggregationCase> {
    (1usize..4, 1usize..4, 1usize..20).prop_flat_map(|(n, t, m)| {
        let tensor = || {
            prop::collection::vec(
                prop::collection::vec(positive_vec(m..m + 1), t..t + 1),
                n..n + 1,
            )
        };
        (tensor(), tensor(), 0.01f64..3.0, 0.01f64..3.0)
    })
}

// ---- masks ----

pub fn mask_properties((values, k, scale): (Vec<f64>, usize, f64)) -> Result<(), TestCaseError> {
    let m = values.len();
    let k = k.clamp(1, m);
    let attn = AggregatedAttention::new(values.clone(), 4).unwrap();
    let mask = build_mask(&attn, k, 1.0).unwrap();
    let support = mask.values.iter().filter(|v| **v > 0.0).count();
    prop_assert_eq!(support, k);
    close(mask.values.iter().sum(), 1.0, "mask sum")?;
    prop_assert_eq!(&mask.topk_indices, &oracle_topk(&values, k));
    for (a, b) in mask.values.iter().zip(oracle_mask(&values, k)) {
        close(*a, b, "mask oracle")?;
    }
    let scaled = AggregatedAttention::new(values.iter().map(|v| v * scale).collect(), 4).unwrap();
    let again = build_mask(&scaled, k, 1.0).unwrap();
    prop_assert_eq!(&again.topk_indices, &mask.topk_indices);
    for (a, b) in again.values.iter().zip(&mask.values) {
        close(*a, *b, "scale invariance")?;
    }
    Ok(())
}

pub fn mask_input() -> impl Strategy<Value = (Vec<f64>, usize, f64)> {
    // Coarse values so ties actually occur.
    (
        prop::collection::vec((1u32..6).prop_map(|x| x as f64 / 5.0), 1..40),
        1usize..50,
        0.01f64..100.0,
    )
}

// ---- fusion ----

fn memory_of(masks: &[(Vec<f64>, usize, f64)]) -> (VisualMemory, Vec<Vec<f64>>, Vec<f64>) {
    let mut mem = VisualMemory::default();
    let mut dense = Vec::new();
    let mut alphas = Vec::new();
    for (j, (values, k, conf)) in masks.iter().enumerate() {
        let attn = AggregatedAttention::new(values.clone(), 3 + j).unwrap();
        let alpha = compute_alpha(*conf, 5.0).unwrap();
        let mask = build_mask(&attn, (*k).clamp(1, values.len()), alpha).unwrap();
        dense.push(mask.values.clone());
        alphas.push(alpha);
        mem.push(mask).unwrap();
    }
    (mem, dense, alphas)
}

pub fn fusion_properties(masks: Vec<(Vec<f64>, usize, f64)>) -> Result<(), TestCaseError> {
    let (mem, dense, alphas) = memory_of(&masks);
    let literal = fuse_masks(&mem, FusionMode::Eq6Literal).unwrap();
    let scaled = fuse_masks(&mem, FusionMode::ScaledAverage).unwrap();
    for (a, b) in literal.iter().zip(oracle_fuse(&dense, &alphas, false)) {
        close(*a, b, "literal oracle")?;
    }
    for (a, b) in scaled.iter().zip(oracle_fuse(&dense, &alphas, true)) {
        close(*a, b, "scaled oracle")?;
    }
    if alphas.iter().sum::<f64>() > 0.0 {
        close(literal.iter().sum(), 1.0, "literal mass")?;
        for (i, v) in literal.iter().enumerate() {
            let lo = dense.iter().map(|d| d[i]).fold(f64::INFINITY, f64::min);
            let hi = dense.iter().map(|d| d[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - EPS && *v <= hi + EPS, "convexity at {i}");
        }
    } else {
        prop_assert!(literal.iter().chain(&scaled).all(|v| *v == 0.0));
    }
    // A single mask in scaled mode is exactly α·M.
    let (one, d1, a1) = memory_of(&masks[..1]);
    let fused = fuse_masks(&one, FusionMode::ScaledAverage).unwrap();
    for (f, m) in fused.iter().zip(&d1[0]) {
        close(*f, a1[0] * m, "single mask reduction")?;
    }
    Ok(())
}

pub fn fusion_input() -> impl Strategy<Value = Vec<(Vec<f64>, usize, f64)>> {
    (2usize..30).prop_flat_map(|m| {
        prop::collection::vec(
            (
                positive_vec(m..m + 1),
                1usize..30,
                prop_oneof![Just(0.0), 0.0f64..=1.0],
            ),
            1..5,
        )
    })
}

/// Runs one property outside the proptest macro; used by the acceptance runner.
pub fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    check: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(
            proptest::test_runner::RngAlgorithm::ChaCha,
        ),
    );
    runner.run(&strategy, check).map_err(|e| e.to_string())
}
