//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use chainmpq_core::backend::wire::{validate_request, validate_response, WireErrorKind};
use chainmpq_core::backend::{
    validate_wire, Backend, BackendRequest, Bias, Direction, MockBackend,
};
use chainmpq_core::bench::{
    compute_metrics, evaluate, sweep, write_sweep_csv, Counts, RunnerKind, DEFAULT_SWEEP_K_MAXES,
    DEFAULT_SWEEP_LAMBDAS,
};
use chainmpq_core::heatmap::{emit_heatmaps, render_pgm, sidecars, HeatmapSidecar};
use chainmpq_core::memory::{
    adaptive_k, aggregate_attention, build_mask, fuse_masks, AggregatedAttention, FusionMode,
    VisualMemory,
};
use chainmpq_core::question::{canonical_question, parse_relational_question, RelationLexicon};
use chainmpq_core::tensor::{cross_attention_enhance, normalized_entropy_of, softmax_rows, Matrix};
use chainmpq_core::{run_chain, run_vanilla, ChainConfig, Label};
use common::props::*;
use common::*;
use serde::Deserialize;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
/// Row count, whether every metric is populated, cell order and CSV bytes.
type SweepRun = (usize, bool, Vec<(f64, usize)>, Vec<u8>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn near(a: f64, b: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= 1e-9, || {
        format!("{what}: got {a}, expected {b}")
    })
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn equation_suite() -> Outcome {
    let start = Instant::now();
    let cases = 256;
    run_property(cases, softmax_input(), softmax_normalizes)?;
    run_property(cases, attention_input(), bias_neutral_cases)?;
    run_property(cases, enhance_input(), enhance_is_convex)?;
    run_property(cases, positive_vec(1..300), entropy_matches_oracle)?;
    run_property(cases, adaptive_k_input(), adaptive_k_bounds)?;
    run_property(cases, aggregation_input(), aggregation_linear)?;
    run_property(cases, mask_input(), mask_properties)?;
    run_property(cases, fusion_input(), fusion_properties)?;
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "8 properties x {cases} cases in {:?}",
        start.elapsed()
    ))
}

fn hand_oracles() -> Outcome {
    // softmax of [0, ln 3]: e^0 = 1, e^ln3 = 3
    let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap()).unwrap();
    near(s.get(0, 0), 1.0 / 4.0, "softmax[0]")?;
    near(s.get(0, 1), 3.0 / 4.0, "softmax[1]")?;

    // v orthogonal to two orthonormal keyword rows: equal logits, mean row
    let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let v = Matrix::from_rows(&[vec![0.0, 0.0, 2.0]]).unwrap();
    let e = cross_attention_enhance(&v, &x).unwrap();
    for (got, want) in e.row(0).iter().zip([0.5, 0.5, 0.0]) {
        near(*got, want, "enhanced row")?;
    }

    // entropy of [0.5, 0.25, 0.25]: H = 1.5 ln 2, over ln 3; oracle works in bits
    let p = [0.5, 0.25, 0.25];
    let by_hand = 1.5 * 2f64.ln() / 3f64.ln();
    let oracle = oracle_normalized_entropy(&p);
    near(oracle, by_hand, "oracle vs hand entropy")?;
    near(normalized_entropy_of(&p).unwrap(), oracle, "entropy")?;
    ensure((oracle - 0.9464).abs() < 1e-4, || {
        format!("entropy {oracle}")
    })?;
    let k = adaptive_k(&AggregatedAttention::new(p.to_vec(), 3).unwrap(), 20).unwrap();
    // ⌊20 · 0.9464⌋ = ⌊18.93⌋ = 18, then capped at M = 3
    let uncapped = (20.0 * oracle).floor() as usize;
    ensure(uncapped == 18, || format!("uncapped k {uncapped}"))?;
    ensure(k == uncapped.clamp(1, p.len()), || format!("k {k}"))?;

    // mask of [0.4, 0.3, 0.2, 0.1] with k = 2
    let attn = AggregatedAttention::new(vec![0.4, 0.3, 0.2, 0.1], 3).unwrap();
    let mask = build_mask(&attn, 2, 1.0).unwrap();
    let oracle_m = oracle_mask(&[0.4, 0.3, 0.2, 0.1], 2);
    for (i, want) in [4.0 / 7.0, 3.0 / 7.0, 0.0, 0.0].into_iter().enumerate() {
        near(oracle_m[i], want, "oracle mask")?;
        near(mask.values[i], want, "mask")?;
    }
    ensure(mask.topk_indices == [0, 1], || {
        format!("{:?}", mask.topk_indices)
    })?;

    // metrics TP=2, FP=1, FN=1, TN=2
    let pairs = [
        (true, Some(true)),
        (true, Some(true)),
        (false, Some(true)),
        (true, Some(false)),
        (false, Some(false)),
        (false, Some(false)),
    ];
    let (tp, fp, fn_, tn, _) = oracle_confusion(&pairs);
    let m = compute_metrics(&Counts {
        tp,
        fp,
        fn_,
        tn,
        ..Counts::default()
    });
    near(m.accuracy, 4.0 / 6.0, "accuracy")?;
    near(m.precision, 2.0 / 3.0, "precision")?;
    near(m.recall, 2.0 / 3.0, "recall")?;
    near(m.f1, 2.0 / 3.0, "f1")?;

    // mean of rows over n = 2 layers, |T| = 2
    let layers = vec![
        vec![vec![0.6, 0.4], vec![0.2, 0.8]],
        vec![vec![0.4, 0.6], vec![0.0, 1.0]],
    ];
    let agg = aggregate_attention(&layers, 3).unwrap();
    for ((got, o), want) in agg
        .values()
        .iter()
        .zip(oracle_mean_rows(&layers))
        .zip([0.3, 0.7])
    {
        near(o, want, "oracle mean")?;
        near(*got, want, "mean")?;
    }

    // eq6-literal fusion of [1,0] (α=1) and [0,1] (α=3)
    let mut mem = VisualMemory::default();
    for (j, (vals, alpha)) in [(vec![1.0, 0.0], 1.0), (vec![0.0, 1.0], 3.0)]
        .into_iter()
        .enumerate()
    {
        let a = AggregatedAttention::new(vals, 3 + j).unwrap();
        mem.push(build_mask(&a, 1, alpha).unwrap()).unwrap();
    }
    let fused = fuse_masks(&mem, FusionMode::Eq6Literal).unwrap();
    let oracle_f = oracle_fuse(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 3.0], false);
    for ((got, o), want) in fused.iter().zip(oracle_f).zip([0.25, 0.75]) {
        near(o, want, "oracle fusion")?;
        near(*got, want, "fusion")?;
    }

    // mock row for "man": (1-0.2)/8 and 0.2/8
    let mock = surfboard_backend();
    let scene = mock.scene("surfboard").unwrap();
    let (row, _) = MockBackend::attention_row(scene, "man");
    for (i, v) in row.iter().enumerate() {
        near(*v, if i < 8 { 0.8 / 8.0 } else { 0.2 / 8.0 }, "mock row")?;
    }

    // bias of mass 1.0 on {0..11} clears θ = 0.5 and the answer turns truthful
    let mut req = BackendRequest::plain("surfboard", SURFBOARD_QUESTION);
    let dense: Vec<f64> = (0..16)
        .map(|i| if i < 12 { 1.0 / 12.0 } else { 0.0 })
        .collect();
    req.bias = Some(Bias::from_dense(&dense));
    let focus: BTreeSet<usize> = (0..12).collect();
    near(req.bias.as_ref().unwrap().mass_on(&focus), 1.0, "bias mass")?;
    let answer = mock.step(&req).map_err(|e| e.to_string())?.answer;
    ensure(answer_label(&answer) == Label::No, || answer.clone())?;

    Ok("softmax, enhancement, entropy, k, mask, metrics, mean, fusion, mock row, bias".into())
}

fn answer_label(text: &str) -> Label {
    chainmpq_core::answer_to_label(text)
}

fn surfboard_flip() -> Outcome {
    let start = Instant::now();
    let mock =
        MockBackend::from_file(fixture("scenes/surfboard.json")).map_err(|e| e.to_string())?;
    let v = run_vanilla(&mock, "surfboard", SURFBOARD_QUESTION).map_err(|e| e.to_string())?;
    ensure(v.label == Label::Yes, || {
        format!("vanilla said {:?}", v.answer)
    })?;
    let mut bytes = Vec::new();
    for _ in 0..3 {
        let t = run_chain(
            &mock,
            "surfboard",
            SURFBOARD_QUESTION,
            &ChainConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        ensure(t.final_label == Label::No, || {
            format!("chain said {:?}", t.final_answer)
        })?;
        bytes.push(t.to_json());
    }
    ensure(bytes.windows(2).all(|w| w[0] == w[1]), || {
        "transcripts differ".into()
    })?;
    within(Duration::from_secs(1), start)?;
    Ok(format!(
        "vanilla Yes, chain No, 3 identical transcripts in {:?}",
        start.elapsed()
    ))
}

fn ablation_battery() -> Outcome {
    let start = Instant::now();
    let mock = suite_backend();
    let data = suite_dataset();
    ensure(mock.scenes().count() == 10, || {
        "suite must hold 10 scenes".into()
    })?;
    let acc = |runner, config: ChainConfig| -> Result<f64, String> {
        let r = evaluate(runner, &mock, &data, &config, 1).map_err(|e| e.to_string())?;
        ensure(r.comparable, || format!("{} samples errored", r.errored))?;
        Ok(r.metrics.accuracy)
    };
    let base = ChainConfig::default();
    let full = acc(RunnerKind::Chain, base.clone())?;
    let vanilla = acc(RunnerKind::Vanilla, base.clone())?;
    let no_enh = acc(
        RunnerKind::Chain,
        ChainConfig {
            enhance_enabled: false,
            ..base.clone()
        },
    )?;
    let no_multi = acc(
        RunnerKind::Chain,
        ChainConfig {
            multi_perspective_enabled: false,
            ..base.clone()
        },
    )?;
    let no_inter = acc(
        RunnerKind::Chain,
        ChainConfig {
            visual_memory_enabled: false,
            ..base
        },
    )?;
    let summary = format!(
        "full {full:.2}, w/o enhancement {no_enh:.2}, w/o multi {no_multi:.2}, w/o interleaved {no_inter:.2}, vanilla {vanilla:.2}"
    );
    ensure(
        no_enh <= full && no_multi <= full && no_inter <= full && full >= vanilla,
        || summary.clone(),
    )?;
    within(Duration::from_secs(10), start)?;
    Ok(summary)
}

fn sweep_grid() -> Outcome {
    let mock = suite_backend();
    let data = suite_dataset();
    let run = || -> Result<SweepRun, String> {
        let rows = sweep(
            &DEFAULT_SWEEP_LAMBDAS,
            &DEFAULT_SWEEP_K_MAXES,
            &mock,
            &data,
            &ChainConfig::default(),
            1,
        )
        .map_err(|e| e.to_string())?;
        let populated = rows.iter().all(|r| {
            r.accuracy.is_some() && r.precision.is_some() && r.f1.is_some() && r.errored == 0
        });
        let cells = rows.iter().map(|r| (r.lambda, r.k_max)).collect();
        let mut csv = Vec::new();
        write_sweep_csv(&rows, &mut csv).map_err(|e| e.to_string())?;
        Ok((rows.len(), populated, cells, csv))
    };
    let (n, populated, cells, csv) = run()?;
    let expected: Vec<(f64, usize)> = [3.0, 5.0, 7.0]
        .iter()
        .flat_map(|&l| [10, 20, 70, 120].map(move |k| (l, k)))
        .collect();
    ensure(n == 12 && cells == expected, || format!("cells {cells:?}"))?;
    ensure(populated, || "a cell is empty".into())?;
    let data_lines = String::from_utf8_lossy(&csv).lines().count() - 1;
    ensure(data_lines == 12, || format!("{data_lines} CSV rows"))?;
    ensure(run()?.3 == csv, || "sweep CSV differs between runs".into())?;
    Ok("12 populated rows, identical CSV across runs".into())
}

fn parser_round_trip() -> Outcome {
    let lexicon = RelationLexicon::default();
    run_property(1000, triple_strategy(), |t| {
        let q = canonical_question(&t);
        let back = parse_relational_question(&q, &lexicon)
            .map_err(|e| proptest::test_runner::TestCaseError::fail(format!("{q}: {e}")))?;
        proptest::prop_assert_eq!(back, t);
        Ok(())
    })?;
    for (q, want) in [
        (
            "Does the dog chase a disc in the image?",
            ("dog", "chase", "disc"),
        ),
        (
            "Does a man stand on a surfboard in the image?",
            ("man", "stand on", "surfboard"),
        ),
        (
            "Is a chair to the left of a trash bin in the image?",
            ("chair", "to the left of", "trash bin"),
        ),
    ] {
        let t = parse_relational_question(q, &lexicon).map_err(|e| e.to_string())?;
        let got = (t.subject.as_str(), t.relation.as_str(), t.object.as_str());
        ensure(got == want, || format!("{q} -> {got:?}"))?;
    }
    Ok("1000 fuzzed triples and 3 reference questions".into())
}

#[derive(Deserialize)]
struct Rejection {
    file: String,
    direction: String,
    path: String,
    kind: String,
}

fn protocol_conformance() -> Outcome {
    let read = |name: &str| {
        std::fs::read_to_string(fixture(&format!("wire/{name}"))).map_err(|e| e.to_string())
    };
    for name in ["request_golden.json", "request_golden_inline.json"] {
        validate_request(&read(name)?).map_err(|e| format!("{name}: {e}"))?;
    }
    for name in ["response_golden.json", "response_golden_no_attention.json"] {
        validate_response(&read(name)?).map_err(|e| format!("{name}: {e}"))?;
    }
    let manifest: Vec<Rejection> =
        serde_json::from_str(&read("rejections.json")?).map_err(|e| e.to_string())?;
    for r in &manifest {
        let dir = if r.direction == "request" {
            Direction::Request
        } else {
            Direction::Response
        };
        let err = match validate_wire(&read(&r.file)?, dir) {
            Ok(_) => return Err(format!("{} was accepted", r.file)),
            Err(e) => e,
        };
        let kind = match err.kind {
            WireErrorKind::Syntax(_) => "syntax",
            WireErrorKind::Missing => "missing",
            WireErrorKind::WrongType(_) => "wrong_type",
            WireErrorKind::OutOfRange(_) => "out_of_range",
        };
        ensure(err.path == r.path && kind == r.kind, || {
            format!(
                "{}: got {} {kind}, expected {} {}",
                r.file, err.path, r.path, r.kind
            )
        })?;
    }
    Ok(format!(
        "4 golden fixtures accepted, {} rejected at their paths",
        manifest.len()
    ))
}

fn heatmaps() -> Outcome {
    let pixels = |pgm: &[u8]| -> Vec<u8> {
        let end = pgm
            .iter()
            .enumerate()
            .filter(|(_, b)| **b == b'\n')
            .nth(2)
            .unwrap()
            .0;
        pgm[end + 1..].to_vec()
    };
    let uniform = pixels(&render_pgm(&[0.25; 4], [2, 2], 3).map_err(|e| e.to_string())?);
    ensure(uniform.iter().all(|p| *p == uniform[0]), || {
        "uniform not constant".into()
    })?;

    let mut hot = vec![0.0; 9];
    hot[4] = 1.0;
    let one_hot = pixels(&render_pgm(&hot, [3, 3], 2).map_err(|e| e.to_string())?);
    let lit: Vec<usize> = (0..36).filter(|&i| one_hot[i] == 255).collect();
    ensure(lit == [14, 15, 20, 21], || format!("lit pixels {lit:?}"))?;
    ensure(one_hot.iter().all(|p| *p == 0 || *p == 255), || {
        "stray gray".into()
    })?;

    let config = ChainConfig {
        keep_attention: true,
        ..ChainConfig::default()
    };
    let mock = surfboard_backend();
    let t =
        run_chain(&mock, "surfboard", SURFBOARD_QUESTION, &config).map_err(|e| e.to_string())?;
    let man = &mock
        .scene("surfboard")
        .unwrap()
        .object("man")
        .unwrap()
        .patches;
    let cell = 16;
    let s3 = sidecars(&t, cell)
        .map_err(|e| e.to_string())?
        .into_iter()
        .find(|s| s.index == 3)
        .ok_or("no step 3 sidecar")?;
    let px = pixels(&s3.render().map_err(|e| e.to_string())?);
    let [rows, cols] = s3.grid;
    let bright: BTreeSet<usize> = (0..rows * cols)
        .filter(|&p| px[(p / cols) * cell * cols * cell + (p % cols) * cell] == 255)
        .collect();
    ensure(&bright == man, || {
        format!("bright patches {bright:?}, man {man:?}")
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let written = emit_heatmaps(&t, dir.path(), cell).map_err(|e| e.to_string())?;
    for pgm in written
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
    {
        let json =
            std::fs::read_to_string(pgm.with_extension("json")).map_err(|e| e.to_string())?;
        let sidecar: HeatmapSidecar = serde_json::from_str(&json).map_err(|e| e.to_string())?;
        let original = std::fs::read(pgm).map_err(|e| e.to_string())?;
        ensure(
            sidecar.render().map_err(|e| e.to_string())? == original,
            || format!("{} does not re-render", pgm.display()),
        )?;
    }
    Ok(format!(
        "step 3 block = man patches, {} sidecars re-render",
        written.len() / 2
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("equation suite", equation_suite),
        ("hand-oracle examples", hand_oracles),
        ("end-to-end hallucination flip", surfboard_flip),
        ("ablation battery", ablation_battery),
        ("sweep grid", sweep_grid),
        ("parser round trip", parser_round_trip),
        ("protocol conformance", protocol_conformance),
        ("heat-map emission", heatmaps),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
