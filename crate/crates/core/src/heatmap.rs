//! Grayscale attention heat maps.
//!
//! Each step's aggregated attention is laid out on the patch grid, min-max
//! scaled to `0..=255` and written as a binary PGM (`P5`). A JSON sidecar
//! keeps the raw values so the image can be regenerated bit for bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ChainTranscript;
use crate::question::Role;

pub const DEFAULT_CELL_PIXELS: usize = 16;
/// Gray level used when every value is equal.
pub const FLAT_LEVEL: u8 = 128;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("transcript has no recorded attention; re-run the chain with --keep-attention")]
    NoAttention,
    #[error("cannot infer a patch grid for {0} visual tokens")]
    UnknownGrid(usize),
    #[error("grid {rows}x{cols} does not hold {len} values")]
    GridMismatch {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("cell_pixels must be at least 1")]
    ZeroCell,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Everything needed to re-render one heat map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub index: usize,
    pub role: Role,
    pub question: String,
    pub grid: [usize; 2],
    pub cell_pixels: usize,
    pub values: Vec<f64>,
    pub k: Option<usize>,
    pub topk_indices: Option<Vec<usize>>,
}

impl HeatmapSidecar {
    pub fn render(&self) -> Result<Vec<u8>, HeatmapError> {
        render_pgm(&self.values, self.grid, self.cell_pixels)
    }
}

/// Min-max scaling to gray levels; a constant field maps to [`FLAT_LEVEL`].
pub fn gray_levels(values: &[f64]) -> Vec<u8> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = max - min;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (255.0 * (v - min) / span).round().clamp(0.0, 255.0) as u8
            } else {
                FLAT_LEVEL
            }
        })
        .collect()
}

/// Square grid for a perfect-square token count.
pub fn infer_grid(m: usize) -> Option<[usize; 2]> {
    let side = (m as f64).sqrt().round() as usize;
    (side * side == m && m > 0).then_some([side, side])
}

/// Renders row-major `values` on a `[rows, cols]` grid, each cell a
/// `cell_pixels`-square block.
pub fn render_pgm(
    values: &[f64],
    grid: [usize; 2],
    cell_pixels: usize,
) -> Result<Vec<u8>, HeatmapError> {
    let [rows, cols] = grid;
    if rows * cols != values.len() || values.is_empty() {
        return Err(HeatmapError::GridMismatch {
            rows,
            cols,
            len: values.len(),
        });
    }
    if cell_pixels == 0 {
        return Err(HeatmapError::ZeroCell);
    }
    let levels = gray_levels(values);
    let (width, height) = (cols * cell_pixels, rows * cell_pixels);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height);
    for r in 0..rows {
        let line: Vec<u8> = (0..cols)
            .flat_map(|c| std::iter::repeat_n(levels[r * cols + c], cell_pixels))
            .collect();
        for _ in 0..cell_pixels {
            out.extend_from_slice(&line);
        }
    }
    Ok(out)
}

/// Sidecars for every step of the transcript that kept its attention.
pub fn sidecars(
    transcript: &ChainTranscript,
    cell_pixels: usize,
) -> Result<Vec<HeatmapSidecar>, HeatmapError> {
    let recorded: Vec<_> = transcript
        .steps
        .iter()
        .filter_map(|s| s.attention.as_ref().map(|a| (s, a)))
        .collect();
    if recorded.is_empty() {
        return Err(HeatmapError::NoAttention);
    }
    recorded
        .into_iter()
        .map(|(step, values)| {
            let grid = transcript
                .grid
                .filter(|[r, c]| r * c == values.len())
                .or_else(|| infer_grid(values.len()))
                .ok_or(HeatmapError::UnknownGrid(values.len()))?;
            Ok(HeatmapSidecar {
                index: step.index,
                role: step.role,
                question: step.question.clone(),
                grid,
                cell_pixels,
                values: values.clone(),
                k: step.k,
                topk_indices: step.topk_indices.clone(),
            })
        })
        .collect()
}

/// Writes `step<i>_<role>.pgm` and a matching `.json` sidecar per step.
pub fn emit_heatmaps(
    transcript: &ChainTranscript,
    out_dir: impl AsRef<Path>,
    cell_pixels: usize,
) -> Result<Vec<PathBuf>, HeatmapError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for sidecar in sidecars(transcript, cell_pixels)? {
        let stem = format!("step{}_{}", sidecar.index, sidecar.role.slug());
        let pgm = out_dir.join(format!("{stem}.pgm"));
        std::fs::write(&pgm, sidecar.render()?)?;
        let json = out_dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
        written.push(pgm);
        written.push(json);
    }
    Ok(written)
}
