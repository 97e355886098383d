//! Attention heatmap export: per-tile raw and normalized attention as CSV,
//! plus an 8-bit PGM grayscale image over the slide's tile grid.

use crate::aggregator::{normalize_attention, AggregatorParams};
use crate::error::Result;
use crate::synth::TileBag;
use crate::tensor::Tensor;
use crate::trainer::extract_features;
use crate::vit::{ViTConfig, ViTParams};
use std::fs;
use std::io::Write;
use std::path::Path;

pub struct AttentionExport {
    pub raw: Tensor<f32>,
    pub normalized: Tensor<f32>,
    pub coords: Option<Vec<(u32, u32)>>,
    /// Set when the bag carried no coordinate grid (CSV only, no PGM).
    pub coords_missing: bool,
}

pub fn compute_attention(
    backbone: &ViTParams<f32>,
    agg: &AggregatorParams<f32>,
    vit_cfg: &ViTConfig,
    bag: &TileBag,
    chunk: usize,
) -> Result<AttentionExport> {
    let _ = agg; // classifier unused for the heatmap itself
    let (_features, raw) = extract_features(backbone, vit_cfg, &bag.tiles, chunk)?;
    let normalized = normalize_attention(&raw)?;
    Ok(AttentionExport {
        raw,
        normalized,
        coords: bag.coords.clone(),
        coords_missing: bag.coords.is_none(),
    })
}

/// Write `attention.csv` (tile_row, tile_col, raw, normalized) and, when the
/// coordinate grid is present, `attention.pgm` with one pixel per grid cell
/// and intensity proportional to normalized attention.
pub fn write_attention_artifacts(out_dir: &Path, export: &AttentionExport) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let k = export.raw.numel();
    let mut csv = String::from("tile_row,tile_col,raw_attention,normalized_attention\n");
    for i in 0..k {
        let (r, c) = match &export.coords {
            Some(coords) => (coords[i].0 as i64, coords[i].1 as i64),
            None => (-1, -1),
        };
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r,
            c,
            export.raw.data()[i],
            export.normalized.data()[i]
        ));
    }
    fs::write(out_dir.join("attention.csv"), csv)?;

    if let Some(coords) = &export.coords {
        let rows = coords.iter().map(|c| c.0).max().unwrap_or(0) as usize + 1;
        let cols = coords.iter().map(|c| c.1).max().unwrap_or(0) as usize + 1;
        let max_a = export
            .normalized
            .data()
            .iter()
            .cloned()
            .fold(f32::MIN, f32::max)
            .max(1e-12);
        let mut grid = vec![0u8; rows * cols];
        for (i, (r, c)) in coords.iter().enumerate() {
            let v = (export.normalized.data()[i] / max_a * 255.0).round() as i64;
            grid[*r as usize * cols + *c as usize] = v.clamp(0, 255) as u8;
        }
        let mut f = fs::File::create(out_dir.join("attention.pgm"))?;
        write!(f, "P5\n{cols} {rows}\n255\n")?;
        f.write_all(&grid)?;
    }
    Ok(())
}

/// Parse a P5 PGM header, returning (cols, rows). Test helper for the export
/// contract.
pub fn pgm_dims(bytes: &[u8]) -> Option<(usize, usize)> {
    let mut lines = bytes.split(|&b| b == b'\n');
    if lines.next()? != b"P5" {
        return None;
    }
    let dims_line = std::str::from_utf8(lines.next()?).ok()?;
    let mut dims = dims_line.split_whitespace();
    let cols = dims.next()?.parse().ok()?;
    let rows = dims.next()?.parse().ok()?;
    Some((cols, rows))
}
