//! Attention-map export as 8-bit PGM and the patch localization score.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tdaf_core::{Mode, R2dnsModel, Tape, Tensor};

use crate::data::{assemble_batch, Dataset, Normalization, Patch, IMAGE_SIDE, PATCH_SIDE};
use crate::error::{HarnessError, Result};

/// `round(v·255)` with halves rounded up, clamped to the byte range.
pub fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary P5 greymap of a row-major `h × w` plane.
pub fn pgm_bytes(plane: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| quantize(v)));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedMap {
    pub flow: usize,
    pub stage: usize,
    pub map: Tensor<f32>,
}

fn require_attention(model: &R2dnsModel<f32>) -> Result<()> {
    if model.config().has_attention() {
        Ok(())
    } else {
        Err(HarnessError::Invalid(format!(
            "{} mode with {} flow(s) produces no attention maps",
            model.config().mode,
            model.config().num_flows
        )))
    }
}

/// Eval-mode attention maps for a batch, in forward order.
pub fn attention_maps(model: &mut R2dnsModel<f32>, images: &Tensor<f32>) -> Result<Vec<NamedMap>> {
    require_attention(model)?;
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let out = model.forward(&mut tape, x, Mode::Eval)?;
    Ok(out
        .attention_maps
        .iter()
        .map(|m| NamedMap {
            flow: m.flow,
            stage: m.stage,
            map: tape.value(m.map).clone(),
        })
        .collect())
}

/// Writes `attn_f<n>_s<l>.pgm` for every map of sample `index` plus
/// `index.txt` (`file flow stage height width` per line).
pub fn export_attention(
    model: &mut R2dnsModel<f32>,
    ds: &Dataset,
    index: usize,
    norm: &Normalization,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    require_attention(model)?;
    if index >= ds.len() {
        return Err(HarnessError::Invalid(format!("sample {index} out of range ({} samples)", ds.len())));
    }
    let (x, _) = assemble_batch(ds, &[index], norm, None);
    let maps = attention_maps(model, &x)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut listing = String::new();
    for m in &maps {
        let (h, w) = (m.map.height(), m.map.width());
        let name = format!("attn_f{}_s{}.pgm", m.flow, m.stage);
        let path = out_dir.join(&name);
        std::fs::write(&path, pgm_bytes(m.map.data(), h, w)).map_err(|e| HarnessError::io(&path, e))?;
        let _ = writeln!(listing, "{name} {} {} {h} {w}", m.flow, m.stage);
        files.push(path);
    }
    let idx = out_dir.join("index.txt");
    std::fs::write(&idx, listing).map_err(|e| HarnessError::io(&idx, e))?;
    Ok(files)
}

/// Overlap of each map cell with the patch, as a fraction of the cell area.
pub fn patch_weights(patch: Patch, height: usize, width: usize) -> Vec<f64> {
    let (sy, sx) = (IMAGE_SIDE as f64 / height as f64, IMAGE_SIDE as f64 / width as f64);
    let overlap = |lo: f64, hi: f64, p: usize| {
        let (a, b) = (p as f64, (p + PATCH_SIDE) as f64);
        (hi.min(b) - lo.max(a)).max(0.0) / (hi - lo)
    };
    let mut w = Vec::with_capacity(height * width);
    for i in 0..height {
        let fy = overlap(i as f64 * sy, (i + 1) as f64 * sy, patch.row);
        for j in 0..width {
            w.push(fy * overlap(j as f64 * sx, (j + 1) as f64 * sx, patch.col));
        }
    }
    w
}

/// Mean attention inside the patch over mean attention overall, for one map.
pub fn localization_ratio(plane: &[f32], height: usize, width: usize, patch: Patch) -> f64 {
    let w = patch_weights(patch, height, width);
    let inside: f64 = plane.iter().zip(&w).map(|(&a, &w)| a as f64 * w).sum::<f64>() / w.iter().sum::<f64>();
    let overall = plane.iter().map(|&a| a as f64).sum::<f64>() / plane.len() as f64;
    inside / overall
}

/// Localization ratio of the last flow's stage-1 map, averaged over `ds`.
pub fn attention_localization_score(
    model: &mut R2dnsModel<f32>,
    ds: &Dataset,
    norm: &Normalization,
    batch: usize,
) -> Result<f64> {
    require_attention(model)?;
    let patches = ds
        .patches
        .as_ref()
        .ok_or_else(|| HarnessError::Data("localization needs patch metadata".into()))?;
    let last = model.config().num_flows;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch) {
        let (x, _) = assemble_batch(ds, chunk, norm, None);
        let maps = attention_maps(model, &x)?;
        let m = maps
            .iter()
            .find(|m| m.flow == last && m.stage == 1)
            .ok_or_else(|| HarnessError::Invalid("no stage-1 map in the last flow".into()))?;
        let (h, w) = (m.map.height(), m.map.width());
        for (slot, &i) in chunk.iter().enumerate() {
            total += localization_ratio(&m.map.data()[slot * h * w..(slot + 1) * h * w], h, w, patches[i]);
        }
    }
    Ok(total / ds.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(1.2), 255);
        let b = pgm_bytes(&[0.0, 0.5, 1.0, 0.25], 2, 2);
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 128, 255, 64]);
    }

    #[test]
    fn uniform_map_scores_exactly_one() {
        let plane = vec![0.5f32; 16 * 16];
        for patch in [Patch { row: 0, col: 0 }, Patch { row: 13, col: 7 }, Patch { row: 24, col: 24 }] {
            assert_eq!(localization_ratio(&plane, 16, 16, patch), 1.0);
        }
    }

    #[test]
    fn weights_cover_patch_area() {
        for (h, patch) in [(16, Patch { row: 3, col: 10 }), (8, Patch { row: 24, col: 1 }), (32, Patch { row: 5, col: 5 })] {
            let w = patch_weights(patch, h, h);
            let cell = (IMAGE_SIDE / h).pow(2) as f64;
            let area: f64 = w.iter().sum::<f64>() * cell;
            assert!((area - 64.0).abs() < 1e-9, "{area}");
        }
    }

    #[test]
    fn concentrated_map_scores_above_one() {
        let patch = Patch { row: 8, col: 16 };
        let w = patch_weights(patch, 16, 16);
        let plane: Vec<f32> = w.iter().map(|&w| if w > 0.0 { 0.9 } else { 0.1 }).collect();
        assert!(localization_ratio(&plane, 16, 16, patch) > 3.0);
    }
}
