use std::path::{Path, PathBuf};

use serde::Serialize;

use super::eval::eval_view;
use crate::convflu::{gate_maps, normalize_map};
use crate::data::image::save_png;
use crate::data::{CropConfig, RegionMasks, Sample};
use crate::error::{config_err, input_err, Error, Result};
use crate::model::FersnetModel;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Nearest-neighbour upsampling of an `[h, w]` map to `[n, n]`.
pub fn upsample_nearest(map: &Tensor<f64>, n: usize) -> Result<Tensor<f64>> {
    let (h, w) = map.dims2()?;
    Ok(Tensor::from_fn(&[n, n], |i| map.data()[(i / n) * h / n * w + (i % n) * w / n]))
}

#[derive(Serialize)]
struct MapRecord {
    file: String,
    block: usize,
    direction: &'static str,
    gate: &'static str,
    min: f64,
    max: f64,
    mean: f64,
    height: usize,
    width: usize,
    /// Channel-mean gate values before normalisation, row-major.
    raw: Vec<f64>,
}

/// Per sample: `r` and `z` for both directions of every transference block,
/// channel-averaged, min-max normalised, upsampled to the input size and
/// written as PNG, plus one JSON sidecar with the raw maps.
pub fn export_gate_visualizations(
    model: &FersnetModel<f32>,
    samples: &[Sample],
    crop: &CropConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if model.transference_blocks().is_empty() {
        return Err(config_err!("model has no transference blocks to visualise"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = model.config.image_size;
    let mut written = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let x = Tensor::stack(&[&eval_view(&s.image, crop)?])?;
        let out = model.fer_forward_with_gates(&x, Mode::Eval)?;
        let mut records = Vec::new();
        for (b, g) in out.gates.iter().enumerate() {
            for (direction, gates) in [("fer", &g.to_fer), ("fes", &g.to_fes)] {
                let maps = gate_maps(gates, 0)?;
                for (gate, map) in [("r", &maps.r), ("z", &maps.z)] {
                    let (norm, min, max) = normalize_map(map);
                    let up = upsample_nearest(&norm, n)?;
                    let file = format!("sample{si:03}_block{b}_{direction}_{gate}.png");
                    let path = out_dir.join(&file);
                    save_png(&path, &up.map(|v| v * 2.0 - 1.0).cast())?;
                    written.push(path);
                    let (height, width) = map.dims2()?;
                    records.push(MapRecord {
                        file,
                        block: b,
                        direction,
                        gate,
                        min,
                        max,
                        mean: map.mean(),
                        height,
                        width,
                        raw: map.data().to_vec(),
                    });
                }
            }
        }
        let sidecar = out_dir.join(format!("sample{si:03}_gates.json"));
        let json = serde_json::to_string_pretty(&records).expect("gate records serialize");
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionResponse {
    /// Mean FER-direction leak-gate value over eye and mouth pixels.
    pub face_regions: f64,
    pub background: f64,
    /// `(face_regions, background)` per transference block.
    pub per_block: Vec<(f64, f64)>,
}

/// Compare FER-direction `r` over renderer-known feature regions with the
/// background outside the face. `masks[i]` must be cropped to the model's
/// input size and belong to `samples[i]`.
pub fn gate_region_response(
    model: &FersnetModel<f32>,
    samples: &[Sample],
    masks: &[RegionMasks],
    crop: &CropConfig,
) -> Result<RegionResponse> {
    if samples.len() != masks.len() || samples.is_empty() {
        return Err(input_err!("{} samples but {} masks", samples.len(), masks.len()));
    }
    let n = model.config.image_size;
    let blocks = model.transference_blocks().len();
    if blocks == 0 {
        return Err(config_err!("model has no transference blocks"));
    }
    let mut acc = vec![(0.0, 0usize, 0.0, 0usize); blocks];
    for (s, m) in samples.iter().zip(masks) {
        if m.size != n {
            return Err(input_err!("mask is {0}x{0}, model input is {n}x{n}", m.size));
        }
        let x = Tensor::stack(&[&eval_view(&s.image, crop)?])?;
        let out = model.fer_forward_with_gates(&x, Mode::Eval)?;
        for (b, g) in out.gates.iter().enumerate() {
            let up = upsample_nearest(&gate_maps(&g.to_fer, 0)?.r, n)?;
            for (i, &v) in up.data().iter().enumerate() {
                if m.eyes[i] || m.mouth[i] {
                    acc[b].0 += v;
                    acc[b].1 += 1;
                } else if m.background[i] {
                    acc[b].2 += v;
                    acc[b].3 += 1;
                }
            }
        }
    }
    let per_block: Vec<(f64, f64)> =
        acc.iter().map(|&(f, nf, bg, nb)| (f / nf.max(1) as f64, bg / nb.max(1) as f64)).collect();
    let face_regions = per_block.iter().map(|p| p.0).sum::<f64>() / blocks as f64;
    let background = per_block.iter().map(|p| p.1).sum::<f64>() / blocks as f64;
    Ok(RegionResponse { face_regions, background, per_block })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_upsampling() {
        let m = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest(&m, 4).unwrap();
        assert_eq!(up.data()[..4], [1.0, 1.0, 2.0, 2.0]);
        assert_eq!(up.data()[12..], [3.0, 3.0, 4.0, 4.0]);
    }
}
