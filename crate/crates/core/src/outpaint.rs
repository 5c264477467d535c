//! Inference: widen a frame's sector and fill the new side segments.
//!
//! The canvas stays `H x W`; only the cone inside it grows. Known pixels are
//! always pasted back, so the generator contributes only to the filled
//! region.

use std::path::{Path, PathBuf};

use candle_core::Device;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointMeta;
use crate::dataset::{load_frame, Manifest, Split};
use crate::error::{Error, Result};
use crate::geometry::{cut_region_mask, make_cone_mask, shrink_cone, BinaryMask, ConeSpec};
use crate::imageio;
use crate::models::{generator_forward, Generator};

#[derive(Debug, Clone)]
pub struct Outpainted {
    pub extended: Array2<f32>,
    pub filled_region: BinaryMask,
    /// Generator output before compositing.
    pub raw: Option<Array2<f32>>,
}

/// Extends `pixels` (whose visible sector is `cone`) to `target_spread_deg`.
///
/// `extended = frame ⊙ augment + generated ⊙ (full − augment)`, where
/// `augment` is the frame's own sector and `full` the widened one. When the
/// target equals the current spread the frame is returned untouched.
pub fn outpaint(
    generator: &Generator,
    pixels: &Array2<f32>,
    cone: &ConeSpec,
    target_spread_deg: f64,
    device: &Device,
) -> Result<Outpainted> {
    if pixels.dim() != (cone.height, cone.width) {
        return Err(Error::validation(format!(
            "frame {:?} does not match its cone grid {:?}",
            pixels.dim(),
            (cone.height, cone.width)
        )));
    }
    if !(target_spread_deg >= cone.spread_deg) {
        return Err(Error::validation(format!(
            "target spread {target_spread_deg} deg is narrower than the frame's {} deg",
            cone.spread_deg
        )));
    }
    if target_spread_deg == cone.spread_deg {
        return Ok(Outpainted {
            extended: pixels.clone(),
            filled_region: BinaryMask::zeros(cone.height, cone.width),
            raw: None,
        });
    }
    let wide = cone.with_spread(target_spread_deg)?;
    let full = make_cone_mask(&wide)?;
    let augment = make_cone_mask(cone)?;
    let filled = cut_region_mask(&full, &augment)?;
    let masked = augment.apply(pixels)?;
    let generated = generator_forward(generator, &masked, &augment, device)?;
    let mut extended = masked;
    ndarray::Zip::from(&mut extended)
        .and(filled.view())
        .and(&generated)
        .for_each(|e, &f, &g| {
            if f == 1 {
                *e = g;
            }
        });
    Ok(Outpainted {
        extended,
        filled_region: filled,
        raw: Some(generated),
    })
}

/// One quartet of a batch run. Paths are relative to the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub frame_id: String,
    pub gt: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub filled_mask: PathBuf,
    /// Total degrees removed and regenerated ("Cut 30" = 15 per side).
    pub cut_deg: f64,
    pub cut_deg_per_side: f64,
    /// Full-sector footprint of the ground truth.
    pub cone_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub frame_id: String,
    pub cut_deg_per_side: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutpaintIndex {
    pub checkpoint: String,
    pub checkpoint_step: u64,
    pub dataset: String,
    pub entries: Vec<IndexEntry>,
    #[serde(default)]
    pub failures: Vec<FrameFailure>,
}

pub const INDEX_FILE: &str = "index.json";

impl OutpaintIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    /// Also write the generator output before compositing.
    pub save_raw: bool,
}

pub struct CheckpointedGenerator<'a> {
    pub generator: &'a Generator,
    pub meta: &'a CheckpointMeta,
    pub path: &'a Path,
}

fn file_stem(frame_id: &str) -> String {
    frame_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// File-name tag for a total cut angle: `cut_30`, `cut_22p5`.
pub fn cut_tag(cut_deg: f64) -> String {
    format!("cut_{}", cut_deg).replace('.', "p")
}

fn outpaint_one(
    model: &CheckpointedGenerator<'_>,
    manifest: &Manifest,
    record: &crate::dataset::FrameRecord,
    cut_per_side: f64,
    out: &Path,
    opts: &BatchOptions,
    device: &Device,
) -> Result<IndexEntry> {
    let [h, w] = model.meta.config.train.resolution;
    let frame = load_frame(manifest, record, (h, w))?;
    let full = make_cone_mask(&frame.cone)?;
    let gt = full.apply(&frame.pixels)?;
    let narrow = shrink_cone(&frame.cone, cut_per_side)?;
    let input = make_cone_mask(&narrow)?.apply(&gt)?;
    let result = outpaint(model.generator, &input, &narrow, frame.cone.spread_deg, device)?;

    // the hard contract, checked on every frame
    let retained = make_cone_mask(&narrow)?;
    let preserved = ndarray::Zip::from(retained.view())
        .and(&result.extended)
        .and(&input)
        .all(|&m, &e, &i| m == 0 || e.to_bits() == i.to_bits());
    if !preserved {
        return Err(Error::validation("known pixels changed by outpainting"));
    }

    let dir_name = cut_tag(2.0 * cut_per_side);
    let dir = out.join(&dir_name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = file_stem(&record.key());
    let rel = |suffix: &str| PathBuf::from(&dir_name).join(format!("{stem}_{suffix}.png"));
    let entry = IndexEntry {
        frame_id: record.key(),
        gt: rel("gt"),
        input: rel("input"),
        output: rel("output"),
        filled_mask: rel("filled"),
        cut_deg: 2.0 * cut_per_side,
        cut_deg_per_side: cut_per_side,
        cone_mask: rel("cone"),
        raw_output: (opts.save_raw && result.raw.is_some()).then(|| rel("raw")),
    };
    imageio::write_gray16(&gt, &out.join(&entry.gt))?;
    imageio::write_gray16(&input, &out.join(&entry.input))?;
    imageio::write_gray16(&result.extended, &out.join(&entry.output))?;
    result.filled_region.save_png(&out.join(&entry.filled_mask))?;
    full.save_png(&out.join(&entry.cone_mask))?;
    if let (Some(path), Some(raw)) = (&entry.raw_output, &result.raw) {
        imageio::write_gray16(raw, &out.join(path))?;
    }
    Ok(entry)
}

/// Shrinks every test frame by each per-side cut, outpaints it back to its
/// original spread and writes `gt / input / output / filled` PNGs plus
/// `index.json` into `out`. Frames that fail are listed in the index and do
/// not stop the batch.
pub fn batch_outpaint(
    manifest: &Manifest,
    model: &CheckpointedGenerator<'_>,
    cuts_deg_per_side: &[f64],
    out: &Path,
    opts: &BatchOptions,
) -> Result<OutpaintIndex> {
    let records: Vec<_> = manifest.split(Split::Test).collect();
    if records.is_empty() {
        return Err(Error::validation("manifest has no test frames"));
    }
    if cuts_deg_per_side.is_empty() {
        return Err(Error::validation("no cut angles given"));
    }
    for &c in cuts_deg_per_side {
        if !(c >= 0.0 && c < 90.0) {
            return Err(Error::validation(format!("cut {c} deg per side is out of range")));
        }
    }
    let mut stems = std::collections::BTreeSet::new();
    for r in &records {
        if !stems.insert(file_stem(&r.key())) {
            return Err(Error::validation(format!("frame {} maps to an already used file name", r.key())));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let device = Device::Cpu;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for &cut in cuts_deg_per_side {
        for record in &records {
            match outpaint_one(model, manifest, record, cut, out, opts, &device) {
                Ok(entry) => entries.push(entry),
                Err(e) => {
                    log::warn!("frame {} at cut {cut}: {e}", record.key());
                    failures.push(FrameFailure {
                        frame_id: record.key(),
                        cut_deg_per_side: cut,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    let index = OutpaintIndex {
        checkpoint: model.path.display().to_string(),
        checkpoint_step: model.meta.step,
        dataset: manifest.base_dir.display().to_string(),
        entries,
        failures,
    };
    index.save(&out.join(INDEX_FILE))?;
    Ok(index)
}
