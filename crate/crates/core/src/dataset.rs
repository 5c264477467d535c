//! Frame collections, patient-level splits and the synthetic echo generator.
//!
//! On disk a dataset is `root/<patient_id>/<frame_id>.png`. A manifest is a
//! CSV with one row per frame:
//!
//! ```text
//! patient_id,frame_id,path,split,apex_row,apex_col,spread_deg,orientation
//! ```
//!
//! Relative `path`s resolve against the directory holding the manifest file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detect_apex, make_cone_mask, ConeSpec, DetectOptions, Orientation};
use crate::imageio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Cone parameters as stored in a manifest row. Grid size comes from the
/// image itself when the frame is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeclaredCone {
    pub apex_row: usize,
    pub apex_col: usize,
    pub spread_deg: f64,
    pub orientation: Orientation,
}

impl DeclaredCone {
    pub fn on_grid(&self, height: usize, width: usize) -> Result<ConeSpec> {
        ConeSpec::new(
            self.apex_row,
            self.apex_col,
            self.spread_deg,
            self.orientation,
            height,
            width,
        )
    }
}

impl From<&ConeSpec> for DeclaredCone {
    fn from(s: &ConeSpec) -> Self {
        DeclaredCone {
            apex_row: s.apex_row,
            apex_col: s.apex_col,
            spread_deg: s.spread_deg,
            orientation: s.orientation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub patient_id: String,
    pub frame_id: String,
    /// Absolute, or relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
    pub cone: DeclaredCone,
}

impl FrameRecord {
    /// `patient_id/frame_id`; frame ids are only unique within a patient.
    pub fn key(&self) -> String {
        format!("{}/{}", self.patient_id, self.frame_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    patient_id: String,
    frame_id: String,
    path: String,
    split: Split,
    apex_row: usize,
    apex_col: usize,
    spread_deg: f64,
    orientation: Orientation,
}

/// A frame file that could not be ingested.
#[derive(Debug, Clone, Serialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct ManifestSummary {
    pub train_patients: usize,
    pub train_frames: usize,
    pub test_patients: usize,
    pub test_frames: usize,
    pub skipped_files: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    /// Sorted by `(patient_id, frame_id)`.
    pub records: Vec<FrameRecord>,
    pub skipped: Vec<SkippedFile>,
    /// Directory relative record paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, record: &FrameRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    pub fn patients(&self, split: Split) -> BTreeSet<&str> {
        self.split(split).map(|r| r.patient_id.as_str()).collect()
    }

    pub fn summary(&self) -> ManifestSummary {
        ManifestSummary {
            train_patients: self.patients(Split::Train).len(),
            train_frames: self.split(Split::Train).count(),
            test_patients: self.patients(Split::Test).len(),
            test_frames: self.split(Split::Test).count(),
            skipped_files: self.skipped.len(),
        }
    }

    /// Checks key uniqueness and the one-split-per-patient rule.
    pub fn validate(&self) -> Result<()> {
        let mut keys = BTreeSet::new();
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            if !keys.insert((r.patient_id.as_str(), r.frame_id.as_str())) {
                return Err(Error::validation(format!(
                    "duplicate manifest key ({}, {})",
                    r.patient_id, r.frame_id
                )));
            }
            match split_of.insert(&r.patient_id, r.split) {
                Some(prev) if prev != r.split => {
                    return Err(Error::validation(format!(
                        "patient {} appears in both train and test",
                        r.patient_id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Serializes to CSV. Paths under the file's directory are written
    /// relative to it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let dir = fs::canonicalize(&dir).unwrap_or(dir);
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            let abs = self.resolve(r);
            let abs = fs::canonicalize(&abs).unwrap_or(abs);
            let shown = abs
                .strip_prefix(&dir)
                .map(Path::to_path_buf)
                .unwrap_or(abs.clone());
            w.serialize(CsvRow {
                patient_id: r.patient_id.clone(),
                frame_id: r.frame_id.clone(),
                path: path_to_string(&shown),
                split: r.split,
                apex_row: r.cone.apex_row,
                apex_col: r.cone.apex_col,
                spread_deg: r.cone.spread_deg,
                orientation: r.cone.orientation,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Manifest> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let row: CsvRow = row?;
            records.push(FrameRecord {
                patient_id: row.patient_id,
                frame_id: row.frame_id,
                path: PathBuf::from(row.path),
                split: row.split,
                cone: DeclaredCone {
                    apex_row: row.apex_row,
                    apex_col: row.apex_col,
                    spread_deg: row.spread_deg,
                    orientation: row.orientation,
                },
            });
        }
        let manifest = Manifest {
            records,
            skipped: Vec::new(),
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

fn path_to_string(p: &Path) -> String {
    if p.is_absolute() {
        return p.to_string_lossy().into_owned();
    }
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Patient-level partition: the first `n_train` patients of a seeded shuffle
/// of the sorted ids go to train. At least one patient always trains, and
/// with two or more patients at least one is held out.
pub fn assign_splits(patients: &[String], split_fraction: f64, seed: u64) -> Result<BTreeMap<String, Split>> {
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::validation(format!(
            "split fraction must be in [0, 1], got {split_fraction}"
        )));
    }
    let mut ids: Vec<String> = patients.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    let mut n_train = (n as f64 * split_fraction).round() as usize;
    n_train = n_train.max(1).min(n);
    if n >= 2 && split_fraction < 1.0 {
        n_train = n_train.min(n - 1);
    }
    if n == 1 {
        log::warn!("only one patient found; it goes to train and the test split is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(k, id)| (id, if k < n_train { Split::Train } else { Split::Test }))
        .collect())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Scans `root/<patient>/<frame>.png`, detects each frame's sector and
/// partitions patients into train/test. Unreadable or undetectable frames
/// are skipped with a warning and reported in [`Manifest::skipped`].
pub fn build_manifest(
    root: &Path,
    split_fraction: f64,
    seed: u64,
    detect: &DetectOptions,
) -> Result<Manifest> {
    let mut frames: Vec<(String, String, PathBuf, DeclaredCone)> = Vec::new();
    let mut skipped = Vec::new();
    for patient_dir in sorted_entries(root)? {
        if !patient_dir.is_dir() {
            continue;
        }
        let patient_id = patient_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for file in sorted_entries(&patient_dir)? {
            let is_png = file
                .extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false);
            if !is_png || !file.is_file() {
                continue;
            }
            let frame_id = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let cone = imageio::read_gray(&file)
                .and_then(|img| detect_apex(img.view(), detect));
            match cone {
                Ok(spec) => {
                    let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
                    frames.push((patient_id.clone(), frame_id, rel, DeclaredCone::from(&spec)));
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped.push(SkippedFile {
                        path: file,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::validation(format!(
            "no usable frames under {}",
            root.display()
        )));
    }
    let patients: Vec<String> = frames.iter().map(|f| f.0.clone()).collect();
    let splits = assign_splits(&patients, split_fraction, seed)?;
    let mut records: Vec<FrameRecord> = frames
        .into_iter()
        .map(|(patient_id, frame_id, path, cone)| FrameRecord {
            split: splits[&patient_id],
            patient_id,
            frame_id,
            path,
            cone,
        })
        .collect();
    records.sort_by(|a, b| (&a.patient_id, &a.frame_id).cmp(&(&b.patient_id, &b.frame_id)));
    let manifest = Manifest {
        records,
        skipped,
        base_dir: root.to_path_buf(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// A loaded frame: intensities in `[0, 1]` and its sector on the same grid.
#[derive(Debug, Clone)]
pub struct Frame {
    pub pixels: Array2<f32>,
    pub cone: ConeSpec,
    pub record: FrameRecord,
}

pub fn check_resolution(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::validation(format!(
            "resolution {height}x{width} must be non-zero and divisible by 8"
        )));
    }
    Ok(())
}

/// Reads a frame, resizes it bicubically to `(height, width)` and maps its
/// declared cone onto the new grid.
pub fn load_frame(manifest: &Manifest, record: &FrameRecord, target: (usize, usize)) -> Result<Frame> {
    let (height, width) = target;
    check_resolution(height, width)?;
    let path = manifest.resolve(record);
    let native = imageio::read_gray(&path)?;
    let (nh, nw) = native.dim();
    let cone = record.cone.on_grid(nh, nw)?.rescaled(height, width)?;
    let pixels = imageio::resize_bicubic(&native, height, width);
    Ok(Frame {
        pixels,
        cone,
        record: record.clone(),
    })
}

/// Parameters for the procedural echo-like dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub frames_per_patient: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub split_fraction: f64,
    pub spread_range_deg: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_patients: 50,
            frames_per_patient: 4,
            seed: 0,
            height: 128,
            width: 128,
            split_fraction: 0.8,
            spread_range_deg: (85.0, 100.0),
        }
    }
}

#[derive(Debug, Clone)]
struct Chamber {
    row: f64,
    col: f64,
    radius_row: f64,
    radius_col: f64,
    tilt: f64,
}

#[derive(Debug, Clone)]
struct PatientAnatomy {
    cone: ConeSpec,
    tissue: f64,
    attenuation: f64,
    chambers: Vec<Chamber>,
}

fn patient_anatomy(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<PatientAnatomy> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let (lo, hi) = cfg.spread_range_deg;
    let spread = rng.random_range(lo..=hi);
    let apex_col = (cfg.width / 2) as i64 + rng.random_range(-3..=3);
    let apex_row = rng.random_range(0..=2usize);
    let cone = ConeSpec::new(
        apex_row,
        apex_col.clamp(0, cfg.width as i64 - 1) as usize,
        spread,
        Orientation::ApexTop,
        cfg.height,
        cfg.width,
    )?;
    let n_chambers = rng.random_range(2..=4);
    let chambers = (0..n_chambers)
        .map(|_| Chamber {
            row: h * rng.random_range(0.35..0.8),
            col: w * rng.random_range(0.3..0.7),
            radius_row: h * rng.random_range(0.07..0.16),
            radius_col: w * rng.random_range(0.05..0.12),
            tilt: rng.random_range(-0.6..0.6),
        })
        .collect();
    Ok(PatientAnatomy {
        cone,
        tissue: rng.random_range(0.3..0.45),
        attenuation: rng.random_range(0.2..0.5),
        chambers,
    })
}

fn box_blur(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (y, x) = (i as i64 + di, j as i64 + dj);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    acc += img[(y as usize, x as usize)];
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

fn render_frame(anatomy: &PatientAnatomy, phase: f64, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
    let cone = &anatomy.cone;
    let (h, w) = (cone.height, cone.width);
    let mask = make_cone_mask(cone)?;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Array2::from_shape_fn((h, w), |_| gauss.sample(rng));
    let speckle = box_blur(&box_blur(&noise));
    let beat = 1.0 + 0.12 * phase.sin();
    let frame = Array2::from_shape_fn((h, w), |(i, j)| {
        if !mask.get(i, j) {
            return 0.0f32;
        }
        let depth = i as f64 / h as f64;
        let mut v = anatomy.tissue * (1.0 - anatomy.attenuation * depth);
        for c in &anatomy.chambers {
            let (dy, dx) = (i as f64 - c.row, j as f64 - c.col);
            let (ry, rx) = (
                dy * c.tilt.cos() + dx * c.tilt.sin(),
                -dy * c.tilt.sin() + dx * c.tilt.cos(),
            );
            let r2 = (ry / (c.radius_row * beat)).powi(2) + (rx / (c.radius_col * beat)).powi(2);
            if r2 < 1.0 {
                v *= 0.2;
            } else if r2 < 1.6 {
                // bright myocardial rim around each chamber
                v *= 1.6;
            }
        }
        let v = v * (1.0 + 0.9 * speckle[(i, j)]);
        v.clamp(0.05, 1.0) as f32
    });
    Ok(frame)
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    generator: &'static str,
    config: &'a SyntheticConfig,
    summary: ManifestSummary,
}

/// Writes a procedurally generated echo-like dataset under `out` together
/// with `manifest.csv` and a `dataset.json` provenance record.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig, out: &Path) -> Result<Manifest> {
    if cfg.n_patients < 1 || cfg.frames_per_patient < 1 {
        return Err(Error::validation(
            "synthetic dataset needs at least one patient and one frame per patient",
        ));
    }
    check_resolution(cfg.height, cfg.width)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.n_patients.to_string().len().max(3);
    let ids: Vec<String> = (0..cfg.n_patients)
        .map(|k| format!("patient{k:0width$}"))
        .collect();
    let splits = assign_splits(&ids, cfg.split_fraction, cfg.seed)?;

    let mut records = Vec::new();
    for id in &ids {
        let anatomy = patient_anatomy(cfg, &mut rng)?;
        let dir = out.join(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
        for f in 0..cfg.frames_per_patient {
            let phase = phase0 + f as f64 * 0.7;
            let img = render_frame(&anatomy, phase, &mut rng)?;
            let frame_id = format!("frame{f:03}");
            let rel = PathBuf::from(id).join(format!("{frame_id}.png"));
            imageio::write_gray(&img, &out.join(&rel))?;
            records.push(FrameRecord {
                patient_id: id.clone(),
                frame_id,
                path: rel,
                split: splits[id],
                cone: DeclaredCone::from(&anatomy.cone),
            });
        }
    }
    let manifest = Manifest {
        records,
        skipped: Vec::new(),
        base_dir: out.to_path_buf(),
    };
    manifest.write_csv(&out.join("manifest.csv"))?;
    let prov = Provenance {
        generator: "synthetic-echo",
        config: cfg,
        summary: manifest.summary(),
    };
    let json_path = out.join("dataset.json");
    fs::write(&json_path, serde_json::to_string_pretty(&prov)?)
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(manifest)
}
