//! Image-quality metrics over outpainting results: MSE, L1 and PSNR on the
//! filled region, SSIM over the cone footprint, LPIPS and FID on whole
//! composited frames.
//!
//! SSIM is the standard higher-is-better index.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureModel;
use crate::geometry::BinaryMask;
use crate::imageio;
use crate::losses::{scalar, Lpips};
use crate::models::image_to_tensor;
use crate::outpaint::{cut_tag, IndexEntry, OutpaintIndex};

pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub mse: f64,
    pub l1: f64,
    pub psnr: f64,
}

/// Peak 1.0; capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

/// MSE, L1 and PSNR over the pixels where `region` is set.
pub fn pixel_metrics<A>(gt: &Array2<A>, out: &Array2<A>, region: &BinaryMask) -> Result<PixelMetrics>
where
    A: Copy + Into<f64>,
{
    if gt.dim() != out.dim() || gt.dim() != region.shape() {
        return Err(Error::validation(format!(
            "shape mismatch: gt {:?}, out {:?}, region {:?}",
            gt.dim(),
            out.dim(),
            region.shape()
        )));
    }
    let (mut se, mut ae, mut n) = (0.0f64, 0.0f64, 0usize);
    for ((&g, &o), &m) in gt.iter().zip(out.iter()).zip(region.view().iter()) {
        if m == 1 {
            let d = o.into() - g.into();
            se += d * d;
            ae += d.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::validation("pixel metrics need a non-empty region"));
    }
    let mse = se / n as f64;
    Ok(PixelMetrics {
        mse,
        l1: ae / n as f64,
        psnr: psnr_from_mse(mse),
    })
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Symmetric PSD square root; returns the root and the magnitude of the
/// negative eigenvalues that were clipped.
fn sqrt_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped: f64 = eig.eigenvalues.iter().filter(|&&l| l < 0.0).map(|l| -l).sum();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (root, clipped)
}

fn to_matrix(x: &Array2<f64>, what: &str) -> Result<DMatrix<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("{what} features contain non-finite values")));
    }
    let (n, d) = x.dim();
    Ok(DMatrix::from_row_iterator(n, d, x.iter().copied()))
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples).
///
/// `‖μr − μg‖² + tr Σr + tr Σg − 2 tr (Σr Σg)^½`, with the trace of the
/// product root taken as `tr (Σr^½ Σg Σr^½)^½` so only symmetric
/// eigendecompositions are needed.
pub fn fid(real: &Array2<f64>, gen: &Array2<f64>) -> Result<f64> {
    let (n, d) = real.dim();
    let (m, dg) = gen.dim();
    if d != dg {
        return Err(Error::validation(format!(
            "feature dimensions differ: {d} vs {dg}"
        )));
    }
    if n < 2 || m < 2 {
        return Err(Error::validation("FID needs at least two samples per set"));
    }
    if n <= d || m <= d {
        log::warn!("FID with {n} and {m} samples in {d} dimensions: covariance estimates are singular");
    }
    let (mu_r, s_r) = mean_and_cov(&to_matrix(real, "real")?);
    let (mu_g, s_g) = mean_and_cov(&to_matrix(gen, "generated")?);
    let (root_r, c1) = sqrt_psd(&s_r);
    let inner = &root_r * &s_g * &root_r;
    let (root_inner, c2) = sqrt_psd(&inner);
    let clipped = c1 + c2;
    if clipped > 1e-6 {
        log::warn!("FID: clipped {clipped:.3e} of negative eigenvalue mass");
    }
    let diff = &mu_r - &mu_g;
    let value = diff.dot(&diff) + s_r.trace() + s_g.trace() - 2.0 * root_inner.trace();
    Ok(value.max(0.0))
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let x = i as f64 - SSIM_RADIUS as f64;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter keeping only positions whose 11x11 window lies
/// inside the image.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = SSIM_RADIUS;
    let (vh, vw) = (h - 2 * r, w - 2 * r);
    let mut rows = Array2::<f64>::zeros((h, vw));
    for i in 0..h {
        for j in 0..vw {
            rows[[i, j]] = (0..k.len()).map(|t| k[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((vh, vw));
    for i in 0..vh {
        for j in 0..vw {
            out[[i, j]] = (0..k.len()).map(|t| k[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Per-position SSIM for windows fully inside the image; entry `(i, j)` is
/// centred on pixel `(i + 5, j + 5)`.
pub fn ssim_map<A: Copy + Into<f64>>(a: &Array2<A>, b: &Array2<A>) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    let win = 2 * SSIM_RADIUS + 1;
    if h < win || w < win {
        return Err(Error::validation(format!(
            "SSIM needs images of at least {win}x{win}, got {h}x{w}"
        )));
    }
    let x = a.mapv(|v| v.into());
    let y = b.mapv(|v| v.into());
    let k = gaussian_kernel();
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k) - &mx * &mx;
    let syy = filter_valid(&(&y * &y), &k) - &my * &my;
    let sxy = filter_valid(&(&x * &y), &k) - &mx * &my;
    let mut out = Array2::zeros(mx.dim());
    ndarray::Zip::from(&mut out)
        .and(&mx)
        .and(&my)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .for_each(|o, &mx, &my, &sxx, &syy, &sxy| {
            *o = ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
        });
    Ok(out)
}

/// Mean SSIM over all full windows (Gaussian window, sigma 1.5, dynamic
/// range 1).
pub fn ssim<A: Copy + Into<f64>>(a: &Array2<A>, b: &Array2<A>) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.mean().expect("non-empty map"))
}

/// Mean SSIM over full windows centred inside `region`.
pub fn ssim_in_region<A: Copy + Into<f64>>(a: &Array2<A>, b: &Array2<A>, region: &BinaryMask) -> Result<f64> {
    if region.shape() != a.dim() {
        return Err(Error::validation("region shape does not match the images"));
    }
    let map = ssim_map(a, b)?;
    let r = SSIM_RADIUS;
    let (mut s, mut n) = (0.0, 0usize);
    for ((i, j), &v) in map.indexed_iter() {
        if region.get(i + r, j + r) {
            s += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::validation("no SSIM window is centred inside the region"));
    }
    Ok(s / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Total degrees regenerated; the label is `Cut <cut_deg>`.
    pub cut_deg: f64,
    pub cut_deg_per_side: f64,
    pub mse: f64,
    pub l1: f64,
    pub fid: f64,
    pub lpips: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub checkpoint_step: u64,
    pub dataset: String,
    pub timestamp: String,
    pub lpips_extractor: String,
    pub fid_features: String,
    pub pixel_region: String,
    pub ssim_region: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub meta: ReportMeta,
    /// Index entries skipped because a file was missing or unreadable.
    pub missing: Vec<String>,
}

impl MetricReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Plain-text table, one row per cut.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>4}",
            "", "MSE", "L1", "FID", "LPIPS", "PSNR", "SSIM", "n"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>10.5} {:>10.5} {:>10.3} {:>8.4} {:>8.2} {:>8.4} {:>4}",
                format!("Cut {}", r.cut_deg),
                r.mse,
                r.l1,
                r.fid,
                r.lpips,
                r.psnr,
                r.ssim,
                r.n_images
            );
        }
        let _ = writeln!(
            s,
            "MSE/L1/PSNR: {}; SSIM: {}; LPIPS: {}; FID features: {}",
            self.meta.pixel_region, self.meta.ssim_region, self.meta.lpips_extractor, self.meta.fid_features
        );
        s
    }
}

struct Loaded {
    gt: Array2<f32>,
    output: Array2<f32>,
    filled: BinaryMask,
    cone: BinaryMask,
}

fn load_entry(base: &Path, e: &IndexEntry) -> Result<Loaded> {
    let gt = imageio::read_gray(&base.join(&e.gt))?;
    let output = imageio::read_gray(&base.join(&e.output))?;
    let filled = BinaryMask::load_png(&base.join(&e.filled_mask))?;
    let cone = BinaryMask::load_png(&base.join(&e.cone_mask))?;
    if gt.dim() != output.dim() || filled.shape() != gt.dim() || cone.shape() != gt.dim() {
        return Err(Error::validation(format!("{}: quartet shapes differ", e.frame_id)));
    }
    Ok(Loaded {
        gt,
        output,
        filled,
        cone,
    })
}

fn embed(model: &dyn FeatureModel, imgs: &[&Array2<f32>], device: &Device) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(imgs.len() * model.dim());
    for img in imgs {
        let f = model.embed(&image_to_tensor(img, device)?)?;
        rows.extend(f.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(Array2::from_shape_vec((imgs.len(), model.dim()), rows).expect("embedding width"))
}

fn lpips_pair(lpips: &Lpips, a: &Array2<f32>, b: &Array2<f32>, device: &Device) -> Result<f64> {
    let ta: Tensor = image_to_tensor(a, device)?;
    let tb: Tensor = image_to_tensor(b, device)?;
    scalar(&lpips.lpips(&ta, &tb)?)
}

/// Computes one row per cut in the index. Images within a cut are processed
/// in frame-id order so results do not depend on the order of the index.
pub fn evaluate(index_path: &Path, lpips: &Lpips, feature_model: &dyn FeatureModel) -> Result<MetricReport> {
    let index = OutpaintIndex::load(index_path)?;
    if index.entries.is_empty() {
        return Err(Error::validation(format!("{} lists no images", index_path.display())));
    }
    let base = index_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let device = Device::Cpu;

    let mut groups: BTreeMap<u64, Vec<&IndexEntry>> = BTreeMap::new();
    for e in &index.entries {
        groups.entry(e.cut_deg.to_bits()).or_default().push(e);
    }
    let mut keyed: Vec<(f64, Vec<&IndexEntry>)> =
        groups.into_values().map(|v| (v[0].cut_deg, v)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (cut, mut entries) in keyed {
        entries.sort_by(|a, b| a.frame_id.cmp(&b.frame_id).then(a.output.cmp(&b.output)));
        let mut loaded = Vec::new();
        for e in entries.iter().copied() {
            match load_entry(&base, e) {
                Ok(l) => loaded.push((e, l)),
                Err(err) => {
                    log::warn!("skipping {} at cut {cut}: {err}", e.frame_id);
                    missing.push(format!("{} (cut {cut}): {err}", e.frame_id));
                }
            }
        }
        if loaded.is_empty() {
            continue;
        }
        let (mut mse, mut l1, mut psnr, mut ss, mut lp) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (_, l) in &loaded {
            // an empty filled region means nothing was synthesized
            let pm = if l.filled.is_empty() {
                PixelMetrics {
                    mse: 0.0,
                    l1: 0.0,
                    psnr: PSNR_CAP_DB,
                }
            } else {
                pixel_metrics(&l.gt, &l.output, &l.filled)?
            };
            mse += pm.mse;
            l1 += pm.l1;
            psnr += pm.psnr;
            ss += ssim_in_region(&l.gt, &l.output, &l.cone)?;
            lp += lpips_pair(lpips, &l.output, &l.gt, &device)?;
        }
        let n = loaded.len() as f64;
        let real = embed(feature_model, &loaded.iter().map(|(_, l)| &l.gt).collect::<Vec<_>>(), &device)?;
        let gen = embed(feature_model, &loaded.iter().map(|(_, l)| &l.output).collect::<Vec<_>>(), &device)?;
        rows.push(MetricRow {
            cut_deg: cut,
            cut_deg_per_side: loaded[0].0.cut_deg_per_side,
            mse: mse / n,
            l1: l1 / n,
            fid: fid(&real, &gen)?,
            lpips: lp / n,
            psnr: psnr / n,
            ssim: ss / n,
            n_images: loaded.len(),
        });
    }
    Ok(MetricReport {
        rows,
        meta: ReportMeta {
            checkpoint: index.checkpoint.clone(),
            checkpoint_step: index.checkpoint_step,
            dataset: index.dataset.clone(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            lpips_extractor: lpips.extractor().name().to_string(),
            fid_features: feature_model.name().to_string(),
            pixel_region: "filled region".into(),
            ssim_region: "full cone footprint".into(),
        },
        missing,
    })
}

/// Writes one `GT | input | output` contact sheet per cut into `out`;
/// returns the written paths.
pub fn write_contact_sheets(index_path: &Path, out: &Path, max_rows: usize) -> Result<Vec<PathBuf>> {
    let index = OutpaintIndex::load(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut groups: BTreeMap<u64, Vec<&IndexEntry>> = BTreeMap::new();
    for e in &index.entries {
        groups.entry(e.cut_deg.to_bits()).or_default().push(e);
    }
    let mut written = Vec::new();
    for entries in groups.values_mut() {
        entries.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
        let mut rows: Vec<Array2<f32>> = Vec::new();
        for e in entries.iter().take(max_rows.max(1)) {
            let imgs = [&e.gt, &e.input, &e.output]
                .iter()
                .map(|p| imageio::read_gray(&base.join(p)))
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<ArrayView2<f32>> = imgs.iter().map(|i| i.view()).collect();
            rows.push(
                concatenate(Axis(1), &views)
                    .map_err(|_| Error::validation(format!("{}: quartet shapes differ", e.frame_id)))?,
            );
        }
        let views: Vec<ArrayView2<f32>> = rows.iter().map(|r| r.view()).collect();
        let sheet = concatenate(Axis(0), &views)
            .map_err(|_| Error::validation("frames of one cut differ in size"))?;
        let path = out.join(format!("contact_{}.png", cut_tag(entries[0].cut_deg)));
        imageio::write_gray(&sheet, &path)?;
        written.push(path);
    }
    Ok(written)
}
