//! Sector (cone) field-of-view geometry.
//!
//! A sector-scan frame shows a pie-slice of anatomy fanning out from the probe
//! apex. A pixel `(i, j)` lies inside the sector when the angle between the
//! cone axis and the ray from the apex to the pixel does not exceed half the
//! angular spread:
//!
//! ```text
//! atan(|j - apex_col| / axial(i)) <= spread / 2
//! ```
//!
//! where `axial(i)` is `i - apex_row` for an apex at the top of the frame and
//! `H - i` for an apex below the bottom edge. The comparison is non-strict and
//! evaluated in `f64`, so pixels exactly on the boundary ray are inside.
//! Angles are degrees at every public boundary and radians internally.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the probe apex sits relative to the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Apex at `(apex_row, apex_col)`, sector opens downward. This is how
    /// scan-converted frames are displayed.
    #[default]
    ApexTop,
    /// Apex just below the bottom edge (virtual row `H`), sector opens upward.
    /// `apex_row` is carried but not used by the mask rule in this setting.
    ApexBottom,
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Orientation::ApexTop => f.write_str("apex-top"),
            Orientation::ApexBottom => f.write_str("apex-bottom"),
        }
    }
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "apex-top" => Ok(Orientation::ApexTop),
            "apex-bottom" => Ok(Orientation::ApexBottom),
            other => Err(Error::validation(format!("unknown orientation '{other}'"))),
        }
    }
}

/// Parameterization of a sector field of view on an `height x width` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub apex_row: usize,
    pub apex_col: usize,
    /// Full angular spread in degrees, strictly inside (0, 180).
    pub spread_deg: f64,
    pub orientation: Orientation,
    pub height: usize,
    pub width: usize,
}

impl ConeSpec {
    /// Builds a spec and checks its invariants.
    pub fn new(
        apex_row: usize,
        apex_col: usize,
        spread_deg: f64,
        orientation: Orientation,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let spec = ConeSpec {
            apex_row,
            apex_col,
            spread_deg,
            orientation,
            height,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spread_deg > 0.0 && self.spread_deg < 180.0) {
            return Err(Error::validation(format!(
                "cone spread must satisfy 0 < spread_deg < 180, got {}",
                self.spread_deg
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("cone grid must be non-empty"));
        }
        if self.apex_col >= self.width {
            return Err(Error::validation(format!(
                "apex_col {} outside 0..{}",
                self.apex_col, self.width
            )));
        }
        if self.apex_row >= self.height {
            return Err(Error::validation(format!(
                "apex_row {} outside 0..{}",
                self.apex_row, self.height
            )));
        }
        Ok(())
    }

    /// Same cone with a different spread; used to widen a narrow input back
    /// to its acquisition spread at inference time.
    pub fn with_spread(&self, spread_deg: f64) -> Result<Self> {
        let spec = ConeSpec {
            spread_deg,
            ..*self
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Maps the spec onto a resized grid. Apex coordinates scale with the
    /// grid and the half-angle follows the anisotropic stretch:
    /// `tan(h') = tan(h) * sx / sy`.
    pub fn rescaled(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("cannot rescale a cone to an empty grid"));
        }
        let sy = height as f64 / self.height as f64;
        let sx = width as f64 / self.width as f64;
        let half = (self.spread_deg.to_radians() * 0.5).tan() * sx / sy;
        let spread_deg = (2.0 * half.atan()).to_degrees();
        let apex_row = ((self.apex_row as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize;
        let apex_col = ((self.apex_col as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize;
        ConeSpec::new(
            apex_row.min(height - 1),
            apex_col.min(width - 1),
            spread_deg,
            self.orientation,
            height,
            width,
        )
    }

    fn half_angle_rad(&self) -> f64 {
        self.spread_deg.to_radians() / 2.0
    }

    /// Signed distance along the cone axis from the apex to row `row`.
    fn axial_distance(&self, row: usize) -> i64 {
        match self.orientation {
            Orientation::ApexTop => row as i64 - self.apex_row as i64,
            Orientation::ApexBottom => self.height as i64 - row as i64,
        }
    }

    /// Whether pixel `(row, col)` lies inside the sector.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let axial = self.axial_distance(row);
        let lateral = (col as i64 - self.apex_col as i64).unsigned_abs();
        if axial <= 0 {
            return axial == 0 && lateral == 0 && self.orientation == Orientation::ApexTop;
        }
        (lateral as f64 / axial as f64).atan() <= self.half_angle_rad()
    }
}

/// `H x W` mask with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(Array2<u8>);

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask(Array2::zeros((height, width)))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask(Array2::ones((height, width)))
    }

    /// Wraps an array after checking every value is 0 or 1.
    pub fn from_array(data: Array2<u8>) -> Result<Self> {
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::validation(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(BinaryMask(data))
    }

    /// Builds a mask from 8-bit gray codes whose values are all in {0, 1}
    /// or all in {0, 255}.
    pub fn from_gray_codes(codes: Array2<u8>) -> Result<Self> {
        let mut saw_one = false;
        let mut saw_full = false;
        for &v in codes.iter() {
            match v {
                0 => {}
                1 => saw_one = true,
                255 => saw_full = true,
                other => {
                    return Err(Error::validation(format!(
                        "non-binary mask: value {other} is neither 0, 1 nor 255"
                    )))
                }
            }
        }
        if saw_one && saw_full {
            return Err(Error::validation(
                "non-binary mask: mixes values 1 and 255",
            ));
        }
        Ok(BinaryMask(codes.mapv(|v| u8::from(v > 0))))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.0.view()
    }

    pub fn into_array(self) -> Array2<u8> {
        self.0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.0[(row, col)] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    /// Pixel-wise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape()
            && Zip::from(&self.0)
                .and(&other.0)
                .all(|&a, &b| a <= b)
    }

    pub fn is_disjoint_from(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape()
            && Zip::from(&self.0)
                .and(&other.0)
                .all(|&a, &b| a & b == 0)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_same_shape(self, other)?;
        Ok(BinaryMask(Zip::from(&self.0).and(&other.0).map_collect(|&a, &b| a | b)))
    }

    /// Mask as `f32` 0/1 values, e.g. for multiplying into an image.
    pub fn to_f32(&self) -> Array2<f32> {
        self.0.mapv(f32::from)
    }

    /// Element-wise product `image ⊙ mask`.
    pub fn apply(&self, image: &Array2<f32>) -> Result<Array2<f32>> {
        if image.dim() != self.shape() {
            return Err(Error::validation(format!(
                "image shape {:?} does not match mask shape {:?}",
                image.dim(),
                self.shape()
            )));
        }
        Ok(Zip::from(image)
            .and(&self.0)
            .map_collect(|&x, &m| if m == 1 { x } else { 0.0 }))
    }

    /// Writes a lossless single-channel PNG with values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.shape();
        let raw: Vec<u8> = self.0.iter().map(|&v| v * 255).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let codes = Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
            .expect("buffer length matches dimensions");
        BinaryMask::from_gray_codes(codes).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Rasterizes the sector described by `spec`.
pub fn make_cone_mask(spec: &ConeSpec) -> Result<BinaryMask> {
    spec.validate()?;
    let mask = Array2::from_shape_fn((spec.height, spec.width), |(i, j)| {
        u8::from(spec.contains(i, j))
    });
    Ok(BinaryMask(mask))
}

/// Narrows the spread by `side_cut_deg` on each side.
pub fn shrink_cone(spec: &ConeSpec, side_cut_deg: f64) -> Result<ConeSpec> {
    spec.validate()?;
    if !(side_cut_deg >= 0.0) {
        return Err(Error::validation(format!(
            "side cut must be non-negative, got {side_cut_deg}"
        )));
    }
    if 2.0 * side_cut_deg >= spec.spread_deg {
        return Err(Error::validation(format!(
            "side cut of {side_cut_deg} deg removes the whole {} deg cone",
            spec.spread_deg
        )));
    }
    spec.with_spread(spec.spread_deg - 2.0 * side_cut_deg)
}

/// The excised side segments: `full AND NOT shrunk`.
pub fn cut_region_mask(full: &BinaryMask, shrunk: &BinaryMask) -> Result<BinaryMask> {
    check_same_shape(full, shrunk)?;
    if !shrunk.is_subset_of(full) {
        return Err(Error::validation(
            "shrunk mask is not contained in the full mask",
        ));
    }
    Ok(BinaryMask(
        Zip::from(&full.0)
            .and(&shrunk.0)
            .map_collect(|&f, &s| f & (1 - s)),
    ))
}

/// Tuning for [`detect_apex`].
#[derive(Debug, Clone, Copy)]
pub struct DetectOptions {
    /// Pixels strictly brighter than this (on the [0, 1] scale) belong to
    /// the sector.
    pub threshold: f32,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            threshold: 1.0 / 255.0,
        }
    }
}

/// Recovers the sector of an apex-top scan-converted frame.
///
/// The apex is the first row holding a foreground pixel, centred on that
/// row's foreground run. Left and right sector edges are the outermost
/// foreground pixels per row; each side is fit by least squares to a ray
/// through the apex over the lower half of the rows whose edges have not yet
/// reached the image border.
pub fn detect_apex(frame: ArrayView2<'_, f32>, opts: &DetectOptions) -> Result<ConeSpec> {
    let (height, width) = frame.dim();
    let fg = |v: f32| v > opts.threshold;

    let extent = |row: usize| -> Option<(usize, usize)> {
        let line = frame.row(row);
        let left = line.iter().position(|&v| fg(v))?;
        let right = line.iter().rposition(|&v| fg(v))?;
        Some((left, right))
    };

    let (apex_row, (l0, r0)) = (0..height)
        .find_map(|i| extent(i).map(|e| (i, e)))
        .ok_or_else(|| Error::Detection("frame has no pixel above the background threshold".into()))?;
    let apex_col = (l0 + r0) / 2;

    // rows whose sector edges are still inside the frame on both sides
    let rows: Vec<(usize, usize, usize)> = (apex_row + 1..height)
        .filter_map(|i| extent(i).map(|(l, r)| (i, l, r)))
        .filter(|&(_, l, r)| l > 0 && r + 1 < width)
        .collect();
    if rows.len() < 2 {
        return Err(Error::Detection(
            "too few unclipped boundary rows to fit the sector edges".into(),
        ));
    }
    let last = rows[rows.len() - 1].0;
    let mid = apex_row + (last - apex_row) / 2;
    let mut fit_rows: Vec<_> = rows.iter().copied().filter(|&(i, _, _)| i >= mid).collect();
    if fit_rows.len() < 2 {
        fit_rows = rows;
    }

    let (mut sl, mut sr, mut syy, mut width_sum) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(i, l, r) in &fit_rows {
        let dy = (i - apex_row) as f64;
        // outermost inside pixel sits on average half a pixel within the edge
        let dl = apex_col as f64 - (l as f64 - 0.5);
        let dr = (r as f64 + 0.5) - apex_col as f64;
        sl += dl * dy;
        sr += dr * dy;
        syy += dy * dy;
        width_sum += (r - l) as f64 * dy;
    }
    // boundaries that do not diverge from the apex describe no sector
    let opening = (width_sum / syy).atan().to_degrees();
    let spread = ((sl / syy).atan() + (sr / syy).atan()).to_degrees();
    if !spread.is_finite() || opening < 1.0 || spread >= 180.0 {
        return Err(Error::Detection(format!(
            "degenerate sector fit (estimated spread {spread:.3} deg)"
        )));
    }
    ConeSpec::new(apex_row, apex_col, spread, Orientation::ApexTop, height, width)
}

/// Writes `mask` as PNG and `spec` as a JSON sidecar next to it
/// (same stem, `.json` extension). Returns the sidecar path.
pub fn save_mask_with_spec(mask: &BinaryMask, spec: &ConeSpec, png: &Path) -> Result<PathBuf> {
    mask.save_png(png)?;
    let sidecar = png.with_extension("json");
    let text = serde_json::to_string_pretty(spec)?;
    fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}

pub fn load_mask_with_spec(png: &Path) -> Result<(BinaryMask, ConeSpec)> {
    let mask = BinaryMask::load_png(png)?;
    let sidecar = png.with_extension("json");
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let spec: ConeSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok((mask, spec))
}
