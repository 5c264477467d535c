//! Training inputs: the frame with its sector narrowed on both sides, stacked
//! with the narrowed mask.

use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{cut_region_mask, make_cone_mask, shrink_cone, BinaryMask, ConeSpec};
use crate::imageio;

/// Per-side cuts (degrees) the generator is trained and evaluated on.
pub const SIDE_CUTS_DEG: [f64; 4] = [15.0, 23.0, 30.0, 40.0];

#[derive(Debug, Clone)]
pub struct AugmentedSample {
    /// `target ⊙ augment_mask`
    pub masked_image: Array2<f32>,
    pub augment_mask: BinaryMask,
    pub full_mask: BinaryMask,
    /// Frame with everything outside the full sector zeroed.
    pub target: Array2<f32>,
    pub cut_deg_per_side: f64,
}

impl AugmentedSample {
    /// Pixels the generator has to synthesize.
    pub fn cut_region(&self) -> BinaryMask {
        cut_region_mask(&self.full_mask, &self.augment_mask)
            .expect("augment mask is a subset of the full mask by construction")
    }
}

/// Narrows `cone` by `cut_deg_per_side` on each side and masks `pixels`
/// accordingly.
pub fn augment(pixels: &Array2<f32>, cone: &ConeSpec, cut_deg_per_side: f64) -> Result<AugmentedSample> {
    let full_mask = make_cone_mask(cone)?;
    let augment_mask = make_cone_mask(&shrink_cone(cone, cut_deg_per_side)?)?;
    let target = full_mask.apply(pixels)?;
    let masked_image = augment_mask.apply(&target)?;
    Ok(AugmentedSample {
        masked_image,
        augment_mask,
        full_mask,
        target,
        cut_deg_per_side,
    })
}

/// Uniform draw from [`SIDE_CUTS_DEG`].
pub fn sample_cut<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    SIDE_CUTS_DEG[rng.random_range(0..SIDE_CUTS_DEG.len())]
}

/// Uniform draw among the cuts that leave part of a `spread_deg` cone
/// visible. Equals [`sample_cut`] (same stream) whenever the cone is wider
/// than 80 degrees.
pub fn sample_feasible_cut<R: Rng + ?Sized>(rng: &mut R, spread_deg: f64) -> Result<f64> {
    let feasible: Vec<f64> = SIDE_CUTS_DEG.iter().copied().filter(|c| 2.0 * c < spread_deg).collect();
    if feasible.is_empty() {
        return Err(Error::validation(format!(
            "a {spread_deg} deg cone is too narrow for any training cut"
        )));
    }
    Ok(feasible[rng.random_range(0..feasible.len())])
}

/// Debug dump: `target | masked input | augment mask` side by side.
pub fn write_triplet_grid(sample: &AugmentedSample, path: &Path) -> Result<()> {
    let row = concatenate(
        Axis(1),
        &[
            sample.target.view(),
            sample.masked_image.view(),
            sample.augment_mask.to_f32().view(),
        ],
    )
    .expect("triplet members share a shape");
    imageio::write_gray(&row, path)
}
