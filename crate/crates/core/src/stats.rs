//! Paired area study: mask areas, a Shapiro–Wilk normality screen and a
//! sign-flip permutation test on the paired differences, with a Wilcoxon
//! signed-rank test as a cross-check.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::seeding::derive_rng;

/// Pixel count, or cm² when a `(row, col)` spacing in mm/px is given.
pub fn mask_area(seg: &BinaryMask, pixel_spacing_mm: Option<(f64, f64)>) -> Result<f64> {
    let count = seg.count_ones() as f64;
    match pixel_spacing_mm {
        None => Ok(count),
        Some((dy, dx)) => {
            if !(dy > 0.0 && dx > 0.0 && dy.is_finite() && dx.is_finite()) {
                return Err(Error::validation(format!("invalid pixel spacing ({dy}, {dx})")));
            }
            Ok(count * dy * dx / 100.0)
        }
    }
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p: f64,
}

/// Shapiro–Wilk W with Royston's p-value approximation (algorithm AS R94).
pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::validation(format!(
            "Shapiro-Wilk needs 3 to 5000 observations, got {n}"
        )));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("Shapiro-Wilk sample contains non-finite values"));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range < 1e-19 * x[n - 1].abs().max(1.0) {
        return Err(Error::validation("Shapiro-Wilk sample has zero variance"));
    }

    let an = n as f64;
    let nn2 = n / 2;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    // a[k] for k in 0..nn2, positive, for the k-th largest minus k-th smallest
    let mut a = vec![0.0; nn2];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let m: Vec<f64> = (1..=nn2)
            .map(|i| std_normal.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        a[0] = a1;
        for i in first..nn2 {
            a[i] = -m[i] / fac;
        }
    }

    // W as the squared correlation between ordered data and coefficients
    let coef = |i: usize| -> f64 {
        let j = n - 1 - i;
        if i < j {
            -a[i]
        } else if i > j {
            a[j]
        } else {
            0.0
        }
    };
    let xs: Vec<f64> = x.iter().map(|v| v / range).collect();
    let sx = xs.iter().sum::<f64>() / an;
    let sa = (0..n).map(coef).sum::<f64>() / an;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (i, &xi) in xs.iter().enumerate() {
        let asa = coef(i) - sa;
        let xsx = xi - sx;
        ssa += asa * asa;
        ssx += xsx * xsx;
        sax += asa * xsx;
    }
    let ssassx = (ssa * ssx).sqrt();
    let w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx);
    let w = 1.0 - w1;

    if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        return Ok(ShapiroWilk { w, p: p.clamp(0.0, 1.0) });
    }
    let y = w1.ln();
    let lxx = an.ln();
    let (y, m, s) = if n <= 11 {
        let gamma = poly(&[-2.273, 0.459], an);
        if y >= gamma {
            return Ok(ShapiroWilk { w, p: 1e-99 });
        }
        (
            -(gamma - y).ln(),
            poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an),
            poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp(),
        )
    } else {
        (
            y,
            poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], lxx),
            poly(&[-0.4803, -0.082676, 0.0030302], lxx).exp(),
        )
    };
    let p = 1.0 - std_normal.cdf((y - m) / s);
    Ok(ShapiroWilk { w, p: p.clamp(0.0, 1.0) })
}

/// How the null distribution of the permutation test is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PermutationMode {
    /// Exhaustive for n <= 20, otherwise 100,000 seeded resamples.
    Auto { seed: u64 },
    Exhaustive,
    MonteCarlo { resamples: u64, seed: u64 },
}

pub const EXHAUSTIVE_MAX_N: usize = 20;
pub const DEFAULT_RESAMPLES: u64 = 100_000;

/// Number of sign patterns behind a p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Permutations {
    Sampled(u64),
    Exhaustive(Exhaustive),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exhaustive {
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// `|sum of differences|`
    pub t: f64,
    pub p: f64,
    pub n_permutations: Permutations,
}

/// Paired sign-flip permutation test on `gen - gt` differences.
///
/// Exhaustive enumeration gives the exact `p = #{|T*| >= |T|} / 2^n`
/// (the observed pattern is one of the 2^n). Monte Carlo uses
/// `(b + 1) / (m + 1)`.
pub fn permutation_test_paired(differences: &[f64], mode: PermutationMode) -> Result<PermutationResult> {
    let n = differences.len();
    if n < 2 {
        return Err(Error::validation(format!("permutation test needs at least 2 pairs, got {n}")));
    }
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::validation("differences contain non-finite values"));
    }
    let t: f64 = differences.iter().sum::<f64>().abs();
    let scale: f64 = differences.iter().map(|d| d.abs()).sum();
    let exhaustive = match mode {
        PermutationMode::Auto { .. } => n <= EXHAUSTIVE_MAX_N,
        PermutationMode::Exhaustive => true,
        PermutationMode::MonteCarlo { .. } => false,
    };
    if scale == 0.0 {
        let n_permutations = if exhaustive {
            Permutations::Exhaustive(Exhaustive::Exhaustive)
        } else {
            Permutations::Sampled(0)
        };
        return Ok(PermutationResult {
            t: 0.0,
            p: 1.0,
            n_permutations,
        });
    }
    // permuted statistics within rounding of the observed one count as ties
    let threshold = t - 1e-12 * scale;

    if exhaustive {
        if n > 30 {
            return Err(Error::validation(format!("exhaustive enumeration of 2^{n} patterns is not supported")));
        }
        // Gray-code walk: one sign changes per pattern
        let mut signs = vec![1.0f64; n];
        let mut sum: f64 = differences.iter().sum();
        let total = 1u64 << n;
        let mut hits = u64::from(sum.abs() >= threshold);
        for k in 1..total {
            let bit = k.trailing_zeros() as usize;
            signs[bit] = -signs[bit];
            sum += 2.0 * signs[bit] * differences[bit];
            if sum.abs() >= threshold {
                hits += 1;
            }
        }
        return Ok(PermutationResult {
            t,
            p: hits as f64 / total as f64,
            n_permutations: Permutations::Exhaustive(Exhaustive::Exhaustive),
        });
    }

    let (resamples, seed) = match mode {
        PermutationMode::MonteCarlo { resamples, seed } => (resamples, seed),
        PermutationMode::Auto { seed } => (DEFAULT_RESAMPLES, seed),
        PermutationMode::Exhaustive => unreachable!(),
    };
    if resamples == 0 {
        return Err(Error::validation("Monte Carlo permutation test needs resamples > 0"));
    }
    let mut rng = derive_rng(seed, 0x9e37, 0);
    let mut hits = 0u64;
    for _ in 0..resamples {
        let mut sum = 0.0;
        let mut bits = 0u64;
        for (i, d) in differences.iter().enumerate() {
            if i % 64 == 0 {
                bits = rng.random();
            }
            sum += if bits & (1 << (i % 64)) != 0 { *d } else { -*d };
        }
        if sum.abs() >= threshold {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        t,
        p: (hits + 1) as f64 / (resamples + 1) as f64,
        n_permutations: Permutations::Sampled(resamples),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W+, W-)` over the non-zero differences.
    pub statistic: f64,
    pub p: f64,
    pub exact: bool,
    pub n_used: usize,
}

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped;
/// exact null distribution for up to 50 untied differences, normal
/// approximation with tie correction otherwise.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<Wilcoxon> {
    let mut d: Vec<f64> = differences.iter().copied().filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("differences contain non-finite values"));
    }
    let n = d.len();
    if n == 0 {
        return Ok(Wilcoxon {
            statistic: 0.0,
            p: 1.0,
            exact: true,
            n_used: 0,
        });
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // average ranks of |d|
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for rank in &mut ranks[i..=j] {
            *rank = r;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let stat = w_plus.min(total - w_plus);
    let has_ties = tie_term > 0.0;

    if n <= 50 && !has_ties {
        // counts[s] = number of sign patterns with W+ = s
        let max = n * (n + 1) / 2;
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for k in 1..=n {
            for s in (k..=max).rev() {
                counts[s] += counts[s - k];
            }
        }
        let all: f64 = counts.iter().sum();
        let below: f64 = counts[..=stat as usize].iter().sum();
        return Ok(Wilcoxon {
            statistic: stat,
            p: (2.0 * below / all).min(1.0),
            exact: true,
            n_used: n,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (stat - mean) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(Wilcoxon {
        statistic: stat,
        p: (2.0 * normal.cdf(-z.abs())).min(1.0),
        exact: false,
        n_used: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaPair {
    pub case_id: String,
    pub gt_area: f64,
    pub gen_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedCase {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedAreaStudy {
    pub pairs: Vec<AreaPair>,
    /// `pixels` or `cm2`.
    pub units: String,
    pub normality_gt: Option<ShapiroWilk>,
    pub normality_diff: Option<ShapiroWilk>,
    pub permutation_t: f64,
    pub permutation_p: f64,
    pub n_permutations: Permutations,
    pub wilcoxon: Option<Wilcoxon>,
    pub excluded: Vec<ExcludedCase>,
    pub decision: String,
}

impl PairedAreaStudy {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        let sw = |s: &Option<ShapiroWilk>| match s {
            Some(s) => format!("W = {:.4}, p = {:.4}", s.w, s.p),
            None => "not computed".to_string(),
        };
        let perms = match self.n_permutations {
            Permutations::Sampled(m) => format!("{m} resamples"),
            Permutations::Exhaustive(_) => "exhaustive".to_string(),
        };
        let mut s = format!(
            "paired cases: {} (excluded {})\nunits: {}\nShapiro-Wilk, ground-truth areas: {}\nShapiro-Wilk, differences: {}\npermutation test: T = {:.4}, p = {:.4} ({perms})\n",
            self.pairs.len(),
            self.excluded.len(),
            self.units,
            sw(&self.normality_gt),
            sw(&self.normality_diff),
            self.permutation_t,
            self.permutation_p,
        );
        if let Some(w) = &self.wilcoxon {
            s.push_str(&format!(
                "Wilcoxon signed-rank: statistic = {}, p = {:.4} ({})\n",
                w.statistic,
                w.p,
                if w.exact { "exact" } else { "normal approximation" }
            ));
        }
        s.push_str(&self.decision);
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StudyOptions {
    pub pixel_spacing_mm: Option<(f64, f64)>,
    pub mode: PermutationMode,
    pub alpha: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            pixel_spacing_mm: None,
            mode: PermutationMode::Auto { seed: 0 },
            alpha: 0.05,
        }
    }
}

/// Runs the protocol on already measured pairs.
pub fn analyze_pairs(mut pairs: Vec<AreaPair>, excluded: Vec<ExcludedCase>, units: &str, opts: &StudyOptions) -> Result<PairedAreaStudy> {
    pairs.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    if pairs.windows(2).any(|w| w[0].case_id == w[1].case_id) {
        return Err(Error::validation("duplicate case_id in pairing"));
    }
    if pairs.iter().any(|p| !(p.gt_area >= 0.0 && p.gen_area >= 0.0)) {
        return Err(Error::validation("areas must be non-negative"));
    }
    let diffs: Vec<f64> = pairs.iter().map(|p| p.gen_area - p.gt_area).collect();
    let gts: Vec<f64> = pairs.iter().map(|p| p.gt_area).collect();
    let screen = |v: &[f64]| -> Option<ShapiroWilk> { shapiro_wilk(v).ok() };
    let normality_gt = screen(&gts);
    let normality_diff = screen(&diffs);
    let perm = permutation_test_paired(&diffs, opts.mode)?;
    let wilcoxon = wilcoxon_signed_rank(&diffs).ok();

    let alpha = opts.alpha;
    let mut decision = match normality_diff {
        Some(s) if s.p < alpha => format!(
            "Normality of the paired differences is rejected (Shapiro-Wilk p = {:.4} < {alpha}); the non-parametric permutation test is used.",
            s.p
        ),
        Some(s) => format!(
            "Normality of the paired differences is not rejected (Shapiro-Wilk p = {:.4}); the permutation test is reported regardless since it does not rely on it.",
            s.p
        ),
        None => "Normality could not be assessed (fewer than 3 cases or constant differences); the permutation test is used.".to_string(),
    };
    decision.push(' ');
    decision.push_str(&if perm.p < alpha {
        format!("Areas differ significantly (permutation p = {:.4} < {alpha}).", perm.p)
    } else {
        format!("No significant difference between the areas (permutation p = {:.4} >= {alpha}).", perm.p)
    });
    Ok(PairedAreaStudy {
        pairs,
        units: units.to_string(),
        normality_gt,
        normality_diff,
        permutation_t: perm.t,
        permutation_p: perm.p,
        n_permutations: perm.n_permutations,
        wilcoxon,
        excluded,
        decision,
    })
}

#[derive(Debug, Deserialize)]
struct PairingRow {
    case_id: String,
    gt_mask_path: PathBuf,
    gen_mask_path: PathBuf,
}

/// Reads a pairing CSV (`case_id,gt_mask_path,gen_mask_path`; relative
/// paths resolve against `gt_dir` and `gen_dir`), measures every mask and
/// runs the protocol. Cases with a missing or unreadable mask are excluded
/// with a warning.
pub fn run_study(gt_dir: &Path, gen_dir: &Path, pairing_csv: &Path, opts: &StudyOptions) -> Result<PairedAreaStudy> {
    let mut reader = csv::Reader::from_path(pairing_csv)?;
    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    for row in reader.deserialize::<PairingRow>() {
        let row = row?;
        let measure = |p: PathBuf| -> Result<f64> {
            let mask = BinaryMask::load_png(&p)?;
            mask_area(&mask, opts.pixel_spacing_mm)
        };
        match (measure(gt_dir.join(&row.gt_mask_path)), measure(gen_dir.join(&row.gen_mask_path))) {
            (Ok(gt_area), Ok(gen_area)) => pairs.push(AreaPair {
                case_id: row.case_id,
                gt_area,
                gen_area,
            }),
            (gt, gen) => {
                let reason = gt.err().or(gen.err()).map(|e| e.to_string()).unwrap_or_default();
                log::warn!("excluding case {}: {reason}", row.case_id);
                excluded.push(ExcludedCase {
                    case_id: row.case_id,
                    reason,
                });
            }
        }
    }
    let units = if opts.pixel_spacing_mm.is_some() { "cm2" } else { "pixels" };
    analyze_pairs(pairs, excluded, units, opts)
}
