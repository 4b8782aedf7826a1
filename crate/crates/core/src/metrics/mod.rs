//! Image-quality metrics and the paired evaluation split.
//!
//! Per-pixel sums run in `f64`; reported values are `f32` except histogram
//! intersection, which is a ratio of large counts.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::isp::invert_ccm;
use crate::tensor::Tensor;


/// Reported PSNR for images closer than this.
pub const PSNR_CAP_DB: f32 = 99.0;

/// D65 reference white in XYZ, `Y = 1`.
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

pub const HISTOGRAM_BINS: usize = 512;
pub const HISTOGRAM_RANGE: (f64, f64) = (-150.0, 150.0);

fn same_rgb_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    let (h, w, c) = a.dims3()?;
    if c != 3 {
        return Err(invalid(op, "expected 3 channels"));
    }
    if h * w == 0 {
        return Err(invalid(op, "empty image"));
    }
    Ok(h * w)
}

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f32> {
    if pred.shape() != gt.shape() {
        return Err(mismatch("psnr", pred.shape(), gt.shape()));
    }
    if pred.numel() == 0 {
        return Err(invalid("psnr", "empty image"));
    }
    if !pred.is_finite() || !gt.is_finite() {
        return Err(invalid("psnr", "non-finite pixel"));
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .sum();
    let mse = sse / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * Float::log10(mse)).min(PSNR_CAP_DB as f64) as f32)
}

/// Mean per-pixel angle between RGB vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularError {
    pub mean_degrees: f32,
    /// Pixels that entered the mean.
    pub valid_pixels: usize,
    /// Pixels skipped because either vector has zero norm.
    pub skipped_pixels: usize,
}

/// Mean angle in degrees; pixels where either vector is zero are skipped.
pub fn angular_error(pred: &Tensor, gt: &Tensor) -> Result<AngularError> {
    let n = same_rgb_shape("angular_error", pred, gt)?;
    let mut sum = 0.0f64;
    let mut valid = 0usize;
    for (p, g) in pred.data().chunks_exact(3).zip(gt.data().chunks_exact(3)) {
        let a = [p[0] as f64, p[1] as f64, p[2] as f64];
        let b = [g[0] as f64, g[1] as f64, g[2] as f64];
        if a == [0.0; 3] || b == [0.0; 3] {
            continue;
        }
        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let sin = Float::sqrt(cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]);
        // atan2 stays accurate near 0° where acos of a rounded cosine does not.
        sum += Float::to_degrees(Float::atan2(sin, dot));
        valid += 1;
    }
    if valid == 0 {
        return Err(invalid("angular_error", "every pixel has zero norm"));
    }
    Ok(AngularError {
        mean_degrees: (sum / valid as f64) as f32,
        valid_pixels: valid,
        skipped_pixels: n - valid,
    })
}

fn lab_companding(t: f64) -> f64 {
    const EPSILON: f64 = 216.0 / 24389.0;
    const KAPPA: f64 = 24389.0 / 27.0;
    if t > EPSILON {
        Float::cbrt(t)
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// CIE Lab of an XYZ triple under the D65 white.
pub fn xyz_to_lab(xyz: [f64; 3]) -> [f64; 3] {
    let f = [
        lab_companding(xyz[0] / D65_WHITE[0]),
        lab_companding(xyz[1] / D65_WHITE[1]),
        lab_companding(xyz[2] / D65_WHITE[2]),
    ];
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

/// Per-pixel Lab of a RAW image: `xyz = raw · ccm` (row-major), then D65 Lab.
pub fn raw_to_lab(raw: &Tensor, ccm: &[f32; 9]) -> Result<Tensor> {
    let (h, w, c) = raw.dims3()?;
    if c != 3 {
        return Err(invalid("raw_to_lab", "expected 3 channels"));
    }
    invert_ccm(ccm)?;
    let m: Vec<f64> = ccm.iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(raw.numel());
    for p in raw.data().chunks_exact(3) {
        let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let xyz = [
            r * m[0] + g * m[3] + b * m[6],
            r * m[1] + g * m[4] + b * m[7],
            r * m[2] + g * m[5] + b * m[8],
        ];
        out.extend(xyz_to_lab(xyz).iter().map(|&v| v as f32));
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Per-channel histograms of Lab values over a fixed range.
///
/// Values outside the range land in the edge bins. Sets with the same
/// binning merge associatively, so partial sets can be built in parallel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSet {
    bins: usize,
    lo: f64,
    hi: f64,
    counts: [Vec<u64>; 3],
    total: u64,
}

impl Default for HistogramSet {
    fn default() -> Self {
        Self::new(HISTOGRAM_BINS, HISTOGRAM_RANGE.0, HISTOGRAM_RANGE.1)
            .expect("default binning is valid")
    }
}

impl HistogramSet {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(
                "HistogramSet::new",
                "need bins > 0 and a finite lo < hi",
            ));
        }
        Ok(Self {
            bins,
            lo,
            hi,
            counts: [vec![0; bins], vec![0; bins], vec![0; bins]],
            total: 0,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Pixels counted; every channel sums to this.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self, channel: usize) -> &[u64] {
        &self.counts[channel]
    }

    /// Bin of `v`, clamped into `[0, bins)`.
    pub fn bin_of(&self, v: f64) -> usize {
        let t = (v - self.lo) / (self.hi - self.lo) * self.bins as f64;
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(self.bins - 1)
        }
    }

    /// Adds the pixels of an `H × W × 3` Lab image.
    pub fn add_image(&mut self, lab: &Tensor) -> Result<()> {
        let (_, _, c) = lab.dims3()?;
        if c != 3 {
            return Err(invalid("HistogramSet::add_image", "expected 3 channels"));
        }
        if !lab.is_finite() {
            return Err(invalid("HistogramSet::add_image", "non-finite Lab value"));
        }
        for p in lab.data().chunks_exact(3) {
            let bins: [usize; 3] = core::array::from_fn(|ch| self.bin_of(p[ch] as f64));
            for (counts, b) in self.counts.iter_mut().zip(bins) {
                counts[b] += 1;
            }
            self.total += 1;
        }
        Ok(())
    }

    pub fn same_binning(&self, other: &Self) -> bool {
        self.bins == other.bins && self.lo == other.lo && self.hi == other.hi
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if !self.same_binning(other) {
            return Err(invalid("HistogramSet::merge", "bin count or range differs"));
        }
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (a, &b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
        self.total += other.total;
        Ok(())
    }

    /// Mean over L, a, b of `Σ_j min(p_j, q_j)` with counts scaled to densities.
    ///
    /// With equal totals this is the plain min-sum divided by `3N`.
    pub fn intersection(&self, other: &Self) -> Result<f64> {
        if !self.same_binning(other) {
            return Err(invalid(
                "histogram_intersection",
                "bin count or range differs",
            ));
        }
        if self.total == 0 || other.total == 0 {
            return Err(invalid("histogram_intersection", "empty histogram"));
        }
        // `min(x/na, y/nb) = min(x·nb, y·na) / (na·nb)`; summing the integer
        // numerators keeps identical sets at exactly 1.
        let (na, nb) = (self.total as u128, other.total as u128);
        let mut sum = 0.0;
        for (a, b) in self.counts.iter().zip(&other.counts) {
            let overlap: u128 = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as u128 * nb).min(y as u128 * na))
                .sum();
            sum += overlap as f64 / (na * nb) as f64;
        }
        Ok(sum / 3.0)
    }
}

pub fn histogram_intersection(reference: &HistogramSet, generated: &HistogramSet) -> Result<f64> {
    reference.intersection(generated)
}

/// One evaluated quadrant: RGB input and the RAW it should convert to.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalUnit {
    pub rgb: Tensor,
    pub raw: Tensor,
}

/// A paired image split for evaluation.
///
/// After turning the pair landscape, the left RAW half is the reference and
/// the right half is cut into top and bottom units.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSplit {
    /// Whether the input was portrait and got rotated a quarter turn.
    pub rotated: bool,
    pub reference: Tensor,
    pub units: [EvalUnit; 2],
}

pub fn split_protocol(rgb: &Tensor, raw: &Tensor) -> Result<PairSplit> {
    if rgb.shape() != raw.shape() {
        return Err(mismatch("split_protocol", rgb.shape(), raw.shape()));
    }
    let (h, w, _) = rgb.dims3()?;
    let rotated = h > w;
    let (rgb, raw) = if rotated {
        (rgb.rot90(1)?, raw.rot90(1)?)
    } else {
        (rgb.clone(), raw.clone())
    };
    let (h, w) = if rotated { (w, h) } else { (h, w) };
    if w < 4 {
        return Err(invalid("split_protocol", "width below 4"));
    }
    if h < 2 {
        return Err(invalid("split_protocol", "height below 2"));
    }
    let left = w / 2;
    let right = w - left;
    let top = h / 2;
    let unit = |y0: usize, rows: usize| -> Result<EvalUnit> {
        Ok(EvalUnit {
            rgb: rgb.crop(y0, left, rows, right)?,
            raw: raw.crop(y0, left, rows, right)?,
        })
    };
    Ok(PairSplit {
        rotated,
        reference: raw.crop(0, 0, h, left)?,
        units: [unit(0, top)?, unit(top, h - top)?],
    })
}

impl PairSplit {
    /// The landscape RAW image rebuilt from the reference and both units.
    pub fn reassemble_raw(&self) -> Result<Tensor> {
        let (h, left, c) = self.reference.dims3()?;
        let (top, right, _) = self.units[0].raw.dims3()?;
        let mut out = Tensor::zeros(vec![h, left + right, c]);
        out.paste(&self.reference, 0, 0)?;
        out.paste(&self.units[0].raw, 0, left)?;
        out.paste(&self.units[1].raw, top, left)?;
        Ok(out)
    }
}

/// Metrics of one evaluated image or unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f32,
    pub ae_deg: f32,
    pub ae_skipped_pixels: usize,
}

impl EvalRow {
    pub fn compute(id: impl Into<String>, pred: &Tensor, gt: &Tensor) -> Result<Self> {
        let ae = angular_error(pred, gt)?;
        Ok(Self {
            id: id.into(),
            psnr_db: psnr(pred, gt)?,
            ae_deg: ae.mean_degrees,
            ae_skipped_pixels: ae.skipped_pixels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub count: usize,
    pub psnr_db: f32,
    pub ae_deg: f32,
    /// Intersection of pooled histograms, when a set-level comparison was run.
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub checkpoint_id: String,
}

/// Per-image rows plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: RunInfo,
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalAggregate,
}

impl EvalReport {
    pub fn new(run: RunInfo, rows: Vec<EvalRow>, hi: Option<f64>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(invalid("EvalReport::new", "no rows"));
        }
        let mean = |f: fn(&EvalRow) -> f32| -> f32 {
            (rows.iter().map(|r| f(r) as f64).sum::<f64>() / n as f64) as f32
        };
        let aggregate = EvalAggregate {
            count: n,
            psnr_db: mean(|r| r.psnr_db),
            ae_deg: mean(|r| r.ae_deg),
            hi,
        };
        Ok(Self {
            run,
            rows,
            aggregate,
        })
    }
}
