//! Pseudo-pair generation.
//!
//! * PP_rand: a real RAW image `y` rendered to a pseudo-RGB `x̂` by a
//!   randomized conventional ISP.
//! * PP_MT: a real RGB image `x` unprocessed by the EMA teacher into `ŷ`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::isp::{column_normalize, CcParam, Direction, GcParam, GgParam, WbParam};
use crate::selector::Model;
use crate::tensor::Tensor;

/// BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

const BUILTIN_POOL: &str = include_str!("../data/ccm_pool.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCcm {
    pub name: String,
    pub ccm: [f32; 9],
}

/// Camera color matrices used for randomized rendering and CC initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CcmPool {
    entries: Vec<NamedCcm>,
}

impl CcmPool {
    /// Column-normalizes every entry and rejects singular ones.
    pub fn new(entries: Vec<NamedCcm>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::CcmPool("pool is empty".into()));
        }
        let entries = entries
            .into_iter()
            .map(|e| {
                let ccm = CcParam::new(e.ccm)
                    .map_err(|err| Error::CcmPool(alloc::format!("{}: {err}", e.name)))?
                    .ccm;
                Ok(NamedCcm { name: e.name, ccm })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    /// Parses a JSON array of `{name, ccm}` records.
    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<NamedCcm> =
            serde_json::from_str(text).map_err(|e| Error::CcmPool(alloc::format!("{e}")))?;
        Self::new(entries)
    }

    /// The eight matrices shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_POOL).expect("built-in pool is valid")
    }

    pub fn entries(&self) -> &[NamedCcm] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for CcmPool {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Column-normalized `w·a + (1 − w)·b`.
pub fn interpolate_ccm(a: &[f32; 9], b: &[f32; 9], w: f32) -> Result<CcParam> {
    let mut m = [0.0f32; 9];
    for i in 0..9 {
        m[i] = w * a[i] + (1.0 - w) * b[i];
    }
    CcParam::new(column_normalize(&m)?)
}

/// Blends two pool members with a uniform weight.
pub fn sample_ccm<R: Rng + ?Sized>(pool: &CcmPool, rng: &mut R) -> Result<CcParam> {
    let e = pool.entries();
    let a = &e[rng.gen_range(0..e.len())].ccm;
    let b = &e[rng.gen_range(0..e.len())].ccm;
    let w: f32 = rng.gen_range(0.0..1.0);
    interpolate_ccm(a, b, w)
}

/// Pixels kept by luma trimming: those with luma between the `trim` and
/// `1 − trim` order statistics, inclusive.
pub fn trim_mask(y: &Tensor, trim: f32) -> Result<Vec<bool>> {
    if y.dims3()?.2 != 3 {
        return Err(invalid("trim_mask", "expected an H×W×3 image"));
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(invalid("trim_mask", "trim fraction must be in [0, 0.5)"));
    }
    let luma: Vec<f32> = y
        .data()
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect();
    if luma.is_empty() {
        return Err(invalid("trim_mask", "empty image"));
    }
    let mut sorted = luma.clone();
    sorted.sort_by(f32::total_cmp);
    let last = (sorted.len() - 1) as f32;
    let lo = sorted[libm::floorf(trim * last) as usize];
    let hi = sorted[libm::ceilf((1.0 - trim) * last) as usize];
    Ok(luma.iter().map(|&l| l >= lo && l <= hi).collect())
}

/// Gray-world white-balance gains `(Ḡ/R̄, 1, Ḡ/B̄)` over luma-trimmed pixels.
pub fn grayworld_gains(y: &Tensor, trim: f32) -> Result<WbParam> {
    let keep = trim_mask(y, trim)?;
    let mut sums = [0.0f64; 3];
    let mut n = 0usize;
    for (p, &k) in y.data().chunks_exact(3).zip(&keep) {
        if k {
            n += 1;
            for c in 0..3 {
                sums[c] += p[c] as f64;
            }
        }
    }
    if n == 0 {
        return Err(invalid("grayworld_gains", "all pixels trimmed"));
    }
    if sums.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid("grayworld_gains", "zero channel mean"));
    }
    WbParam::new([(sums[1] / sums[0]) as f32, 1.0, (sums[1] / sums[2]) as f32])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandIspConfig {
    pub gain_range: (f32, f32),
    pub gamma_range: (f32, f32),
    pub trim: f32,
    pub pool: CcmPool,
    pub seed: u64,
}

impl Default for RandIspConfig {
    fn default() -> Self {
        Self {
            gain_range: (1.0, 2.0),
            gamma_range: (2.2, 3.2),
            trim: 0.05,
            pool: CcmPool::builtin(),
            seed: 0,
        }
    }
}

impl RandIspConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f32, f32)| lo > 0.0 && hi >= lo;
        if !ok(self.gain_range) || !ok(self.gamma_range) {
            return Err(invalid(
                "RandIspConfig",
                "ranges must be positive and ordered",
            ));
        }
        if !(0.0..0.5).contains(&self.trim) {
            return Err(invalid(
                "RandIspConfig",
                "trim fraction must be in [0, 0.5)",
            ));
        }
        Ok(())
    }

    /// RNG stream for image `index`.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ index)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RandIspDraw> {
        self.validate()?;
        let range = |rng: &mut R, (lo, hi): (f32, f32)| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        };
        let gain = range(rng, self.gain_range);
        let cc = sample_ccm(&self.pool, rng)?;
        let gamma = range(rng, self.gamma_range);
        Ok(RandIspDraw {
            gain: GgParam::new(gain)?,
            cc,
            gamma: GcParam::new(gamma)?,
        })
    }
}

/// Sampled parameters of one randomized rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandIspDraw {
    pub gain: GgParam,
    pub cc: CcParam,
    pub gamma: GcParam,
}

/// `3t² − 2t³`.
pub fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Renders RAW `y` with gray-world WB, then the drawn gain, CCM and gamma,
/// then a smoothstep tone curve.
pub fn render_rand_isp(y: &Tensor, draw: &RandIspDraw, trim: f32) -> Result<Tensor> {
    let wb = grayworld_gains(y, trim)?;
    let mut h = wb.apply(y, Direction::Forward)?;
    h = draw.gain.apply(&h, Direction::Forward)?;
    h = draw.cc.apply(&h, Direction::Forward)?;
    h = draw.gamma.apply(&h, Direction::Forward)?;
    Ok(h.map(|v| smoothstep(v.clamp(0.0, 1.0)).clamp(0.0, 1.0)))
}

/// PP_rand rendering with parameters drawn from `rng`.
pub fn isp_rand<R: Rng + ?Sized>(y: &Tensor, cfg: &RandIspConfig, rng: &mut R) -> Result<Tensor> {
    let draw = cfg.draw(rng)?;
    render_rand_isp(y, &draw, cfg.trim)
}

/// Which tensor the student sees as its reference in a PP_MT pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PpMtReference {
    /// The teacher's output `ŷ`.
    #[default]
    TeacherOutput,
    /// The unpaired RAW `y_r` the teacher was conditioned on.
    TargetRaw,
}

/// A student training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct PpMtTriple {
    pub input: Tensor,
    pub reference: Tensor,
    pub target: Tensor,
}

/// Unprocesses `x` with the teacher conditioned on `y_r`.
pub fn make_pp_mt(
    x: &Tensor,
    y_r: &Tensor,
    teacher: &Model,
    mode: PpMtReference,
) -> Result<PpMtTriple> {
    let y_hat = teacher.convert(x, y_r)?;
    let reference = match mode {
        PpMtReference::TeacherOutput => y_hat.clone(),
        PpMtReference::TargetRaw => y_r.clone(),
    };
    Ok(PpMtTriple {
        input: x.clone(),
        reference,
        target: y_hat,
    })
}
