//! Differentiable ISP blocks: global gain (GG), white balance (WB), color
//! correction (CC), gamma correction (GC) and dynamic tone mapping (DTM).
//!
//! "Forward" follows the camera (RAW → RGB); "reverse" undoes it. Every block
//! operates on `H × W × 3` images recorded on a [`Tape`] so gradients reach both
//! the image and the block parameters. Typed parameter structs wrap the same
//! code for plain-tensor use.

mod demosaic;
mod dtm;
mod pipeline;

use alloc::vec;

use serde::{Deserialize, Serialize};

pub use demosaic::{demosaic_bilinear, BayerPattern};
pub use dtm::{dtm_apply, dtm_kernel_shape, DtmParams, DTM_CHANNELS, DTM_LAYERS};
pub use pipeline::{pipeline_forward, pipeline_reverse, PipelineParams, PipelineVars};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Floor applied before the gamma power.
pub const GAMMA_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// RAW → RGB.
    Forward,
    /// RGB → RAW.
    Reverse,
}

fn positive<T: Real>(tape: &Tape<T>, v: Var, op: &'static str) -> Result<()> {
    if tape.value(v).data().iter().any(|&g| !(g > T::zero())) {
        return Err(invalid(op, "gain must be > 0"));
    }
    Ok(())
}

fn check_rgb<T: Real>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [h, w, 3] => Ok((h, w)),
        _ => Err(invalid(op, "expected an H×W×3 image")),
    }
}

/// Global gain: `g·x` forward, highlight-preserving `x/g` in reverse.
pub fn gg_apply<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, dir: Direction) -> Result<Var> {
    check_rgb(tape, x, "gg_apply")?;
    if tape.value(gain).numel() != 1 {
        return Err(invalid("gg_apply", "gain must be a scalar"));
    }
    positive(tape, gain, "gg_apply")?;
    match dir {
        Direction::Forward => tape.mul_channels(x, gain),
        Direction::Reverse => tape.safe_inverse_gain(x, gain),
    }
}

/// White balance: `X·diag(g_r, g_g, g_b)` forward, highlight-preserving inverse in reverse.
pub fn wb_apply<T: Real>(tape: &mut Tape<T>, x: Var, gains: Var, dir: Direction) -> Result<Var> {
    check_rgb(tape, x, "wb_apply")?;
    if tape.value(gains).numel() != 3 {
        return Err(invalid("wb_apply", "expected three channel gains"));
    }
    positive(tape, gains, "wb_apply")?;
    match dir {
        Direction::Forward => tape.mul_channels(x, gains),
        Direction::Reverse => tape.safe_inverse_gain(x, gains),
    }
}

/// Color correction with a column-normalized CCM: `X·M` forward, `X·M⁻¹` in reverse.
pub fn cc_apply<T: Real>(tape: &mut Tape<T>, x: Var, ccm: Var, dir: Direction) -> Result<Var> {
    let (h, w) = check_rgb(tape, x, "cc_apply")?;
    let m = tape.column_normalize(ccm)?;
    let m = match dir {
        Direction::Forward => m,
        Direction::Reverse => tape.inverse3(m)?,
    };
    let flat = tape.reshape(x, &[h * w, 3])?;
    let y = tape.matmul3(flat, m)?;
    tape.reshape(y, &[h, w, 3])
}

/// Gamma: `max(x, 1e-8)^(1/γ)` forward, `max(x, 1e-8)^γ` in reverse.
pub fn gc_apply<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, dir: Direction) -> Result<Var> {
    if tape.value(gamma).numel() != 1 {
        return Err(invalid("gc_apply", "gamma must be a scalar"));
    }
    positive(tape, gamma, "gc_apply")?;
    let floored = tape.max(x, GAMMA_FLOOR)?;
    let exponent = match dir {
        Direction::Forward => tape.recip(gamma)?,
        Direction::Reverse => gamma,
    };
    tape.pow(floored, exponent)
}

/// Runs a tape-level block on a plain image with constant parameters.
fn apply_plain(
    x: &Tensor,
    params: Tensor,
    f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(params);
    let y = f(&mut tape, xv, pv)?;
    Ok(tape.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GgParam {
    pub gain: f32,
}

impl GgParam {
    pub fn new(gain: f32) -> Result<Self> {
        if !(gain > 0.0) {
            return Err(invalid("GgParam", "gain must be > 0"));
        }
        Ok(Self { gain })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::scalar(self.gain)
    }

    pub fn apply(&self, x: &Tensor, dir: Direction) -> Result<Tensor> {
        apply_plain(x, self.tensor(), |t, x, p| gg_apply(t, x, p, dir))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WbParam {
    pub gains: [f32; 3],
}

impl WbParam {
    pub fn new(gains: [f32; 3]) -> Result<Self> {
        if gains.iter().any(|&g| !(g > 0.0)) {
            return Err(invalid("WbParam", "gains must be > 0"));
        }
        Ok(Self { gains })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.gains.to_vec())
    }

    pub fn apply(&self, x: &Tensor, dir: Direction) -> Result<Tensor> {
        apply_plain(x, self.tensor(), |t, x, p| wb_apply(t, x, p, dir))
    }
}

/// A 3×3 color correction matrix, row-major, applied as `pixel · M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcParam {
    pub ccm: [f32; 9],
}

pub const IDENTITY_CCM: [f32; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl CcParam {
    /// Normalizes the columns and checks invertibility.
    pub fn new(ccm: [f32; 9]) -> Result<Self> {
        let ccm = column_normalize(&ccm)?;
        let det = crate::autodiff::det3(&ccm);
        if !(det.abs() > crate::autodiff::SINGULAR_EPS) {
            return Err(Error::SingularMatrix(det));
        }
        Ok(Self { ccm })
    }

    pub fn identity() -> Self {
        Self { ccm: IDENTITY_CCM }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![3, 3], self.ccm.to_vec()).expect("3×3")
    }

    pub fn apply(&self, x: &Tensor, dir: Direction) -> Result<Tensor> {
        apply_plain(x, self.tensor(), |t, x, p| cc_apply(t, x, p, dir))
    }
}

/// Divides each column of a row-major 3×3 matrix by its sum.
pub fn column_normalize(m: &[f32; 9]) -> Result<[f32; 9]> {
    let mut out = *m;
    for j in 0..3 {
        let s = m[j] + m[3 + j] + m[6 + j];
        if s.abs() < 1e-12 {
            return Err(invalid("column_normalize", "column sums to zero"));
        }
        for i in 0..3 {
            out[i * 3 + j] /= s;
        }
    }
    Ok(out)
}

/// Inverse of a row-major 3×3 matrix.
pub fn invert_ccm(m: &[f32; 9]) -> Result<[f32; 9]> {
    crate::autodiff::invert3(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcParam {
    pub gamma: f32,
}

impl GcParam {
    pub fn new(gamma: f32) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(invalid("GcParam", "gamma must be > 0"));
        }
        Ok(Self { gamma })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::scalar(self.gamma)
    }

    pub fn apply(&self, x: &Tensor, dir: Direction) -> Result<Tensor> {
        apply_plain(x, self.tensor(), |t, x, p| gc_apply(t, x, p, dir))
    }
}
