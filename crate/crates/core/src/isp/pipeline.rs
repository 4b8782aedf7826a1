//! Composition of the five blocks.
//!
//! Reverse: TM⁻¹ → GC⁻¹ → CC⁻¹ → WB⁻¹ → GG⁻¹ → clamp.
//! Forward: GG → WB → CC → GC → TM → clamp.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{cc_apply, dtm_apply, gc_apply, gg_apply, wb_apply};
use super::{CcParam, Direction, DtmParams, GcParam, GgParam, WbParam};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

/// Rows per band on the plain-tensor paths; bounds activation memory on large images.
pub(crate) const BAND_ROWS: usize = 128;

/// Receptive-field radius of the tone-mapping CNN in rows.
pub(crate) const DTM_HALO: usize = super::DTM_LAYERS;

/// Runs `f` on overlapping row bands and stitches the centers.
///
/// `f` must be a shape-preserving map whose output row `r` depends only on
/// input rows within `halo` of `r`.
pub(crate) fn banded(
    x: &Tensor,
    halo: usize,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    banded_rows(x, halo, BAND_ROWS, f)
}

pub(crate) fn banded_rows(
    x: &Tensor,
    halo: usize,
    rows: usize,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if h <= rows {
        return f(x);
    }
    let mut out = Tensor::zeros(alloc::vec![h, w, c]);
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let top = y0.saturating_sub(halo);
        let bottom = (y1 + halo).min(h);
        let result = f(&x.crop(top, 0, bottom - top, w)?)?;
        out.paste(&result.crop(y0 - top, 0, y1 - y0, w)?, y0, 0)?;
        y0 = y1;
    }
    Ok(out)
}

/// Tape handles for every block parameter. Empty DTM layer lists disable tone mapping.
#[derive(Debug, Clone)]
pub struct PipelineVars {
    pub gg: Var,
    pub wb: Var,
    pub cc: Var,
    pub gc: Var,
    pub dtm_forward: Vec<(Var, Var)>,
    pub dtm_reverse: Vec<(Var, Var)>,
}

/// RGB → RAW. Output clamped to `[0, 1]`.
pub fn pipeline_reverse<T: Real>(tape: &mut Tape<T>, x: Var, p: &PipelineVars) -> Result<Var> {
    let mut h = x;
    if !p.dtm_reverse.is_empty() {
        h = dtm_apply(tape, h, &p.dtm_reverse)?;
    }
    h = gc_apply(tape, h, p.gc, Direction::Reverse)?;
    h = cc_apply(tape, h, p.cc, Direction::Reverse)?;
    h = wb_apply(tape, h, p.wb, Direction::Reverse)?;
    h = gg_apply(tape, h, p.gg, Direction::Reverse)?;
    tape.clamp(h, 0.0, 1.0)
}

/// RAW → RGB. Output clamped to `[0, 1]`.
pub fn pipeline_forward<T: Real>(tape: &mut Tape<T>, y: Var, p: &PipelineVars) -> Result<Var> {
    let mut h = gg_apply(tape, y, p.gg, Direction::Forward)?;
    h = wb_apply(tape, h, p.wb, Direction::Forward)?;
    h = cc_apply(tape, h, p.cc, Direction::Forward)?;
    h = gc_apply(tape, h, p.gc, Direction::Forward)?;
    if !p.dtm_forward.is_empty() {
        h = dtm_apply(tape, h, &p.dtm_forward)?;
    }
    tape.clamp(h, 0.0, 1.0)
}

/// Concrete parameter values for a full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub gg: GgParam,
    pub wb: WbParam,
    pub cc: CcParam,
    pub gc: GcParam,
    /// `None` disables forward tone mapping.
    pub dtm_forward: Option<DtmParams>,
    /// `None` disables reverse tone mapping.
    pub dtm_reverse: Option<DtmParams>,
}

impl PipelineParams {
    /// Every block at its identity; tone mapping disabled.
    pub fn identity() -> Self {
        Self {
            gg: GgParam { gain: 1.0 },
            wb: WbParam {
                gains: [1.0, 1.0, 1.0],
            },
            cc: CcParam::identity(),
            gc: GcParam { gamma: 1.0 },
            dtm_forward: None,
            dtm_reverse: None,
        }
    }

    pub fn constants(&self, tape: &mut Tape) -> Result<PipelineVars> {
        let dtm = |tape: &mut Tape, d: &Option<DtmParams>| match d {
            Some(d) => d.constants(tape),
            None => Ok(Vec::new()),
        };
        Ok(PipelineVars {
            gg: tape.constant(self.gg.tensor()),
            wb: tape.constant(self.wb.tensor()),
            cc: tape.constant(self.cc.tensor()),
            gc: tape.constant(self.gc.tensor()),
            dtm_forward: dtm(tape, &self.dtm_forward)?,
            dtm_reverse: dtm(tape, &self.dtm_reverse)?,
        })
    }

    fn halo(&self) -> usize {
        if self.dtm_forward.is_some() || self.dtm_reverse.is_some() {
            DTM_HALO
        } else {
            0
        }
    }

    /// RGB → RAW on a plain image, processed in row bands.
    pub fn reverse(&self, x: &Tensor) -> Result<Tensor> {
        banded(x, self.halo(), |band| {
            let mut tape = Tape::new();
            let vars = self.constants(&mut tape)?;
            let xv = tape.constant(band.clone());
            let y = pipeline_reverse(&mut tape, xv, &vars)?;
            Ok(tape.value(y).clone())
        })
    }

    /// RAW → RGB on a plain image, processed in row bands.
    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        banded(y, self.halo(), |band| {
            let mut tape = Tape::new();
            let vars = self.constants(&mut tape)?;
            let yv = tape.constant(band.clone());
            let x = pipeline_forward(&mut tape, yv, &vars)?;
            Ok(tape.value(x).clone())
        })
    }
}
