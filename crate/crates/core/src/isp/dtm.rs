//! Dynamic tone mapping: a residual 4-layer 3×3 CNN, `x + CNN(x)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DTM_LAYERS: usize = 4;
/// Channel count at each layer boundary.
pub const DTM_CHANNELS: [usize; DTM_LAYERS + 1] = [3, 32, 32, 32, 3];

/// Kernel shape of layer `l`.
pub fn dtm_kernel_shape(l: usize) -> [usize; 4] {
    [3, 3, DTM_CHANNELS[l], DTM_CHANNELS[l + 1]]
}

/// Applies the residual CNN given per-layer `(kernel, bias)` handles.
pub fn dtm_apply<T: Real>(tape: &mut Tape<T>, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
    if layers.len() != DTM_LAYERS {
        return Err(invalid("dtm_apply", "expected exactly 4 layers"));
    }
    if tape.shape(x).len() != 3 || tape.shape(x)[2] != 3 {
        return Err(invalid("dtm_apply", "expected an H×W×3 image"));
    }
    let mut h = x;
    for (l, &(k, b)) in layers.iter().enumerate() {
        if tape.shape(k) != dtm_kernel_shape(l) {
            return Err(invalid(
                "dtm_apply",
                "kernel shape does not match the layer",
            ));
        }
        h = tape.conv2d(h, k, b, 1)?;
        if l + 1 < DTM_LAYERS {
            h = tape.relu(h)?;
        }
    }
    tape.add(x, h)
}

/// One direction's tone-mapping weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmParams {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl DtmParams {
    /// All-zero weights; the block is then the identity.
    pub fn zeros() -> Self {
        Self {
            kernels: (0..DTM_LAYERS)
                .map(|l| Tensor::zeros(dtm_kernel_shape(l).to_vec()))
                .collect(),
            biases: (0..DTM_LAYERS)
                .map(|l| Tensor::zeros(alloc::vec![DTM_CHANNELS[l + 1]]))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.len() != DTM_LAYERS || self.biases.len() != DTM_LAYERS {
            return Err(invalid("DtmParams", "expected exactly 4 layers"));
        }
        for l in 0..DTM_LAYERS {
            if self.kernels[l].shape() != dtm_kernel_shape(l)
                || self.biases[l].shape() != [DTM_CHANNELS[l + 1]]
            {
                return Err(invalid("DtmParams", "layer shape mismatch"));
            }
        }
        Ok(())
    }

    /// Records the weights as constants.
    pub fn constants(&self, tape: &mut Tape) -> Result<Vec<(Var, Var)>> {
        self.validate()?;
        Ok(self
            .kernels
            .iter()
            .zip(&self.biases)
            .map(|(k, b)| (tape.constant(k.clone()), tape.constant(b.clone())))
            .collect())
    }

    /// Plain-image application, processed in row bands.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        super::pipeline::banded(x, super::pipeline::DTM_HALO, |band| {
            let mut tape = Tape::new();
            let layers = self.constants(&mut tape)?;
            let xv = tape.constant(band.clone());
            let y = dtm_apply(&mut tape, xv, &layers)?;
            Ok(tape.value(y).clone())
        })
    }
}
