//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub step: f32,
    /// Relative tolerance on `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_tol: f32,
    /// Probes whose gradients are all below this magnitude pass unconditionally.
    pub abs_floor: f32,
    /// Coordinates probed per tensor (all of them when the tensor is smaller).
    pub probes_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-3,
            abs_floor: 1e-5,
            probes_per_tensor: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// The `±step` evaluations lie on opposite sides of a kink; such probes
    /// are left out of the error.
    pub straddles_kink: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    /// Relative error per input tensor.
    pub rel_errors: Vec<f32>,
    pub settings: GradCheckSettings,
}

impl GradCheckReport {
    pub fn worst(&self) -> f32 {
        self.rel_errors.iter().copied().fold(0.0, f32::max)
    }

    pub fn straddled(&self) -> usize {
        self.probes.iter().filter(|p| p.straddles_kink).count()
    }

    /// Within tolerance, with at most half of the probes lost to kinks.
    pub fn passed(&self) -> bool {
        self.worst() <= self.settings.rel_tol && 2 * self.straddled() <= self.probes.len()
    }
}

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next() as usize) % n
    }

    /// Uniform-ish in [0.5, 4.5]; positive weights avoid cancellation in summed gradients.
    fn unit(&mut self) -> f32 {
        (self.next() % 4001) as f32 / 1000.0 + 0.5
    }
}

/// Compares the tape gradient of `f` w.r.t. every tensor in `inputs`
/// against central finite differences.
///
/// `f` receives one trainable leaf per input. A scalar output is checked
/// directly; any other output is reduced by a fixed random projection
/// (accumulated in `f64` on the numeric side).
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    f: F,
    settings: GradCheckSettings,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check(inputs, f, settings, false)
}

/// Like [`check_gradients`], but the checked scalar is the plain sum of the
/// output's elements.
///
/// Returning unreduced terms lets the numeric side sum them in `f64`, which
/// keeps f32 rounding of the total out of the difference quotient.
pub fn check_summed_gradients<T, F>(
    inputs: &[Tensor<T>],
    f: F,
    settings: GradCheckSettings,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check(inputs, f, settings, true)
}

fn check<T, F>(
    inputs: &[Tensor<T>],
    f: F,
    settings: GradCheckSettings,
    summed: bool,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n_out = tape.value(out).numel();
    let mut rng = Lcg(settings.seed ^ 0x9e37_79b9_7f4a_7c15);
    let projection: Vec<T> = if n_out == 1 || summed {
        alloc::vec![T::one(); n_out]
    } else {
        (0..n_out).map(|_| T::lit(rng.unit())).collect()
    };
    let loss = if n_out == 1 {
        out
    } else {
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(Tensor::new(shape, projection.clone())?);
        let p = tape.mul(out, w)?;
        tape.sum(p)?
    };
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<T>]| -> Result<(f64, Vec<u8>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape
            .value(out)
            .data()
            .iter()
            .zip(&projection)
            .map(|(&v, &w)| v.as_f64() * w.as_f64())
            .sum();
        Ok((value, tape.branch_pattern()))
    };

    let mut probes = Vec::new();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let step = T::lit(settings.step);
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(&tape, *var)?;
        let n = inputs[t].numel();
        let indices: Vec<usize> = if n <= settings.probes_per_tensor {
            (0..n).collect()
        } else {
            (0..settings.probes_per_tensor)
                .map(|_| rng.below(n))
                .collect()
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        let mut max_mag = 0.0f64;
        for &i in &indices {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let (plus, plus_branches) = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let (minus, minus_branches) = eval(&work)?;
            work[t].data_mut()[i] = orig;
            // The realized step differs from `step` by the rounding of `orig ± step`.
            let span = (orig + step).as_f64() - (orig - step).as_f64();
            let numeric = (plus - minus) / span;
            let a = analytic.data()[i].as_f64();
            let straddles_kink = plus_branches != minus_branches;
            if !straddles_kink {
                diff2 += (a - numeric) * (a - numeric);
                a2 += a * a;
                n2 += numeric * numeric;
                max_mag = max_mag.max(a.abs()).max(numeric.abs());
            }
            probes.push(ProbeResult {
                tensor: t,
                index: i,
                analytic: a,
                numeric,
                straddles_kink,
            });
        }
        let denom = Float::sqrt(a2.max(n2));
        let rel = if max_mag <= settings.abs_floor as f64 || denom == 0.0 {
            0.0
        } else {
            (Float::sqrt(diff2) / denom) as f32
        };
        rel_errors.push(rel);
    }
    Ok(GradCheckReport {
        probes,
        rel_errors,
        settings,
    })
}
