//! Training: bi-directional loss, Adam, EMA teacher, augmentation and the
//! epoch loop over PP_rand and PP_MT samples.

mod optim;

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{ema_update, Adam};

use crate::autodiff::{check_summed_gradients, GradCheckReport, GradCheckSettings, Tape, Var};
use crate::error::{invalid, mismatch, Error, Result};
use crate::isp::{pipeline_forward, pipeline_reverse, GAMMA_FLOOR};
use crate::pseudo_pairs::{make_pp_mt, PpMtReference};
use crate::selector::{select_all, BoundModel, Model, ModelConfig, Selection};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the PP_MT term.
    pub alpha: f32,
    /// Epochs before the PP_MT term is enabled.
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    /// Multiplier on the learning rate of the parameter dictionaries.
    ///
    /// Dictionary entries are ISP parameters of order 1 while encoder weights
    /// start near `sqrt(1/fan_in)`; Adam moves both by about the learning rate
    /// per step, so short runs may need the dictionaries to move faster.
    pub dictionary_lr_scale: f32,
    pub lr_decay: f32,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub batch_size: usize,
    pub batch_pp_rand: usize,
    pub batch_pp_mt: usize,
    pub ema_decay: f32,
    /// Exponent of the fixed transform applied to RAW images inside the loss.
    pub loss_gamma_exponent: f32,
    /// Square training resolution.
    pub input_size: usize,
    pub seed: u64,
    pub pp_mt_reference: PpMtReference,
    /// Random flips and quarter turns.
    pub augment: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            warmup_epochs: 15,
            epochs: 800,
            learning_rate: 1e-4,
            dictionary_lr_scale: 1.0,
            lr_decay: 0.1,
            lr_milestones: vec![250, 500],
            batch_size: 24,
            batch_pp_rand: 16,
            batch_pp_mt: 8,
            ema_decay: 0.999,
            loss_gamma_exponent: 1.0 / 2.2,
            input_size: 256,
            seed: 0,
            pp_mt_reference: PpMtReference::TeacherOutput,
            augment: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(invalid("TrainConfig", "alpha must be >= 0"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid("TrainConfig", "ema decay must be in (0, 1)"));
        }
        if self.batch_pp_rand + self.batch_pp_mt != self.batch_size {
            return Err(invalid(
                "TrainConfig",
                "batch split must sum to the batch size",
            ));
        }
        if self.batch_pp_rand == 0 {
            return Err(invalid(
                "TrainConfig",
                "at least one PP_rand sample per batch",
            ));
        }
        if !(self.learning_rate > 0.0)
            || !(self.dictionary_lr_scale > 0.0)
            || !(self.loss_gamma_exponent > 0.0)
        {
            return Err(invalid(
                "TrainConfig",
                "learning rate, its dictionary scale and the loss exponent must be > 0",
            ));
        }
        if self.input_size < 2 {
            return Err(invalid("TrainConfig", "input size must be >= 2"));
        }
        self.model.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let decays = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        let mut lr = self.learning_rate;
        for _ in 0..decays {
            lr *= self.lr_decay;
        }
        lr
    }

    pub fn pp_mt_active(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs && self.batch_pp_mt > 0 && self.alpha > 0.0
    }
}

/// `(v − black) / (white − black)`, clamped to `[0, 1]`.
pub fn normalize_raw(raw: &Tensor, black_level: f32, white_level: f32) -> Result<Tensor> {
    if !(white_level > black_level) {
        return Err(invalid(
            "normalize_raw",
            "white level must exceed black level",
        ));
    }
    let range = white_level - black_level;
    Ok(raw.map(|v| ((v - black_level) / range).clamp(0.0, 1.0)))
}

/// Geometric augmentation shared by all members of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: usize,
}

impl Augmentation {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = x.clone();
        if self.flip_horizontal {
            t = t.flip_horizontal()?;
        }
        if self.flip_vertical {
            t = t.flip_vertical()?;
        }
        t.rot90(self.quarter_turns)
    }
}

/// Resizes each image to `size × size` and applies one shared random augmentation.
pub fn augment<R: Rng + ?Sized>(
    images: &[&Tensor],
    size: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let aug = Augmentation::sample(rng);
    images
        .iter()
        .map(|t| aug.apply(&t.resize_bilinear(size, size)?))
        .collect()
}

/// `max(t, 1e-8)^e`.
fn loss_transform<T: Real>(tape: &mut Tape<T>, t: Var, exponent: f32) -> Result<Var> {
    let f = tape.max(t, GAMMA_FLOOR)?;
    tape.pow(f, exponent)
}

/// Loss of one sample and the handles behind it.
pub struct BiLoss {
    pub loss: Var,
    /// RAW-side term.
    pub reverse_term: Var,
    /// RGB-side term.
    pub forward_term: Var,
    pub selection: Selection,
    pub reversed: Var,
    pub rendered: Var,
}

/// `mean|T(y) − T(f⁻¹(x))| + mean|x − f(y)|` with `T(t) = max(t, 1e-8)^e`.
///
/// Selection runs once on `(x, reference)`; the forward pass reuses it.
pub fn bi_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &BoundModel<'_>,
    x: &Tensor,
    y: &Tensor,
    reference: &Tensor,
    exponent: f32,
) -> Result<BiLoss> {
    if x.shape() != y.shape() {
        return Err(mismatch("bi_loss", x.shape(), y.shape()));
    }
    let (xs, rs) = model.model().selector_inputs(x, reference)?;
    let same_size = xs.shape() == x.shape();
    let xv = tape.constant(x.cast());
    let xs_v = if same_size {
        xv
    } else {
        tape.constant(xs.cast())
    };
    let rv = tape.constant(rs.cast());
    let selection = select_all(tape, model, xs_v, rv)?;
    let reversed = if same_size {
        tape.clamp(selection.stage_output, 0.0, 1.0)?
    } else {
        pipeline_reverse(tape, xv, &selection.params)?
    };
    let yv = tape.constant(y.cast());
    let rendered = pipeline_forward(tape, yv, &selection.params)?;
    let (loss, reverse_term, forward_term) =
        bi_loss_terms(tape, xv, yv, reversed, rendered, exponent)?;
    Ok(BiLoss {
        loss,
        reverse_term,
        forward_term,
        selection,
        reversed,
        rendered,
    })
}

/// `(total, raw term, rgb term)` from precomputed reverse and forward outputs.
pub fn bi_loss_terms<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    reversed: Var,
    rendered: Var,
    exponent: f32,
) -> Result<(Var, Var, Var)> {
    let ty = loss_transform(tape, y, exponent)?;
    let tr = loss_transform(tape, reversed, exponent)?;
    let reverse_term = tape.l1(ty, tr)?;
    let forward_term = tape.l1(x, rendered)?;
    Ok((
        tape.add(reverse_term, forward_term)?,
        reverse_term,
        forward_term,
    ))
}

/// Per-element terms of [`bi_loss_terms`] as one vector whose sum is the loss.
pub fn bi_loss_contributions<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    reversed: Var,
    rendered: Var,
    exponent: f32,
) -> Result<Var> {
    let ty = loss_transform(tape, y, exponent)?;
    let tr = loss_transform(tape, reversed, exponent)?;
    let mut parts = Vec::with_capacity(2);
    for (a, b) in [(ty, tr), (x, rendered)] {
        if tape.shape(a) != tape.shape(b) {
            return Err(mismatch(
                "bi_loss_contributions",
                tape.shape(a),
                tape.shape(b),
            ));
        }
        let n = tape.value(a).numel();
        let d = tape.sub(a, b)?;
        let d = tape.abs(d)?;
        let d = tape.div(d, n as f32)?;
        parts.push(tape.reshape(d, &[1, n])?);
    }
    tape.concat(&parts)
}

/// `mean(pp_rand) + α·mean(pp_mt)`; the second term is dropped when `include_mt` is false.
pub fn total_loss(
    tape: &mut Tape,
    pp_rand: &[Var],
    pp_mt: &[Var],
    alpha: f32,
    include_mt: bool,
) -> Result<Var> {
    let mean = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut acc = v[0];
        for &t in &v[1..] {
            acc = tape.add(acc, t)?;
        }
        tape.div(acc, v.len() as f32)
    };
    if pp_rand.is_empty() {
        return Err(invalid("total_loss", "no PP_rand terms"));
    }
    let rand = mean(tape, pp_rand)?;
    if !include_mt || pp_mt.is_empty() {
        return Ok(rand);
    }
    let mt = mean(tape, pp_mt)?;
    let mt = tape.mul(mt, alpha)?;
    tape.add(rand, mt)
}

/// Probe step for [`check_loss_gradients`].
///
/// The DTM ReLUs leave kinks within 1e-3 of some probes at 8×8; a step of
/// 1e-5 stays on one side of them and is still far above f64 rounding.
pub const LOSS_CHECK_STEP: f32 = 1e-5;

/// Finite-difference check of the bi-directional loss w.r.t. every model tensor.
///
/// Runs in `f64` on a copy of the weights.
pub fn check_loss_gradients(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    reference: &Tensor,
    exponent: f32,
    settings: GradCheckSettings,
) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor<f64>> = model.params.tensors().iter().map(|t| t.cast()).collect();
    check_summed_gradients(
        &inputs,
        |tape: &mut Tape<f64>, vars| {
            let bound = model.bind_vars(vars.to_vec())?;
            let bl = bi_loss(tape, &bound, x, y, reference, exponent)?;
            let xv = tape.constant(x.cast());
            let yv = tape.constant(y.cast());
            bi_loss_contributions(tape, xv, yv, bl.reversed, bl.rendered, exponent)
        },
        settings,
    )
}

/// Images available to the trainer. All tensors are `H × W × 3` in `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    /// RAW targets `y`.
    pub raws: Vec<Tensor>,
    /// Pseudo-RGB renderings `x̂`, aligned with `raws`.
    pub pseudo_rgbs: Vec<Tensor>,
    /// Unpaired real RGB images for PP_MT.
    pub rgbs: Vec<Tensor>,
}

impl TrainingSet {
    pub fn validate(&self) -> Result<()> {
        if self.raws.is_empty() {
            return Err(Error::EmptyDataset("raw"));
        }
        if self.pseudo_rgbs.len() != self.raws.len() {
            return Err(invalid(
                "TrainingSet",
                "each RAW image needs one pseudo-RGB rendering",
            ));
        }
        Ok(())
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f32,
    pub loss_pp_rand: f32,
    pub loss_pp_mt: f32,
    pub lr: f32,
}

/// Each epoch draws from its own stream so resuming at an epoch boundary is reproducible.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Training state: student, EMA teacher, optimizer and RNG.
pub struct Trainer {
    pub config: TrainConfig,
    pub student: Model,
    pub teacher: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let student = Model::init(config.model, config.seed)?;
        Ok(Self::from_parts(
            config,
            student.clone(),
            student,
            None,
            0,
            0,
        ))
    }

    /// Resumes from saved state. `adam` defaults to fresh moments.
    pub fn from_parts(
        config: TrainConfig,
        student: Model,
        teacher: Model,
        adam: Option<Adam>,
        epoch: usize,
        step: usize,
    ) -> Self {
        let adam = adam.unwrap_or_else(|| Adam::new(&student.params));
        let rng = epoch_rng(config.seed, epoch);
        Self {
            config,
            student,
            teacher,
            adam,
            epoch,
            step,
            rng,
        }
    }

    /// Forward + backward of one sample; adds `weight · ∂loss/∂θ` into `grads`.
    fn accumulate(
        &self,
        x: &Tensor,
        y: &Tensor,
        reference: &Tensor,
        weight: f32,
        grads: &mut [Vec<f32>],
    ) -> Result<f32> {
        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape, true);
        let bl = bi_loss(
            &mut tape,
            &bound,
            x,
            y,
            reference,
            self.config.loss_gamma_exponent,
        )?;
        let value = tape.value(bl.loss).data()[0];
        let g = tape.backward(bl.loss)?;
        for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
            if let Some(d) = g.raw(v) {
                for (a, b) in acc.iter_mut().zip(d) {
                    *a += weight * b;
                }
            }
        }
        Ok(value)
    }

    /// Resizes and, when enabled, applies one shared augmentation.
    fn prepare(&mut self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let size = self.config.input_size;
        if self.config.augment {
            augment(images, size, &mut self.rng)
        } else {
            images
                .iter()
                .map(|t| t.resize_bilinear(size, size))
                .collect()
        }
    }

    /// `(input, target, reference)` for pair `i`; the target is its own reference.
    fn pp_rand_sample(&mut self, data: &TrainingSet, i: usize) -> Result<[Tensor; 3]> {
        let mut v = self.prepare(&[&data.pseudo_rgbs[i], &data.raws[i]])?;
        let y = v.pop().expect("two images");
        let x = v.pop().expect("two images");
        Ok([x, y.clone(), y])
    }

    fn pp_mt_sample(&mut self, data: &TrainingSet) -> Result<[Tensor; 3]> {
        let xi = self.rng.gen_range(0..data.rgbs.len());
        let ri = self.rng.gen_range(0..data.raws.len());
        let x = self.prepare(&[&data.rgbs[xi]])?.remove(0);
        let y_r = self.prepare(&[&data.raws[ri]])?.remove(0);
        let t = make_pp_mt(&x, &y_r, &self.teacher, self.config.pp_mt_reference)?;
        Ok([t.input, t.target, t.reference])
    }

    /// One optimizer step over the given PP_rand indices.
    pub fn train_step(&mut self, data: &TrainingSet, indices: &[usize]) -> Result<StepMetrics> {
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut grads: Vec<Vec<f32>> = self
            .student
            .params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();

        let n_rand = indices.len() as f32;
        let mut loss_rand = 0.0f32;
        for &i in indices {
            let [x, y, r] = self.pp_rand_sample(data, i)?;
            loss_rand += self.accumulate(&x, &y, &r, 1.0 / n_rand, &mut grads)? / n_rand;
        }

        let mut loss_mt = 0.0f32;
        let use_mt = self.config.pp_mt_active(epoch) && !data.rgbs.is_empty();
        if use_mt {
            let n_mt = self.config.batch_pp_mt as f32;
            let w = self.config.alpha / n_mt;
            for _ in 0..self.config.batch_pp_mt {
                let [x, y, r] = self.pp_mt_sample(data)?;
                loss_mt += self.accumulate(&x, &y, &r, w, &mut grads)? / n_mt;
            }
        }
        let total = loss_rand
            + if use_mt {
                self.config.alpha * loss_mt
            } else {
                0.0
            };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.step,
            });
        }
        let rates: Vec<f32> = self
            .student
            .params
            .names()
            .iter()
            .map(|n| {
                if n.starts_with("dict.") {
                    lr * self.config.dictionary_lr_scale
                } else {
                    lr
                }
            })
            .collect();
        self.adam
            .step_with_rates(&mut self.student.params, &grads, &rates)?;
        ema_update(
            &mut self.teacher.params,
            &self.student.params,
            self.config.ema_decay,
        )?;
        let metrics = StepMetrics {
            epoch,
            step: self.step,
            loss_total: total,
            loss_pp_rand: loss_rand,
            loss_pp_mt: loss_mt,
            lr,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// One pass over the RAW images in shuffled batches.
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<Vec<StepMetrics>> {
        data.validate()?;
        self.rng = epoch_rng(self.config.seed, self.epoch);
        let mut order: Vec<usize> = (0..data.raws.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.config.batch_pp_rand) {
            out.push(self.train_step(data, chunk)?);
        }
        self.epoch += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
