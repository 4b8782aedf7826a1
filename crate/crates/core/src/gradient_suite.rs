//! The finite-difference suite run by `revisp gradcheck` and the acceptance tests.
//!
//! Inputs are drawn in `f32` and checked on `f64` tapes with step 1e-3: the
//! tape code is generic over precision, and `f32` rounding over a 2e-3 span
//! alone reaches the 1e-3 tolerance. Primitive tape ops must agree to 1e-3;
//! ISP blocks, which chain several primitives, and the end-to-end loss to
//! 1e-2. Inputs of kinked ops are drawn away from their kinks.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_gradients, BinaryKind, GradCheckSettings, Tape, Var};
use crate::error::Result;
use crate::isp::{
    cc_apply, dtm_apply, dtm_kernel_shape, gc_apply, gg_apply, wb_apply, Direction, DTM_CHANNELS,
    DTM_LAYERS,
};
use crate::selector::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{check_loss_gradients, LOSS_CHECK_STEP};

pub const PRIMITIVE_TOLERANCE: f32 = 1e-3;
pub const COMPOSITE_TOLERANCE: f32 = 1e-2;

/// Outcome of one checked operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub name: String,
    pub rel_tol: f32,
    /// Largest per-tensor relative error.
    pub worst: f32,
    pub probes: usize,
    /// Probes left out because their `±step` evaluations straddle a kink.
    pub straddled: usize,
    pub passed: bool,
}

struct Suite {
    rng: ChaCha8Rng,
    cases: Vec<SuiteCase>,
}

impl Suite {
    fn tensor(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| self.rng.gen_range(lo..hi)).collect(),
        )
        .expect("shape matches data")
    }

    fn image(&mut self, side: usize, lo: f32, hi: f32) -> Tensor {
        self.tensor(&[side, side, 3], lo, hi)
    }

    fn check<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        self.check_at(PRIMITIVE_TOLERANCE, name, inputs, f)
    }

    fn check_at<F>(&mut self, rel_tol: f32, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let inputs: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
        let settings = GradCheckSettings {
            step: 1e-3,
            rel_tol,
            abs_floor: 1e-6,
            probes_per_tensor: 10,
            seed: self.rng.gen(),
        };
        let report = check_gradients(&inputs, f, settings)?;
        self.cases.push(SuiteCase {
            name: name.to_string(),
            rel_tol: settings.rel_tol,
            worst: report.worst(),
            probes: report.probes.len(),
            straddled: report.straddled(),
            passed: report.passed(),
        });
        Ok(())
    }
}

fn dtm_inputs(s: &mut Suite) -> Vec<Tensor> {
    let mut inputs = vec![s.image(6, 0.0, 1.0)];
    for l in 0..DTM_LAYERS {
        // Small kernels under positive biases keep every pre-activation several
        // standard deviations clear of the ReLU kink; the relu case covers the kink.
        inputs.push(s.tensor(&dtm_kernel_shape(l), -0.02, 0.02));
        inputs.push(s.tensor(&[DTM_CHANNELS[l + 1]], 0.3, 0.5));
    }
    inputs
}

/// The end-to-end model: default layout at `K = 5` with nonzero last DTM
/// layers so every dictionary receives gradient.
pub fn end_to_end_model(seed: u64) -> Result<Model> {
    let mut model = Model::init(
        ModelConfig {
            k: 5,
            selector_size: 8,
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = model
        .params
        .names()
        .iter()
        .filter(|n| n.starts_with("dict.tm.") && (n.contains(".l3.") || n.ends_with(".b")))
        .cloned()
        .collect();
    for n in names {
        for v in model.params.get_mut(&n)?.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    Ok(model)
}

/// Runs every check; failures are reported, not returned as errors.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };

    let a = s.tensor(&[4, 3], 0.2, 1.0);
    let b = s.tensor(&[4, 3], 0.5, 1.5);
    let scalar = s.tensor(&[1], 0.5, 1.5);
    for (name, kind) in [
        ("add", BinaryKind::Add),
        ("sub", BinaryKind::Sub),
        ("mul", BinaryKind::Mul),
        ("div", BinaryKind::Div),
        ("pow", BinaryKind::Pow),
    ] {
        s.check(name, vec![a.clone(), b.clone()], |t, v| {
            t.binary(kind, v[0], v[1])
        })?;
        s.check(
            &alloc::format!("{name} (scalar tensor)"),
            vec![a.clone(), scalar.clone()],
            |t, v| t.binary(kind, v[0], v[1]),
        )?;
        s.check(
            &alloc::format!("{name} (constant)"),
            vec![a.clone()],
            |t, v| t.binary(kind, v[0], 1.7),
        )?;
    }
    let lo = s.tensor(&[6], 0.0, 0.4);
    let hi = s.tensor(&[6], 0.6, 1.0);
    s.check("max", vec![lo.clone(), hi.clone()], |t, v| {
        t.max(v[0], v[1])
    })?;
    // At least 0.05 from the upper bound on either side.
    let around = Tensor::from_vec(
        (0..6)
            .map(|i| {
                if i % 2 == 0 {
                    s.rng.gen_range(0.6..0.75)
                } else {
                    s.rng.gen_range(0.85..1.0)
                }
            })
            .collect(),
    );
    s.check("clamp", vec![around], |t, v| t.clamp(v[0], 0.0, 0.8))?;
    s.check("recip", vec![hi], |t, v| t.recip(v[0]))?;
    let mixed = Tensor::from_vec(vec![-0.7, 0.4, -0.2, 0.9, 0.3, -0.5]);
    s.check("abs", vec![mixed.clone()], |t, v| t.abs(v[0]))?;
    s.check("relu", vec![mixed.clone()], |t, v| t.relu(v[0]))?;
    s.check("neg", vec![mixed], |t, v| t.neg(v[0]))?;

    let x = s.tensor(&[5, 3], -1.0, 1.0);
    let m = s.tensor(&[3, 3], -1.0, 1.0);
    s.check("matmul3 (sum)", vec![x.clone(), m.clone()], |t, v| {
        let y = t.matmul3(v[0], v[1])?;
        t.sum(y)
    })?;
    let w = s.tensor(&[3, 4], -1.0, 1.0);
    s.check("matmul", vec![x, w], |t, v| t.matmul(v[0], v[1]))?;

    let img = s.tensor(&[5, 5, 2], 0.0, 1.0);
    let kernel = s.tensor(&[3, 3, 2, 3], -0.5, 0.5);
    let bias = s.tensor(&[3], -0.1, 0.1);
    for stride in [1, 2] {
        s.check(
            &alloc::format!("conv2d stride {stride}"),
            vec![img.clone(), kernel.clone(), bias.clone()],
            |t, v| t.conv2d(v[0], v[1], v[2], stride),
        )?;
    }

    let logits = s.tensor(&[5], -2.0, 2.0);
    s.check("softmax", vec![logits], |t, v| t.softmax(v[0]))?;
    let pooled = s.tensor(&[3, 4, 2], -1.0, 1.0);
    s.check("global_avg_pool", vec![pooled], |t, v| {
        t.global_avg_pool(v[0])
    })?;
    let fv = s.tensor(&[6], -1.0, 1.0);
    let fw = s.tensor(&[6, 4], -1.0, 1.0);
    let fb = s.tensor(&[4], -1.0, 1.0);
    s.check("affine", vec![fv, fw, fb], |t, v| {
        t.affine(v[0], v[1], v[2])
    })?;

    let p = s.tensor(&[2, 3, 2], -1.0, 1.0);
    let q = s.tensor(&[2, 3, 3], -1.0, 1.0);
    s.check("concat", vec![p.clone(), q], |t, v| t.concat(&[v[0], v[1]]))?;
    s.check("reshape", vec![p.clone()], |t, v| t.reshape(v[0], &[6, 2]))?;
    s.check("row", vec![p.clone()], |t, v| t.row(v[0], 1))?;
    s.check("sum", vec![p.clone()], |t, v| t.sum(v[0]))?;
    s.check("mean", vec![p], |t, v| t.mean(v[0]))?;
    let weights = s.tensor(&[5], 0.0, 1.0);
    let cands = s.tensor(&[5, 2, 3], -1.0, 1.0);
    s.check("mix", vec![weights, cands], |t, v| t.mix(v[0], v[1]))?;
    let l1a = s.tensor(&[4, 3], 0.0, 0.4);
    let l1b = s.tensor(&[4, 3], 0.6, 1.0);
    s.check("l1", vec![l1a, l1b], |t, v| t.l1(v[0], v[1]))?;

    let mut ccm = s.tensor(&[3, 3], 0.1, 1.0);
    s.check("column_normalize", vec![ccm.clone()], |t, v| {
        t.column_normalize(v[0])
    })?;
    for i in 0..3 {
        ccm.data_mut()[i * 4] += 2.0;
    }
    s.check("inverse3", vec![ccm.clone()], |t, v| t.inverse3(v[0]))?;

    let dim = s.image(3, 0.0, 0.8);
    let bright = s.image(3, 0.92, 1.0);
    let gains = s.tensor(&[3], 1.0, 2.0);
    let gain = s.tensor(&[1], 1.0, 2.0);
    s.check("mul_channels", vec![dim.clone(), gains.clone()], |t, v| {
        t.mul_channels(v[0], v[1])
    })?;
    for (label, x) in [("dim", &dim), ("highlights", &bright)] {
        s.check(
            &alloc::format!("safe_inverse_gain ({label})"),
            vec![x.clone(), gains.clone()],
            |t, v| t.safe_inverse_gain(v[0], v[1]),
        )?;
    }

    let gamma = s.tensor(&[1], 1.7, 2.7);
    for dir in [Direction::Forward, Direction::Reverse] {
        let tag = match dir {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        };
        let x = s.image(4, 0.05, 0.85);
        s.check_at(
            COMPOSITE_TOLERANCE,
            &alloc::format!("gg {tag}"),
            vec![x.clone(), gain.clone()],
            |t, v| gg_apply(t, v[0], v[1], dir),
        )?;
        s.check_at(
            COMPOSITE_TOLERANCE,
            &alloc::format!("wb {tag}"),
            vec![x.clone(), gains.clone()],
            |t, v| wb_apply(t, v[0], v[1], dir),
        )?;
        s.check_at(
            COMPOSITE_TOLERANCE,
            &alloc::format!("cc {tag}"),
            vec![x.clone(), ccm.clone()],
            |t, v| cc_apply(t, v[0], v[1], dir),
        )?;
        s.check_at(
            COMPOSITE_TOLERANCE,
            &alloc::format!("gc {tag}"),
            vec![x, gamma.clone()],
            |t, v| gc_apply(t, v[0], v[1], dir),
        )?;
    }
    let inputs = dtm_inputs(&mut s);
    s.check_at(COMPOSITE_TOLERANCE, "dtm", inputs, |t, v| {
        let layers: Vec<(Var, Var)> = (0..DTM_LAYERS)
            .map(|l| (v[1 + 2 * l], v[2 + 2 * l]))
            .collect();
        dtm_apply(t, v[0], &layers)
    })?;

    let model = end_to_end_model(seed)?;
    let x = s.image(8, 0.2, 0.7);
    let y = s.image(8, 0.05, 0.4);
    let r = s.image(8, 0.05, 0.4);
    let settings = GradCheckSettings {
        step: LOSS_CHECK_STEP,
        rel_tol: COMPOSITE_TOLERANCE,
        probes_per_tensor: 4,
        seed: s.rng.gen(),
        ..GradCheckSettings::default()
    };
    let report = check_loss_gradients(&model, &x, &y, &r, 1.0 / 2.2, settings)?;
    s.cases.push(SuiteCase {
        name: "end-to-end loss (8×8, K=5)".into(),
        rel_tol: COMPOSITE_TOLERANCE,
        worst: report.worst(),
        probes: report.probes.len(),
        straddled: report.straddled(),
        passed: report.passed(),
    });
    Ok(s.cases)
}
