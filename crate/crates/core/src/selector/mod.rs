//! Dynamic parameter selection.
//!
//! Global features of the input (`g_x`) and the reference RAW (`g_r`) are
//! fused into `g_xr`. For each parameter dictionary a selection head turns
//! `g_xr` plus a block-specific feature `g_i` into softmax weights, and the
//! block parameter is the weighted mix of its K candidates. Selection runs the
//! reverse pipeline stage by stage on a downscaled copy; the resulting
//! parameters are resolution independent.

mod store;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use store::ParamStore;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, mismatch, Result};
use crate::isp::{
    cc_apply, dtm_apply, dtm_kernel_shape, gc_apply, gg_apply, wb_apply, CcParam, Direction,
    DtmParams, GcParam, GgParam, PipelineParams, PipelineVars, WbParam, DTM_CHANNELS, DTM_LAYERS,
    IDENTITY_CCM,
};
use crate::pseudo_pairs::CcmPool;
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_SELECTOR_SIZE: usize = 256;
/// Length of `g_x`, `g_r` and `g_xr`.
pub const GLOBAL_FEATURE: usize = 128;
/// Length of `g_i`.
pub const BLOCK_FEATURE: usize = 32;
pub const IMAGE_ENCODER_CHANNELS: [usize; 5] = [32, 64, 128, 128, 128];
pub const BLOCK_ENCODER_CHANNELS: [usize; 4] = [32, 32, 32, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Gg,
    Wb,
    Cc,
    Gc,
    Tm,
}

impl Block {
    pub const ALL: [Block; 5] = [Block::Gg, Block::Wb, Block::Cc, Block::Gc, Block::Tm];

    pub fn name(self) -> &'static str {
        match self {
            Block::Gg => "gg",
            Block::Wb => "wb",
            Block::Cc => "cc",
            Block::Gc => "gc",
            Block::Tm => "tm",
        }
    }

    /// Channels fed to the block's intermediate encoder.
    pub fn intermediate_channels(self, k: usize) -> usize {
        match self {
            Block::Tm => 3,
            _ => 3 * k,
        }
    }
}

/// One selection head: a block, or one tone-mapping layer in one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Block(Block),
    Tm { direction: Direction, layer: usize },
}

impl Head {
    /// Every head in parameter-store order.
    pub fn all() -> Vec<Head> {
        let mut heads: Vec<Head> = [Block::Gg, Block::Wb, Block::Cc, Block::Gc]
            .into_iter()
            .map(Head::Block)
            .collect();
        for direction in [Direction::Reverse, Direction::Forward] {
            for layer in 0..DTM_LAYERS {
                heads.push(Head::Tm { direction, layer });
            }
        }
        heads
    }

    pub fn name(&self) -> String {
        match self {
            Head::Block(b) => b.name().into(),
            Head::Tm { direction, layer } => format!("tm.{}.l{layer}", dir_tag(*direction)),
        }
    }

    /// Dictionary tensor names selected by this head.
    pub fn dictionaries(&self) -> Vec<String> {
        match self {
            Head::Block(b) => vec![format!("dict.{}", b.name())],
            Head::Tm { .. } => {
                let n = self.name();
                vec![format!("dict.{n}.w"), format!("dict.{n}.b")]
            }
        }
    }
}

fn dir_tag(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "fwd",
        Direction::Reverse => "rev",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Dictionary size.
    pub k: usize,
    /// Square side the selector sees.
    pub selector_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            selector_size: DEFAULT_SELECTOR_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("ModelConfig", "dictionary size must be >= 1"));
        }
        if self.selector_size < 2 {
            return Err(invalid("ModelConfig", "selector size must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// `U(−s, s)` with `s = sqrt(1/fan_in)`.
    Scaled(usize),
    /// He-uniform scaled by 0.1.
    SmallHe(usize),
    Zeros,
    Gg,
    Wb,
    Cc,
    Gc,
}

fn push_encoder(
    out: &mut Vec<(String, Vec<usize>, Init)>,
    prefix: &str,
    cin: usize,
    channels: &[usize],
) {
    let mut c = cin;
    for (l, &co) in channels.iter().enumerate() {
        out.push((
            format!("{prefix}.l{l}.w"),
            vec![3, 3, c, co],
            Init::Scaled(9 * c),
        ));
        out.push((format!("{prefix}.l{l}.b"), vec![co], Init::Scaled(9 * c)));
        c = co;
    }
}

fn push_affine(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, n: usize, m: usize) {
    out.push((format!("{prefix}.w"), vec![n, m], Init::Scaled(n)));
    out.push((format!("{prefix}.b"), vec![m], Init::Scaled(n)));
}

/// Names, shapes and initializers of every trainable tensor.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let k = cfg.k;
    let mut out = Vec::new();
    push_encoder(&mut out, "enc.x", 3, &IMAGE_ENCODER_CHANNELS);
    push_encoder(&mut out, "enc.r", 3, &IMAGE_ENCODER_CHANNELS);
    for b in Block::ALL {
        let prefix = format!("enc.{}", b.name());
        push_encoder(
            &mut out,
            &prefix,
            b.intermediate_channels(k),
            &BLOCK_ENCODER_CHANNELS,
        );
    }
    push_affine(&mut out, "rwe.xr", 2 * GLOBAL_FEATURE, GLOBAL_FEATURE);
    for head in Head::all() {
        let n = head.name();
        push_affine(
            &mut out,
            &format!("rwe.{n}.prj"),
            GLOBAL_FEATURE,
            BLOCK_FEATURE,
        );
        push_affine(&mut out, &format!("rwe.{n}.out"), BLOCK_FEATURE, k);
    }
    out.push(("dict.gg".into(), vec![k], Init::Gg));
    out.push(("dict.wb".into(), vec![k, 3], Init::Wb));
    out.push(("dict.cc".into(), vec![k, 3, 3], Init::Cc));
    out.push(("dict.gc".into(), vec![k], Init::Gc));
    for direction in [Direction::Reverse, Direction::Forward] {
        for l in 0..DTM_LAYERS {
            let n = Head::Tm {
                direction,
                layer: l,
            }
            .name();
            let mut shape = vec![k];
            shape.extend_from_slice(&dtm_kernel_shape(l));
            let init = if l + 1 == DTM_LAYERS {
                Init::Zeros
            } else {
                Init::SmallHe(9 * DTM_CHANNELS[l])
            };
            out.push((format!("dict.{n}.w"), shape, init));
            out.push((
                format!("dict.{n}.b"),
                vec![k, DTM_CHANNELS[l + 1]],
                Init::Zeros,
            ));
        }
    }
    out
}

fn init_tensor(shape: Vec<usize>, init: Init, pool: &CcmPool, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let uniform = |rng: &mut ChaCha8Rng, s: f32| -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-s..s)).collect()
    };
    let data = match init {
        Init::Scaled(fan_in) => uniform(rng, Float::sqrt(1.0 / fan_in as f32)),
        Init::SmallHe(fan_in) => uniform(rng, 0.1 * Float::sqrt(6.0 / fan_in as f32)),
        Init::Zeros => vec![0.0; n],
        Init::Gg => (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
        Init::Gc => (0..n).map(|_| rng.gen_range(1.7..2.7)).collect(),
        Init::Wb => (0..n / 3)
            .flat_map(|_| [rng.gen_range(1.0..2.0), 1.0, rng.gen_range(1.0..2.0)])
            .collect(),
        Init::Cc => (0..n / 9)
            .flat_map(|slot| {
                if slot == 0 {
                    IDENTITY_CCM
                } else {
                    random_pool_blend(pool, rng)
                }
            })
            .collect(),
    };
    Tensor::new(shape, data).expect("layout shapes are consistent")
}

/// Column-normalized convex combination of the whole pool with flat-Dirichlet weights.
fn random_pool_blend(pool: &CcmPool, rng: &mut ChaCha8Rng) -> [f32; 9] {
    let weights: Vec<f32> = pool
        .entries()
        .iter()
        .map(|_| -Float::ln(1.0 - rng.gen_range(0.0f32..1.0)))
        .collect();
    let total: f32 = weights.iter().sum();
    let mut m = [0.0f32; 9];
    for (e, w) in pool.entries().iter().zip(&weights) {
        for (a, &c) in m.iter_mut().zip(&e.ccm) {
            *a += c * w / total;
        }
    }
    crate::isp::column_normalize(&m).expect("pool columns are normalized")
}

/// Selector networks and parameter dictionaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_pool(config, seed, &CcmPool::builtin())
    }

    pub fn init_with_pool(config: ModelConfig, seed: u64, pool: &CcmPool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            params.insert(name, init_tensor(shape, init, pool, &mut rng))?;
        }
        Ok(Self { config, params })
    }

    /// Wraps loaded tensors after checking them against the expected layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(invalid(
                "Model::from_params",
                "parameter count does not match the layout",
            ));
        }
        for ((name, shape, _), (got, t)) in expected.iter().zip(params.iter()) {
            if name != got {
                return Err(invalid(
                    "Model::from_params",
                    format!("expected `{name}`, found `{got}`"),
                ));
            }
            if shape.as_slice() != t.shape() {
                return Err(mismatch("Model::from_params", shape, t.shape()));
            }
        }
        Ok(Self { config, params })
    }

    /// Sets every dictionary candidate to its block's identity.
    pub fn set_identity_dictionaries(&mut self) -> Result<()> {
        let k = self.config.k;
        self.params.set("dict.gg", Tensor::full(vec![k], 1.0))?;
        self.params.set("dict.wb", Tensor::full(vec![k, 3], 1.0))?;
        let cc: Vec<f32> = (0..k).flat_map(|_| IDENTITY_CCM).collect();
        self.params
            .set("dict.cc", Tensor::new(vec![k, 3, 3], cc)?)?;
        self.params.set("dict.gc", Tensor::full(vec![k], 1.0))?;
        for head in Head::all() {
            if let Head::Tm { .. } = head {
                for name in head.dictionaries() {
                    let t = self.params.get_mut(&name)?;
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        Ok(())
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> BoundModel<'a> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel { model: self, vars }
    }

    /// Wraps handles created elsewhere, e.g. by a gradient check; aligned with the store.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundModel<'_>> {
        if vars.len() != self.params.len() {
            return Err(invalid(
                "Model::bind_vars",
                "one handle per parameter tensor",
            ));
        }
        Ok(BoundModel { model: self, vars })
    }

    /// Resizes input and reference to the selector resolution.
    pub fn selector_inputs(&self, x: &Tensor, reference: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = self.config.selector_size;
        Ok((x.resize_bilinear(s, s)?, reference.resize_bilinear(s, s)?))
    }

    /// Selects pipeline parameters for converting `x` toward `reference`.
    pub fn select(
        &self,
        x: &Tensor,
        reference: &Tensor,
    ) -> Result<(PipelineParams, SelectionWeights)> {
        let (xs, rs) = self.selector_inputs(x, reference)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(xs);
        let rv = tape.constant(rs);
        let sel = select_all(&mut tape, &bound, xv, rv)?;
        Ok((sel.plain_params(&tape)?, sel.plain_weights(&tape)))
    }

    /// RGB → RAW-like image resembling `reference`.
    pub fn convert(&self, x: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let (params, _) = self.select(x, reference)?;
        params.reverse(x)
    }
}

/// A model recorded on a tape.
pub struct BoundModel<'a> {
    model: &'a Model,
    vars: Vec<Var>,
}

impl<'a> BoundModel<'a> {
    pub fn model(&self) -> &'a Model {
        self.model
    }

    /// Handles aligned with [`ParamStore::tensors`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.model.params.position(name)?])
    }

    fn pair(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.var(&format!("{prefix}.w"))?,
            self.var(&format!("{prefix}.b"))?,
        ))
    }

    /// Conv layers of encoder `enc.<which>`.
    pub fn encoder(&self, which: &str) -> Result<Vec<(Var, Var)>> {
        let depth = if which == "x" || which == "r" {
            IMAGE_ENCODER_CHANNELS.len()
        } else {
            BLOCK_ENCODER_CHANNELS.len()
        };
        (0..depth)
            .map(|l| self.pair(&format!("enc.{which}.l{l}")))
            .collect()
    }

    /// `(prj, out)` affine pairs of a selection head.
    pub fn head(&self, head: &Head) -> Result<((Var, Var), (Var, Var))> {
        let n = head.name();
        Ok((
            self.pair(&format!("rwe.{n}.prj"))?,
            self.pair(&format!("rwe.{n}.out"))?,
        ))
    }
}

/// Stride-2 conv stack with ReLU between layers, then global average pooling.
pub fn encode<T: Real>(tape: &mut Tape<T>, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let cin = tape.value(layers[0].0).shape()[2];
    match *tape.shape(x) {
        [_, _, c] if c == cin => {}
        ref s => return Err(mismatch("encode", s, &[0, 0, cin])),
    }
    let mut h = x;
    for (l, &(w, b)) in layers.iter().enumerate() {
        h = tape.conv2d(h, w, b, 2)?;
        if l + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    tape.global_avg_pool(h)
}

/// `g_xr = relu(W·[g_x; g_r] + b)`.
pub fn fuse_reference<T: Real>(
    tape: &mut Tape<T>,
    g_x: Var,
    g_r: Var,
    xr: (Var, Var),
) -> Result<Var> {
    let cat = tape.concat(&[g_x, g_r])?;
    let h = tape.affine(cat, xr.0, xr.1)?;
    tape.relu(h)
}

/// `softmax(out(prj(g_xr) + g_i))`.
pub fn estimate_weights<T: Real>(
    tape: &mut Tape<T>,
    g_xr: Var,
    g_i: Var,
    prj: (Var, Var),
    out: (Var, Var),
) -> Result<Var> {
    let p = tape.affine(g_xr, prj.0, prj.1)?;
    let s = tape.add(p, g_i)?;
    let logits = tape.affine(s, out.0, out.1)?;
    tape.softmax(logits)
}

/// Applies one non-tone-mapping block with a tape parameter.
pub fn apply_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    theta: Var,
    block: Block,
    dir: Direction,
) -> Result<Var> {
    match block {
        Block::Gg => gg_apply(tape, x, theta, dir),
        Block::Wb => wb_apply(tape, x, theta, dir),
        Block::Cc => cc_apply(tape, x, theta, dir),
        Block::Gc => gc_apply(tape, x, theta, dir),
        Block::Tm => Err(invalid(
            "apply_block",
            "tone mapping has per-layer parameters",
        )),
    }
}

/// Channel-concatenated reverse outputs of every dictionary candidate; the
/// unchanged stage input for tone mapping.
pub fn build_intermediate<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    dict: Var,
    block: Block,
) -> Result<Var> {
    if block == Block::Tm {
        return Ok(x);
    }
    let k = tape.shape(dict)[0];
    let mut parts = Vec::with_capacity(k);
    for i in 0..k {
        let theta = tape.row(dict, i)?;
        parts.push(apply_block(tape, x, theta, block, Direction::Reverse)?);
    }
    tape.concat(&parts)
}

/// `Σ_k w_k θ_k`; CC results are column-normalized again.
pub fn select_parameter<T: Real>(
    tape: &mut Tape<T>,
    dict: Var,
    w: Var,
    block: Block,
) -> Result<Var> {
    let theta = tape.mix(w, dict)?;
    if block == Block::Cc {
        tape.column_normalize(theta)
    } else {
        Ok(theta)
    }
}

/// Per-head softmax weights as plain values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    pub heads: Vec<(String, Vec<f32>)>,
}

impl SelectionWeights {
    pub fn get(&self, head: &str) -> Option<&[f32]> {
        self.heads
            .iter()
            .find(|(n, _)| n == head)
            .map(|(_, w)| w.as_slice())
    }
}

/// Output of [`select_all`].
#[derive(Debug, Clone)]
pub struct Selection {
    pub params: PipelineVars,
    pub weights: Vec<(Head, Var)>,
    /// Reverse pipeline output (before the final clamp) at selector resolution.
    pub stage_output: Var,
}

impl Selection {
    pub fn plain_weights(&self, tape: &Tape) -> SelectionWeights {
        SelectionWeights {
            heads: self
                .weights
                .iter()
                .map(|(h, w)| (h.name(), tape.value(*w).data().to_vec()))
                .collect(),
        }
    }

    pub fn plain_params(&self, tape: &Tape) -> Result<PipelineParams> {
        let v = |x: Var| tape.value(x).data();
        let dtm = |layers: &[(Var, Var)]| DtmParams {
            kernels: layers.iter().map(|(k, _)| tape.value(*k).clone()).collect(),
            biases: layers.iter().map(|(_, b)| tape.value(*b).clone()).collect(),
        };
        let wb = v(self.params.wb);
        let cc: [f32; 9] = v(self.params.cc)
            .try_into()
            .map_err(|_| invalid("plain_params", "ccm must hold 9 values"))?;
        Ok(PipelineParams {
            gg: GgParam::new(v(self.params.gg)[0])?,
            wb: WbParam::new([wb[0], wb[1], wb[2]])?,
            cc: CcParam::new(cc)?,
            gc: GcParam::new(v(self.params.gc)[0])?,
            dtm_forward: Some(dtm(&self.params.dtm_forward)),
            dtm_reverse: Some(dtm(&self.params.dtm_reverse)),
        })
    }
}

/// Runs the reverse pipeline stage by stage on selector-resolution inputs,
/// choosing each block's parameters from the current stage input.
pub fn select_all<T: Real>(
    tape: &mut Tape<T>,
    model: &BoundModel<'_>,
    x: Var,
    reference: Var,
) -> Result<Selection> {
    let g_x = encode(tape, x, &model.encoder("x")?)?;
    let g_r = encode(tape, reference, &model.encoder("r")?)?;
    let g_xr = fuse_reference(tape, g_x, g_r, model.pair("rwe.xr")?)?;
    let mut weights = Vec::new();

    let g_tm = encode(tape, x, &model.encoder("tm")?)?;
    let mut dtm_reverse = Vec::with_capacity(DTM_LAYERS);
    let mut dtm_forward = Vec::with_capacity(DTM_LAYERS);
    for direction in [Direction::Reverse, Direction::Forward] {
        for layer in 0..DTM_LAYERS {
            let head = Head::Tm { direction, layer };
            let (prj, out) = model.head(&head)?;
            let w = estimate_weights(tape, g_xr, g_tm, prj, out)?;
            let names = head.dictionaries();
            let kernel = select_parameter(tape, model.var(&names[0])?, w, Block::Tm)?;
            let bias = select_parameter(tape, model.var(&names[1])?, w, Block::Tm)?;
            match direction {
                Direction::Reverse => dtm_reverse.push((kernel, bias)),
                Direction::Forward => dtm_forward.push((kernel, bias)),
            }
            weights.push((head, w));
        }
    }
    let mut h = dtm_apply(tape, x, &dtm_reverse)?;

    let mut chosen = [None; 4];
    for (slot, block) in [
        (3, Block::Gc),
        (2, Block::Cc),
        (1, Block::Wb),
        (0, Block::Gg),
    ] {
        let dict = model.var(&format!("dict.{}", block.name()))?;
        let inter = build_intermediate(tape, h, dict, block)?;
        let g_i = encode(tape, inter, &model.encoder(block.name())?)?;
        let head = Head::Block(block);
        let (prj, out) = model.head(&head)?;
        let w = estimate_weights(tape, g_xr, g_i, prj, out)?;
        let theta = select_parameter(tape, dict, w, block)?;
        h = apply_block(tape, h, theta, block, Direction::Reverse)?;
        chosen[slot] = Some(theta);
        weights.push((head, w));
    }
    let [gg, wb, cc, gc] = chosen.map(|t| t.expect("every block selected"));
    Ok(Selection {
        params: PipelineVars {
            gg,
            wb,
            cc,
            gc,
            dtm_forward,
            dtm_reverse,
        },
        weights,
        stage_output: h,
    })
}
