//! Toy causal flow-matching denoiser with two noise-range experts.
//!
//! Each layer: frame-causal self-attention over `(context ∪ block)` with
//! queries from the block only, cross-attention to the prompt, and a GELU
//! feed-forward, all pre-RMS-normalized with residual connections. Camera
//! features enter by token addition after a linear 6 → C lift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Latent channels per token.
    pub channels: usize,
    /// Hidden width of the denoiser.
    pub width: usize,
    /// Spatial tokens per frame; equals `token_grid.0 * token_grid.1`.
    pub tokens_per_frame: usize,
    pub token_grid: (usize, usize),
    pub frames_per_block: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub time_buckets: usize,
    pub prompt_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            width: 32,
            tokens_per_frame: 16,
            token_grid: (4, 4),
            frames_per_block: 3,
            layers: 2,
            heads: 2,
            ffn_hidden: 32,
            time_buckets: 11,
            prompt_vocab: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.layers == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(invalid("model widths, layers and heads must be positive"));
        }
        if self.width % self.heads != 0 || (self.width / self.heads) % 2 != 0 {
            return Err(invalid("width must split into heads of even width"));
        }
        if self.token_grid.0 * self.token_grid.1 != self.tokens_per_frame || self.tokens_per_frame == 0 {
            return Err(invalid("token grid must cover tokens_per_frame"));
        }
        if self.frames_per_block == 0 {
            return Err(invalid("frames_per_block must be positive"));
        }
        if self.time_buckets < 2 || self.prompt_vocab == 0 {
            return Err(invalid("need at least two time buckets and a non-empty vocabulary"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expert {
    High,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub boundary: f64,
    pub high_lr: f64,
    pub low_lr: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            boundary: 0.9,
            high_lr: 5e-4,
            low_lr: 1e-3,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.boundary > 0.0 && self.boundary < 1.0) {
            return Err(invalid("expert boundary must lie strictly inside (0, 1)"));
        }
        if !(self.high_lr >= 0.0 && self.low_lr >= 0.0) {
            return Err(invalid("learning rates must be non-negative"));
        }
        Ok(())
    }

    pub fn lr(&self, expert: Expert) -> f64 {
        match expert {
            Expert::High => self.high_lr,
            Expert::Low => self.low_lr,
        }
    }
}

/// `t ≥ boundary` → high-noise expert, otherwise low-noise.
pub fn route_expert(t: f64, cfg: &ExpertConfig) -> Result<Expert> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("noise level {t} outside [0, 1]")));
    }
    Ok(if t >= cfg.boundary {
        Expert::High
    } else {
        Expert::Low
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Mat<F>,
    pub wk: Mat<F>,
    pub wv: Mat<F>,
    pub wo: Mat<F>,
    pub cq: Mat<F>,
    pub ck: Mat<F>,
    pub cv: Mat<F>,
    pub co: Mat<F>,
    pub w1: Mat<F>,
    pub b1: Mat<F>,
    pub w2: Mat<F>,
    pub b2: Mat<F>,
}

const LAYER_TENSORS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "cq", "ck", "cv", "co", "w1", "b1", "w2", "b2",
];

impl<F: Scalar> LayerParams<F> {
    fn tensors(&self) -> [&Mat<F>; 12] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.cq, &self.ck, &self.cv, &self.co,
            &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Mat<F>; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.cq,
            &mut self.ck,
            &mut self.cv,
            &mut self.co,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Weights of one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<F> {
    pub layers: Vec<LayerParams<F>>,
    /// C × D input projection.
    pub w_in: Mat<F>,
    /// 6 × D lift of pooled Plücker features.
    pub cam_proj: Mat<F>,
    /// time_buckets × D, linearly interpolated in t.
    pub time_table: Mat<F>,
    /// T × D spatial position embedding shared by every frame.
    pub pos: Mat<F>,
    /// D × C output projection.
    pub w_out: Mat<F>,
}

impl<F: Scalar> DenoiserParams<F> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c, d) = (cfg.channels, cfg.width);
        let h = cfg.ffn_hidden;
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            Mat::from_fn(rows, cols, |_, _| F::of(rng.sample::<f64, _>(StandardNormal) * std))
        };
        let wstd = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: gauss(d, d, wstd),
                wk: gauss(d, d, wstd),
                wv: gauss(d, d, wstd),
                wo: gauss(d, d, wstd * 0.5),
                cq: gauss(d, d, wstd),
                ck: gauss(d, d, wstd),
                cv: gauss(d, d, wstd),
                co: gauss(d, d, wstd * 0.5),
                w1: gauss(d, h, wstd),
                b1: Mat::zeros(1, h),
                w2: gauss(h, d, 0.5 / (h as f64).sqrt()),
                b2: Mat::zeros(1, d),
            })
            .collect();
        Self {
            layers,
            w_in: gauss(c, d, 1.0 / (c as f64).sqrt()),
            cam_proj: gauss(6, d, 0.1),
            time_table: gauss(cfg.time_buckets, d, 0.5),
            pos: gauss(cfg.tokens_per_frame, d, 0.5),
            w_out: gauss(d, c, wstd),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (c, d) = (cfg.channels, cfg.width);
        let h = cfg.ffn_hidden;
        Self {
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    wq: Mat::zeros(d, d),
                    wk: Mat::zeros(d, d),
                    wv: Mat::zeros(d, d),
                    wo: Mat::zeros(d, d),
                    cq: Mat::zeros(d, d),
                    ck: Mat::zeros(d, d),
                    cv: Mat::zeros(d, d),
                    co: Mat::zeros(d, d),
                    w1: Mat::zeros(d, h),
                    b1: Mat::zeros(1, h),
                    w2: Mat::zeros(h, d),
                    b2: Mat::zeros(1, d),
                })
                .collect(),
            w_in: Mat::zeros(c, d),
            cam_proj: Mat::zeros(6, d),
            time_table: Mat::zeros(cfg.time_buckets, d),
            pos: Mat::zeros(cfg.tokens_per_frame, d),
            w_out: Mat::zeros(d, c),
        }
    }

    /// Named tensors in a fixed order (used by checkpoints and optimizers).
    pub fn named_tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("w_in".into(), &self.w_in));
        out.push(("cam_proj".into(), &self.cam_proj));
        out.push(("time_table".into(), &self.time_table));
        out.push(("pos".into(), &self.pos));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<F>> {
        let mut out: Vec<&mut Mat<F>> = Vec::new();
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.w_in);
        out.push(&mut self.cam_proj);
        out.push(&mut self.time_table);
        out.push(&mut self.pos);
        out.push(&mut self.w_out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: F, other: &DenoiserParams<F>) {
        let src: Vec<&Mat<F>> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.axpy(alpha, s);
        }
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserParams<G> {
        DenoiserParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    cq: l.cq.cast(),
                    ck: l.ck.cast(),
                    cv: l.cv.cast(),
                    co: l.co.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            w_in: self.w_in.cast(),
            cam_proj: self.cam_proj.cast(),
            time_table: self.time_table.cast(),
            pos: self.pos.cast(),
            w_out: self.w_out.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn register(&self, tape: &mut Tape<F>, trainable: bool) -> ParamVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let v: Vec<Var> = l
                    .tensors()
                    .into_iter()
                    .map(|t| tape.leaf(t.clone(), trainable))
                    .collect();
                LayerVars {
                    wq: v[0],
                    wk: v[1],
                    wv: v[2],
                    wo: v[3],
                    cq: v[4],
                    ck: v[5],
                    cv: v[6],
                    co: v[7],
                    w1: v[8],
                    b1: v[9],
                    w2: v[10],
                    b2: v[11],
                }
            })
            .collect();
        ParamVars {
            layers,
            w_in: tape.leaf(self.w_in.clone(), trainable),
            cam_proj: tape.leaf(self.cam_proj.clone(), trainable),
            time_table: tape.leaf(self.time_table.clone(), trainable),
            pos: tape.leaf(self.pos.clone(), trainable),
            w_out: tape.leaf(self.w_out.clone(), trainable),
        }
    }

    /// Per-layer cross-attention `(K, V)` for a prompt.
    pub fn cross_kv(&self, prompt: &Mat<F>) -> Vec<(Mat<F>, Mat<F>)> {
        self.layers
            .iter()
            .map(|l| (prompt.matmul(&l.ck), prompt.matmul(&l.cv)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    cq: Var,
    ck: Var,
    cv: Var,
    co: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Tape handles for one expert's parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    layers: Vec<LayerVars>,
    w_in: Var,
    cam_proj: Var,
    time_table: Var,
    pos: Var,
    w_out: Var,
}

impl ParamVars {
    /// Gradients shaped like `like`; untouched tensors come back as zeros.
    pub fn collect_grads<F: Scalar>(&self, grads: &Grads<F>, like: &DenoiserParams<F>) -> DenoiserParams<F> {
        let g = |v: Var, m: &Mat<F>| grads.get_or_zeros(v, m.shape());
        DenoiserParams {
            layers: self
                .layers
                .iter()
                .zip(&like.layers)
                .map(|(v, l)| LayerParams {
                    wq: g(v.wq, &l.wq),
                    wk: g(v.wk, &l.wk),
                    wv: g(v.wv, &l.wv),
                    wo: g(v.wo, &l.wo),
                    cq: g(v.cq, &l.cq),
                    ck: g(v.ck, &l.ck),
                    cv: g(v.cv, &l.cv),
                    co: g(v.co, &l.co),
                    w1: g(v.w1, &l.w1),
                    b1: g(v.b1, &l.b1),
                    w2: g(v.w2, &l.w2),
                    b2: g(v.b2, &l.b2),
                })
                .collect(),
            w_in: g(self.w_in, &like.w_in),
            cam_proj: g(self.cam_proj, &like.cam_proj),
            time_table: g(self.time_table, &like.time_table),
            pos: g(self.pos, &like.pos),
            w_out: g(self.w_out, &like.w_out),
        }
    }
}

/// Both experts plus routing configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel<F> {
    pub config: ModelConfig,
    pub experts: ExpertConfig,
    pub high: DenoiserParams<F>,
    pub low: DenoiserParams<F>,
}

impl<F: Scalar> WorldModel<F> {
    pub fn init(config: ModelConfig, experts: ExpertConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        experts.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let high = DenoiserParams::init(&config, &mut rng);
        let low = DenoiserParams::init(&config, &mut rng);
        Ok(Self {
            config,
            experts,
            high,
            low,
        })
    }

    pub fn expert(&self, e: Expert) -> &DenoiserParams<F> {
        match e {
            Expert::High => &self.high,
            Expert::Low => &self.low,
        }
    }

    pub fn expert_mut(&mut self, e: Expert) -> &mut DenoiserParams<F> {
        match e {
            Expert::High => &mut self.high,
            Expert::Low => &mut self.low,
        }
    }

    pub fn cast<G: Scalar>(&self) -> WorldModel<G> {
        WorldModel {
            config: self.config,
            experts: self.experts,
            high: self.high.cast(),
            low: self.low.cast(),
        }
    }

    pub fn route(&self, t: f64) -> Result<Expert> {
        route_expert(t, &self.experts)
    }

    pub fn param_count(&self) -> usize {
        self.high.param_count() + self.low.param_count()
    }
}

/// Self-attention context: per-layer stacked keys/values of `frames.len()` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextView<F> {
    pub layers: Vec<(Mat<F>, Mat<F>)>,
    /// Absolute frame index of each context slot, in attention order.
    pub frames: Vec<usize>,
}

impl<F: Scalar> ContextView<F> {
    pub fn empty(layers: usize, channels: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| (Mat::zeros(0, channels), Mat::zeros(0, channels)))
                .collect(),
            frames: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy)]
pub enum CrossInput<'a, F> {
    /// Project the prompt inside the forward pass.
    Prompt(&'a Mat<F>),
    /// Precomputed per-layer `(K, V)`.
    Cached(&'a [(Mat<F>, Mat<F>)]),
    /// Skip the cross-attention branch entirely.
    Disabled,
}

/// Visibility of context slot `s` from block frame `f`: `visible(f, s)`.
pub type ContextMask<'a> = &'a dyn Fn(usize, usize) -> bool;

pub struct ForwardSpec<'a, F> {
    /// `(frames · T) × C` tokens, frame-major.
    pub x: &'a Mat<F>,
    pub frames: usize,
    /// Absolute index of the first frame in `x`.
    pub first_frame: usize,
    pub t: f64,
    /// `(frames · T) × 6` pooled Plücker features.
    pub cam: Option<&'a Mat<F>>,
    pub context: Option<&'a ContextView<F>>,
    pub context_mask: Option<ContextMask<'a>>,
    pub cross: CrossInput<'a, F>,
}

pub struct ForwardVars {
    pub velocity: Var,
    /// Per-layer self-attention keys/values of the block rows.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Per-layer self-attention nodes (for inspecting probabilities).
    pub self_attention: Vec<Var>,
}

fn time_weights<F: Scalar>(t: f64, buckets: usize) -> Vec<(usize, F)> {
    let pos = t.clamp(0.0, 1.0) * (buckets - 1) as f64;
    let i0 = (pos.floor() as usize).min(buckets - 1);
    let w = pos - i0 as f64;
    if i0 + 1 >= buckets || w == 0.0 {
        vec![(i0, F::one())]
    } else {
        vec![(i0, F::of(1.0 - w)), (i0 + 1, F::of(w))]
    }
}

/// Frequency base of the rotary frame-index encoding in self-attention.
pub const ROTARY_BASE: f64 = 100.0;

/// Records one forward pass of an expert on `tape`.
pub fn forward_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    p: &ParamVars,
    cfg: &ModelConfig,
    spec: &ForwardSpec<'_, F>,
) -> ForwardVars {
    let tpf = cfg.tokens_per_frame;
    let n = spec.frames * tpf;
    let x = tape.constant(spec.x.clone());
    let mut h = tape.matmul(x, p.w_in);
    if let Some(cam) = spec.cam {
        let cam = tape.constant(cam.clone());
        let lifted = tape.matmul(cam, p.cam_proj);
        h = tape.add(h, lifted);
    }
    let pos = tape.tile_rows(p.pos, n);
    h = tape.add(h, pos);
    let temb = tape.row_mix(p.time_table, time_weights(spec.t, cfg.time_buckets));
    h = tape.add_row(h, temb);

    let ctx_rows = spec.context.map_or(0, |c| c.len() * tpf);
    let mut keys = Vec::with_capacity(cfg.layers);
    let mut values = Vec::with_capacity(cfg.layers);
    let mut self_attention = Vec::with_capacity(cfg.layers);
    let prompt_var = match spec.cross {
        CrossInput::Prompt(pm) => Some(tape.constant(pm.clone())),
        _ => None,
    };

    let head_dim = cfg.width / cfg.heads;
    let positions: Vec<f64> = (0..n).map(|r| (spec.first_frame + r / tpf) as f64).collect();
    for (li, l) in p.layers.iter().enumerate() {
        let a = tape.rms_norm(h);
        let q = tape.matmul(a, l.wq);
        let q = tape.rotary(q, &positions, head_dim, ROTARY_BASE);
        let k = tape.matmul(a, l.wk);
        let k = tape.rotary(k, &positions, head_dim, ROTARY_BASE);
        let v = tape.matmul(a, l.wv);
        keys.push(k);
        values.push(v);
        let (k_all, v_all) = match spec.context {
            Some(ctx) if ctx_rows > 0 => {
                let (ck, cv) = &ctx.layers[li];
                let ck = tape.constant(ck.clone());
                let cv = tape.constant(cv.clone());
                (tape.concat_rows(&[ck, k]), tape.concat_rows(&[cv, v]))
            }
            _ => (k, v),
        };
        let mask = spec.context_mask;
        let att = tape.attention(q, k_all, v_all, cfg.heads, |i, j| {
            let fq = i / tpf;
            if j < ctx_rows {
                mask.is_none_or(|m| m(fq, j / tpf))
            } else {
                (j - ctx_rows) / tpf <= fq
            }
        });
        self_attention.push(att);
        let o = tape.matmul(att, l.wo);
        h = tape.add(h, o);

        let cross_kv = match spec.cross {
            CrossInput::Prompt(_) => {
                let pv = prompt_var.expect("prompt registered");
                Some((tape.matmul(pv, l.ck), tape.matmul(pv, l.cv)))
            }
            CrossInput::Cached(kv) => {
                let (ck, cv) = &kv[li];
                Some((tape.constant(ck.clone()), tape.constant(cv.clone())))
            }
            CrossInput::Disabled => None,
        };
        if let Some((ck, cv)) = cross_kv {
            let c = tape.rms_norm(h);
            let cq = tape.matmul(c, l.cq);
            let catt = tape.attention(cq, ck, cv, cfg.heads, |_, _| true);
            let o = tape.matmul(catt, l.co);
            h = tape.add(h, o);
        }

        let f = tape.rms_norm(h);
        let z = tape.matmul(f, l.w1);
        let z = tape.add_row(z, l.b1);
        let z = tape.gelu(z);
        let z = tape.matmul(z, l.w2);
        let z = tape.add_row(z, l.b2);
        h = tape.add(h, z);
    }
    let out = tape.rms_norm(h);
    let velocity = tape.matmul(out, p.w_out);
    ForwardVars {
        velocity,
        keys,
        values,
        self_attention,
    }
}

/// Result of an inference-only forward pass.
pub struct ForwardResult<F> {
    pub velocity: Mat<F>,
    /// Per-layer `(K, V)` rows of the block, `(frames · T) × C` each.
    pub kv: Vec<(Mat<F>, Mat<F>)>,
}

impl<F: Scalar> DenoiserParams<F> {
    /// Forward pass without gradient bookkeeping.
    pub fn run(&self, cfg: &ModelConfig, spec: &ForwardSpec<'_, F>) -> ForwardResult<F> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let fv = forward_on_tape(&mut tape, &vars, cfg, spec);
        ForwardResult {
            velocity: tape.value(fv.velocity).clone(),
            kv: fv
                .keys
                .iter()
                .zip(&fv.values)
                .map(|(&k, &v)| (tape.value(k).clone(), tape.value(v).clone()))
                .collect(),
        }
    }
}

/// One latent frame: `T × C`.
pub type LatentFrame<F> = Mat<F>;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBlock<F> {
    pub frames: Vec<LatentFrame<F>>,
    pub block_index: usize,
}

impl<F: Scalar> FrameBlock<F> {
    pub fn new(frames: Vec<LatentFrame<F>>, block_index: usize) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(invalid("frame block must hold at least one frame"));
        };
        let s = first.shape();
        if frames.iter().any(|f| f.shape() != s) {
            return Err(shape("all frames of a block must share (T, C)"));
        }
        Ok(Self {
            frames,
            block_index,
        })
    }

    pub fn from_stacked(m: &Mat<F>, frames: usize, block_index: usize) -> Self {
        let tpf = m.rows() / frames;
        Self {
            frames: (0..frames).map(|f| m.slice_rows(f * tpf, tpf)).collect(),
            block_index,
        }
    }

    pub fn stacked(&self) -> Mat<F> {
        let refs: Vec<&Mat<F>> = self.frames.iter().collect();
        Mat::concat_rows(&refs)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> FrameBlock<G> {
        FrameBlock {
            frames: self.frames.iter().map(Mat::cast).collect(),
            block_index: self.block_index,
        }
    }
}

/// Prompt token vectors, `P × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub vectors: Mat<f64>,
}

impl PromptEmbedding {
    pub fn tokens(&self) -> usize {
        self.vectors.rows()
    }

    /// Concatenates token sequences (caption followed by interaction text).
    pub fn concat(&self, other: &PromptEmbedding) -> PromptEmbedding {
        PromptEmbedding {
            vectors: Mat::concat_rows(&[&self.vectors, &other.vectors]),
        }
    }

    pub fn zeros_like(&self) -> PromptEmbedding {
        PromptEmbedding {
            vectors: Mat::zeros(self.vectors.rows(), self.vectors.cols()),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Row `row` of the seeded vocabulary table.
pub fn vocab_row(vocab_seed: u64, row: u64, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(vocab_seed);
    rng.set_stream(row);
    (0..channels).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn token_row(token: &str, vocab: usize) -> u64 {
    fnv1a(token.as_bytes()) % vocab as u64
}

/// Whitespace-tokenizes `text` and looks each token up in a seeded table.
pub fn encode_prompt(text: &str, vocab_seed: u64, cfg: &ModelConfig) -> Result<PromptEmbedding> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(invalid("prompt text is empty"));
    }
    let c = cfg.width;
    let mut data = Vec::with_capacity(tokens.len() * c);
    for tok in &tokens {
        data.extend(vocab_row(vocab_seed, token_row(tok, cfg.prompt_vocab), c));
    }
    Ok(PromptEmbedding {
        vectors: Mat::new(tokens.len(), c, data),
    })
}

/// Rewrites interaction text before encoding. The default is the identity.
pub trait InteractionEnricher: Send + Sync {
    fn enrich(&self, text: &str) -> String;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEnricher;

impl InteractionEnricher for IdentityEnricher {
    fn enrich(&self, text: &str) -> String {
        text.to_string()
    }
}

/// Conditioning shared by `denoise` and the training losses.
#[derive(Clone, Copy)]
pub struct Conditioning<'a, F> {
    pub context: Option<&'a ContextView<F>>,
    /// Absolute index of the block's first frame.
    pub first_frame: usize,
    pub prompt: &'a Mat<F>,
    pub cam: Option<&'a Mat<F>>,
}

fn check_block<F: Scalar>(cfg: &ModelConfig, x: &Mat<F>, frames: usize, what: &str) -> Result<()> {
    if x.shape() != (frames * cfg.tokens_per_frame, cfg.channels) {
        return Err(shape(format!(
            "{what}: expected {}x{}, got {}x{}",
            frames * cfg.tokens_per_frame,
            cfg.channels,
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

fn check_cond<F: Scalar>(cfg: &ModelConfig, frames: usize, cond: &Conditioning<'_, F>) -> Result<()> {
    if let Some(cam) = cond.cam {
        if cam.shape() != (frames * cfg.tokens_per_frame, 6) {
            return Err(shape("camera features must be (frames*T) x 6"));
        }
        if !cam.is_finite() {
            return Err(Error::NonFinite("camera features"));
        }
    }
    if cond.prompt.cols() != cfg.width || cond.prompt.rows() == 0 {
        return Err(shape("prompt embedding width must equal the model width"));
    }
    if let Some(ctx) = cond.context {
        if ctx.layers.len() != cfg.layers {
            return Err(shape("context layer count mismatch"));
        }
        for (k, v) in &ctx.layers {
            if k.shape() != (ctx.len() * cfg.tokens_per_frame, cfg.width) || v.shape() != k.shape() {
                return Err(shape("context K/V shape mismatch"));
            }
        }
    }
    Ok(())
}

/// Predicted velocity for a noisy block at noise level `t`.
pub fn denoise<F: Scalar>(
    noisy: &FrameBlock<F>,
    t: f64,
    cond: &Conditioning<'_, F>,
    model: &WorldModel<F>,
) -> Result<FrameBlock<F>> {
    let cfg = &model.config;
    let x = noisy.stacked();
    let frames = noisy.len();
    check_block(cfg, &x, frames, "noisy block")?;
    if !x.is_finite() {
        return Err(Error::NonFinite("noisy block"));
    }
    check_cond(cfg, frames, cond)?;
    let expert = model.route(t)?;
    let out = model.expert(expert).run(
        cfg,
        &ForwardSpec {
            x: &x,
            frames,
            first_frame: cond.first_frame,
            t,
            cam: cond.cam,
            context: cond.context,
            context_mask: None,
            cross: CrossInput::Prompt(cond.prompt),
        },
    );
    Ok(FrameBlock::from_stacked(&out.velocity, frames, noisy.block_index))
}

/// Loss and per-expert gradients of one flow-matching evaluation.
pub struct LossAndGrad<F> {
    pub loss: F,
    pub expert: Expert,
    pub grad: DenoiserParams<F>,
}

/// `x_t = (1 − t)·x0 + t·ε`
pub fn noise_to<F: Scalar>(clean: &Mat<F>, noise: &Mat<F>, t: f64) -> Mat<F> {
    let a = F::of(1.0 - t);
    let b = F::of(t);
    clean.zip_map(noise, |x, e| a * x + b * e)
}

/// MSE between the predicted velocity at `x_t` and `ε − x0`.
pub fn flow_matching_loss<F: Scalar>(
    model: &WorldModel<F>,
    clean: &FrameBlock<F>,
    t: f64,
    noise: &FrameBlock<F>,
    cond: &Conditioning<'_, F>,
) -> Result<LossAndGrad<F>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid(format!("flow-matching t={t} must lie in (0, 1]")));
    }
    let cfg = &model.config;
    let x0 = clean.stacked();
    let eps = noise.stacked();
    let frames = clean.len();
    check_block(cfg, &x0, frames, "clean block")?;
    check_block(cfg, &eps, frames, "noise block")?;
    check_cond(cfg, frames, cond)?;
    let xt = noise_to(&x0, &eps, t);
    let target = eps.sub(&x0);
    let expert = model.route(t)?;
    let params = model.expert(expert);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let fv = forward_on_tape(
        &mut tape,
        &vars,
        cfg,
        &ForwardSpec {
            x: &xt,
            frames,
            first_frame: cond.first_frame,
            t,
            cam: cond.cam,
            context: cond.context,
            context_mask: None,
            cross: CrossInput::Prompt(cond.prompt),
        },
    );
    let loss = tape.mse_const(fv.velocity, target);
    let grads = tape.backward(loss);
    Ok(LossAndGrad {
        loss: tape.scalar(loss),
        expert,
        grad: vars.collect_grads(&grads, params),
    })
}
