//! Flow-matching pretraining, score-difference distillation and randomized
//! long-video tuning with interleaved self/teacher forcing.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cache::{append_block, encode_frames, init_cache, CacheLayout, CrossCache};
use crate::camera::{CameraPose, PluckerConfig};
use crate::data::{Dataset, DriftConfig};
use crate::engine::{BlockTrace, EngineConfig, SamplerSchedule, Session};
use crate::error::{invalid, shape, Error, Result};
use crate::model::{
    encode_prompt, flow_matching_loss, forward_on_tape, noise_to, Conditioning, ContextView, CrossInput,
    DenoiserParams, Expert, ForwardSpec, FrameBlock, LatentFrame, ModelConfig, WorldModel,
};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingMode {
    SelfForcing,
    TeacherForcing,
}

impl ForcingMode {
    pub fn name(self) -> &'static str {
        match self {
            ForcingMode::SelfForcing => "self_forcing",
            ForcingMode::TeacherForcing => "teacher_forcing",
        }
    }
}

/// Seeded synthetic dataset description.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub videos: usize,
    pub drift: DriftConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            videos: 16,
            drift: DriftConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn build(&self, model: &ModelConfig) -> Result<Dataset> {
        if self.videos == 0 {
            return Err(invalid("dataset must contain at least one video"));
        }
        Dataset::synthetic(self.seed, self.videos, model, &self.drift)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub layout: CacheLayout,
    /// Window length K in frames.
    pub window_frames: usize,
    /// Longest rollout N_max in frames.
    pub max_rollout_frames: usize,
    pub schedule: SamplerSchedule,
    pub high_lr: f64,
    pub low_lr: f64,
    pub p_teacher: f64,
    pub seed: u64,
    pub steps: usize,
    /// Global gradient-norm limit per update; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub prompt: String,
    pub vocab_seed: u64,
    pub plucker: PluckerConfig,
    pub dataset: DatasetSpec,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            layout: CacheLayout::default(),
            window_frames: 3,
            max_rollout_frames: 24,
            schedule: SamplerSchedule::default(),
            high_lr: 5e-4,
            low_lr: 1e-3,
            p_teacher: 0.25,
            seed: 0,
            steps: 100,
            grad_clip: Some(1.0),
            prompt: "drifting pattern".into(),
            vocab_seed: 7,
            plucker: PluckerConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fpb = model.frames_per_block;
        if self.window_frames == 0 || self.window_frames % fpb != 0 {
            return Err(invalid("window K must be a positive multiple of frames_per_block"));
        }
        if self.window_frames > self.max_rollout_frames {
            return Err(invalid("window K must not exceed N_max"));
        }
        if !(0.0..=1.0).contains(&self.p_teacher) {
            return Err(invalid("p_teacher must lie in [0, 1]"));
        }
        for lr in [self.high_lr, self.low_lr] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(invalid("learning rates must be finite and non-negative"));
            }
        }
        if self.layout.layers != model.layers {
            return Err(invalid("cache layout layer count must match the model"));
        }
        if self.max_rollout_frames + 1 > self.dataset.drift.frames {
            return Err(invalid("videos must be longer than N_max"));
        }
        Ok(())
    }

    pub fn lr(&self, e: Expert) -> f64 {
        match e {
            Expert::High => self.high_lr,
            Expert::Low => self.low_lr,
        }
    }

    pub fn engine(&self, seed: u64) -> EngineConfig {
        EngineConfig {
            seed,
            vocab_seed: self.vocab_seed,
            layout: self.layout,
            schedule: self.schedule.clone(),
            plucker: self.plucker,
        }
    }
}

/// Frozen teacher score and trainable critic of identical architecture.
#[derive(Clone, Debug)]
pub struct ScorePair<F> {
    real: Arc<WorldModel<F>>,
    fake: WorldModel<F>,
}

impl<F: Scalar> ScorePair<F> {
    pub fn new(real: Arc<WorldModel<F>>, fake: WorldModel<F>) -> Result<Self> {
        if real.config != fake.config {
            return Err(shape("real and fake score networks must share an architecture"));
        }
        Ok(Self { real, fake })
    }

    /// Both scores start from the same weights.
    pub fn from_teacher(teacher: &WorldModel<F>) -> Self {
        Self {
            real: Arc::new(teacher.clone()),
            fake: teacher.clone(),
        }
    }

    pub fn real(&self) -> &WorldModel<F> {
        &self.real
    }

    pub fn fake(&self) -> &WorldModel<F> {
        &self.fake
    }

    pub fn fake_mut(&mut self) -> &mut WorldModel<F> {
        &mut self.fake
    }
}

/// Prompt and idle camera features shared by every score evaluation.
#[derive(Clone, Debug)]
pub struct ScoreSetup<F> {
    pub prompt: Mat<F>,
    pub cam_condition: Mat<F>,
    pub cam_window: Mat<F>,
}

impl<F: Scalar> ScoreSetup<F> {
    pub fn new(model: &ModelConfig, cfg: &TrainerConfig) -> Result<Self> {
        let prompt = encode_prompt(&cfg.prompt, cfg.vocab_seed, model)?.vectors.cast();
        Ok(Self {
            prompt,
            cam_condition: idle_camera(&cfg.plucker, 1)?,
            cam_window: idle_camera(&cfg.plucker, cfg.window_frames)?,
        })
    }
}

/// Plücker features of `frames` frames that never leave the identity pose.
pub fn idle_camera<F: Scalar>(plucker: &PluckerConfig, frames: usize) -> Result<Mat<F>> {
    plucker.features(&vec![CameraPose::identity(); frames])
}

/// Block-aligned rollout length, uniform over `{K, K + F, …} ∩ [K, N_max]`.
pub fn sample_rollout_length(
    k: usize,
    n_max: usize,
    frames_per_block: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if frames_per_block == 0 || k == 0 || k % frames_per_block != 0 {
        return Err(invalid("K must be a positive multiple of frames_per_block"));
    }
    if k > n_max {
        return Err(invalid(format!("K={k} exceeds N_max={n_max}")));
    }
    let choices = (n_max - k) / frames_per_block + 1;
    Ok(k + frames_per_block * rng.random_range(0..choices))
}

/// Window start `i`, uniform over `1..=N−K+1`.
pub fn sample_window(n: usize, k: usize, rng: &mut impl Rng) -> Result<usize> {
    if k == 0 || n < k {
        return Err(invalid(format!("window K={k} does not fit rollout N={n}")));
    }
    Ok(rng.random_range(1..=n - k + 1))
}

/// `(V_pred[i−1], V_gt[i−1])`.
pub fn make_conditions<F: Scalar>(
    v_pred: &[LatentFrame<F>],
    v_gt: &[LatentFrame<F>],
    i: usize,
) -> Result<(LatentFrame<F>, LatentFrame<F>)> {
    if i == 0 || i > v_pred.len() || i > v_gt.len() {
        return Err(invalid(format!("condition index {} out of range", i as i64 - 1)));
    }
    Ok((v_pred[i - 1].clone(), v_gt[i - 1].clone()))
}

/// Generated frames (index 0 is the conditioning frame) and the final-step
/// traces of every block.
#[derive(Clone, Debug)]
pub struct Rollout<F> {
    pub frames: Vec<LatentFrame<F>>,
    pub traces: Vec<BlockTrace<F>>,
}

/// Block-wise engine rollout of `n` frames after `first_frame`. With
/// `history`, ground-truth frames `history[1..]` are cached in place of the
/// generated ones.
pub fn autoregressive_rollout<F: Scalar>(
    generator: Arc<WorldModel<F>>,
    engine: EngineConfig,
    prompt: &str,
    first_frame: &LatentFrame<F>,
    n: usize,
    history: Option<&[LatentFrame<F>]>,
) -> Result<Rollout<F>> {
    let fpb = generator.config.frames_per_block;
    if n == 0 || n % fpb != 0 {
        return Err(invalid(format!("rollout length {n} is not block-aligned")));
    }
    if let Some(h) = history {
        if h.len() < n + 1 {
            return Err(invalid("teacher-forcing history is shorter than the rollout"));
        }
    }
    let mut session = Session::new(engine, generator, first_frame.clone(), CameraPose::identity(), prompt)?;
    let mut frames = vec![first_frame.clone()];
    let mut traces = Vec::with_capacity(n / fpb);
    for j in 0..n / fpb {
        let forced = history.map(|h| {
            let refs: Vec<&Mat<F>> = h[1 + j * fpb..1 + (j + 1) * fpb].iter().collect();
            Mat::concat_rows(&refs)
        });
        let (block, trace) = session.rollout_block_with(forced.as_ref(), true)?;
        frames.extend(block.frames);
        traces.push(trace.expect("trace requested"));
    }
    Ok(Rollout { frames, traces })
}

/// Single-frame context built from `c` with the score network's own weights.
pub fn condition_context<F: Scalar>(
    model: &WorldModel<F>,
    c: &LatentFrame<F>,
    setup: &ScoreSetup<F>,
) -> Result<ContextView<F>> {
    let cfg = &model.config;
    if c.shape() != (cfg.tokens_per_frame, cfg.channels) {
        return Err(shape("condition must be one latent frame"));
    }
    let empty = ContextView::empty(cfg.layers, cfg.width);
    let entries = encode_frames(
        model,
        c,
        1,
        0,
        Some(&setup.cam_condition),
        &empty,
        None,
        CrossInput::Prompt(&setup.prompt),
    )?;
    let layers = entries
        .into_iter()
        .next()
        .expect("one frame encoded")
        .into_iter()
        .map(|e| (e.key, e.value))
        .collect();
    Ok(ContextView { layers, frames: vec![0] })
}

/// Clean-sample estimate `x_t − t·v̂` of a score network given condition `c`.
pub fn score_x0<F: Scalar>(
    model: &WorldModel<F>,
    x_t: &Mat<F>,
    t: f64,
    c: &LatentFrame<F>,
    setup: &ScoreSetup<F>,
) -> Result<Mat<F>> {
    let cfg = &model.config;
    let tpf = cfg.tokens_per_frame;
    if x_t.cols() != cfg.channels || x_t.rows() == 0 || x_t.rows() % tpf != 0 {
        return Err(shape("noised window must be (frames*T) x C"));
    }
    let frames = x_t.rows() / tpf;
    if setup.cam_window.rows() != x_t.rows() {
        return Err(shape("window camera features do not match the window"));
    }
    let ctx = condition_context(model, c, setup)?;
    let v = model
        .expert(model.route(t)?)
        .run(
            cfg,
            &ForwardSpec {
                x: x_t,
                frames,
                first_frame: 1,
                t,
                cam: Some(&setup.cam_window),
                context: Some(&ctx),
                context_mask: None,
                cross: CrossInput::Prompt(&setup.prompt),
            },
        )
        .velocity;
    let tt = F::of(t);
    Ok(x_t.zip_map(&v, |x, vi| x - tt * vi))
}

/// `g = x̂0_fake(x_t, t | c_student) − x̂0_real(x_t, t | c_teacher)`, a constant field over the window.
pub fn dmd_gradient<F: Scalar>(
    pair: &ScorePair<F>,
    x_t: &Mat<F>,
    t: f64,
    c_student: &LatentFrame<F>,
    c_teacher: &LatentFrame<F>,
    setup: &ScoreSetup<F>,
) -> Result<Mat<F>> {
    if c_student.shape() != c_teacher.shape() {
        return Err(shape("student and teacher conditions differ in shape"));
    }
    if !x_t.is_finite() {
        return Err(Error::NonFinite("noised window"));
    }
    let fake = score_x0(pair.fake(), x_t, t, c_student, setup)?;
    let real = score_x0(pair.real(), x_t, t, c_teacher, setup)?;
    Ok(fake.sub(&real))
}

/// Gradients for each expert; `None` when an expert received no signal.
#[derive(Clone, Debug, Default)]
pub struct ExpertGrads<F> {
    pub high: Option<DenoiserParams<F>>,
    pub low: Option<DenoiserParams<F>>,
}

impl<F: Scalar> ExpertGrads<F> {
    pub fn get(&self, e: Expert) -> Option<&DenoiserParams<F>> {
        match e {
            Expert::High => self.high.as_ref(),
            Expert::Low => self.low.as_ref(),
        }
    }

    pub fn accumulate(&mut self, e: Expert, alpha: F, g: &DenoiserParams<F>) {
        let slot = match e {
            Expert::High => &mut self.high,
            Expert::Low => &mut self.low,
        };
        match slot {
            Some(acc) => acc.axpy(alpha, g),
            None => {
                let mut z = g.clone();
                for m in z.tensors_mut() {
                    *m = m.scale(alpha);
                }
                *slot = Some(z);
            }
        }
    }
}

/// Value and parameter gradients of `⟨W, g⟩`, where the window `W` is the
/// output of each block's final denoising step and `g` is held constant.
pub struct GeneratorLoss<F> {
    pub value: F,
    pub grads: ExpertGrads<F>,
}

/// Window frames are absolute indices `window_start .. window_start + g.rows()/T`.
pub fn generator_dmd_loss<F: Scalar>(
    generator: &WorldModel<F>,
    traces: &[BlockTrace<F>],
    window_start: usize,
    g: &Mat<F>,
    prompt: &Mat<F>,
) -> Result<GeneratorLoss<F>> {
    let cfg = &generator.config;
    let tpf = cfg.tokens_per_frame;
    if g.cols() != cfg.channels || g.rows() % tpf != 0 {
        return Err(shape("gradient field must be (frames*T) x C"));
    }
    let window_end = window_start + g.rows() / tpf;
    let mut value = F::zero();
    let mut grads = ExpertGrads::default();
    let mut covered = 0;
    for tr in traces {
        let frames = tr.x_last.rows() / tpf;
        let lo = tr.first_frame.max(window_start);
        let hi = (tr.first_frame + frames).min(window_end);
        if lo >= hi {
            continue;
        }
        if tr.t_next != 0.0 {
            return Err(invalid("trace is not a final denoising step"));
        }
        covered += hi - lo;
        let g_block = Mat::from_fn(frames * tpf, cfg.channels, |r, c| {
            let f = tr.first_frame + r / tpf;
            if (lo..hi).contains(&f) {
                g.get((f - window_start) * tpf + r % tpf, c)
            } else {
                F::zero()
            }
        });
        let params = generator.expert(tr.expert);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let fv = forward_on_tape(
            &mut tape,
            &vars,
            cfg,
            &ForwardSpec {
                x: &tr.x_last,
                frames,
                first_frame: tr.first_frame,
                t: tr.t_last,
                cam: Some(&tr.cam),
                context: Some(&tr.context),
                context_mask: None,
                cross: CrossInput::Prompt(prompt),
            },
        );
        let step = tape.scale(fv.velocity, F::of(tr.t_next - tr.t_last));
        let x = tape.constant(tr.x_last.clone());
        let out = tape.add(x, step);
        let loss = tape.dot_const(out, g_block);
        value = value + tape.scalar(loss);
        let gr = tape.backward(loss);
        grads.accumulate(tr.expert, F::one(), &vars.collect_grads(&gr, params));
    }
    if covered != window_end - window_start {
        return Err(invalid("traces do not cover the window"));
    }
    Ok(GeneratorLoss { value, grads })
}

pub fn grad_norm<F: Scalar>(g: &DenoiserParams<F>) -> f64 {
    g.named_tensors()
        .iter()
        .map(|(_, m)| m.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Plain gradient descent, optionally rescaling to a maximum global norm.
pub fn descend<F: Scalar>(params: &mut DenoiserParams<F>, grad: &DenoiserParams<F>, lr: f64, clip: Option<f64>) {
    if lr == 0.0 {
        return;
    }
    let scale = match clip {
        Some(c) => {
            let n = grad_norm(grad);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    params.axpy(F::of(-lr * scale), grad);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-expert optimizer state.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    kind: Optimizer,
    steps: [u32; 2],
    moments: [Option<(DenoiserParams<F>, DenoiserParams<F>)>; 2],
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(kind: Optimizer) -> Self {
        Self {
            kind,
            steps: [0; 2],
            moments: [None, None],
        }
    }

    pub fn step(&mut self, e: Expert, params: &mut DenoiserParams<F>, grad: &DenoiserParams<F>, lr: f64, clip: Option<f64>) {
        let Optimizer::Adam { beta1, beta2, eps } = self.kind else {
            descend(params, grad, lr, clip);
            return;
        };
        let slot = e as usize;
        self.steps[slot] += 1;
        let n = self.steps[slot] as i32;
        let (m, v) = self.moments[slot].get_or_insert_with(|| {
            let mut z = grad.clone();
            for t in z.tensors_mut() {
                *t = t.scale(F::zero());
            }
            (z.clone(), z)
        });
        let scale = clip.map_or(1.0, |c| {
            let norm = grad_norm(grad);
            if norm > c {
                c / norm
            } else {
                1.0
            }
        });
        let bc1 = 1.0 - beta1.powi(n);
        let bc2 = 1.0 - beta2.powi(n);
        let step = lr * bc2.sqrt() / bc1;
        let (b1, b2, sc) = (F::of(beta1), F::of(beta2), F::of(scale));
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.named_tensors().into_iter().map(|(_, g)| g))
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * sc;
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                *pi = *pi - F::of(step) * *mi / (vi.sqrt() + F::of(eps));
            }
        }
    }
}

fn gaussian<F: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<F> {
    Mat::from_fn(rows, cols, |_, _| F::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Everything sampled and measured during one tuning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub step: usize,
    pub video_id: u64,
    pub n: usize,
    pub i: usize,
    pub t: f64,
    pub forcing_mode: ForcingMode,
    /// `⟨W, g⟩`
    pub dmd_loss: f64,
    /// Mean square of `g`.
    pub dmd_grad_ms: f64,
    pub fake_loss: f64,
}

/// One iteration of randomized extended long-video tuning.
pub fn tuning_step<F: Scalar>(
    generator: &mut WorldModel<F>,
    pair: &mut ScorePair<F>,
    dataset: &Dataset,
    cfg: &TrainerConfig,
    setup: &ScoreSetup<F>,
    step: usize,
    rng: &mut impl Rng,
) -> Result<TuningRecord> {
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let mcfg = generator.config;
    let k = cfg.window_frames;
    let tpf = mcfg.tokens_per_frame;

    let video = &dataset.videos[rng.random_range(0..dataset.len())];
    let n = sample_rollout_length(k, cfg.max_rollout_frames, mcfg.frames_per_block, rng)?;
    if video.len() < n + 1 {
        return Err(invalid("video shorter than the sampled rollout"));
    }
    let forcing = if rng.random_bool(cfg.p_teacher) {
        ForcingMode::TeacherForcing
    } else {
        ForcingMode::SelfForcing
    };
    let engine_seed: u64 = rng.random();
    let v_gt: Vec<LatentFrame<F>> = video.frames_as(0..n + 1);

    let history = (forcing == ForcingMode::TeacherForcing).then_some(v_gt.as_slice());
    let rollout = autoregressive_rollout(
        Arc::new(generator.clone()),
        cfg.engine(engine_seed),
        &cfg.prompt,
        &v_gt[0],
        n,
        history,
    )?;
    let v_pred = &rollout.frames;

    let i = sample_window(n, k, rng)?;
    let ts = cfg.schedule.timesteps();
    let t = ts[rng.random_range(0..ts.len())];
    let eps: Mat<F> = gaussian(k * tpf, mcfg.channels, rng);
    let refs: Vec<&Mat<F>> = v_pred[i..i + k].iter().collect();
    let window = Mat::concat_rows(&refs);
    let x_t = noise_to(&window, &eps, t);

    // the student condition comes from whichever history the generator consumed
    let source = match forcing {
        ForcingMode::SelfForcing => v_pred.as_slice(),
        ForcingMode::TeacherForcing => v_gt.as_slice(),
    };
    let (c_student, c_teacher) = make_conditions(source, &v_gt, i)?;
    let g = dmd_gradient(pair, &x_t, t, &c_student, &c_teacher, setup)?;

    let gen = generator_dmd_loss(generator, &rollout.traces, i, &g, &setup.prompt)?;
    for e in [Expert::High, Expert::Low] {
        if let Some(gr) = gen.grads.get(e) {
            descend(generator.expert_mut(e), gr, cfg.lr(e), cfg.grad_clip);
        }
    }

    let ctx = condition_context(pair.fake(), &c_student, setup)?;
    let fake_fit = flow_matching_loss(
        pair.fake(),
        &FrameBlock::from_stacked(&window, k, 0),
        t,
        &FrameBlock::from_stacked(&eps, k, 0),
        &Conditioning {
            context: Some(&ctx),
            first_frame: 1,
            prompt: &setup.prompt,
            cam: Some(&setup.cam_window),
        },
    )?;
    descend(
        pair.fake_mut().expert_mut(fake_fit.expert),
        &fake_fit.grad,
        cfg.lr(fake_fit.expert),
        cfg.grad_clip,
    );

    Ok(TuningRecord {
        step,
        video_id: video.id,
        n,
        i,
        t,
        forcing_mode: forcing,
        dmd_loss: gen.value.as_f64(),
        dmd_grad_ms: g.mean_square().as_f64(),
        fake_loss: fake_fit.loss.as_f64(),
    })
}

/// Per-step generator for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Runs `cfg.steps` tuning steps; `on_step` sees every record as it is produced.
pub fn tune<F: Scalar>(
    generator: &mut WorldModel<F>,
    pair: &mut ScorePair<F>,
    dataset: &Dataset,
    cfg: &TrainerConfig,
    mut on_step: impl FnMut(&TuningRecord, &WorldModel<F>),
) -> Result<Vec<TuningRecord>> {
    cfg.validate(&generator.config)?;
    let setup = ScoreSetup::new(&generator.config, cfg)?;
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let rec = tuning_step(generator, pair, dataset, cfg, &setup, step, &mut rng)?;
        on_step(&rec, generator);
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub high_lr: f64,
    pub low_lr: f64,
    /// Ground-truth blocks placed between the sink frame and the target block.
    pub max_context_blocks: usize,
    /// Smallest noise level drawn for the low-noise expert.
    pub min_t: f64,
    pub grad_clip: Option<f64>,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub prompt: String,
    pub vocab_seed: u64,
    pub layout: CacheLayout,
    pub plucker: PluckerConfig,
    pub dataset: DatasetSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 4,
            high_lr: 5e-3,
            low_lr: 1e-2,
            max_context_blocks: 2,
            min_t: 0.2,
            grad_clip: Some(1.0),
            optimizer: Optimizer::adam(),
            seed: 0,
            prompt: "drifting pattern".into(),
            vocab_seed: 7,
            layout: CacheLayout::default(),
            plucker: PluckerConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl PretrainConfig {
    /// Frames spanned by one training clip: sink, context blocks, target block.
    pub fn clip_frames(&self, model: &ModelConfig) -> usize {
        1 + (self.max_context_blocks + 1) * model.frames_per_block
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid("pretraining needs at least one step and one sample per batch"));
        }
        for lr in [self.high_lr, self.low_lr] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(invalid("learning rates must be finite and non-negative"));
            }
        }
        if !(self.min_t > 0.0 && self.min_t < 1.0) {
            return Err(invalid("min_t must lie in (0, 1)"));
        }
        if self.layout.layers != model.layers {
            return Err(invalid("cache layout layer count must match the model"));
        }
        if self.clip_frames(model) > self.dataset.drift.frames {
            return Err(invalid("videos are shorter than a training clip"));
        }
        Ok(())
    }

    pub fn lr(&self, e: Expert) -> f64 {
        match e {
            Expert::High => self.high_lr,
            Expert::Low => self.low_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    /// Mean flow-matching loss over the batch, both experts.
    pub loss: f64,
    pub high_loss: f64,
    pub low_loss: f64,
}

/// Teacher-forced flow matching: each sample caches a sink frame and up to
/// `max_context_blocks` clean blocks, then regresses the velocity of the
/// next block once per expert (one `t` on each side of the boundary).
pub fn pretrain_flow_matching<F: Scalar>(
    model: &mut WorldModel<F>,
    dataset: &Dataset,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&PretrainRecord, &WorldModel<F>),
) -> Result<Vec<PretrainRecord>> {
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let mcfg = model.config;
    cfg.validate(&mcfg)?;
    let fpb = mcfg.frames_per_block;
    let tpf = mcfg.tokens_per_frame;
    let prompt_emb = encode_prompt(&cfg.prompt, cfg.vocab_seed, &mcfg)?;
    let prompt: Mat<F> = prompt_emb.vectors.cast();
    let cam_frame: Mat<F> = idle_camera(&cfg.plucker, 1)?;
    let cam_block: Mat<F> = idle_camera(&cfg.plucker, fpb)?;
    let boundary = model.experts.boundary;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let mut grads = ExpertGrads::default();
        let (mut high_loss, mut low_loss) = (0.0, 0.0);
        let w = F::of(1.0 / cfg.batch_size as f64);
        for _ in 0..cfg.batch_size {
            let video = &dataset.videos[rng.random_range(0..dataset.len())];
            let m = rng.random_range(0..=cfg.max_context_blocks);
            let span = 1 + (m + 1) * fpb;
            if video.len() < span {
                return Err(invalid("video shorter than a training clip"));
            }
            let s = rng.random_range(0..=video.len() - span);
            let frames: Vec<Mat<F>> = video.frames_as(s..s + span);

            let mut cache = init_cache::<F>(cfg.layout)?;
            cache.set_cross(CrossCache::new(model, &prompt_emb));
            append_block(&mut cache, model, &frames[0], 1, Some(&cam_frame))?;
            for b in 0..m {
                let refs: Vec<&Mat<F>> = frames[1 + b * fpb..1 + (b + 1) * fpb].iter().collect();
                append_block(&mut cache, model, &Mat::concat_rows(&refs), fpb, Some(&cam_block))?;
            }
            let ctx = cache.view();
            let refs: Vec<&Mat<F>> = frames[1 + m * fpb..].iter().collect();
            let clean = FrameBlock::from_stacked(&Mat::concat_rows(&refs), fpb, 0);
            let t_high = boundary + (1.0 - boundary) * rng.random::<f64>();
            let t_low = cfg.min_t + (boundary - cfg.min_t).max(0.0) * rng.random::<f64>();
            for t in [t_high, t_low] {
                let noise = FrameBlock::from_stacked(&gaussian::<F>(fpb * tpf, mcfg.channels, &mut rng), fpb, 0);
                let fit = flow_matching_loss(
                    model,
                    &clean,
                    t,
                    &noise,
                    &Conditioning {
                        context: Some(&ctx),
                        first_frame: cache.position(),
                        prompt: &prompt,
                        cam: Some(&cam_block),
                    },
                )?;
                match fit.expert {
                    Expert::High => high_loss += fit.loss.as_f64(),
                    Expert::Low => low_loss += fit.loss.as_f64(),
                }
                grads.accumulate(fit.expert, w, &fit.grad);
            }
        }
        for e in [Expert::High, Expert::Low] {
            if let Some(g) = grads.get(e) {
                opt.step(e, model.expert_mut(e), g, cfg.lr(e), cfg.grad_clip);
            }
        }
        let b = cfg.batch_size as f64;
        let rec = PretrainRecord {
            step,
            loss: (high_loss + low_loss) / (2.0 * b),
            high_loss: high_loss / b,
            low_loss: low_loss / b,
        };
        on_step(&rec, model);
        out.push(rec);
    }
    Ok(out)
}

/// One CSV row of any training stage; unused columns stay empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub i: Option<usize>,
    pub t: Option<f64>,
    pub forcing_mode: Option<ForcingMode>,
}

impl From<&PretrainRecord> for MetricsRow {
    fn from(r: &PretrainRecord) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            n: None,
            i: None,
            t: None,
            forcing_mode: None,
        }
    }
}

impl From<&TuningRecord> for MetricsRow {
    fn from(r: &TuningRecord) -> Self {
        Self {
            step: r.step,
            loss: r.dmd_loss,
            n: Some(r.n),
            i: Some(r.i),
            t: Some(r.t),
            forcing_mode: Some(r.forcing_mode),
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(["step", "loss", "N", "i", "t", "forcing_mode"]).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse {
            line: p.line() as usize,
            msg: e.to_string(),
        },
        None => Error::InvalidArgument(e.to_string()),
    }
}

/// Setup of the long-horizon comparison between a pretrained student and the
/// same student after long-video tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongHorizonConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub tune: TrainerConfig,
    pub eval_videos: usize,
    pub eval_frames: usize,
    pub eval_seed: u64,
    /// Held-out videos scored every `select_every` tuning steps; the best
    /// checkpoint, the untuned student included, is kept. 0 disables selection.
    pub val_videos: usize,
    pub val_seed: u64,
    pub select_every: usize,
}

impl Default for LongHorizonConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig {
                steps: 3_000,
                high_lr: 3e-3,
                low_lr: 3e-3,
                ..PretrainConfig::default()
            },
            tune: TrainerConfig {
                max_rollout_frames: 48,
                high_lr: 3e-3,
                low_lr: 3e-3,
                steps: 1_000,
                grad_clip: Some(5.0),
                ..TrainerConfig::default()
            },
            eval_videos: 8,
            eval_frames: 48,
            eval_seed: 1_000,
            val_videos: 4,
            val_seed: 2_000,
            select_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongHorizonReport {
    pub seed: u64,
    /// Errors are averaged over frames whose index exceeds this horizon.
    pub horizon: usize,
    pub untuned_error: f64,
    pub tuned_error: f64,
    pub pretrain_final_loss: f64,
    /// Tuning steps behind the kept checkpoint.
    pub selected_step: usize,
}

/// Mean squared per-frame error of rollouts against ground truth, over frames
/// with index greater than `horizon`.
pub fn long_horizon_error<F: Scalar>(
    generator: &WorldModel<F>,
    dataset: &Dataset,
    engine: &EngineConfig,
    prompt: &str,
    frames: usize,
    horizon: usize,
) -> Result<f64> {
    let model = Arc::new(generator.clone());
    let fpb = generator.config.frames_per_block;
    let n = frames / fpb * fpb;
    if n <= horizon {
        return Err(invalid("evaluation rollout does not reach past the horizon"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for video in &dataset.videos {
        let gt: Vec<LatentFrame<F>> = video.frames_as(0..n + 1);
        let roll = autoregressive_rollout(model.clone(), engine.clone(), prompt, &gt[0], n, None)?;
        for f in horizon + 1..=n {
            sum += roll.frames[f].sub(&gt[f]).mean_square().as_f64();
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Models and per-step records of one long-horizon comparison.
#[derive(Clone, Debug)]
pub struct LongHorizonRun {
    pub report: LongHorizonReport,
    pub untuned: WorldModel<f64>,
    pub tuned: WorldModel<f64>,
    pub pretrain: Vec<PretrainRecord>,
    pub tuning: Vec<TuningRecord>,
}

pub fn long_horizon_run(cfg: &LongHorizonConfig, seed: u64) -> Result<LongHorizonRun> {
    let mcfg = cfg.model;
    let mut pre = cfg.pretrain.clone();
    pre.seed = seed;
    pre.dataset.seed = seed;
    let data = pre.dataset.build(&mcfg)?;
    let mut student = WorldModel::<f64>::init(mcfg, Default::default(), seed)?;
    let pretrain = pretrain_flow_matching(&mut student, &data, &pre, |_, _| {})?;

    let mut tcfg = cfg.tune.clone();
    tcfg.seed = seed.wrapping_add(1);
    tcfg.dataset = pre.dataset;
    let mut pair = ScorePair::from_teacher(&student);
    let untuned = student.clone();
    let eval_spec = |seed: u64, videos: usize| DatasetSpec {
        seed,
        videos,
        drift: DriftConfig {
            frames: cfg.eval_frames + 1,
            ..pre.dataset.drift
        },
    };
    let horizon = 2 * pre.clip_frames(&mcfg);
    let engine = tcfg.engine(seed ^ 0xe7a1);

    let select = cfg.select_every > 0 && cfg.val_videos > 0;
    let val = if select {
        Some(eval_spec(cfg.val_seed.wrapping_add(seed), cfg.val_videos).build(&mcfg)?)
    } else {
        None
    };
    let score = |m: &WorldModel<f64>, d: &Dataset| long_horizon_error(m, d, &engine, &tcfg.prompt, cfg.eval_frames, horizon);
    let mut best = match &val {
        Some(v) => Some((score(&untuned, v)?, 0usize, untuned.clone())),
        None => None,
    };
    let mut failure = None;
    let tuning = tune(&mut student, &mut pair, &data, &tcfg, |rec, m| {
        let (Some(v), Some((best_err, best_step, best_model))) = (&val, best.as_mut()) else {
            return;
        };
        let done = rec.step + 1;
        if failure.is_some() || done % cfg.select_every != 0 {
            return;
        }
        match score(m, v) {
            Ok(e) if e < *best_err => {
                *best_err = e;
                *best_step = done;
                *best_model = m.clone();
            }
            Ok(_) => {}
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let selected_step = match best {
        Some((_, step, model)) => {
            student = model;
            step
        }
        None => tcfg.steps,
    };

    let eval = eval_spec(cfg.eval_seed.wrapping_add(seed), cfg.eval_videos).build(&mcfg)?;
    let untuned_error = score(&untuned, &eval)?;
    let tuned_error = score(&student, &eval)?;
    Ok(LongHorizonRun {
        report: LongHorizonReport {
            seed,
            horizon,
            untuned_error,
            tuned_error,
            pretrain_final_loss: pretrain.last().map_or(f64::NAN, |r| r.loss),
            selected_step,
        },
        untuned,
        tuned: student,
        pretrain,
        tuning,
    })
}

/// Pretrains from `seed`, tunes a copy on long rollouts, and compares both
/// beyond twice the pretraining clip length.
pub fn long_horizon_experiment(cfg: &LongHorizonConfig, seed: u64) -> Result<LongHorizonReport> {
    Ok(long_horizon_run(cfg, seed)?.report)
}
