//! Block-wise few-step autoregressive rollout with boundary-latched turn events.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cache::{append_block, encode_frames, init_cache, recache, CacheLayout, CrossCache, KvCacheState};
use crate::camera::{integrate_segments, ActionSegment, CameraPose, PluckerConfig, Trajectory};
use crate::data::{DriftConfig, SyntheticVideo};
use crate::error::{invalid, shape, Error, Result};
use crate::model::{
    encode_prompt, ContextView, CrossInput, Expert, ExpertConfig, ForwardSpec, FrameBlock, IdentityEnricher,
    InteractionEnricher, LatentFrame, ModelConfig, PromptEmbedding, WorldModel,
};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SamplerSchedule {
    timesteps: Vec<f64>,
}

impl Default for SamplerSchedule {
    fn default() -> Self {
        Self {
            timesteps: vec![1.0, 0.93, 0.6, 0.3],
        }
    }
}

impl TryFrom<Vec<f64>> for SamplerSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        SamplerSchedule::new(v)
    }
}

impl From<SamplerSchedule> for Vec<f64> {
    fn from(s: SamplerSchedule) -> Self {
        s.timesteps
    }
}

impl SamplerSchedule {
    pub fn new(timesteps: Vec<f64>) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(invalid("sampler schedule is empty"));
        }
        if timesteps.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(invalid("schedule timesteps must lie in (0, 1]"));
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("schedule timesteps must be strictly decreasing"));
        }
        Ok(Self { timesteps })
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    /// `(t, t_next)` pairs; the final step integrates to 0.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0.0)))
    }

    pub fn experts(&self, cfg: &ExpertConfig) -> Vec<Expert> {
        self.timesteps
            .iter()
            .map(|&t| crate::model::route_expert(t, cfg).expect("schedule validated to (0, 1]"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub seed: u64,
    pub vocab_seed: u64,
    pub layout: CacheLayout,
    pub schedule: SamplerSchedule,
    pub plucker: PluckerConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_seed: 7,
            layout: CacheLayout::default(),
            schedule: SamplerSchedule::default(),
            plucker: PluckerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub at_block: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_segments: Option<Vec<ActionSegment>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_prompt: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Action,
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnLogEntry {
    pub block_index: usize,
    pub kind: TurnKind,
    pub detail: String,
    /// Milliseconds since session start.
    pub timestamp_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub blocks: usize,
    pub frames: usize,
    pub total_ms: f64,
    pub last_block_ms: f64,
    pub ms_per_block: f64,
    pub fps: f64,
}

impl TimingStats {
    fn record(&mut self, frames: usize, ms: f64) {
        self.blocks += 1;
        self.frames += frames;
        self.total_ms += ms;
        self.last_block_ms = ms;
        self.ms_per_block = self.total_ms / self.blocks as f64;
        self.fps = if self.total_ms > 0.0 {
            self.frames as f64 / (self.total_ms / 1000.0)
        } else {
            0.0
        };
    }
}

/// Inputs of the final denoising step of a block, kept so that training can
/// re-run that step with gradients.
#[derive(Clone, Debug)]
pub struct BlockTrace<F> {
    pub block_index: usize,
    /// Absolute index of the block's first frame.
    pub first_frame: usize,
    pub x_last: Mat<F>,
    pub t_last: f64,
    pub t_next: f64,
    pub cam: Mat<F>,
    pub context: ContextView<F>,
    pub expert: Expert,
}

/// Seeded Gaussian noise for block `block_index`; independent of any events.
pub fn block_noise<F: Scalar>(seed: u64, block_index: usize, rows: usize, cols: usize) -> Mat<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block_index as u64);
    Mat::from_fn(rows, cols, |_, _| F::of(rng.sample::<f64, _>(StandardNormal)))
}

pub struct Session<F: Scalar> {
    config: EngineConfig,
    model: Arc<WorldModel<F>>,
    enricher: Arc<dyn InteractionEnricher>,
    cache: KvCacheState<F>,
    initial_frame: LatentFrame<F>,
    trajectory: Trajectory,
    planned: VecDeque<CameraPose>,
    base_prompt: String,
    interaction: Option<String>,
    prompt: PromptEmbedding,
    blocks: Vec<FrameBlock<F>>,
    block_cams: Vec<Mat<F>>,
    turn_log: Vec<TurnLogEntry>,
    stats: TimingStats,
    started: Instant,
}

impl<F: Scalar> Session<F> {
    /// Encodes `initial_frame` into the cache sink and prepares for block 0.
    pub fn new(
        config: EngineConfig,
        model: Arc<WorldModel<F>>,
        initial_frame: LatentFrame<F>,
        initial_pose: CameraPose,
        base_prompt: &str,
    ) -> Result<Self> {
        Self::with_enricher(config, model, initial_frame, initial_pose, base_prompt, Arc::new(IdentityEnricher))
    }

    pub fn with_enricher(
        config: EngineConfig,
        model: Arc<WorldModel<F>>,
        initial_frame: LatentFrame<F>,
        initial_pose: CameraPose,
        base_prompt: &str,
        enricher: Arc<dyn InteractionEnricher>,
    ) -> Result<Self> {
        let mcfg = model.config;
        if config.layout.layers != mcfg.layers {
            return Err(invalid("cache layout layer count must match the model"));
        }
        if config.plucker.token_grid != mcfg.token_grid {
            return Err(invalid("camera token grid must match the model token grid"));
        }
        if initial_frame.shape() != (mcfg.tokens_per_frame, mcfg.channels) {
            return Err(shape("initial frame must be T x C"));
        }
        if !initial_frame.is_finite() {
            return Err(Error::NonFinite("initial frame"));
        }
        let prompt = encode_prompt(base_prompt, config.vocab_seed, &mcfg)?;
        let mut cache = init_cache(config.layout)?;
        cache.set_cross(CrossCache::new(&model, &prompt));
        let cam = config.plucker.features::<F>(&[initial_pose])?;
        append_block(&mut cache, &model, &initial_frame, 1, Some(&cam))?;
        Ok(Self {
            config,
            model,
            enricher,
            cache,
            initial_frame,
            trajectory: Trajectory::single(initial_pose),
            planned: VecDeque::new(),
            base_prompt: base_prompt.to_string(),
            interaction: None,
            prompt,
            blocks: Vec::new(),
            block_cams: Vec::new(),
            turn_log: Vec::new(),
            stats: TimingStats::default(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn model(&self) -> &Arc<WorldModel<F>> {
        &self.model
    }

    pub fn cache(&self) -> &KvCacheState<F> {
        &self.cache
    }

    pub fn blocks(&self) -> &[FrameBlock<F>] {
        &self.blocks
    }

    pub fn initial_frame(&self) -> &LatentFrame<F> {
        &self.initial_frame
    }

    /// Poses of the generated frames so far (plus the initial pose).
    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    /// Committed trajectory followed by poses queued for upcoming frames.
    pub fn planned_trajectory(&self) -> Trajectory {
        let mut t = self.trajectory.clone();
        t.extend_from(self.planned.iter().copied());
        t
    }

    pub fn prompt(&self) -> &PromptEmbedding {
        &self.prompt
    }

    pub fn turn_log(&self) -> &[TurnLogEntry] {
        &self.turn_log
    }

    pub fn stats(&self) -> &TimingStats {
        &self.stats
    }

    pub fn frames_per_block(&self) -> usize {
        self.model.config.frames_per_block
    }

    pub fn next_block_index(&self) -> usize {
        self.blocks.len()
    }

    fn elapsed_ms(&self) -> f64 {
        self.started.elapsed().as_secs_f64() * 1000.0
    }

    /// Queues poses for `segments` after the last known pose. The cache is not touched.
    pub fn switch_action(&mut self, segments: &[ActionSegment]) -> Result<()> {
        if segments.is_empty() {
            return Err(invalid("action switch needs at least one segment"));
        }
        let from = self.planned.back().copied().unwrap_or(*self.trajectory.last());
        let poses = integrate_segments(segments, from)?;
        self.planned.extend(poses);
        let detail = segments
            .iter()
            .map(|s| format!("{}x{}", s.key, s.duration_frames))
            .collect::<Vec<_>>()
            .join(" ");
        self.turn_log.push(TurnLogEntry {
            block_index: self.blocks.len(),
            kind: TurnKind::Action,
            detail,
            timestamp_ms: self.elapsed_ms(),
        });
        Ok(())
    }

    /// Switches the interaction prompt and recaches the last block under it.
    pub fn switch_prompt(&mut self, text: &str) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Precondition(
                "prompt switch needs at least one generated block".into(),
            ));
        }
        let cfg = self.model.config;
        let base = encode_prompt(&self.base_prompt, self.config.vocab_seed, &cfg)?;
        let enriched = self.enricher.enrich(text);
        let interaction = encode_prompt(&enriched, self.config.vocab_seed, &cfg)?;
        let embedding = base.concat(&interaction);
        self.set_prompt_embedding(embedding)?;
        self.interaction = Some(text.to_string());
        self.turn_log.push(TurnLogEntry {
            block_index: self.blocks.len(),
            kind: TurnKind::Prompt,
            detail: text.to_string(),
            timestamp_ms: self.elapsed_ms(),
        });
        Ok(())
    }

    /// Installs an arbitrary prompt embedding and recaches the last block.
    pub fn set_prompt_embedding(&mut self, embedding: PromptEmbedding) -> Result<()> {
        let last = self
            .blocks
            .last()
            .ok_or_else(|| Error::Precondition("recache needs a generated block".into()))?
            .clone();
        let cam = self.block_cams.last().cloned();
        recache(&mut self.cache, &embedding, &last, cam.as_ref(), &self.model)?;
        self.prompt = embedding;
        Ok(())
    }

    pub fn interaction_text(&self) -> Option<&str> {
        self.interaction.as_deref()
    }

    pub fn apply_event(&mut self, event: &TurnEvent) -> Result<()> {
        if let Some(segs) = &event.new_segments {
            self.switch_action(segs)?;
        }
        if let Some(text) = &event.new_prompt {
            self.switch_prompt(text)?;
        }
        Ok(())
    }

    /// Poses for the next block's frames; holds the last pose when nothing is queued.
    pub fn peek_block_poses(&self) -> Vec<CameraPose> {
        let k = self.frames_per_block();
        let mut last = *self.trajectory.last();
        (0..k)
            .map(|i| {
                if let Some(p) = self.planned.get(i) {
                    last = *p;
                }
                last
            })
            .collect()
    }

    /// Camera features the next block will be conditioned on.
    pub fn next_block_camera(&self) -> Result<Mat<F>> {
        self.config.plucker.features(&self.peek_block_poses())
    }

    pub fn rollout_block(&mut self) -> Result<FrameBlock<F>> {
        Ok(self.rollout_block_with(None, false)?.0)
    }

    /// Generates one block. With `history`, those clean latents are cached
    /// in place of the generated block (teacher forcing). With `trace`, the
    /// inputs of the final denoising step are returned.
    pub fn rollout_block_with(
        &mut self,
        history: Option<&Mat<F>>,
        trace: bool,
    ) -> Result<(FrameBlock<F>, Option<BlockTrace<F>>)> {
        let started = Instant::now();
        let cfg = self.model.config;
        let k = cfg.frames_per_block;
        let rows = k * cfg.tokens_per_frame;
        if let Some(h) = history {
            if h.shape() != (rows, cfg.channels) {
                return Err(shape("teacher-forced history must be one block"));
            }
        }
        let block_index = self.blocks.len();
        let first_frame = self.cache.position();
        let poses = self.peek_block_poses();
        let cam = self.config.plucker.features::<F>(&poses)?;
        let ctx = self.cache.view();
        let cross = self
            .cache
            .cross()
            .ok_or_else(|| Error::Precondition("session cache has no prompt state".into()))?
            .clone();

        let mut x = block_noise::<F>(self.config.seed, block_index, rows, cfg.channels);
        let mut last_trace = None;
        for (t, t_next) in self.config.schedule.steps() {
            let expert = self.model.route(t)?;
            if trace && t_next == 0.0 {
                last_trace = Some(BlockTrace {
                    block_index,
                    first_frame,
                    x_last: x.clone(),
                    t_last: t,
                    t_next,
                    cam: cam.clone(),
                    context: ctx.clone(),
                    expert,
                });
            }
            let out = self.model.expert(expert).run(
                &cfg,
                &ForwardSpec {
                    x: &x,
                    frames: k,
                    first_frame,
                    t,
                    cam: Some(&cam),
                    context: Some(&ctx),
                    context_mask: None,
                    cross: CrossInput::Cached(cross.for_expert(expert)),
                },
            );
            let dt = F::of(t_next - t);
            x = x.zip_map(&out.velocity, |xi, vi| xi + vi * dt);
        }

        append_block(&mut self.cache, &self.model, history.unwrap_or(&x), k, Some(&cam))?;
        for _ in 0..k.min(self.planned.len()) {
            self.planned.pop_front();
        }
        self.trajectory.extend_from(poses);
        let block = FrameBlock::from_stacked(&x, k, block_index);
        self.blocks.push(block.clone());
        self.block_cams.push(cam);
        self.stats.record(k, started.elapsed().as_secs_f64() * 1000.0);
        Ok((block, last_trace))
    }
}

#[derive(Clone, Debug)]
pub struct SessionOutput<F> {
    pub blocks: Vec<FrameBlock<F>>,
    pub trajectory: Trajectory,
    pub turn_log: Vec<TurnLogEntry>,
    pub stats: TimingStats,
}

pub fn validate_events(events: &[TurnEvent]) -> Result<()> {
    if events.windows(2).any(|w| w[1].at_block <= w[0].at_block) {
        return Err(invalid("events must be sorted by block with at most one per boundary"));
    }
    Ok(())
}

/// Runs a complete session: before each block, applies that boundary's event.
pub fn run_session<F: Scalar>(
    config: EngineConfig,
    model: Arc<WorldModel<F>>,
    initial_frame: LatentFrame<F>,
    initial_pose: CameraPose,
    base_prompt: &str,
    events: &[TurnEvent],
    num_blocks: usize,
) -> Result<SessionOutput<F>> {
    validate_events(events)?;
    if num_blocks == 0 {
        return Err(invalid("num_blocks must be at least 1"));
    }
    let mut session = Session::new(config, model, initial_frame, initial_pose, base_prompt)?;
    let mut pending = events.iter().peekable();
    for b in 0..num_blocks {
        if let Some(ev) = pending.next_if(|e| e.at_block == b) {
            session.apply_event(ev)?;
        }
        session.rollout_block()?;
    }
    Ok(SessionOutput {
        blocks: session.blocks.clone(),
        trajectory: session.trajectory.clone(),
        turn_log: session.turn_log.clone(),
        stats: session.stats.clone(),
    })
}

/// Everything besides the seed and the events that determines a session, so
/// that a live session and an offline rollout start from identical state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionTemplate {
    pub engine: EngineConfig,
    pub prompt: String,
    /// Synthetic video whose first frame seeds the sink.
    pub initial_video: u64,
    pub drift: DriftConfig,
    /// `[qw, qx, qy, qz, px, py, pz]`
    pub initial_pose: [f64; 7],
}

impl Default for SessionTemplate {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            prompt: "drifting pattern".into(),
            initial_video: 0,
            drift: DriftConfig::default(),
            initial_pose: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        }
    }
}

impl SessionTemplate {
    pub fn pose(&self) -> Result<CameraPose> {
        let p = self.initial_pose;
        CameraPose::from_components([p[0], p[1], p[2], p[3]], [p[4], p[5], p[6]])
    }

    pub fn initial_frame<F: Scalar>(&self, cfg: &ModelConfig) -> Result<LatentFrame<F>> {
        let drift = DriftConfig { frames: 2, ..self.drift };
        let video = SyntheticVideo::generate(self.initial_video, cfg, &drift)?;
        Ok(video.frames[0].cast())
    }

    pub fn engine_for(&self, seed: u64) -> EngineConfig {
        EngineConfig {
            seed,
            ..self.engine.clone()
        }
    }

    pub fn start<F: Scalar>(&self, model: Arc<WorldModel<F>>, seed: u64) -> Result<Session<F>> {
        let frame = self.initial_frame(&model.config)?;
        Session::new(self.engine_for(seed), model, frame, self.pose()?, &self.prompt)
    }

    pub fn replay<F: Scalar>(
        &self,
        model: Arc<WorldModel<F>>,
        seed: u64,
        events: &[TurnEvent],
        num_blocks: usize,
    ) -> Result<SessionOutput<F>> {
        let frame = self.initial_frame(&model.config)?;
        run_session(self.engine_for(seed), model, frame, self.pose()?, &self.prompt, events, num_blocks)
    }
}

/// Context-pass helper exposed for oracles: encodes `frames` clean frames
/// against an explicit context.
pub fn encode_clean<F: Scalar>(
    model: &WorldModel<F>,
    prompt: &PromptEmbedding,
    x: &Mat<F>,
    frames: usize,
    first_frame: usize,
    cam: Option<&Mat<F>>,
    context: &ContextView<F>,
) -> Result<Vec<Vec<crate::cache::KvEntry<F>>>> {
    let p = prompt.vectors.cast::<F>();
    encode_frames(model, x, frames, first_frame, cam, context, None, CrossInput::Prompt(&p))
}
