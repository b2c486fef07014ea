//! Per-layer key/value cache: a sink segment that is filled once and then
//! frozen, followed by a rolling window of recent frames.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::model::{
    ContextMask, ContextView, CrossInput, Expert, ForwardSpec, FrameBlock, PromptEmbedding, WorldModel,
};
use crate::tensor::{Mat, Scalar};

/// Noise level at which clean frames are encoded into the cache.
pub const CONTEXT_T: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheLayout {
    pub sink_frames: usize,
    pub local_window_frames: usize,
    pub layers: usize,
}

impl Default for CacheLayout {
    fn default() -> Self {
        Self {
            sink_frames: 1,
            local_window_frames: 6,
            layers: 2,
        }
    }
}

impl CacheLayout {
    pub fn validate(&self) -> Result<()> {
        if self.local_window_frames == 0 {
            return Err(invalid("local window must hold at least one frame"));
        }
        if self.layers == 0 {
            return Err(invalid("cache needs at least one layer"));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.sink_frames + self.local_window_frames
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry<F> {
    pub key: Mat<F>,
    pub value: Mat<F>,
    pub absolute_frame_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerCache<F> {
    sink: Vec<KvEntry<F>>,
    local: VecDeque<KvEntry<F>>,
}

/// Per-expert, per-layer cross-attention `(K, V)` of the active prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCache<F> {
    pub high: Vec<(Mat<F>, Mat<F>)>,
    pub low: Vec<(Mat<F>, Mat<F>)>,
}

impl<F: Scalar> CrossCache<F> {
    pub fn new(model: &WorldModel<F>, prompt: &PromptEmbedding) -> Self {
        let p = prompt.vectors.cast::<F>();
        Self {
            high: model.high.cross_kv(&p),
            low: model.low.cross_kv(&p),
        }
    }

    pub fn for_expert(&self, e: Expert) -> &[(Mat<F>, Mat<F>)] {
        match e {
            Expert::High => &self.high,
            Expert::Low => &self.low,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCacheState<F> {
    layout: CacheLayout,
    layers: Vec<LayerCache<F>>,
    next_frame: usize,
    cross: Option<CrossCache<F>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOccupancy {
    pub layer: usize,
    pub sink: Vec<usize>,
    pub local: Vec<usize>,
    pub occupancy: usize,
}

/// JSON-friendly snapshot of cache residency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheDump {
    pub sink_frames: usize,
    pub local_window_frames: usize,
    pub capacity: usize,
    pub sink_sealed: bool,
    pub position: usize,
    pub layers: Vec<LayerOccupancy>,
}

pub fn init_cache<F: Scalar>(layout: CacheLayout) -> Result<KvCacheState<F>> {
    layout.validate()?;
    Ok(KvCacheState {
        layout,
        layers: (0..layout.layers)
            .map(|_| LayerCache {
                sink: Vec::with_capacity(layout.sink_frames),
                local: VecDeque::with_capacity(layout.local_window_frames),
            })
            .collect(),
        next_frame: 0,
        cross: None,
    })
}

impl<F: Scalar> KvCacheState<F> {
    pub fn layout(&self) -> &CacheLayout {
        &self.layout
    }

    pub fn sink_sealed(&self) -> bool {
        self.layers[0].sink.len() == self.layout.sink_frames
    }

    /// Absolute index the next appended frame must carry.
    pub fn position(&self) -> usize {
        self.next_frame
    }

    pub fn occupancy(&self, layer: usize) -> usize {
        let l = &self.layers[layer];
        l.sink.len() + l.local.len()
    }

    pub fn sink_indices(&self) -> Vec<usize> {
        self.layers[0].sink.iter().map(|e| e.absolute_frame_index).collect()
    }

    pub fn local_indices(&self) -> Vec<usize> {
        self.layers[0].local.iter().map(|e| e.absolute_frame_index).collect()
    }

    /// All resident frame indices in attention order.
    pub fn frame_indices(&self) -> Vec<usize> {
        let mut v = self.sink_indices();
        v.extend(self.local_indices());
        v
    }

    pub fn cross(&self) -> Option<&CrossCache<F>> {
        self.cross.as_ref()
    }

    pub fn set_cross(&mut self, cross: CrossCache<F>) {
        self.cross = Some(cross);
    }

    /// Appends one frame: one entry per layer, all with index `position()`.
    pub fn append_frame(&mut self, layer_entries: Vec<KvEntry<F>>) -> Result<()> {
        if layer_entries.len() != self.layout.layers {
            return Err(shape(format!(
                "expected {} layer entries, got {}",
                self.layout.layers,
                layer_entries.len()
            )));
        }
        if let Some(bad) = layer_entries
            .iter()
            .find(|e| e.absolute_frame_index != self.next_frame)
        {
            return Err(invalid(format!(
                "out-of-order frame index {} (expected {})",
                bad.absolute_frame_index, self.next_frame
            )));
        }
        let to_sink = !self.sink_sealed();
        for (layer, entry) in self.layers.iter_mut().zip(layer_entries) {
            if to_sink {
                layer.sink.push(entry);
            } else {
                if layer.local.len() == self.layout.local_window_frames {
                    layer.local.pop_front();
                }
                layer.local.push_back(entry);
            }
        }
        self.next_frame += 1;
        Ok(())
    }

    /// Sink entries then local entries, ascending absolute index.
    pub fn attention_context(&self, layer: usize) -> Result<Vec<&KvEntry<F>>> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| invalid(format!("layer {layer} out of range")))?;
        Ok(l.sink.iter().chain(l.local.iter()).collect())
    }

    /// Context over resident frames accepted by `keep`.
    pub fn view_where(&self, keep: impl Fn(usize) -> bool) -> ContextView<F> {
        let frames: Vec<usize> = self.frame_indices().into_iter().filter(|&f| keep(f)).collect();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let picked: Vec<&KvEntry<F>> = l
                    .sink
                    .iter()
                    .chain(l.local.iter())
                    .filter(|e| keep(e.absolute_frame_index))
                    .collect();
                let ks: Vec<&Mat<F>> = picked.iter().map(|e| &e.key).collect();
                let vs: Vec<&Mat<F>> = picked.iter().map(|e| &e.value).collect();
                if ks.is_empty() {
                    let c = l
                        .sink
                        .first()
                        .or(l.local.front())
                        .map_or(0, |e| e.key.cols());
                    (Mat::zeros(0, c), Mat::zeros(0, c))
                } else {
                    (Mat::concat_rows(&ks), Mat::concat_rows(&vs))
                }
            })
            .collect();
        ContextView { layers, frames }
    }

    /// Every resident frame.
    pub fn view(&self) -> ContextView<F> {
        self.view_where(|_| true)
    }

    /// Frames that stay resident once `incoming` more frames are appended.
    pub fn survivors_after(&self, incoming: usize) -> Vec<usize> {
        let free_sink = self.layout.sink_frames - self.layers[0].sink.len();
        let to_local = incoming.saturating_sub(free_sink);
        let local = &self.layers[0].local;
        let evicted = (local.len() + to_local).saturating_sub(self.layout.local_window_frames);
        let mut out = self.sink_indices();
        out.extend(local.iter().skip(evicted).map(|e| e.absolute_frame_index));
        out
    }

    /// Overwrites the local entry for `frame` at `layer`. Sink entries are immutable.
    fn overwrite_local(&mut self, layer: usize, frame: usize, key: Mat<F>, value: Mat<F>) -> bool {
        match self.layers[layer]
            .local
            .iter_mut()
            .find(|e| e.absolute_frame_index == frame)
        {
            Some(e) => {
                e.key = key;
                e.value = value;
                true
            }
            None => false,
        }
    }

    pub fn dump(&self) -> CacheDump {
        CacheDump {
            sink_frames: self.layout.sink_frames,
            local_window_frames: self.layout.local_window_frames,
            capacity: self.layout.capacity(),
            sink_sealed: self.sink_sealed(),
            position: self.next_frame,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerOccupancy {
                    layer: i,
                    sink: l.sink.iter().map(|e| e.absolute_frame_index).collect(),
                    local: l.local.iter().map(|e| e.absolute_frame_index).collect(),
                    occupancy: l.sink.len() + l.local.len(),
                })
                .collect(),
        }
    }
}

/// Runs the clean-frame pass for `frames` consecutive frames (stacked in `x`)
/// and returns per-frame cache entries, starting at absolute index `first_frame`.
#[allow(clippy::too_many_arguments)]
pub fn encode_frames<F: Scalar>(
    model: &WorldModel<F>,
    x: &Mat<F>,
    frames: usize,
    first_frame: usize,
    cam: Option<&Mat<F>>,
    context: &ContextView<F>,
    context_mask: Option<ContextMask<'_>>,
    cross: CrossInput<'_, F>,
) -> Result<Vec<Vec<KvEntry<F>>>> {
    let cfg = &model.config;
    let expert = model.route(CONTEXT_T)?;
    let out = model.expert(expert).run(
        cfg,
        &ForwardSpec {
            x,
            frames,
            first_frame,
            t: CONTEXT_T,
            cam,
            context: Some(context),
            context_mask,
            cross,
        },
    );
    let tpf = cfg.tokens_per_frame;
    Ok((0..frames)
        .map(|f| {
            out.kv
                .iter()
                .map(|(k, v)| KvEntry {
                    key: k.slice_rows(f * tpf, tpf),
                    value: v.slice_rows(f * tpf, tpf),
                    absolute_frame_index: first_frame + f,
                })
                .collect()
        })
        .collect())
}

/// Encodes a clean block against the frames that survive its own append,
/// then appends it.
pub fn append_block<F: Scalar>(
    cache: &mut KvCacheState<F>,
    model: &WorldModel<F>,
    block: &Mat<F>,
    frames: usize,
    cam: Option<&Mat<F>>,
) -> Result<()> {
    let cross = cache
        .cross()
        .ok_or_else(|| Error::Precondition("cache has no prompt cross-attention state".into()))?
        .clone();
    let survivors = cache.survivors_after(frames);
    let ctx = cache.view_where(|f| survivors.contains(&f));
    let first = cache.position();
    let entries = encode_frames(
        model,
        block,
        frames,
        first,
        cam,
        &ctx,
        None,
        CrossInput::Cached(cross.for_expert(model.route(CONTEXT_T)?)),
    )?;
    for e in entries {
        cache.append_frame(e)?;
    }
    Ok(())
}

/// Swaps in a new prompt: refreshes cross-attention K/V and re-encodes the
/// most recent block under it. Sink entries and absolute indices are kept.
pub fn recache<F: Scalar>(
    cache: &mut KvCacheState<F>,
    new_prompt: &PromptEmbedding,
    last_block: &FrameBlock<F>,
    last_block_cam: Option<&Mat<F>>,
    model: &WorldModel<F>,
) -> Result<()> {
    let frames = last_block.len();
    let start = cache
        .position()
        .checked_sub(frames)
        .ok_or_else(|| Error::Precondition("recache needs a previously generated block".into()))?;
    let resident_local: Vec<usize> = cache.local_indices();
    if frames == 0 || !(start..start + frames).any(|f| resident_local.contains(&f)) {
        return Err(Error::Precondition(
            "recache needs a previously generated block in the local window".into(),
        ));
    }
    let cross = CrossCache::new(model, new_prompt);
    let ctx = cache.view_where(|f| f < start);
    let entries = encode_frames(
        model,
        &last_block.stacked(),
        frames,
        start,
        last_block_cam,
        &ctx,
        None,
        CrossInput::Cached(cross.for_expert(model.route(CONTEXT_T)?)),
    )?;
    for frame_entries in entries {
        for (layer, e) in frame_entries.into_iter().enumerate() {
            cache.overwrite_local(layer, e.absolute_frame_index, e.key, e.value);
        }
    }
    cache.set_cross(cross);
    Ok(())
}

/// Frame-level visibility mask for block-wise generation with a sink and a
/// rolling window. Rows are query frames, columns key frames; frames are
/// numbered from 0 with the first `sink_frames` frames forming the sink.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSparseMask {
    pub frames: usize,
    pub frames_per_block: usize,
    data: Vec<bool>,
}

impl BlockSparseMask {
    pub fn allowed(&self, query_frame: usize, key_frame: usize) -> bool {
        self.data[query_frame * self.frames + key_frame]
    }

    /// Key frames visible to any frame of query block `b`.
    pub fn block_row(&self, b: usize) -> Vec<bool> {
        let f = self.frames_per_block;
        (0..self.frames)
            .map(|k| (b * f..(b + 1) * f).any(|q| self.allowed(q, k)))
            .collect()
    }
}

pub fn build_block_sparse_mask(
    num_blocks: usize,
    frames_per_block: usize,
    layout: &CacheLayout,
) -> BlockSparseMask {
    let n = num_blocks * frames_per_block;
    let mut data = vec![false; n * n];
    let lookback_blocks = layout.local_window_frames.div_ceil(frames_per_block.max(1));
    for b in 0..num_blocks {
        let start = b * frames_per_block;
        let window_start = start.saturating_sub(layout.local_window_frames);
        for q in start..start + frames_per_block {
            let row = &mut data[q * n..(q + 1) * n];
            for s in row.iter_mut().take(layout.sink_frames.min(start)) {
                *s = true;
            }
            // preceding blocks that still have frames inside the window
            let first_block = b.saturating_sub(lookback_blocks);
            for pb in first_block..b {
                for k in pb * frames_per_block..(pb + 1) * frames_per_block {
                    if k >= window_start {
                        row[k] = true;
                    }
                }
            }
            for s in row.iter_mut().take(q + 1).skip(start) {
                *s = true;
            }
        }
    }
    BlockSparseMask {
        frames: n,
        frames_per_block,
        data,
    }
}
