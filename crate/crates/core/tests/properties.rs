use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

use worldloop::cache::{init_cache, CacheLayout, KvCacheState, KvEntry};
use worldloop::camera::{CameraPose, PluckerConfig, Trajectory};
use worldloop::checkpoint::TensorArchive;
use worldloop::engine::SessionTemplate;
use worldloop::metrics::{
    aligned_rpe, dynamic_average, interbench_overall, umeyama_align, DimensionMeans, FrameDifference,
    InterBenchCategory, InterBenchRecord, Sim3,
};
use worldloop::model::{
    encode_prompt, route_expert, CrossInput, Expert, ExpertConfig, ForwardSpec, ModelConfig, WorldModel,
};
use worldloop::service::{read_frame, write_frame, ClientEvent};
use worldloop::tensor::Mat;
use worldloop::train::{dmd_gradient, tune, DatasetSpec, ScorePair, ScoreSetup, TrainerConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        channels: 4,
        width: 8,
        tokens_per_frame: 4,
        token_grid: (2, 2),
        frames_per_block: 3,
        layers: 1,
        heads: 2,
        ffn_hidden: 8,
        time_buckets: 5,
        prompt_vocab: 64,
    }
}

fn tiny_trainer() -> TrainerConfig {
    TrainerConfig {
        layout: CacheLayout {
            layers: 1,
            ..CacheLayout::default()
        },
        plucker: PluckerConfig {
            token_grid: (2, 2),
            ..PluckerConfig::default()
        },
        max_rollout_frames: 12,
        steps: 20,
        dataset: DatasetSpec {
            seed: 3,
            videos: 3,
            drift: worldloop::data::DriftConfig {
                frames: 16,
                ..Default::default()
            },
        },
        ..TrainerConfig::default()
    }
}

fn entry(frame: usize, payload: f64) -> KvEntry<f64> {
    KvEntry {
        key: Mat::from_fn(1, 2, |_, c| payload + c as f64),
        value: Mat::from_fn(1, 2, |_, c| -payload - c as f64),
        absolute_frame_index: frame,
    }
}

fn arb_rotation() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.0..3.0f64).prop_map(|(x, y, z, a)| {
        UnitQuaternion::from_scaled_axis(Vector3::new(x, y, z).normalize() * a)
    })
}

fn arb_trajectory(len: usize) -> impl Strategy<Value = Trajectory> {
    prop::collection::vec((arb_rotation(), prop::array::uniform3(-5.0..5.0f64)), len).prop_map(|ps| {
        Trajectory::new(
            ps.into_iter()
                .map(|(q, p)| CameraPose::new(q, Vector3::from(p)))
                .collect(),
        )
        .unwrap()
    })
}

fn arb_sim3() -> impl Strategy<Value = Sim3> {
    (0.2..5.0f64, arb_rotation(), prop::array::uniform3(-3.0..3.0f64))
        .prop_map(|(s, q, t)| Sim3::new(s, q, Vector3::from(t)).unwrap())
}

fn arb_means() -> impl Strategy<Value = DimensionMeans> {
    (0.0..=1.0f64, prop::array::uniform5(0.0..=5.0f64)).prop_map(|(t, d)| DimensionMeans {
        trigger: t,
        align: d[0],
        fluency: d[1],
        scope: d[2],
        end_state: d[3],
        physics: d[4],
    })
}

fn bump(m: &DimensionMeans, dim: usize, by: f64) -> DimensionMeans {
    let mut m = *m;
    match dim {
        0 => m.trigger = (m.trigger + by).min(1.0),
        1 => m.align = (m.align + by).min(5.0),
        2 => m.fluency = (m.fluency + by).min(5.0),
        3 => m.scope = (m.scope + by).min(5.0),
        4 => m.end_state = (m.end_state + by).min(5.0),
        _ => m.physics = (m.physics + by).min(5.0),
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_bounded_sink_frozen_suffix_retained(
        sink in 0usize..4,
        window in 1usize..8,
        appends in 0usize..40,
    ) {
        let layout = CacheLayout { sink_frames: sink, local_window_frames: window, layers: 2 };
        let mut cache: KvCacheState<f64> = init_cache(layout).unwrap();
        let mut sealed: Option<Vec<KvEntry<f64>>> = None;
        for f in 0..appends {
            cache.append_frame(vec![entry(f, f as f64); 2]).unwrap();
            for l in 0..2 {
                prop_assert!(cache.occupancy(l) <= layout.capacity());
            }
            let sink_now: Vec<KvEntry<f64>> = cache.attention_context(0).unwrap()
                .into_iter().take(cache.sink_indices().len()).cloned().collect();
            match &sealed {
                Some(s) => prop_assert_eq!(s, &sink_now),
                None if cache.sink_sealed() => sealed = Some(sink_now),
                None => {}
            }
            let frames = cache.frame_indices();
            prop_assert!(frames.windows(2).all(|w| w[0] < w[1]));
            let n = f + 1;
            let locals: Vec<usize> = (sink.min(n)..n).collect();
            let suffix = &locals[locals.len().saturating_sub(window)..];
            prop_assert_eq!(cache.local_indices(), suffix.to_vec());
        }
    }

    #[test]
    fn umeyama_exact_and_order_invariant(
        est in arb_trajectory(12),
        truth in arb_sim3(),
        perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let gt = truth.apply(&est);
        let found = umeyama_align(&est, &gt).unwrap();
        prop_assert!(found.distance(&truth) < 1e-8);
        let pe = Trajectory::new(perm.iter().map(|&i| est.poses()[i]).collect()).unwrap();
        let pg = Trajectory::new(perm.iter().map(|&i| gt.poses()[i]).collect()).unwrap();
        let again = umeyama_align(&pe, &pg).unwrap();
        prop_assert!(again.distance(&found) < 1e-9);
    }

    #[test]
    fn aligned_rpe_absorbs_global_sim3(
        gt in arb_trajectory(10),
        noise in prop::collection::vec(prop::array::uniform3(-0.05..0.05f64), 10),
        global in arb_sim3(),
        delta in 1usize..4,
    ) {
        let est = Trajectory::new(
            gt.poses().iter().zip(&noise)
                .map(|(p, n)| CameraPose::new(p.rotation, p.position + Vector3::from(*n)))
                .collect(),
        ).unwrap();
        let (_, base) = aligned_rpe(&est, &gt, delta).unwrap();
        let (_, moved) = aligned_rpe(&global.apply(&est), &gt, delta).unwrap();
        prop_assert!((base.trans_rmse - moved.trans_rmse).abs() < 1e-8);
        prop_assert!((base.rot_rmse - moved.rot_rmse).abs() < 1e-8);
    }

    #[test]
    fn interbench_overall_is_monotone(m in arb_means(), dim in 0usize..6, by in 0.0..2.0f64) {
        let lo = interbench_overall(&m).unwrap();
        let hi = interbench_overall(&bump(&m, dim, by)).unwrap();
        prop_assert!(hi >= lo);
    }

    #[test]
    fn gating_rejects_untriggered_scores(dims in prop::array::uniform5(prop::sample::select(vec![0u8, 1, 3, 5]))) {
        let r = InterBenchRecord::new("v", InterBenchCategory::Actor, 0, dims);
        prop_assert_eq!(r.is_ok(), dims.iter().all(|&d| d == 0));
        prop_assert!(InterBenchRecord::new("v", InterBenchCategory::Actor, 1, dims).is_ok());
    }

    #[test]
    fn dynamic_average_matches_loops_and_ignores_offsets(
        data in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 12), 2..6),
        offset in -10.0..10.0f64,
    ) {
        let frames: Vec<Mat<f64>> = data.iter().map(|d| Mat::new(4, 3, d.clone())).collect();
        let got = dynamic_average(&frames, &FrameDifference).unwrap();
        let mut total = 0.0;
        for w in data.windows(2) {
            let mut pair = 0.0;
            for r in 0..4 {
                let mut tok = 0.0;
                for c in 0..3 {
                    tok += (w[0][r * 3 + c] - w[1][r * 3 + c]).abs();
                }
                pair += tok / 3.0;
            }
            total += pair / 4.0;
        }
        prop_assert!((got - total / (data.len() - 1) as f64).abs() < 1e-12);
        let shifted: Vec<Mat<f64>> = frames.iter().map(|f| f.map(|x| x + offset)).collect();
        prop_assert!((dynamic_average(&shifted, &FrameDifference).unwrap() - got).abs() < 1e-9);
        let still = vec![frames[0].clone(), frames[0].clone()];
        prop_assert_eq!(dynamic_average(&still, &FrameDifference).unwrap(), 0.0);
    }

    #[test]
    fn archive_round_trip_is_bit_exact(
        shapes in prop::collection::vec((1usize..5, 1usize..5), 1..4),
        seed in any::<u64>(),
    ) {
        let mut a = TensorArchive::new(serde_json::json!({ "seed": seed }));
        let mut mats = Vec::new();
        for (i, (r, c)) in shapes.iter().enumerate() {
            let m = Mat::from_fn(*r, *c, |x, y| ((seed as f64) * 1e-3 + (x * 7 + y) as f64).sin() / (i + 1) as f64);
            a.push_mat(format!("t{i}"), &m).unwrap();
            mats.push(m);
        }
        let back = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
        for (i, m) in mats.iter().enumerate() {
            let got: Mat<f64> = back.require(&format!("t{i}")).unwrap().to_mat().unwrap();
            prop_assert_eq!(&got, m);
        }
    }

    #[test]
    fn framing_round_trips(bodies in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..200), 1..5)) {
        let mut buf = Vec::new();
        for b in &bodies {
            write_frame(&mut buf, b).unwrap();
        }
        let mut r = buf.as_slice();
        for b in &bodies {
            prop_assert_eq!(read_frame(&mut r).unwrap().unwrap(), b.clone());
        }
        prop_assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn routing_is_a_pure_threshold(t in 0.0..=1.0f64, boundary in 0.05..0.95f64) {
        let cfg = ExpertConfig { boundary, ..ExpertConfig::default() };
        let e = route_expert(t, &cfg).unwrap();
        prop_assert_eq!(e, route_expert(t, &cfg).unwrap());
        prop_assert_eq!(e == Expert::High, t >= boundary);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn perturbing_a_frame_leaves_earlier_frames_alone(j in 0usize..3, seed in 0u64..1000) {
        let cfg = tiny();
        let model = WorldModel::<f64>::init(cfg, ExpertConfig::default(), seed).unwrap();
        let rows = 3 * cfg.tokens_per_frame;
        let x = Mat::from_fn(rows, cfg.channels, |r, c| ((r * 5 + c) as f64 * 0.37 + seed as f64).sin());
        let mut y = x.clone();
        for r in j * cfg.tokens_per_frame..(j + 1) * cfg.tokens_per_frame {
            for c in 0..cfg.channels {
                y.set(r, c, y.get(r, c) + 0.5);
            }
        }
        let prompt: Mat<f64> = encode_prompt("open gate", 7, &cfg).unwrap().vectors;
        let run = |x: &Mat<f64>| model.low.run(&cfg, &ForwardSpec {
            x, frames: 3, first_frame: 1, t: 0.5, cam: None, context: None, context_mask: None,
            cross: CrossInput::Prompt(&prompt),
        });
        let (a, b) = (run(&x), run(&y));
        for f in 0..3 {
            let fa = a.velocity.slice_rows(f * cfg.tokens_per_frame, cfg.tokens_per_frame);
            let fb = b.velocity.slice_rows(f * cfg.tokens_per_frame, cfg.tokens_per_frame);
            if f < j {
                prop_assert_eq!(fa, fb);
            } else if f == j {
                prop_assert!(fa.max_abs_diff(&fb) > 0.0);
            }
        }
    }
}

#[test]
fn dmd_gradient_vanishes_for_identical_scores_and_conditions() {
    let cfg = tiny();
    let model = WorldModel::<f64>::init(cfg, ExpertConfig::default(), 4).unwrap();
    let tcfg = tiny_trainer();
    let setup = ScoreSetup::new(&cfg, &tcfg).unwrap();
    let pair = ScorePair::from_teacher(&model);
    let x = Mat::from_fn(3 * cfg.tokens_per_frame, cfg.channels, |r, c| ((r + 2 * c) as f64).cos());
    let c = Mat::from_fn(cfg.tokens_per_frame, cfg.channels, |r, c| (r as f64 - c as f64) * 0.2);
    for t in [1.0, 0.93, 0.6, 0.3] {
        let g = dmd_gradient(&pair, &x, t, &c, &c, &setup).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn tuning_trace_replays_from_seed() {
    let cfg = tiny();
    let tcfg = tiny_trainer();
    let data = tcfg.dataset.build(&cfg).unwrap();
    let run = || {
        let mut g = WorldModel::<f64>::init(cfg, ExpertConfig::default(), 6).unwrap();
        let mut pair = ScorePair::from_teacher(&g);
        let recs = tune(&mut g, &mut pair, &data, &tcfg, |_, _| {}).unwrap();
        let trace: Vec<_> = recs.iter().map(|r| (r.video_id, r.n, r.i, r.t.to_bits(), r.forcing_mode)).collect();
        (trace, g)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn timing_stats_are_monotone() {
    let model = Arc::new(WorldModel::<f64>::init(ModelConfig::default(), ExpertConfig::default(), 2).unwrap());
    let mut s = SessionTemplate::default().start(model, 3).unwrap();
    let mut last_frames = 0;
    let mut last_ms = 0.0;
    for _ in 0..4 {
        s.rollout_block().unwrap();
        let st = s.stats();
        assert!(st.frames > last_frames && st.total_ms >= last_ms);
        assert!((st.fps - st.frames as f64 / (st.total_ms / 1000.0)).abs() < 1e-9 * st.fps.max(1.0));
        last_frames = st.frames;
        last_ms = st.total_ms;
    }
}

#[test]
fn client_events_round_trip_through_json() {
    let events = vec![
        ClientEvent::Reset { seed: 4 },
        ClientEvent::Prompt { text: "open the gate".into() },
        ClientEvent::Action {
            segments: worldloop::camera::parse_action_script("W 3\nD 2").unwrap(),
        },
        ClientEvent::Pause,
        ClientEvent::Resume,
    ];
    for e in events {
        let text = serde_json::to_vec(&e).unwrap();
        assert_eq!(ClientEvent::parse(&text).unwrap(), e);
    }
}
