use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde_json::{json, Value};
use worldloop::checkpoint::{load_model, TensorArchive};
use worldloop::service::{Client, ClientEvent, ServerMessage};
use worldloop::train::read_metrics_csv;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_worldloop"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn worldloop");
    assert!(
        out.status.success(),
        "worldloop failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn tiny_model() -> Value {
    json!({
        "channels": 4, "width": 8, "tokens_per_frame": 4, "token_grid": [2, 2],
        "frames_per_block": 3, "layers": 1, "heads": 2, "ffn_hidden": 8,
        "time_buckets": 5, "prompt_vocab": 64
    })
}

fn tiny_engine() -> Value {
    json!({ "layout": { "layers": 1 }, "plucker": { "token_grid": [2, 2] } })
}

#[test]
fn rollout_writes_deterministic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rollout.json");
    let events = dir.path().join("events.json");
    write(&cfg, &json!({ "seed": 5, "num_blocks": 4, "model_seed": 2 }));
    write(
        &events,
        &json!([
            { "at_block": 0, "new_segments": [{ "key": "W", "duration": 6 }] },
            { "at_block": 2, "new_prompt": "a lantern flickers on" }
        ]),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(bin().args(["rollout", "--config"]).arg(&cfg).arg("--events").arg(&events).arg("--out").arg(out));
    }
    assert_eq!(fs::read(a.join("blocks.wlta")).unwrap(), fs::read(b.join("blocks.wlta")).unwrap());

    let archive = TensorArchive::load(a.join("blocks.wlta")).unwrap();
    assert_eq!(archive.len(), 12);
    assert!(archive.get("block.3.frame.2").is_some());
    let traj = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 1 + 12);
    let session: Value = serde_json::from_slice(&fs::read(a.join("session.json")).unwrap()).unwrap();
    assert_eq!(session["seed"], 5);
    assert_eq!(session["turn_log"].as_array().unwrap().len(), 2);
    assert_eq!(session["stats"]["frames"], 12);
    let cache: Value = serde_json::from_slice(&fs::read(a.join("cache.json")).unwrap()).unwrap();
    assert_eq!(cache["position"], 13);
}

#[test]
fn rollout_rejects_unsorted_events() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rollout.json");
    let events = dir.path().join("events.json");
    write(&cfg, &json!({ "num_blocks": 2 }));
    write(&events, &json!([{ "at_block": 1, "new_prompt": "x" }, { "at_block": 0, "new_prompt": "y" }]));
    let out = bin()
        .args(["rollout", "--config"])
        .arg(&cfg)
        .arg("--events")
        .arg(&events)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn pretrain_then_distill_emit_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let pre_cfg = dir.path().join("pretrain.json");
    write(
        &pre_cfg,
        &json!({
            "model": tiny_model(),
            "checkpoint_every": 2,
            "pretrain": {
                "steps": 4, "batch_size": 2, "layout": { "layers": 1 },
                "plucker": { "token_grid": [2, 2] },
                "dataset": { "seed": 1, "videos": 3, "drift": { "frames": 20 } }
            }
        }),
    );
    let pre_out = dir.path().join("pre");
    run_ok(bin().args(["pretrain", "--config"]).arg(&pre_cfg).arg("--out").arg(&pre_out));
    let header = fs::read_to_string(pre_out.join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,loss,N,i,t,forcing_mode"));
    assert_eq!(read_metrics_csv(&pre_out.join("metrics.csv")).unwrap().len(), 4);
    assert!(pre_out.join("checkpoints/step_000002.wlta").exists());
    assert!(pre_out.join("checkpoints/step_000004.wlta").exists());
    let teacher = load_model::<f64>(pre_out.join("model.wlta")).unwrap();
    assert_eq!(teacher.config.channels, 4);

    let distill_cfg = dir.path().join("distill.json");
    let mut tune = tiny_engine();
    tune["steps"] = json!(3);
    tune["max_rollout_frames"] = json!(9);
    tune["dataset"] = json!({ "seed": 2, "videos": 2, "drift": { "frames": 12 } });
    write(&distill_cfg, &json!({ "teacher": "pre/model.wlta", "tune": tune }));
    let dist_out = dir.path().join("dist");
    run_ok(bin().args(["distill", "--config"]).arg(&distill_cfg).arg("--out").arg(&dist_out));
    let rows = read_metrics_csv(&dist_out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let (n, i) = (r.n.unwrap(), r.i.unwrap());
        assert!(n % 3 == 0 && (3..=9).contains(&n) && i >= 1 && i <= n - 2);
        assert!(r.forcing_mode.is_some() && r.t.is_some());
    }
    assert!(dist_out.join("student.wlta").exists());
    assert!(dist_out.join("fake_score.wlta").exists());
}

#[test]
fn tune_long_reports_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("long.json");
    let mut tune = tiny_engine();
    tune["steps"] = json!(2);
    tune["max_rollout_frames"] = json!(6);
    write(
        &cfg,
        &json!({
            "model": tiny_model(),
            "pretrain": {
                "steps": 2, "batch_size": 1, "max_context_blocks": 1,
                "layout": { "layers": 1 }, "plucker": { "token_grid": [2, 2] },
                "dataset": { "videos": 2, "drift": { "frames": 20 } }
            },
            "tune": tune,
            "eval_videos": 1,
            "eval_frames": 18,
            "seeds": [3]
        }),
    );
    let out = dir.path().join("out");
    let stdout = run_ok(bin().args(["tune-long", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert!(stdout.contains("seed 3"));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
    assert_eq!(report["runs"][0]["horizon"], 14);
    for f in ["metrics.csv", "pretrain_metrics.csv", "untuned.wlta", "tuned.wlta"] {
        assert!(out.join("seed_3").join(f).exists(), "{f}");
    }
}

#[test]
fn eval_rpe_and_interbench() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.csv");
    let est = dir.path().join("est.csv");
    let mut g = String::from("frame,qw,qx,qy,qz,px,py,pz\n");
    let mut e = g.clone();
    for i in 0..8 {
        let x = i as f64 * 0.1;
        g.push_str(&format!("{i},1,0,0,0,{x},{},0\n", (x * 3.0).sin()));
        // scaled by two and shifted: alignment must absorb it
        e.push_str(&format!("{i},1,0,0,0,{},{},5\n", 2.0 * x, 2.0 * (x * 3.0).sin()));
    }
    fs::write(&gt, g).unwrap();
    fs::write(&est, e).unwrap();
    let out = run_ok(bin().args(["eval", "rpe", "--est"]).arg(&est).arg("--gt").arg(&gt).args(["--delta", "2"]));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(v["trans_rmse"].as_f64().unwrap() < 1e-9);
    assert!((v["alignment"]["scale"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    let raw = run_ok(bin().args(["eval", "rpe", "--no-align", "--est"]).arg(&est).arg("--gt").arg(&gt));
    let v: Value = serde_json::from_str(&raw).unwrap();
    assert!(v["trans_rmse"].as_f64().unwrap() > 1e-3);
    assert!(v.get("alignment").is_none());

    let records = dir.path().join("records.csv");
    fs::write(
        &records,
        "video_id,category,trigger,align,fluency,scope,end_state,physics\n\
         a,environmental,1,5,5,5,5,5\n\
         b,environmental,0,0,0,0,0,0\n\
         c,actor,1,3,3,1,5,3\n",
    )
    .unwrap();
    let out = run_ok(bin().args(["eval", "interbench", "--records"]).arg(&records));
    let v: Value = serde_json::from_str(&out).unwrap();
    let cats = v["categories"].as_array().unwrap();
    assert_eq!(cats.len(), 2);
    let env = cats.iter().find(|c| c["category"] == "environmental").unwrap();
    assert_eq!(env["count"], 2);
    // (5·0.5 + 5·2.5) / 6
    assert!((env["overall"].as_f64().unwrap() - 2.5).abs() < 1e-12);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "video_id,category,trigger,align,fluency,scope,end_state,physics\nx,actor,0,3,0,0,0,0\n").unwrap();
    let out = bin().args(["eval", "interbench", "--records"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn serve_streams_blocks_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.wlta");
    let model = worldloop::model::WorldModel::<f64>::init(Default::default(), Default::default(), 1).unwrap();
    worldloop::checkpoint::save_model(&model, &ckpt).unwrap();
    let cfg = dir.path().join("service.json");
    write(&cfg, &json!({ "max_blocks": 2 }));

    let mut child = bin()
        .args(["serve", "--addr", "127.0.0.1:0", "--ckpt"])
        .arg(&ckpt)
        .arg("--config")
        .arg(&cfg)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();

    let mut client = Client::connect(addr.as_str()).unwrap();
    client.set_timeout(Some(Duration::from_secs(30))).unwrap();
    client.send(&ClientEvent::Reset { seed: 1 }).unwrap();
    let msgs = client
        .recv_until(|m| matches!(m, ServerMessage::Block { block_index: 1, .. }))
        .unwrap();
    child.kill().unwrap();
    let _ = child.wait();
    assert!(msgs.iter().any(|m| matches!(m, ServerMessage::CacheState { .. })));
    let frames = msgs
        .iter()
        .filter_map(|m| match m {
            ServerMessage::Block { frames_u8, .. } => Some(frames_u8.len()),
            _ => None,
        })
        .collect::<Vec<_>>();
    assert_eq!(frames, vec![3, 3]);
}
