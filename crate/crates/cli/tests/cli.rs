use std::path::Path;
use std::process::{Command, Output};

use dynsplat_core::checkpoint::Checkpoint;
use dynsplat_core::image::Image;
use dynsplat_core::raster::{render, Payload, RenderSettings};
use dynsplat_core::synth::Dataset;
use dynsplat_core::track::Registry;
use serde_json::Value;
use tempfile::TempDir;

const CONFIG: &str = "\
warmup_iters = 150
joint_iters = 50
dssim_iters = 10
init_gaussians = 300
max_gaussians = 400
densify_from = 50
densify_until = 150
densify_interval = 50
sh_degree = 1
grid_res = 8
time_res = 4
rank_s = 4
rank_t = 2
decoder_hidden = [16]
";

fn dynsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynsplat")).args(args).env("RUST_LOG", "warn").output().expect("run dynsplat")
}

fn ok(args: &[&str]) -> String {
    let out = dynsplat(args);
    assert!(out.status.success(), "dynsplat {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = dynsplat(args);
    assert!(!out.status.success(), "dynsplat {args:?} should have failed");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_from_data_to_edits() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let (data, ckpt, fine, seg) = (d.join("data"), d.join("model.vsgs"), d.join("fine.vsgs"), d.join("seg.json"));
    std::fs::write(d.join("train.toml"), CONFIG).unwrap();

    ok(&["gen-data", "--scene", "blobs3", "--views", "6", "--test-views", "2", "--timesteps", "2", "--res", "24,24", "--out", s(&data)]);
    let ds = Dataset::load(&data).unwrap();
    assert_eq!((ds.manifest.views.len(), ds.manifest.width, ds.manifest.height), (8, 24, 24));

    let trace = d.join("trace.jsonl");
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&d.join("train.toml")), "--trace", s(&trace)]);
    let lines: Vec<Value> = std::fs::read_to_string(&trace).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 200);
    assert_eq!(lines[199]["stage"], "joint");

    let report: Value = serde_json::from_str(&ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)])).unwrap();
    assert_eq!(report["psnr_per_timestep"].as_array().unwrap().len(), 2);
    assert!(report["mean_psnr"].as_f64().unwrap() > 10.0);

    let labels: Value = serde_json::from_str(&ok(&["segment", "coarse", "--ckpt", s(&ckpt), "--k", "2", "--out", s(&seg)])).unwrap();
    assert_eq!(labels.as_array().unwrap().len(), 2);
    let seg_file: Value = serde_json::from_str(&std::fs::read_to_string(&seg).unwrap()).unwrap();
    assert_eq!(seg_file["members"].as_array().unwrap().len(), 2);

    let masks = d.join("masks");
    ok(&["gen-masks", "--data", s(&data), "--segment", "3", "--time", "0", "--union", "--out", s(&masks)]);
    assert!(masks.join("index.json").exists());

    // The blue cluster is the label with the larger blue centroid.
    let blue = (0..2).max_by(|&a, &b| labels[a]["centroid"][2].as_f64().unwrap().total_cmp(&labels[b]["centroid"][2].as_f64().unwrap())).unwrap();
    ok(&[
        "segment", "fine", "--ckpt", s(&ckpt), "--coarse", s(&seg), "--label", &blue.to_string(), "--time", "0", "--masks", s(&masks), "--data",
        s(&data), "--iterations", "20", "--batch", "256", "--out", s(&fine),
    ]);
    let ck = Checkpoint::load(&fine).unwrap();
    assert!(ck.coarse.is_some());
    assert!(ck.affinity_for(blue as u32, 0.0).is_some());

    // Any covered pixel of view 0 at t = 0 yields a coarse segment.
    let frame = render(&ck.model.at_time(0.0), ds.camera(0), Payload::Color, &RenderSettings::default(), true);
    let (x, y) = (0..24 * 24).map(|p| (p % 24, p / 24)).find(|&(x, y)| frame.pick(x, y).is_some()).expect("view 0 is not empty");
    let pixel = format!("{x},{y}");
    let picked: Value = serde_json::from_str(&ok(&[
        "segment", "pick", "--ckpt", s(&fine), "--pixel", &pixel, "--view", "0", "--data", s(&data), "--time", "0", "--level", "coarse",
    ]))
    .unwrap();
    assert_eq!(picked["level"], "coarse");
    let id = picked["segment"].as_u64().unwrap();
    let sidecar = d.join("fine.segments.json");
    assert!(Registry::load(&sidecar).unwrap().contains(id));

    ok(&["edit", "--segments", s(&sidecar), "--segment", &id.to_string(), "--recolor", "0,1,0"]);
    ok(&["edit", "--segments", s(&sidecar), "--segment", &id.to_string(), "--translate", "0,0,0.1", "--scale", "1.2"]);
    assert_eq!(Registry::load(&sidecar).unwrap().edits.len(), 2);
    fails(&["edit", "--segments", s(&sidecar), "--segment", "999", "--opacity-scale", "0.5"]);
    fails(&["edit", "--segments", s(&sidecar), "--segment", &id.to_string(), "--opacity-scale", "-1"]);

    let group: Value = serde_json::from_str(&ok(&["group", "--ckpt", s(&fine), "--ids", &id.to_string(), "--name", "g"])).unwrap();
    assert_eq!(group["gaussians"], picked["gaussians"]);

    let tracked = d.join("track.png");
    ok(&["track", "--ckpt", s(&fine), "--time", "0.5", "--mode", "highlight", "--view", "0", "--data", s(&data), "--out", s(&tracked)]);
    let img = Image::from_png_bytes(&std::fs::read(&tracked).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (24, 24));
    fails(&["track", "--ckpt", s(&fine), "--time", "0.5", "--select", "999", "--view", "0", "--data", s(&data), "--out", s(&tracked)]);

    let vel = d.join("velocity.png");
    let v: Value = serde_json::from_str(&ok(&["velocity", "--ckpt", s(&fine), "--time", "1", "--eye", "0,-3.5,0", "--res", "32,16", "--out", s(&vel)])).unwrap();
    assert!(v["max_abs_dx"].as_f64().unwrap() >= 0.0);
    let img = Image::from_png_bytes(&std::fs::read(&vel).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (32, 16));
}

#[test]
fn malformed_arguments_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("data");
    assert!(fails(&["gen-data", "--res", "24", "--out", s(&out)]).contains("comma-separated"));
    fails(&["gen-data", "--scene", s(&tmp.path().join("missing.json")), "--out", s(&out)]);
    fails(&["edit", "--segments", "x.json", "--segment", "1"]);
    fails(&["edit", "--segments", "x.json", "--segment", "1", "--recolor", "1,0,0", "--opacity-scale", "2"]);
    fails(&["train", "--data", s(&out), "--out", "m.vsgs", "--loss", "l3"]);
    assert!(fails(&["eval", "--ckpt", s(&tmp.path().join("none.vsgs")), "--data", s(&out)]).contains("none.vsgs"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "warmup_iters = 10\nno_such_key = 1\n").unwrap();
    let err = fails(&["train", "--data", s(tmp.path()), "--out", "m.vsgs", "--config", s(&bad)]);
    assert!(err.contains("no_such_key"), "{err}");
}

#[test]
fn scene_files_are_json_scenes() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene.json");
    let mut value = serde_json::to_value(dynsplat_core::synth::AnalyticScene::blobs3()).unwrap();
    value["blobs"].as_array_mut().unwrap().truncate(1);
    std::fs::write(&scene, value.to_string()).unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "--scene", s(&scene), "--views", "2", "--test-views", "2", "--timesteps", "2", "--res", "12,10", "--out", s(&out)]);
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.manifest.scene.blobs.len(), 1);
    assert_eq!((ds.manifest.width, ds.manifest.height), (12, 10));
}
