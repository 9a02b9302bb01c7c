use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rasf::adapters::VoxelVolume;
use rasf::field::{init_grid, InitScheme};
use rasf::io::{self, Precision};

fn rasf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rasf")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_default_grid(path: &Path) {
    let g = init_grid(16, 32, InitScheme::default(), 0).unwrap();
    io::write_grid(path, &g, Precision::F32).unwrap();
}

#[test]
fn usage_errors() {
    assert_eq!(code(&rasf(&[])), 1);
    assert_eq!(code(&rasf(&["nope"])), 1);
    let o = rasf(&["embed", "--grid", "g", "--input", "x", "--repr", "cloud", "--out", "o", "--wat"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&rasf(&["probe-ellipsoid", "--grid", "g", "--axis", "w", "--out", "o"])), 1);
    assert_eq!(code(&rasf(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.rasf");
    fs::write(&bad, b"XXXX not a grid").unwrap();
    let out = dir.path().join("out.csv");
    let o = rasf(&["probe-ellipsoid", "--grid", s(&bad), "--axis", "x", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("format error"));
    assert!(!out.exists());

    let grid = dir.path().join("g.rasf");
    write_default_grid(&grid);
    let xyz = dir.path().join("c.xyz");
    fs::write(&xyz, "0 0 0\n1 1\n").unwrap();
    let o = rasf(&["embed", "--grid", s(&grid), "--input", s(&xyz), "--repr", "cloud", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert!(!out.exists());
    // only the files we created
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 3);
}

#[test]
fn embed_cloud_default_grid_shape() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("g.rasf");
    write_default_grid(&grid);
    assert_eq!(fs::metadata(&grid).unwrap().len(), 524_304);

    let shape = rasf::probes::gen_shape(rasf::probes::ShapeClass::Sphere, 2048, 0.0, 3).unwrap();
    let xyz = dir.path().join("c.xyz");
    fs::write(&xyz, io::write_xyz(&shape.cloud, None)).unwrap();
    let out = dir.path().join("e.csv");
    let o = rasf(&["embed", "--grid", s(&grid), "--input", s(&xyz), "--repr", "cloud", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2048);
    assert!(rows.iter().all(|r| r.split(',').count() == 32));
}

#[test]
fn embed_empty_voxels_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("g.rasf");
    write_default_grid(&grid);
    let vox = dir.path().join("v.vox");
    io::write_voxels_file(&vox, &VoxelVolume::empty(6)).unwrap();
    let out = dir.path().join("e.csv");
    let o = rasf(&["embed", "--grid", s(&grid), "--input", s(&vox), "--repr", "voxel", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 216);
    assert!(text.lines().all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap() == 0.0)));
}

#[test]
fn embed_mesh_elements() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("g.rasf");
    write_default_grid(&grid);
    let off = dir.path().join("m.off");
    // a tetrahedron with a quad-free fan and a comment
    fs::write(
        &off,
        "OFF\n# tet\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n",
    )
    .unwrap();
    for (repr, rows) in [("mesh-vertex", 4), ("mesh-edge", 6), ("mesh-face", 4)] {
        let out = dir.path().join(format!("{repr}.csv"));
        let args = ["embed", "--grid", s(&grid), "--input", s(&off), "--repr", repr, "--out", s(&out), "--samples", "300"];
        let o = rasf(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let first = fs::read(&out).unwrap();
        assert_eq!(String::from_utf8_lossy(&first).lines().count(), rows);
        rasf(&args);
        assert_eq!(fs::read(&out).unwrap(), first, "{repr} not deterministic");
    }
}

#[test]
fn synthetic_pretrain_and_probes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = rasf(&["gen-synthetic", "--n-per-class", "4", "--points", "64", "--noise", "0", "--seed", "5", "--outdir", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&data).unwrap().count(), 13);
    let labels = fs::read_to_string(data.join("labels.csv")).unwrap();
    assert!(labels.starts_with("file,label\nshape_00000.xyz,0\nshape_00001.xyz,1\n"));

    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"resolution": 4, "channels": 4, "pretext": {"epochs": 2, "n_out": 16, "widths": {"shared": [8], "reconstruction": [8], "classification": [8], "normal": [8]}}}"#).unwrap();
    for task in ["recon", "normal", "supervised"] {
        let grid = dir.path().join(format!("{task}.rasf"));
        let o = rasf(&["pretrain", "--task", task, "--data", s(&data), "--out", s(&grid), "--config", s(&cfg)]);
        assert_eq!(code(&o), 0, "{task}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(io::read_grid(&grid).unwrap().resolution(), 4);
        let report = fs::read_to_string(dir.path().join(format!("{task}.rasf.report.jsonl"))).unwrap();
        assert_eq!(report.lines().count(), 2);
        for line in report.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["epoch", "lr", "train_loss", "eval_loss"] {
                assert!(v.get(key).is_some(), "{key} missing");
            }
        }
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("{task}.rasf.summary.json"))).unwrap()).unwrap();
        assert_eq!(summary["run"]["resolution"], 4);
        assert_eq!(summary["report"]["config"]["epochs"], 2);
    }

    let grid = dir.path().join("recon.rasf");
    let resp = dir.path().join("resp.csv");
    let o = rasf(&["probe-ellipsoid", "--grid", s(&grid), "--axis", "z", "--out", s(&resp), "--n-theta", "8", "--n-phi", "16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&resp).unwrap().lines().count(), 20);
    let rho = fs::read_to_string(dir.path().join("resp.csv.spearman.csv")).unwrap();
    assert_eq!(rho.lines().count(), 5);

    let slices = dir.path().join("slices");
    let o = rasf(&["export-slices", "--grid", s(&grid), "--axis", "y", "--outdir", s(&slices)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&slices).unwrap().count(), 9);
    assert!(fs::read_to_string(slices.join("channel_000.pgm")).unwrap().starts_with("P2\n4 4\n255\n"));
    assert_eq!(fs::read_to_string(slices.join("ranges.txt")).unwrap().lines().count(), 5);

    let report = dir.path().join("probe.json");
    let o = rasf(&["linear-probe", "--grid", s(&grid), "--data", s(&data), "--mode", "flatten", "--out", s(&report), "--epochs", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["mode"], "flatten_fc");
    assert!(v["rasf"]["test_accuracy"].is_number());
    assert!(v["raw"]["test_accuracy"].is_number());
}
