use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn layerscan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerscan")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

const SMALL_PHANTOM: &str = r#"label = "small"
outer_dims_mm = [1.2, 1.2, 1.2]
material_mu = 0.1

[[voids]]
shape = "cube"
size_mm = 0.3
center_mm = [0.35, 0.6, 0.6]

[[voids]]
shape = "sphere"
size_mm = 0.3
center_mm = [0.85, 0.6, 0.6]
"#;

#[test]
fn stage_by_stage_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("small.toml"), SMALL_PHANTOM).unwrap();

    ok(&layerscan(&["phantom", "--phantom", "small.toml", "--out", "ph"], d));
    assert!(d.join("ph/phantom_spec.toml").exists() && d.join("ph/phantom_grid.raw").exists());

    ok(&layerscan(&["simulate", "--phantom", "small.toml", "--profile", "zero", "--row", "2", "--seed", "7", "--out", "sim"], d));
    ok(&layerscan(&["scan", "--grid", "sim/printed.raw", "--angles", "120", "--out", "scan"], d));
    ok(&layerscan(&["recon", "--sinogram", "scan/sinogram.raw", "--filter", "ramp_hann", "--cutoff", "0.9", "--stack-depth", "16", "--out", "rec"], d));
    assert!(d.join("rec/stack/stack.toml").exists());
    ok(&layerscan(
        &["analyze", "--grid", "rec/reconstruction.raw", "--reference", "small.toml", "--printer-id", "P", "--setting-id", "First", "--out", "an"],
        d,
    ));
    let metrics = fs::read_to_string(d.join("an/metrics.csv")).unwrap();
    assert!(metrics.starts_with("sample,printer,setting,setting_index,plane,metric,value"));
    assert_eq!(metrics.lines().filter(|l| l.contains("roughness")).count(), 2);
    assert!(d.join("an/detectability.csv").exists());

    ok(&layerscan(&["analyze", "--stack", "rec/stack", "--out", "an2"], d));
    let m2 = fs::read_to_string(d.join("an2/metrics.csv")).unwrap();
    assert_eq!(m2.lines().filter(|l| l.contains("roughness")).count(), 0, "no reference, no roughness");
}

const FIXTURE: &str = "sample,printer,setting,setting_index,plane,metric,value
Sample 1,Delta,First,0,XY,cusp_density,6.2
Sample 1,Delta,Third,2,XY,cusp_density,4.8496
Sample 1,Delta,First,0,-,porosity,15.1
Sample 1,Delta,Third,2,-,porosity,15.3
Sample 1,ProJet,XHD mode,0,XY,cusp_density,1.3276
Sample 1,ProJet,XHD mode,0,-,porosity,14.9
";

#[test]
fn rank_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("m.csv"), FIXTURE).unwrap();
    let out = layerscan(&["rank", "--metrics", "m.csv", "--metric", "cusp_density", "--plane", "XY"], d);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Delta,Third,4.8496"), "{text}");
    assert!(text.contains("ProJet,XHD mode,1.3276"), "{text}");

    ok(&layerscan(&["report", "--metrics", "m.csv", "--out", "rep"], d));
    assert!(d.join("rep/charts/porosity.svg").exists());
    assert!(d.join("rep/rankings_cusp_density_xy.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // configuration
    assert_eq!(layerscan(&["simulate", "--sample", "sample1", "--profile", "nope"], d).status.code(), Some(2));
    assert_eq!(layerscan(&["recon", "--sinogram", "x.raw", "--filter", "cosine"], d).status.code(), Some(2));
    fs::write(d.join("bad.toml"), "mode = \"ingest\"\nunknown_key = 3\n").unwrap();
    assert_eq!(layerscan(&["run", "--config", "bad.toml"], d).status.code(), Some(2));
    assert_eq!(layerscan(&["frobnicate"], d).status.code(), Some(2));
    // I/O
    assert_eq!(layerscan(&["scan", "--grid", "missing.raw"], d).status.code(), Some(4));
    // stage
    fs::write(d.join("s.toml"), SMALL_PHANTOM).unwrap();
    let cfg = "mode = \"ingest\"\nout_dir = \"out\"\n[[samples]]\nid = \"S\"\nphantom_file = \"s.toml\"\n\
               [[ingest]]\nstack_dir = \"no_such_stack\"\nsample_id = \"S\"\nprinter_id = \"P\"\nsetting_id = \"First\"\n";
    fs::write(d.join("run.toml"), cfg).unwrap();
    let out = layerscan(&["run", "--config", "run.toml"], d);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `ingest`") && err.contains("input.json"), "{err}");
}

#[test]
fn run_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("s.toml"), SMALL_PHANTOM).unwrap();
    let cfg = "spacing_mm = 0.05\nsettings = [1, 5]\nprinters = [{ id = \"A\", profile = \"default\" }]\n\
               [[samples]]\nid = \"S\"\nphantom_file = \"s.toml\"\n[scan]\nn_angles = 60\n";
    fs::write(d.join("run.toml"), cfg).unwrap();
    let out = layerscan(&["run", "--config", "run.toml", "--seed", "11", "--out", "res", "--jobs", "1"], d);
    ok(&out);
    let manifest: String = fs::read_to_string(d.join("res/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 11"));
    let summary = fs::read_to_string(d.join("res/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3, "two settings plus the reference printer");
}
