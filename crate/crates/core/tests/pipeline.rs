use std::fs;
use std::path::Path;

use layerscan::metrology::{Metric, MetricsReport, Plane};
use layerscan::pipeline::{
    emit_report, export_stack, ingest_stack, plan_analyses, rank_all, run_pipeline, Mode, PipelineConfig, SampleSource, ScanConfig,
};
use layerscan::voxphantom::{PhantomSpec, VoidSpec};
use layerscan::{Dims, Error, ErrorClass, Frame, VoxelGrid};

fn small_body(label: &str, side: f64) -> PhantomSpec {
    let c = side / 2.0;
    PhantomSpec::new(
        label,
        [side, side, side],
        0.1,
        vec![VoidSpec::cube(0.3, [c - 0.25, c, c]), VoidSpec::sphere(0.3, [c + 0.25, c, c])],
    )
    .unwrap()
}

fn small_config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        samples: vec![SampleSource::inline("Sample 1", small_body("a", 1.2)), SampleSource::inline("Sample 2", small_body("b", 1.1))],
        spacing_mm: 0.05,
        scan: ScanConfig { n_angles: 60, ..ScanConfig::default() },
        out_dir: "out".into(),
        base_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn grid_16(n: usize, slices: usize) -> VoxelGrid {
    let f = Frame::new(Dims::new(n, n, slices), 0.05, [0.0; 3]).unwrap();
    let scale = 1e-5;
    let values = (0..n * n * slices).map(|i| ((i * 37 % 60000) as f64 * scale) as f32).collect();
    VoxelGrid::new(f, values).unwrap()
}

#[test]
fn ingest_identical_16bit_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let f = Frame::new(Dims::new(64, 64, 1), 0.05, [0.0; 3]).unwrap();
    let one = VoxelGrid::new(f, (0..64 * 64).map(|i| (i % 1000) as f32 * 1e-4).collect()).unwrap();
    export_stack(&one, tmp.path(), 16, Some(1e-4)).unwrap();
    let src = tmp.path().join("slice_0000.pgm");
    for k in 1..10 {
        fs::copy(&src, tmp.path().join(format!("slice_{k:04}.pgm"))).unwrap();
    }
    let g = ingest_stack(tmp.path()).unwrap();
    assert_eq!(g.dims(), Dims::new(64, 64, 10));
    assert_eq!(g.slice_z(9), g.slice_z(0));
}

#[test]
fn ingest_names_mismatched_slice() {
    let tmp = tempfile::tempdir().unwrap();
    export_stack(&grid_16(64, 3), tmp.path(), 16, Some(1e-5)).unwrap();
    let small = tempfile::tempdir().unwrap();
    export_stack(&grid_16(32, 1), small.path(), 16, Some(1e-5)).unwrap();
    fs::copy(small.path().join("slice_0000.pgm"), tmp.path().join("slice_0001.pgm")).unwrap();
    match ingest_stack(tmp.path()) {
        Err(Error::Ingest { path, reason }) => {
            assert!(path.ends_with("slice_0001.pgm"), "{path:?}");
            assert!(reason.contains("32x32"), "{reason}");
        }
        other => panic!("expected ingest error, got {other:?}"),
    }
}

#[test]
fn ingest_requires_sidecar_and_known_depth() {
    let tmp = tempfile::tempdir().unwrap();
    export_stack(&grid_16(8, 2), tmp.path(), 8, None).unwrap();
    let car = tmp.path().join("stack.toml");
    let text = fs::read_to_string(&car).unwrap();
    fs::write(&car, text.replace("bit_depth = 8", "bit_depth = 12")).unwrap();
    assert!(matches!(ingest_stack(tmp.path()), Err(Error::Ingest { .. })));
    fs::remove_file(&car).unwrap();
    match ingest_stack(tmp.path()) {
        Err(Error::Ingest { path, .. }) => assert!(path.ends_with("stack.toml")),
        other => panic!("expected ingest error, got {other:?}"),
    }
}

#[test]
fn stack_round_trip_is_lossless() {
    let g = grid_16(24, 5);
    for depth in [16u8, 32] {
        let tmp = tempfile::tempdir().unwrap();
        export_stack(&g, tmp.path(), depth, Some(1e-5)).unwrap();
        let back = ingest_stack(tmp.path()).unwrap();
        assert_eq!(back.dims(), g.dims());
        if depth == 32 {
            assert_eq!(back.values(), g.values(), "raw float stacks are bit-exact");
        } else {
            // the declared quantization is recovered exactly
            let again = tempfile::tempdir().unwrap();
            export_stack(&back, again.path(), 16, Some(1e-5)).unwrap();
            assert_eq!(ingest_stack(again.path()).unwrap().values(), back.values());
            for (a, b) in back.values().iter().zip(g.values()) {
                assert!((a - b).abs() <= 5e-6 + 1e-6 * b.abs());
            }
        }
    }
}

#[test]
fn eight_bit_stack_round_trip() {
    let f = Frame::new(Dims::new(16, 16, 4), 0.1, [1.0, 2.0, 3.0]).unwrap();
    let g = VoxelGrid::new(f, (0..16 * 16 * 4).map(|i| (i % 256) as f32 * 0.5).collect()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    export_stack(&g, tmp.path(), 8, Some(0.5)).unwrap();
    let back = ingest_stack(tmp.path()).unwrap();
    assert_eq!(back, g);
}

fn report(sample: &str, printer: &str, setting: &str, idx: usize, cusp_xy: f64) -> MetricsReport {
    MetricsReport {
        sample_id: sample.into(),
        printer_id: printer.into(),
        setting_id: setting.into(),
        setting_index: idx,
        cusp_density_xy: cusp_xy,
        cusp_density_xz: cusp_xy,
        roughness_xy: None,
        roughness_xz: None,
        porosity_pct: 15.0,
        void_histogram: Vec::new(),
    }
}

#[test]
fn report_for_one_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = vec![report("Sample 1", "P", "First", 0, 2.0)];
    let files = emit_report(&reports, &rank_all(&reports).unwrap(), tmp.path()).unwrap();
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    let charts: Vec<_> = files.iter().filter(|f| f.extension().is_some_and(|e| e == "svg")).collect();
    assert_eq!(charts.len(), 3, "porosity plus cusp density in two planes");
    for c in charts {
        assert!(fs::read_to_string(c).unwrap().starts_with("<svg"));
    }
}

#[test]
fn report_refuses_empty_input() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(emit_report(&[], &[], tmp.path()), Err(Error::EmptyInput(_))));
    assert!(rank_all(&[]).is_err());
}

#[test]
fn report_ranking_minimum_row() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = vec![
        report("Sample 1", "Delta Wasp", "First", 0, 6.1),
        report("Sample 1", "Delta Wasp", "Third", 2, 4.8496),
        report("Sample 1", "Raise3D", "First", 0, 7.2638),
        report("Sample 1", "ProJet", "XHD mode", 0, 1.3276),
        report("Sample 1", "Ultimaker", "First", 0, 4.5611),
    ];
    let tables = rank_all(&reports).unwrap();
    emit_report(&reports, &tables, tmp.path()).unwrap();
    let text = fs::read_to_string(tmp.path().join("rankings_cusp_density_xy.csv")).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    let min = rows.iter().min_by(|a, b| a[2].parse::<f64>().unwrap().total_cmp(&b[2].parse::<f64>().unwrap())).unwrap();
    assert_eq!((&min[0], &min[1], &min[2]), ("ProJet", "XHD mode", "1.3276"));
    let delta = rows.iter().find(|r| &r[0] == "Delta Wasp").unwrap();
    assert_eq!((&delta[1], &delta[2]), ("Third", "4.8496"));
    let t = tables.iter().find(|t| t.metric == Metric::CuspDensity && t.plane == Some(Plane::Xy)).unwrap();
    assert_eq!(t.rankings.len(), 4);
}

#[test]
fn default_plan_has_38_analyses() {
    let jobs = plan_analyses(&PipelineConfig::default()).unwrap();
    assert_eq!(jobs.len(), 38);
    assert_eq!(jobs.iter().filter(|j| j.printer_id == "MJP").count(), 2);
}

#[test]
fn config_rejects_unknown_names() {
    let mut cfg = PipelineConfig::default();
    cfg.printers[0].profile = "nope".into();
    assert!(matches!(cfg.validate(), Err(Error::UnknownProfile(_))));
    let bad = PipelineConfig::from_toml_str("spacing_mm = 0.05\nbogus = 1\n");
    assert!(matches!(bad, Err(Error::Config(_))));
    let cfg = PipelineConfig::from_toml_str("settings = [1, 9]\n").unwrap();
    assert_eq!(cfg.validate().unwrap_err().class(), ErrorClass::Config);
    let cfg = PipelineConfig::from_toml_str("[[samples]]\nid = \"x\"\nbuiltin = \"sample9\"\n").unwrap();
    assert!(cfg.validate().is_err());
}

#[test]
fn config_toml_round_trip() {
    let cfg = small_config(Path::new(""));
    let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
}

fn read_manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn full_run_manifest_and_determinism() {
    let (ta, tb) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run_a = run_pipeline(&small_config(ta.path())).unwrap();
    run_pipeline(&small_config(tb.path())).unwrap();
    let (a, b) = (ta.path().join("out"), tb.path().join("out"));

    let m = read_manifest(&a);
    assert_eq!(m["analyses"].as_array().unwrap().len(), 38);
    assert_eq!(run_a.reports.len(), 38);
    let files = m["files"].as_array().unwrap();
    for f in files {
        let path = a.join(f["path"].as_str().unwrap());
        let bytes = fs::read(&path).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
        use sha2::Digest;
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(sha2::Sha256::digest(&bytes)));
    }
    // every file except the manifest itself is listed
    let mut on_disk = Vec::new();
    let mut stack = vec![a.clone()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.ends_with("manifest.json") {
                on_disk.push(p.strip_prefix(&a).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    on_disk.sort();
    let listed: Vec<String> = files.iter().map(|f| f["path"].as_str().unwrap().to_string()).collect();
    assert_eq!(listed, on_disk);

    for name in ["metrics.csv", "summary.csv", "rankings_cusp_density_xy.csv", "rankings_roughness_xz.csv", "rankings_porosity.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs between runs");
    }
    let (ma, mb) = (read_manifest(&a), read_manifest(&b));
    assert_eq!(ma["files"], mb["files"]);
}

#[test]
fn zero_defect_run_recovers_porosity() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.samples.truncate(1);
    cfg.printers.clear();
    cfg.reference.as_mut().unwrap().profile = "zero".into();
    cfg.scan.n_angles = 180;
    let run = run_pipeline(&cfg).unwrap();
    assert!(tmp.path().join("out/manifest.json").exists());
    assert_eq!(run.reports.len(), 1);
    let designed = 100.0 * layerscan::voxphantom::designed_porosity(&small_body("a", 1.2));
    let got = run.reports[0].porosity_pct;
    assert!((got - designed).abs() < 1.0, "porosity {got} vs designed {designed}");
    assert_eq!(run.outcomes[0].measurement.detectability.as_ref().unwrap().rate_at_least(0.2), Some(1.0));
}

#[test]
fn ingest_run_and_stage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_body("a", 1.2);
    let (grid, _) = layerscan::voxphantom::voxelize(&spec, 0.1).unwrap();
    let stack = tmp.path().join("stack");
    export_stack(&grid.padded(3), &stack, 32, None).unwrap();
    let text = format!(
        "mode = \"ingest\"\nout_dir = \"out\"\n[[samples]]\nid = \"S\"\nphantom_file = \"s.toml\"\n\
         [[ingest]]\nstack_dir = \"stack\"\nsample_id = \"S\"\nprinter_id = \"scanner\"\nsetting_id = \"as built\"\nreference = \"S\"\n"
    );
    layerscan::io::write_phantom(&tmp.path().join("s.toml"), &spec).unwrap();
    let cfg_path = tmp.path().join("run.toml");
    fs::write(&cfg_path, text).unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.mode, Mode::Ingest);
    let run = run_pipeline(&cfg).unwrap();
    let r = &run.reports[0];
    assert_eq!(r.roughness_xy, Some(0.0));
    let truth = layerscan::voxphantom::voxelize(&spec, 0.1).unwrap().1;
    assert_eq!(r.porosity_pct, layerscan::metrology::porosity(&truth).unwrap());

    fs::remove_dir_all(&stack).unwrap();
    match run_pipeline(&cfg) {
        Err(Error::Stage { stage, manifest, .. }) => {
            assert_eq!(stage, "ingest");
            assert!(manifest.ends_with("input.json") && manifest.exists());
        }
        other => panic!("expected stage error, got {other:?}"),
    }
}
