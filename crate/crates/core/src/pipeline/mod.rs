//! End-to-end orchestration: synthetic runs (phantom, print, scan,
//! reconstruction, analysis), slice-stack ingestion, reports and the run
//! manifest.
//!
//! Each analysis writes into its own subdirectory of the output directory,
//! starting with an `input.json` that names the analysis and its seed. A
//! failing stage aborts the run with the stage name and that file. After all
//! analyses finish the run writes the report bundle and `manifest.json`,
//! which lists every output file with its SHA-256.

pub mod config;
pub mod report;
pub mod stack;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{AnalysisConfig, IngestEntry, Mode, PipelineConfig, PrinterEntry, ReferencePrinter, SampleSource, ScanConfig};
pub use report::{bar_chart_svg, emit_report, rank_all, RankingTable};
pub use stack::{export_stack, ingest_stack, StackSidecar};

use crate::error::{Error, Result};
use crate::fbp::{reconstruct_volume, FilterSpec};
use crate::io::{write_grid, write_labels, write_sinogram};
use crate::metrology::{align, cusp_density, porosity, roughness, void_histogram, Alignment, MetricsReport, Plane, SmoothingSpec};
use crate::printsim::{setting_ordinal, settings_table, simulate_print, stage_seed, PrinterProfile, PrinterSettings};
use crate::segmet::{extract_voids, otsu_threshold, score_with_bins, segment, write_detectability_csv, write_voids_csv, DetectabilityReport, VoidDetection, SIZE_BIN_MM};
use crate::volume::{Frame, Label, LabelVolume, VoxelGrid};
use crate::voxphantom::{voxelize, PhantomSpec};
use crate::xray::{add_photon_noise, project_volume, ScanGeometry, Sinogram};

/// One planned analysis of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisJob {
    /// Subdirectory name, unique within the run.
    pub id: String,
    pub sample_id: String,
    pub printer_id: String,
    pub profile: Option<String>,
    pub setting_id: String,
    pub setting_index: usize,
    pub settings: Option<PrinterSettings>,
    #[serde(skip)]
    pub source: JobSource,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum JobSource {
    #[default]
    Synthetic,
    Stack { dir: PathBuf, reference: Option<String> },
}

fn dir_name(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| p.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' }).collect::<String>())
        .collect::<Vec<_>>()
        .join("__")
}

/// Analyses of a run in their canonical order: per sample, every FDM
/// printer at every configured setting, then the reference printer once.
/// Print seeds depend on the run seed, sample and printer but not on the
/// setting, so settings of one printer are compared on the same noise.
pub fn plan_analyses(cfg: &PipelineConfig) -> Result<Vec<AnalysisJob>> {
    let table = settings_table();
    let mut jobs = Vec::new();
    match cfg.mode {
        config::Mode::Synthetic => {
            for (si, sample) in cfg.samples.iter().enumerate() {
                let print_seed = |pi: usize| stage_seed(cfg.seed, 1000 + (si * 256 + pi) as u64);
                for (pi, p) in cfg.printers.iter().enumerate() {
                    for (k, &row) in cfg.settings.iter().enumerate() {
                        let setting_id = setting_ordinal(row);
                        jobs.push(AnalysisJob {
                            id: dir_name(&[&sample.id, &p.id, &format!("{:02}", k + 1), &setting_id]),
                            sample_id: sample.id.clone(),
                            printer_id: p.id.clone(),
                            profile: Some(p.profile.clone()),
                            setting_id,
                            setting_index: k,
                            settings: Some(table[row - 1].with_seed(print_seed(pi))),
                            source: JobSource::Synthetic,
                        });
                    }
                }
                if let Some(r) = &cfg.reference {
                    jobs.push(AnalysisJob {
                        id: dir_name(&[&sample.id, &r.id, "01", &r.setting_id]),
                        sample_id: sample.id.clone(),
                        printer_id: r.id.clone(),
                        profile: Some(r.profile.clone()),
                        setting_id: r.setting_id.clone(),
                        setting_index: 0,
                        settings: Some(table[r.row - 1].with_seed(print_seed(cfg.printers.len()))),
                        source: JobSource::Synthetic,
                    });
                }
            }
        }
        config::Mode::Ingest => {
            for e in &cfg.ingest {
                jobs.push(AnalysisJob {
                    id: dir_name(&[&e.sample_id, &e.printer_id, &format!("{:02}", e.setting_index + 1), &e.setting_id]),
                    sample_id: e.sample_id.clone(),
                    printer_id: e.printer_id.clone(),
                    profile: None,
                    setting_id: e.setting_id.clone(),
                    setting_index: e.setting_index,
                    settings: None,
                    source: JobSource::Stack { dir: cfg.resolve_path(&e.stack_dir), reference: e.reference.clone() },
                });
            }
        }
    }
    let mut ids: Vec<&str> = jobs.iter().map(|j| j.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("two analyses map to the same directory `{}`", w[0])));
    }
    Ok(jobs)
}

/// Places `labels` into `target` by world position. Both must share the
/// voxel pitch and their origins must differ by whole voxels; parts falling
/// outside `target` are dropped.
pub fn embed_labels(labels: &LabelVolume, target: &Frame) -> Result<LabelVolume> {
    let s = labels.spacing_mm();
    if (s - target.spacing_mm).abs() > 1e-9 * s {
        return Err(Error::Registration(format!("spacing {s} mm differs from target spacing {} mm", target.spacing_mm)));
    }
    let mut off = [0i64; 3];
    for a in 0..3 {
        let v = (labels.frame().origin_mm[a] - target.origin_mm[a]) / s;
        if (v - v.round()).abs() > 1e-6 {
            return Err(Error::Registration(format!("origins differ by a fractional voxel ({v:.4}) along axis {a}")));
        }
        off[a] = v.round() as i64;
    }
    let (sd, td) = (labels.dims(), target.dims);
    let mut out = LabelVolume::filled(*target, Label::Background);
    for z in 0..sd.nz {
        let tz = z as i64 + off[2];
        if tz < 0 || tz >= td.nz as i64 {
            continue;
        }
        for y in 0..sd.ny {
            let ty = y as i64 + off[1];
            if ty < 0 || ty >= td.ny as i64 {
                continue;
            }
            for x in 0..sd.nx {
                let tx = x as i64 + off[0];
                if tx >= 0 && tx < td.nx as i64 {
                    out.set(tx as usize, ty as usize, tz as usize, labels.get(x, y, z));
                }
            }
        }
    }
    Ok(out)
}

/// Otsu threshold and the resulting segmentation.
pub fn segment_grid(grid: &VoxelGrid) -> Result<(f32, LabelVolume)> {
    let t = otsu_threshold(grid)?;
    Ok((t, segment(grid, t)?))
}

/// Everything measured on one segmented volume.
#[derive(Clone, Debug)]
pub struct Measurement {
    pub report: MetricsReport,
    pub alignment: Option<Alignment>,
    pub voids: Vec<VoidDetection>,
    pub detectability: Option<DetectabilityReport>,
}

/// Metrics of `seg`. With a reference phantom, the segmentation is
/// registered onto its voxelization, roughness is measured against it and
/// designed voids are scored for detection.
pub fn measure(
    seg: &LabelVolume,
    reference: Option<&PhantomSpec>,
    smoothing: &SmoothingSpec,
    analysis: &AnalysisConfig,
    ids: (&str, &str, &str, usize),
) -> Result<Measurement> {
    let mut report = MetricsReport {
        sample_id: ids.0.into(),
        printer_id: ids.1.into(),
        setting_id: ids.2.into(),
        setting_index: ids.3,
        cusp_density_xy: cusp_density(seg, Plane::Xy, smoothing)?,
        cusp_density_xz: cusp_density(seg, Plane::Xz, smoothing)?,
        roughness_xy: None,
        roughness_xz: None,
        porosity_pct: porosity(seg)?,
        void_histogram: Vec::new(),
    };
    let (alignment, voids, detectability) = match reference {
        Some(spec) => {
            let (_, truth) = voxelize(spec, seg.spacing_mm())?;
            let truth = embed_labels(&truth, seg.frame())?;
            let al = align(seg, &truth, analysis.align_radius_vox)?;
            report.roughness_xy = Some(roughness(&al.registered, &truth, Plane::Xy, smoothing)? as f64);
            report.roughness_xz = Some(roughness(&al.registered, &truth, Plane::Xz, smoothing)? as f64);
            let voids = extract_voids(&al.registered);
            let det = score_with_bins(&voids, spec, analysis.match_radius_mm, SIZE_BIN_MM)?;
            (Some(al), det.found.clone(), Some(det))
        }
        None => (None, extract_voids(seg), None),
    };
    report.void_histogram = void_histogram(&voids, analysis.histogram_bin_mm);
    report.validate()?;
    Ok(Measurement { report, alignment, voids, detectability })
}

/// Scan geometry for `frame` under `scan`.
pub fn scan_geometry(frame: &Frame, scan: &ScanConfig) -> Result<ScanGeometry> {
    match scan.detector_pitch_mm {
        Some(p) => ScanGeometry::covering(frame, scan.n_angles, p),
        None => ScanGeometry::for_frame(frame, scan.n_angles),
    }
}

/// Projects `grid` (after padding by `scan.pad_vox`) and adds photon noise
/// when a photon count is configured.
pub fn scan_grid(grid: &VoxelGrid, scan: &ScanConfig, seed: u64) -> Result<Sinogram> {
    let grid = grid.padded(scan.pad_vox);
    let geometry = scan_geometry(grid.frame(), scan)?;
    let sino = project_volume(&grid, &geometry)?;
    match scan.photon_count {
        Some(n) => add_photon_noise(&sino, n, stage_seed(seed, 3)),
        None => Ok(sino),
    }
}

/// Synthetic chain for one print: simulate, scan, reconstruct.
pub fn simulate_and_reconstruct(
    spec: &PhantomSpec,
    settings: &PrinterSettings,
    profile: &PrinterProfile,
    spacing_mm: f64,
    scan: &ScanConfig,
    filter: &FilterSpec,
) -> Result<VoxelGrid> {
    let (grid, _) = simulate_print(spec, settings, profile, spacing_mm)?;
    let sino = scan_grid(&grid, scan, settings.seed)?;
    reconstruct_volume(&sino, filter)
}

/// Result of one analysis.
#[derive(Clone, Debug)]
pub struct AnalysisOutcome {
    pub job: AnalysisJob,
    pub threshold: f32,
    pub shift: Option<[i64; 3]>,
    pub measurement: Measurement,
    pub files: Vec<PathBuf>,
}

fn stage<T>(name: &'static str, manifest: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name, manifest: manifest.to_path_buf(), source: Box::new(e) })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Runs one planned analysis into `dir`.
pub fn run_analysis(cfg: &PipelineConfig, job: &AnalysisJob, phantoms: &[(String, PhantomSpec)], dir: &Path) -> Result<AnalysisOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let input = dir.join("input.json");
    write_json(&input, job)?;
    let mut files = vec![input.clone()];
    let persist = cfg.persist_intermediates;
    let find = |id: &str| phantoms.iter().find(|(k, _)| k == id).map(|(_, s)| s);

    let (grid, reference) = match &job.source {
        JobSource::Synthetic => {
            let spec = find(&job.sample_id).ok_or_else(|| Error::Config(format!("unknown sample `{}`", job.sample_id)))?;
            let settings = job.settings.expect("synthetic jobs carry settings");
            let profiles = cfg.profiles()?;
            let profile = profiles.get(job.profile.as_deref().unwrap_or_default())?;
            let (printed, printed_labels) = stage("simulate", &input, simulate_print(spec, &settings, profile, cfg.spacing_mm))?;
            if persist {
                files.extend(write_labels(&dir.join("printed_labels.raw"), &printed_labels)?);
            }
            drop(printed_labels);
            let sino = stage("scan", &input, scan_grid(&printed, &cfg.scan, settings.seed))?;
            drop(printed);
            if persist {
                files.extend(write_sinogram(&dir.join("sinogram.raw"), &sino)?);
            }
            let recon = stage("reconstruct", &input, reconstruct_volume(&sino, &cfg.filter))?;
            (recon, Some(spec))
        }
        JobSource::Stack { dir: stack_dir, reference } => {
            let grid = stage("ingest", &input, ingest_stack(stack_dir))?;
            let reference = match reference {
                Some(id) => Some(find(id).ok_or_else(|| Error::Config(format!("unknown reference sample `{id}`")))?),
                None => None,
            };
            (grid, reference)
        }
    };
    if persist {
        files.extend(write_grid(&dir.join("reconstruction.raw"), &grid)?);
    }
    let (threshold, seg) = stage("segment", &input, segment_grid(&grid))?;
    drop(grid);
    if persist {
        files.extend(write_labels(&dir.join("segmentation.raw"), &seg)?);
    }
    let ids = (job.sample_id.as_str(), job.printer_id.as_str(), job.setting_id.as_str(), job.setting_index);
    let m = stage("metrics", &input, measure(&seg, reference, &cfg.smoothing, &cfg.analysis, ids))?;

    let path = dir.join("metrics.json");
    write_json(&path, &serde_json::json!({ "threshold": threshold, "shift": m.alignment.as_ref().map(|a| a.shift), "report": m.report }))?;
    files.push(path);
    let path = dir.join("voids.csv");
    write_voids_csv(csv_file(&path)?, &m.voids)?;
    files.push(path);
    if let Some(det) = &m.detectability {
        let path = dir.join("detectability.csv");
        write_detectability_csv(csv_file(&path)?, det)?;
        files.push(path);
    }
    Ok(AnalysisOutcome { job: job.clone(), threshold, shift: m.alignment.as_ref().map(|a| a.shift), measurement: m, files })
}

/// Output of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub outcomes: Vec<AnalysisOutcome>,
    pub reports: Vec<MetricsReport>,
    pub rankings: Vec<RankingTable>,
    pub manifest: PathBuf,
}

#[derive(Serialize)]
struct ManifestFile {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct ManifestAnalysis<'a> {
    id: &'a str,
    sample: &'a str,
    printer: &'a str,
    profile: Option<&'a str>,
    setting: &'a str,
    setting_index: usize,
    seed: Option<u64>,
    threshold: f32,
    shift: Option<[i64; 3]>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    mode: Mode,
    seed: u64,
    config: serde_json::Value,
    analyses: Vec<ManifestAnalysis<'a>>,
    files: Vec<ManifestFile>,
}

fn hash_file(path: &Path) -> Result<(u64, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn relative(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

/// Runs every planned analysis, then writes the report bundle and the
/// manifest. Outputs depend only on the configuration (including its seed).
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.resolve_path(&cfg.out_dir);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let echo = out.join("config.toml");
    fs::write(&echo, cfg.to_toml_string()).map_err(|e| Error::io(&echo, e))?;

    let jobs = plan_analyses(cfg)?;
    let phantoms: Vec<(String, PhantomSpec)> = cfg.samples.iter().map(|s| Ok((s.id.clone(), s.resolve(&cfg.base_dir)?))).collect::<Result<_>>()?;
    let analyses = out.join("analyses");
    let results: Vec<Result<AnalysisOutcome>> = jobs.par_iter().map(|j| run_analysis(cfg, j, &phantoms, &analyses.join(&j.id))).collect();
    let outcomes: Vec<AnalysisOutcome> = results.into_iter().collect::<Result<_>>()?;

    let reports: Vec<MetricsReport> = outcomes.iter().map(|o| o.measurement.report.clone()).collect();
    let rankings = rank_all(&reports)?;
    let mut files = vec![echo];
    files.extend(emit_report(&reports, &rankings, &out)?);
    let path = out.join("rankings.json");
    let ranking_json: Vec<serde_json::Value> = rankings
        .iter()
        .map(|t| serde_json::json!({ "metric": t.metric, "plane": t.plane, "rankings": t.rankings }))
        .collect();
    write_json(&path, &ranking_json)?;
    files.push(path);
    for o in &outcomes {
        files.extend(o.files.iter().cloned());
    }

    let mut listed = Vec::with_capacity(files.len());
    for f in &files {
        let (bytes, sha256) = hash_file(f)?;
        listed.push(ManifestFile { path: relative(f, &out), bytes, sha256 });
    }
    listed.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        mode: cfg.mode,
        seed: cfg.seed,
        config: serde_json::to_value(cfg).expect("config serializes"),
        analyses: outcomes
            .iter()
            .map(|o| ManifestAnalysis {
                id: &o.job.id,
                sample: &o.job.sample_id,
                printer: &o.job.printer_id,
                profile: o.job.profile.as_deref(),
                setting: &o.job.setting_id,
                setting_index: o.job.setting_index,
                seed: o.job.settings.map(|s| s.seed),
                threshold: o.threshold,
                shift: o.shift,
            })
            .collect(),
        files: listed,
    };
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    Ok(RunSummary { outcomes, reports, rankings, manifest: manifest_path })
}
