//! `layerscan` command line: individual stages and full configured runs.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 stage failure,
//! 4 I/O failure.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layerscan::fbp::{reconstruct_volume, FilterKind, FilterSpec};
use layerscan::io::{read_grid, read_phantom, read_sinogram, write_grid, write_labels, write_phantom, write_sinogram};
use layerscan::metrology::{read_metrics_csv, rank_settings, write_metrics_csv, write_rankings_csv, Metric, Plane, SmoothingSpec};
use layerscan::pipeline::{
    emit_report, export_stack, ingest_stack, measure, rank_all, run_pipeline, scan_grid, segment_grid, AnalysisConfig, PipelineConfig,
    ScanConfig,
};
use layerscan::printsim::{builtin_profiles, settings_table, simulate_print, ProfileSet};
use layerscan::segmet::{write_detectability_csv, write_voids_csv};
use layerscan::voxphantom::{sample1_spec, sample2_spec, voxelize, PhantomSpec, SAMPLE1_POROSITY, SAMPLE2_POROSITY};
use layerscan::{Error, ErrorClass, Result};
use log::info;

#[derive(Parser)]
#[command(name = "layerscan", version, about = "Simulated CT metrology of 3D-printed samples")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom description and its voxelization.
    Phantom(PhantomArgs),
    /// Simulate a print of a phantom.
    Simulate(SimulateArgs),
    /// Project a volume into a sinogram.
    Scan(ScanArgs),
    /// Reconstruct a sinogram by filtered back projection.
    Recon(ReconArgs),
    /// Segment a reconstruction and measure it.
    Analyze(AnalyzeArgs),
    /// Best setting per printer from a metrics CSV.
    Rank(RankArgs),
    /// Rankings and charts from metrics CSVs.
    Report(ReportArgs),
    /// Full run from a configuration file.
    Run(RunArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Built-in sample: sample1 or sample2.
    #[arg(long, conflicts_with = "phantom")]
    sample: Option<String>,
    /// Phantom description (TOML).
    #[arg(long)]
    phantom: Option<PathBuf>,
}

impl SampleArgs {
    fn resolve(&self) -> Result<PhantomSpec> {
        match (&self.sample, &self.phantom) {
            (_, Some(p)) => read_phantom(p),
            (Some(s), None) if s == "sample1" => sample1_spec(SAMPLE1_POROSITY),
            (Some(s), None) if s == "sample2" => sample2_spec(SAMPLE2_POROSITY),
            (Some(s), None) => Err(Error::Config(format!("unknown sample `{s}` (expected sample1 or sample2)"))),
            (None, None) => Err(Error::Config("give --sample or --phantom".into())),
        }
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long, default_value_t = 0.05)]
    spacing: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sample: SampleArgs,
    /// Printer profile name.
    #[arg(long, default_value = "default")]
    profile: String,
    /// Extra profiles (TOML), merged over the built-in ones.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Setting row (1-6).
    #[arg(long, default_value_t = 1)]
    row: usize,
    #[arg(long, default_value_t = 0.05)]
    spacing: f64,
}

#[derive(Args)]
struct ScanArgs {
    /// Volume to scan (raw f32 with sidecar).
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 720)]
    angles: usize,
    /// Detector pitch in mm (default: voxel spacing).
    #[arg(long)]
    pitch: Option<f64>,
    /// Photons per unattenuated ray; omit for a noiseless scan.
    #[arg(long)]
    photons: Option<f64>,
    /// Empty voxels added around the volume.
    #[arg(long, default_value_t = 4)]
    pad: usize,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long)]
    sinogram: PathBuf,
    /// ramp or ramp_hann.
    #[arg(long, default_value = "ramp")]
    filter: String,
    /// Cutoff as a fraction of Nyquist.
    #[arg(long, default_value_t = 1.0)]
    cutoff: f64,
    /// Also export the reconstruction as a slice stack of this bit depth (8, 16, 32).
    #[arg(long)]
    stack_depth: Option<u8>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Reconstruction (raw f32 with sidecar).
    #[arg(long, conflicts_with = "stack")]
    grid: Option<PathBuf>,
    /// Slice stack directory.
    #[arg(long)]
    stack: Option<PathBuf>,
    /// Reference phantom for registration, roughness and detectability.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "sample")]
    sample_id: String,
    #[arg(long, default_value = "printer")]
    printer_id: String,
    #[arg(long, default_value = "setting")]
    setting_id: String,
    #[arg(long, default_value_t = 0)]
    setting_index: usize,
    #[arg(long, default_value_t = 3)]
    structuring_radius: usize,
    #[arg(long, default_value_t = 0.1)]
    void_exclusion_mm: f64,
    #[arg(long, default_value_t = 0.2)]
    match_radius_mm: f64,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    metrics: PathBuf,
    /// cusp_density, roughness or porosity.
    #[arg(long, default_value = "cusp_density")]
    metric: String,
    /// XY or XZ.
    #[arg(long, default_value = "XY")]
    plane: String,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more metrics CSVs, concatenated in order.
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML); defaults describe the full synthetic run.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn report_written(files: &[PathBuf]) {
    for f in files {
        println!("{}", f.display());
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => {
            let spec = a.sample.resolve()?;
            let out = out_dir(cli)?;
            let (grid, labels) = voxelize(&spec, a.spacing)?;
            let mut files = write_phantom(&out.join("phantom_spec.toml"), &spec)?;
            files.extend(write_grid(&out.join("phantom_grid.raw"), &grid)?);
            files.extend(write_labels(&out.join("phantom_labels.raw"), &labels)?);
            report_written(&files);
        }
        Command::Simulate(a) => {
            let spec = a.sample.resolve()?;
            let mut profiles = builtin_profiles();
            if let Some(p) = &a.profiles {
                profiles = profiles.merged(ProfileSet::load(p)?);
            }
            let profile = profiles.get(&a.profile)?;
            let table = settings_table();
            let settings = table.get(a.row.wrapping_sub(1)).ok_or_else(|| Error::Config(format!("row {} outside 1..={}", a.row, table.len())))?;
            let settings = settings.with_seed(cli.seed.unwrap_or(1));
            let out = out_dir(cli)?;
            info!("simulating {} with profile {} at row {}", spec.label, profile.name, a.row);
            let (grid, labels) = simulate_print(&spec, &settings, profile, a.spacing)?;
            let mut files = write_grid(&out.join("printed.raw"), &grid)?;
            files.extend(write_labels(&out.join("printed_labels.raw"), &labels)?);
            report_written(&files);
        }
        Command::Scan(a) => {
            let grid = read_grid(&a.grid)?;
            let scan = ScanConfig { n_angles: a.angles, detector_pitch_mm: a.pitch, photon_count: a.photons, pad_vox: a.pad };
            let out = out_dir(cli)?;
            info!("projecting {:?} over {} views", grid.dims(), a.angles);
            let sino = scan_grid(&grid, &scan, cli.seed.unwrap_or(1))?;
            report_written(&write_sinogram(&out.join("sinogram.raw"), &sino)?);
        }
        Command::Recon(a) => {
            let spec = FilterSpec { kind: a.filter.parse::<FilterKind>()?, cutoff: a.cutoff };
            spec.validate()?;
            let sino = read_sinogram(&a.sinogram)?;
            let out = out_dir(cli)?;
            let recon = reconstruct_volume(&sino, &spec)?;
            let mut files = write_grid(&out.join("reconstruction.raw"), &recon)?;
            if let Some(depth) = a.stack_depth {
                files.extend(export_stack(&recon, &out.join("stack"), depth, None)?);
            }
            report_written(&files);
        }
        Command::Analyze(a) => {
            let grid = match (&a.grid, &a.stack) {
                (Some(g), None) => read_grid(g)?,
                (None, Some(s)) => ingest_stack(s)?,
                _ => return Err(Error::Config("give exactly one of --grid or --stack".into())),
            };
            let reference = a.reference.as_deref().map(read_phantom).transpose()?;
            let smoothing = SmoothingSpec { structuring_radius_vox: a.structuring_radius, void_exclusion_radius_mm: a.void_exclusion_mm };
            smoothing.validate()?;
            let analysis = AnalysisConfig { match_radius_mm: a.match_radius_mm, ..AnalysisConfig::default() };
            let out = out_dir(cli)?;
            let (threshold, seg) = segment_grid(&grid)?;
            info!("otsu threshold {threshold} /mm");
            let ids = (a.sample_id.as_str(), a.printer_id.as_str(), a.setting_id.as_str(), a.setting_index);
            let m = measure(&seg, reference.as_ref(), &smoothing, &analysis, ids)?;
            let mut files = vec![out.join("metrics.csv"), out.join("voids.csv")];
            write_metrics_csv(create(&files[0])?, std::slice::from_ref(&m.report))?;
            write_voids_csv(create(&files[1])?, &m.voids)?;
            if let Some(det) = &m.detectability {
                let path = out.join("detectability.csv");
                write_detectability_csv(create(&path)?, det)?;
                files.push(path);
            }
            files.extend(write_labels(&out.join("segmentation.raw"), &seg)?);
            report_written(&files);
        }
        Command::Rank(a) => {
            let metric: Metric = a.metric.parse()?;
            let plane: Plane = a.plane.parse()?;
            let file = File::open(&a.metrics).map_err(|e| Error::io(&a.metrics, e))?;
            let reports = read_metrics_csv(BufReader::new(file))?;
            let rankings = rank_settings(&reports, metric, plane)?;
            match &cli.out {
                Some(_) => {
                    let path = out_dir(cli)?.join(format!("rankings_{}_{}.csv", metric.as_str(), plane.as_str().to_ascii_lowercase()));
                    write_rankings_csv(create(&path)?, metric, &rankings)?;
                    report_written(&[path]);
                }
                None => write_rankings_csv(std::io::stdout().lock(), metric, &rankings)?,
            }
        }
        Command::Report(a) => {
            let mut reports = Vec::new();
            for p in &a.metrics {
                let file = File::open(p).map_err(|e| Error::io(p, e))?;
                reports.extend(read_metrics_csv(BufReader::new(file))?);
            }
            let out = out_dir(cli)?;
            let rankings = rank_all(&reports)?;
            report_written(&emit_report(&reports, &rankings, &out)?);
        }
        Command::Run(a) => {
            let mut cfg = match &a.config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(out) = &cli.out {
                // command-line paths are relative to the working directory
                cfg.out_dir = std::env::current_dir().map_err(|e| Error::io(".", e))?.join(out);
            }
            let summary = run_pipeline(&cfg)?;
            info!("{} analyses", summary.outcomes.len());
            println!("{}", summary.manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Stage => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}
