//! Run configuration, read from TOML.
//!
//! Every field has a default, so an empty file describes the full synthetic
//! experiment: both built-in samples, all six table settings, three FDM
//! printers and one reference printer, scanned with 720 noiseless views.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbp::FilterSpec;
use crate::io::read_phantom;
use crate::metrology::SmoothingSpec;
use crate::printsim::{builtin_profiles, settings_table, ProfileSet};
use crate::voxphantom::{sample1_spec, sample2_spec, PhantomSpec, SAMPLE1_POROSITY, SAMPLE2_POROSITY};
use crate::xray::DEFAULT_ANGLES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Phantom, simulated print, scan, reconstruction, analysis.
    #[default]
    Synthetic,
    /// Analysis of reconstructed slice stacks from disk.
    Ingest,
}

/// One sample body. Exactly one of `builtin`, `phantom_file`, `phantom` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSource {
    pub id: String,
    /// `sample1` or `sample2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
}

impl SampleSource {
    pub fn builtin(id: &str, name: &str) -> Self {
        SampleSource { id: id.into(), builtin: Some(name.into()), phantom_file: None, phantom: None }
    }

    pub fn inline(id: &str, spec: PhantomSpec) -> Self {
        SampleSource { id: id.into(), builtin: None, phantom_file: None, phantom: Some(spec) }
    }

    /// Resolves the phantom; relative files are taken from `base`.
    pub fn resolve(&self, base: &Path) -> Result<PhantomSpec> {
        match (&self.builtin, &self.phantom_file, &self.phantom) {
            (Some(name), None, None) => match name.as_str() {
                "sample1" => sample1_spec(SAMPLE1_POROSITY),
                "sample2" => sample2_spec(SAMPLE2_POROSITY),
                other => Err(Error::Config(format!("sample `{}`: unknown builtin `{other}` (expected sample1 or sample2)", self.id))),
            },
            (None, Some(path), None) => read_phantom(&base.join(path)),
            (None, None, Some(spec)) => {
                spec.validate()?;
                Ok(spec.clone())
            }
            _ => Err(Error::Config(format!("sample `{}` needs exactly one of builtin, phantom_file, phantom", self.id))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrinterEntry {
    pub id: String,
    /// Name of a printer profile (built-in or from `profile_file`).
    pub profile: String,
}

/// The single-setting reference printer analysed once per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencePrinter {
    pub id: String,
    pub profile: String,
    pub setting_id: String,
    /// Table row (1-based) providing layer height and speed.
    #[serde(default = "one")]
    pub row: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub n_angles: usize,
    /// Defaults to the voxel spacing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector_pitch_mm: Option<f64>,
    /// Unattenuated photons per detector bin; absent means noiseless.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub photon_count: Option<f64>,
    /// Empty voxels added around the printed volume before scanning.
    pub pad_vox: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { n_angles: DEFAULT_ANGLES, detector_pitch_mm: None, photon_count: None, pad_vox: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Largest centroid distance at which a found void matches a designed one.
    pub match_radius_mm: f64,
    /// Half-width of the integer-shift registration search.
    pub align_radius_vox: usize,
    pub histogram_bin_mm: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { match_radius_mm: 0.2, align_radius_vox: 2, histogram_bin_mm: 0.1 }
    }
}

/// One reconstructed stack to analyse in ingest mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestEntry {
    pub stack_dir: PathBuf,
    pub sample_id: String,
    pub printer_id: String,
    pub setting_id: String,
    #[serde(default)]
    pub setting_index: usize,
    /// Id of a configured sample whose phantom is the roughness reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub samples: Vec<SampleSource>,
    /// Table rows (1-based) printed by every FDM printer.
    pub settings: Vec<usize>,
    pub printers: Vec<PrinterEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferencePrinter>,
    /// Extra printer profiles, merged over the built-in ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile_file: Option<PathBuf>,
    pub spacing_mm: f64,
    pub scan: ScanConfig,
    pub filter: FilterSpec,
    pub smoothing: SmoothingSpec,
    pub analysis: AnalysisConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Also write volumes, sinograms and label maps of every analysis.
    pub persist_intermediates: bool,
    pub ingest: Vec<IngestEntry>,
    /// Directory relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Synthetic,
            samples: vec![SampleSource::builtin("Sample 1", "sample1"), SampleSource::builtin("Sample 2", "sample2")],
            settings: (1..=6).collect(),
            printers: vec![
                PrinterEntry { id: "FDM-A".into(), profile: "fdm-fine".into() },
                PrinterEntry { id: "FDM-B".into(), profile: "fdm-mid".into() },
                PrinterEntry { id: "FDM-C".into(), profile: "fdm-coarse".into() },
            ],
            reference: Some(ReferencePrinter { id: "MJP".into(), profile: "mjp-ref".into(), setting_id: "XHD mode".into(), row: 1 }),
            profile_file: None,
            spacing_mm: 0.05,
            scan: ScanConfig::default(),
            filter: FilterSpec::default(),
            smoothing: SmoothingSpec::default(),
            analysis: AnalysisConfig::default(),
            seed: 1,
            out_dir: PathBuf::from("out"),
            persist_intermediates: false,
            ingest: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Built-in profiles, overridden by `profile_file` entries.
    pub fn profiles(&self) -> Result<ProfileSet> {
        let set = builtin_profiles();
        match &self.profile_file {
            Some(p) => Ok(set.merged(ProfileSet::load(&self.resolve_path(p))?)),
            None => Ok(set),
        }
    }

    pub fn sample(&self, id: &str) -> Result<&SampleSource> {
        self.samples.iter().find(|s| s.id == id).ok_or_else(|| Error::Config(format!("no sample with id `{id}`")))
    }

    /// Checks that every name resolves and every parameter meets the
    /// preconditions of the stage that consumes it.
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::Config(format!("spacing_mm must be > 0, got {}", self.spacing_mm)));
        }
        if self.scan.n_angles < 2 {
            return Err(Error::Config(format!("scan.n_angles must be >= 2, got {}", self.scan.n_angles)));
        }
        if let Some(p) = self.scan.detector_pitch_mm {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("scan.detector_pitch_mm must be > 0, got {p}")));
            }
        }
        if let Some(n) = self.scan.photon_count {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Config(format!("scan.photon_count must be > 0, got {n}")));
            }
        }
        self.filter.validate()?;
        self.smoothing.validate()?;
        let a = &self.analysis;
        if !(a.match_radius_mm > 0.0) || !(a.histogram_bin_mm > 0.0) {
            return Err(Error::Config("analysis.match_radius_mm and analysis.histogram_bin_mm must be > 0".into()));
        }
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("sample ids must be unique".into()));
        }
        for s in &self.samples {
            s.resolve(&self.base_dir).map_err(|e| Error::Config(format!("sample `{}`: {e}", s.id)))?;
        }
        let profiles = self.profiles()?;
        let rows = settings_table().len();
        match self.mode {
            Mode::Synthetic => {
                if self.samples.is_empty() {
                    return Err(Error::Config("synthetic mode needs at least one sample".into()));
                }
                if self.printers.is_empty() && self.reference.is_none() {
                    return Err(Error::Config("no printers configured".into()));
                }
                if let Some(bad) = self.settings.iter().find(|r| **r == 0 || **r > rows) {
                    return Err(Error::Config(format!("setting row {bad} outside 1..={rows}")));
                }
                if !self.printers.is_empty() && self.settings.is_empty() {
                    return Err(Error::Config("printers configured but no settings".into()));
                }
                let mut pids: Vec<&str> = self.printers.iter().map(|p| p.id.as_str()).chain(self.reference.iter().map(|r| r.id.as_str())).collect();
                pids.sort_unstable();
                if pids.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Config("printer ids must be unique".into()));
                }
                for p in &self.printers {
                    profiles.get(&p.profile)?;
                }
                if let Some(r) = &self.reference {
                    profiles.get(&r.profile)?;
                    if r.row == 0 || r.row > rows {
                        return Err(Error::Config(format!("reference row {} outside 1..={rows}", r.row)));
                    }
                }
            }
            Mode::Ingest => {
                if self.ingest.is_empty() {
                    return Err(Error::Config("ingest mode needs at least one [[ingest]] entry".into()));
                }
                for e in &self.ingest {
                    if let Some(r) = &e.reference {
                        self.sample(r)?;
                    }
                }
            }
        }
        Ok(())
    }
}
