//! Simulated printing: degrades a ground-truth label volume into an
//! "as printed" one. Stages, applied in this order by [`simulate_print`]:
//!
//! 1. layer quantization (stair-stepping along z),
//! 2. outer-surface roughness (correlated normal displacement),
//! 3. under-extrusion pores along a serpentine raster path.
//!
//! The mapping from printer settings to defect magnitudes is an affine
//! printer profile, loaded from TOML or taken from [`builtin_profiles`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{convolve_axis, edt_squared, gaussian_kernel};
use crate::volume::{Dims, Label, LabelVolume, Vec3, VoxelGrid};
use crate::voxphantom::{voxelize, PhantomSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfillPattern {
    #[default]
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrinterSettings {
    pub layer_height_um: f64,
    pub nozzle_speed_mm_s: f64,
    pub infill_density_pct: f64,
    #[serde(default)]
    pub infill_pattern: InfillPattern,
    #[serde(default)]
    pub seed: u64,
}

impl PrinterSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.layer_height_um > 0.0) {
            return Err(Error::Invalid(format!("layer height must be > 0, got {}", self.layer_height_um)));
        }
        if !(self.nozzle_speed_mm_s > 0.0) {
            return Err(Error::Invalid(format!("nozzle speed must be > 0, got {}", self.nozzle_speed_mm_s)));
        }
        if !(self.infill_density_pct > 0.0 && self.infill_density_pct <= 100.0) {
            return Err(Error::Invalid(format!("infill density must be in (0, 100], got {}", self.infill_density_pct)));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// The six experimental settings, in table order (rows 1..=6).
pub fn settings_table() -> Vec<PrinterSettings> {
    [(50.0, 30.0), (55.0, 30.0), (60.0, 30.0), (65.0, 30.0), (70.0, 30.0), (50.0, 35.0)]
        .into_iter()
        .map(|(layer, speed)| PrinterSettings {
            layer_height_um: layer,
            nozzle_speed_mm_s: speed,
            infill_density_pct: 100.0,
            infill_pattern: InfillPattern::Grid,
            seed: 0,
        })
        .collect()
}

/// Ordinal name of a 1-based setting row ("First" .. "Sixth").
pub fn setting_ordinal(row: usize) -> String {
    const NAMES: [&str; 10] = ["First", "Second", "Third", "Fourth", "Fifth", "Sixth", "Seventh", "Eighth", "Ninth", "Tenth"];
    match row {
        1..=10 => NAMES[row - 1].to_string(),
        _ => format!("Setting {row}"),
    }
}

/// Defect magnitudes for one print.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefectModel {
    /// Pore events per mm of deposited raster path.
    pub underextrusion_rate: f64,
    pub pore_radius_mm: f64,
    /// RMS outward displacement of the outer wall.
    pub surface_amplitude_mm: f64,
    /// Lateral correlation length of the wall displacement field.
    pub surface_correlation_mm: f64,
    /// Spacing between neighbouring raster lines.
    pub bead_width_mm: f64,
    /// Spacing between raster layers.
    pub layer_height_mm: f64,
}

impl DefectModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.underextrusion_rate,
            self.pore_radius_mm,
            self.surface_amplitude_mm,
            self.surface_correlation_mm,
            self.bead_width_mm,
            self.layer_height_mm,
        ];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invalid(format!("defect model fields must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Affine map from printer settings to a [`DefectModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrinterProfile {
    pub name: String,
    /// Effective deposited layer height as a multiple of the requested one;
    /// zero disables stair-stepping.
    #[serde(default)]
    pub layer_scale: f64,
    #[serde(default)]
    pub amplitude_base_mm: f64,
    #[serde(default)]
    pub amplitude_per_um: f64,
    #[serde(default)]
    pub correlation_mm: f64,
    #[serde(default)]
    pub underextrusion_base_per_mm: f64,
    #[serde(default)]
    pub underextrusion_per_mm_s: f64,
    #[serde(default)]
    pub pore_radius_mm: f64,
    #[serde(default = "default_bead_width")]
    pub bead_width_mm: f64,
}

fn default_bead_width() -> f64 {
    0.4
}

impl PrinterProfile {
    pub fn zero(name: impl Into<String>) -> Self {
        PrinterProfile {
            name: name.into(),
            layer_scale: 0.0,
            amplitude_base_mm: 0.0,
            amplitude_per_um: 0.0,
            correlation_mm: 0.0,
            underextrusion_base_per_mm: 0.0,
            underextrusion_per_mm_s: 0.0,
            pore_radius_mm: 0.0,
            bead_width_mm: default_bead_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = [
            self.layer_scale,
            self.amplitude_base_mm,
            self.amplitude_per_um,
            self.correlation_mm,
            self.underextrusion_base_per_mm,
            self.underextrusion_per_mm_s,
            self.pore_radius_mm,
            self.bead_width_mm,
        ];
        if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("profile `{}` has negative or non-finite coefficients", self.name)));
        }
        if self.layer_scale > 0.0 && self.layer_scale < 1.0 {
            return Err(Error::Config(format!("profile `{}`: layer_scale must be 0 or >= 1", self.name)));
        }
        Ok(())
    }
}

/// Named profile collection, as stored in a profile file:
///
/// ```toml
/// [[profile]]
/// name = "default"
/// layer_scale = 1.0
/// amplitude_per_um = 0.0006
/// correlation_mm = 0.15
/// underextrusion_per_mm_s = 0.004
/// pore_radius_mm = 0.12
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    #[serde(rename = "profile", default)]
    pub profiles: Vec<PrinterProfile>,
}

impl ProfileSet {
    pub fn get(&self, name: &str) -> Result<&PrinterProfile> {
        self.profiles.iter().find(|p| p.name == name).ok_or_else(|| Error::UnknownProfile(name.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let set: ProfileSet = toml::from_str(text).map_err(|e| Error::Config(format!("profile file: {e}")))?;
        for p in &set.profiles {
            p.validate()?;
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("profile set serializes")
    }

    /// Profiles from `other` replace same-named ones here.
    pub fn merged(mut self, other: ProfileSet) -> Self {
        for p in other.profiles {
            match self.profiles.iter_mut().find(|q| q.name == p.name) {
                Some(q) => *q = p,
                None => self.profiles.push(p),
            }
        }
        self
    }
}

/// Built-in profiles: `zero` (every stage is the identity), `default`, three
/// extrusion printers of decreasing quality (`fdm-fine`, `fdm-mid`,
/// `fdm-coarse`), a jetting reference (`mjp-ref`) and `lowres`, whose coarse
/// effective layers wipe out the smallest cavities.
pub fn builtin_profiles() -> ProfileSet {
    let fdm = |name: &str, amp_per_um: f64, per_speed: f64, pore: f64| PrinterProfile {
        name: name.into(),
        layer_scale: 1.0,
        amplitude_base_mm: 0.0,
        amplitude_per_um: amp_per_um,
        correlation_mm: 0.15,
        underextrusion_base_per_mm: 0.0,
        underextrusion_per_mm_s: per_speed,
        pore_radius_mm: pore,
        bead_width_mm: 0.4,
    };
    ProfileSet {
        profiles: vec![
            PrinterProfile::zero("zero"),
            fdm("default", 0.0006, 0.004, 0.12),
            fdm("fdm-fine", 0.0005, 0.003, 0.12),
            fdm("fdm-mid", 0.0007, 0.005, 0.12),
            fdm("fdm-coarse", 0.0009, 0.008, 0.12),
            PrinterProfile {
                name: "mjp-ref".into(),
                layer_scale: 0.0,
                amplitude_base_mm: 0.01,
                amplitude_per_um: 0.0,
                correlation_mm: 0.1,
                underextrusion_base_per_mm: 0.0,
                underextrusion_per_mm_s: 0.0,
                pore_radius_mm: 0.0,
                bead_width_mm: 0.4,
            },
            PrinterProfile {
                name: "lowres".into(),
                layer_scale: 6.0,
                amplitude_base_mm: 0.0,
                amplitude_per_um: 0.0004,
                correlation_mm: 0.15,
                underextrusion_base_per_mm: 0.0,
                underextrusion_per_mm_s: 0.0,
                pore_radius_mm: 0.0,
                bead_width_mm: 0.4,
            },
        ],
    }
}

/// Evaluates the profile's affine map at `settings`. Wall amplitude grows with
/// layer height and pore rate with nozzle speed.
pub fn defect_model_for(settings: &PrinterSettings, profile: &PrinterProfile) -> Result<DefectModel> {
    settings.validate()?;
    profile.validate()?;
    let model = DefectModel {
        underextrusion_rate: profile.underextrusion_base_per_mm + profile.underextrusion_per_mm_s * settings.nozzle_speed_mm_s,
        pore_radius_mm: profile.pore_radius_mm,
        surface_amplitude_mm: profile.amplitude_base_mm + profile.amplitude_per_um * settings.layer_height_um,
        surface_correlation_mm: profile.correlation_mm,
        bead_width_mm: profile.bead_width_mm,
        layer_height_mm: settings.layer_height_um * 1e-3 * profile.layer_scale.max(1.0),
    };
    model.validate()?;
    Ok(model)
}

/// Number of z-slices sharing one cross-section for a given layer height.
pub fn band_slices(layer_height_um: f64, spacing_mm: f64) -> Result<usize> {
    let pitch_um = spacing_mm * 1000.0;
    if !(layer_height_um > 0.0) || layer_height_um < pitch_um * (1.0 - 1e-9) {
        return Err(Error::Resolution(format!(
            "layer height {layer_height_um} um is finer than the voxel pitch {pitch_um} um"
        )));
    }
    Ok(((layer_height_um / pitch_um) - 1e-9).ceil().max(1.0) as usize)
}

/// Stair-steps the volume: every band of `ceil(layer / pitch)` z-slices,
/// counted from z = 0, takes the per-column majority label of the band. Ties
/// go to the label found first from the bottom of the band.
pub fn apply_layer_quantization(labels: &LabelVolume, layer_height_um: f64) -> Result<LabelVolume> {
    let band = band_slices(layer_height_um, labels.spacing_mm())?;
    let mut out = labels.clone();
    if band == 1 {
        return Ok(out);
    }
    let d = labels.dims();
    let plane = d.slice_len();
    let src = labels.labels();
    let mut counts = vec![[0u16; 3]; plane];
    let mut z0 = 0;
    while z0 < d.nz {
        let z1 = (z0 + band).min(d.nz);
        counts.iter_mut().for_each(|c| *c = [0; 3]);
        for z in z0..z1 {
            for (xy, c) in counts.iter_mut().enumerate() {
                c[src[z * plane + xy] as usize] += 1;
            }
        }
        let dst = out.labels_mut();
        for (xy, c) in counts.iter().enumerate() {
            let max = *c.iter().max().unwrap();
            let winner = (z0..z1).map(|z| src[z * plane + xy]).find(|l| c[*l as usize] == max).unwrap();
            for z in z0..z1 {
                dst[z * plane + xy] = winner;
            }
        }
        z0 = z1;
    }
    Ok(out)
}

/// Independent sub-seed for one stage.
pub(crate) fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Displaces the outer wall of the body (all non-background voxels) along its
/// normal by `h`, a zero-mean Gaussian random field with RMS
/// `surface_amplitude_mm` whose correlation decays as `exp(-(r / l)^2)` for
/// `l = surface_correlation_mm`. `h` is clipped to three RMS so nothing moves
/// farther than `3 * amplitude`. Only material/background voxels flip; voids
/// are never touched.
pub fn apply_surface_noise(labels: &LabelVolume, model: &DefectModel, seed: u64) -> Result<LabelVolume> {
    model.validate()?;
    let amp = model.surface_amplitude_mm;
    if amp == 0.0 {
        return Ok(labels.clone());
    }
    let Some((lo, hi)) = labels.body_bbox() else {
        return Ok(labels.clone());
    };
    let s = labels.spacing_mm();
    let min_extent = (0..3).map(|a| (hi[a] - lo[a] + 1) as f64 * s).fold(f64::INFINITY, f64::min);
    if amp > min_extent / 2.0 {
        return Err(Error::DegenerateGeometry(format!(
            "surface amplitude {amp} mm exceeds half the body's smallest dimension ({min_extent} mm)"
        )));
    }
    let d = labels.dims();
    let margin = (3.0 * amp / s).ceil() as usize + 1;
    let blo: [usize; 3] = std::array::from_fn(|a| lo[a].saturating_sub(margin));
    let bhi: [usize; 3] = std::array::from_fn(|a| (hi[a] + margin).min(d.as_array()[a] - 1));
    let sub = Dims::new(bhi[0] - blo[0] + 1, bhi[1] - blo[1] + 1, bhi[2] - blo[2] + 1);
    let at = |x: usize, y: usize, z: usize| d.index(x + blo[0], y + blo[1], z + blo[2]);

    let body: Vec<bool> = (0..sub.len())
        .map(|i| {
            let (x, y, z) = sub.coords(i);
            labels.labels()[at(x, y, z)].is_body()
        })
        .collect();
    let outside: Vec<bool> = body.iter().map(|b| !b).collect();
    let d_in = edt_squared(&outside, sub);
    let d_out = edt_squared(&body, sub);
    let field = correlated_field(sub, model.surface_correlation_mm / s, seed);

    let mut out = labels.clone();
    let dst = out.labels_mut();
    for i in 0..sub.len() {
        let signed = if body[i] { -(d_in[i].sqrt() as f64 - 0.5) * s } else { (d_out[i].sqrt() as f64 - 0.5) * s };
        if signed.abs() > 3.0 * amp + s {
            continue;
        }
        let h = (amp * field[i] as f64).clamp(-3.0 * amp, 3.0 * amp);
        let (x, y, z) = sub.coords(i);
        let j = at(x, y, z);
        let inside_now = signed < h;
        match dst[j] {
            Label::Material if !inside_now => dst[j] = Label::Background,
            Label::Background if inside_now => dst[j] = Label::Material,
            _ => {}
        }
    }
    Ok(out)
}

/// Unit-variance Gaussian random field on `dims` with correlation length
/// `corr_vox` voxels (white noise when zero).
fn correlated_field(dims: Dims, corr_vox: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = gaussian_kernel(corr_vox / 2.0);
    let r = kernel.len() / 2;
    let big = Dims::new(dims.nx + 2 * r, dims.ny + 2 * r, dims.nz + 2 * r);
    let mut noise: Vec<f32> = (0..big.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    if r > 0 {
        for axis in 0..3 {
            noise = convolve_axis(&noise, big, axis, &kernel);
        }
    }
    let gain: f64 = kernel.iter().map(|w| w * w).sum::<f64>().powi(3).sqrt();
    let scale = (1.0 / gain) as f32;
    let mut out = Vec::with_capacity(dims.len());
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            let start = big.index(r, y + r, z + r);
            out.extend(noise[start..start + dims.nx].iter().map(|v| v * scale));
        }
    }
    out
}

/// A straight stretch of deposited raster path inside material.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSegment {
    pub start: Vec3,
    pub end: Vec3,
}

impl PathSegment {
    pub fn length(&self) -> f64 {
        (0..3).map(|a| (self.end[a] - self.start[a]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn point_at(&self, dist: f64) -> Vec3 {
        let t = dist / self.length();
        std::array::from_fn(|a| self.start[a] + t * (self.end[a] - self.start[a]))
    }
}

/// Serpentine grid-infill path through the material: layers every
/// `layer_height_mm` from the bottom of the body, raster lines every
/// `bead_width_mm`, alternating between x- and y-directed layers; consecutive
/// lines run in opposite directions. Only runs over material voxels count.
pub fn raster_path(labels: &LabelVolume, model: &DefectModel) -> Vec<PathSegment> {
    let mut path = Vec::new();
    if model.bead_width_mm <= 0.0 || model.layer_height_mm <= 0.0 {
        return path;
    }
    let Some((lo, hi)) = labels.body_bbox() else {
        return path;
    };
    let f = labels.frame();
    let s = f.spacing_mm;
    let lo_mm: Vec3 = std::array::from_fn(|a| f.origin_mm[a] + lo[a] as f64 * s);
    let hi_mm: Vec3 = std::array::from_fn(|a| f.origin_mm[a] + (hi[a] + 1) as f64 * s);
    let d = labels.dims();
    let idx = |a: usize, v: f64| ((v - f.origin_mm[a]) / s).floor() as usize;

    let mut k = 0usize;
    loop {
        let z = lo_mm[2] + (k as f64 + 0.5) * model.layer_height_mm;
        if z >= hi_mm[2] {
            break;
        }
        let iz = idx(2, z);
        // even layers run along x, odd layers along y
        let (run_axis, step_axis) = if k % 2 == 0 { (0, 1) } else { (1, 0) };
        let mut j = 0usize;
        loop {
            let c = lo_mm[step_axis] + (j as f64 + 0.5) * model.bead_width_mm;
            if c >= hi_mm[step_axis] {
                break;
            }
            let ic = idx(step_axis, c);
            let n = d.as_array()[run_axis];
            let mut runs = Vec::new();
            let mut start: Option<usize> = None;
            for i in 0..=n {
                let mat = i < n && {
                    let (x, y) = if run_axis == 0 { (i, ic) } else { (ic, i) };
                    labels.get(x, y, iz) == Label::Material
                };
                match (mat, start) {
                    (true, None) => start = Some(i),
                    (false, Some(b)) => {
                        runs.push((b, i));
                        start = None;
                    }
                    _ => {}
                }
            }
            let point = |run_pos: f64| -> Vec3 {
                let mut p = [0.0; 3];
                p[run_axis] = run_pos;
                p[step_axis] = c;
                p[2] = z;
                p
            };
            let coord = |i: usize| f.origin_mm[run_axis] + i as f64 * s;
            if j % 2 == 0 {
                for (b, e) in runs {
                    path.push(PathSegment { start: point(coord(b)), end: point(coord(e)) });
                }
            } else {
                for (b, e) in runs.into_iter().rev() {
                    path.push(PathSegment { start: point(coord(e)), end: point(coord(b)) });
                }
            }
            j += 1;
        }
        k += 1;
    }
    path
}

/// Places pores as a Poisson process of rate `underextrusion_rate` along the
/// raster path and carves a ball of radius `pore_radius_mm` around each one
/// (material voxels only). Pores whose ball would come within one voxel of
/// the outside are dropped, so under-extrusion never opens the shell.
/// Returns the new volume and the centers of the carved pores.
pub fn insert_pores(labels: &LabelVolume, model: &DefectModel, seed: u64) -> Result<(LabelVolume, Vec<Vec3>)> {
    model.validate()?;
    let mut out = labels.clone();
    if model.underextrusion_rate == 0.0 {
        return Ok((out, Vec::new()));
    }
    let path = raster_path(labels, model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(model.underextrusion_rate).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut centers = Vec::new();
    let mut to_next: f64 = rng.sample(exp);
    for seg in &path {
        let len = seg.length();
        let mut pos = 0.0;
        while pos + to_next <= len {
            pos += to_next;
            centers.push(seg.point_at(pos));
            to_next = rng.sample(exp);
        }
        to_next -= len - pos;
    }

    let r = model.pore_radius_mm;
    if r > 0.0 {
        let f = *labels.frame();
        let d = f.dims;
        let s = f.spacing_mm;
        // pores stay sealed: a ball must keep one voxel of material between
        // itself and the outside
        let outside: Vec<bool> = labels.labels().iter().map(|l| *l == Label::Background).collect();
        let to_outside = edt_squared(&outside, d);
        let clearance = (r / s + 1.0).powi(2) as f32;
        centers.retain(|c| {
            let i: [usize; 3] = std::array::from_fn(|a| (((c[a] - f.origin_mm[a]) / s).floor().max(0.0) as usize).min(d.as_array()[a] - 1));
            to_outside[d.index(i[0], i[1], i[2])] >= clearance
        });
        for c in &centers {
            let range = |a: usize| {
                let lo = ((c[a] - r - f.origin_mm[a]) / s - 1.0).floor().max(0.0) as usize;
                let hi = (((c[a] + r - f.origin_mm[a]) / s + 1.0).ceil().max(0.0) as usize).min(d.as_array()[a]);
                lo..hi
            };
            for z in range(2) {
                for y in range(1) {
                    for x in range(0) {
                        let p = f.voxel_center(x, y, z);
                        let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                        if d2 < r * r && out.get(x, y, z) == Label::Material {
                            out.set(x, y, z, Label::Void);
                        }
                    }
                }
            }
        }
    }
    Ok((out, centers))
}

pub fn apply_underextrusion(labels: &LabelVolume, model: &DefectModel, seed: u64) -> Result<LabelVolume> {
    insert_pores(labels, model, seed).map(|(l, _)| l)
}

/// Voxelize, stair-step, roughen and add pores, in that order. When the wall
/// roughness is non-zero the volume is first padded by `ceil(3a / pitch) + 1`
/// voxels so outward bumps stay inside the grid.
pub fn simulate_print(
    spec: &PhantomSpec,
    settings: &PrinterSettings,
    profile: &PrinterProfile,
    spacing_mm: f64,
) -> Result<(VoxelGrid, LabelVolume)> {
    let model = defect_model_for(settings, profile)?;
    let (grid, mut labels) = voxelize(spec, spacing_mm)?;
    let mut changed = false;
    if profile.layer_scale > 0.0 {
        labels = apply_layer_quantization(&labels, settings.layer_height_um * profile.layer_scale)?;
        changed = true;
    }
    if model.surface_amplitude_mm > 0.0 {
        let margin = (3.0 * model.surface_amplitude_mm / spacing_mm).ceil() as usize + 1;
        labels = apply_surface_noise(&labels.padded(margin), &model, stage_seed(settings.seed, 1))?;
        changed = true;
    }
    if model.underextrusion_rate > 0.0 {
        labels = apply_underextrusion(&labels, &model, stage_seed(settings.seed, 2))?;
        changed = true;
    }
    if !changed {
        return Ok((grid, labels));
    }
    let grid = VoxelGrid::from_labels(&labels, spec.material_mu as f32);
    Ok((grid, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Frame;
    use crate::voxphantom::VoidSpec;

    fn block(dims: Dims, lo: [usize; 3], hi: [usize; 3], spacing: f64) -> LabelVolume {
        let f = Frame::new(dims, spacing, [0.0; 3]).unwrap();
        let mut lv = LabelVolume::filled(f, Label::Background);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    lv.set(x, y, z, Label::Material);
                }
            }
        }
        lv
    }

    #[test]
    fn table_rows() {
        let t = settings_table();
        assert_eq!(t.len(), 6);
        assert_eq!((t[0].layer_height_um, t[0].nozzle_speed_mm_s, t[0].infill_density_pct), (50.0, 30.0, 100.0));
        assert_eq!((t[4].layer_height_um, t[4].nozzle_speed_mm_s), (70.0, 30.0));
        assert_eq!((t[5].layer_height_um, t[5].nozzle_speed_mm_s), (50.0, 35.0));
        assert!(t.iter().all(|s| s.infill_pattern == InfillPattern::Grid));
    }

    #[test]
    fn settings_validation() {
        let mut s = settings_table()[0];
        s.infill_density_pct = 0.0;
        assert!(s.validate().is_err());
        s.infill_density_pct = 100.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn defect_model_monotone_and_zero() {
        let set = builtin_profiles();
        let t = settings_table();
        for p in &set.profiles {
            let a1 = defect_model_for(&t[0], p).unwrap();
            let a5 = defect_model_for(&t[4], p).unwrap();
            let a6 = defect_model_for(&t[5], p).unwrap();
            assert!(a1.surface_amplitude_mm <= a5.surface_amplitude_mm);
            assert!(a1.underextrusion_rate <= a6.underextrusion_rate);
        }
        let z = defect_model_for(&t[3], set.get("zero").unwrap()).unwrap();
        assert_eq!((z.underextrusion_rate, z.pore_radius_mm, z.surface_amplitude_mm, z.surface_correlation_mm), (0.0, 0.0, 0.0, 0.0));
        let d = set.get("default").unwrap();
        // row 1 vs row 5 under the default affine map: 0.0006 * 50 < 0.0006 * 70
        assert!(defect_model_for(&t[0], d).unwrap().surface_amplitude_mm < defect_model_for(&t[4], d).unwrap().surface_amplitude_mm);
        assert!(matches!(set.get("nope"), Err(Error::UnknownProfile(_))));
    }

    #[test]
    fn profile_file_roundtrip() {
        let set = builtin_profiles();
        let back = ProfileSet::from_toml_str(&set.to_toml_string()).unwrap();
        assert_eq!(back, set);
        let bad = "[[profile]]\nname = \"x\"\namplitude_per_um = -1.0\n";
        assert!(ProfileSet::from_toml_str(bad).is_err());
    }

    #[test]
    fn quantization_identity_and_errors() {
        let lv = block(Dims::new(8, 8, 8), [2, 2, 1], [6, 6, 7], 0.05);
        assert_eq!(apply_layer_quantization(&lv, 50.0).unwrap(), lv);
        assert!(matches!(apply_layer_quantization(&lv, 40.0), Err(Error::Resolution(_))));
        let empty = LabelVolume::filled(*lv.frame(), Label::Background);
        assert_eq!(apply_layer_quantization(&empty, 200.0).unwrap(), empty);
        assert_eq!(band_slices(55.0, 0.05).unwrap(), 2);
        assert_eq!(band_slices(70.0, 0.05).unwrap(), 2);
    }

    #[test]
    fn quantization_staircase_on_diagonal_plane() {
        // material where x + z < 16 on a 16^3 grid, bands of 4 slices
        let f = Frame::new(Dims::new(16, 16, 16), 0.05, [0.0; 3]).unwrap();
        let mut lv = LabelVolume::filled(f, Label::Background);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    if x + z < 16 {
                        lv.set(x, y, z, Label::Material);
                    }
                }
            }
        }
        let q = apply_layer_quantization(&lv, 200.0).unwrap();
        // brute-force oracle: per band, per column, majority with bottom-first ties
        for b in 0..4 {
            for x in 0..16 {
                let n_mat = (4 * b..4 * b + 4).filter(|z| x + z < 16).count();
                let bottom = if x + 4 * b < 16 { Label::Material } else { Label::Background };
                let expect = match n_mat {
                    3 | 4 => Label::Material,
                    0 | 1 => Label::Background,
                    _ => bottom,
                };
                for z in 4 * b..4 * b + 4 {
                    assert_eq!(q.get(x, 5, z), expect);
                }
            }
        }
        // staircase: the material edge moves by exactly 4 voxels per band
        let edge = |b: usize| (0..16).filter(|&x| q.get(x, 0, 4 * b) == Label::Material).count();
        for b in 1..4 {
            assert_eq!(edge(b - 1) - edge(b), 4);
        }
    }

    #[test]
    fn surface_noise_identity_reproducible_and_bounded() {
        let lv = block(Dims::new(40, 40, 40), [10, 10, 10], [30, 30, 30], 0.05);
        let mut m = DefectModel { surface_amplitude_mm: 0.0, surface_correlation_mm: 0.2, ..Default::default() };
        assert_eq!(apply_surface_noise(&lv, &m, 1).unwrap(), lv);
        m.surface_amplitude_mm = 0.1;
        let a = apply_surface_noise(&lv, &m, 7).unwrap();
        let b = apply_surface_noise(&lv, &m, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, lv);
        // nothing changes outside the bbox dilated by 3 * amplitude
        let reach = (3.0 * 0.1 / 0.05f64).ceil() as usize;
        for i in 0..a.labels().len() {
            let (x, y, z) = a.dims().coords(i);
            let far = [x, y, z].iter().any(|&c| c + reach < 10 || c >= 30 + reach);
            if far {
                assert_eq!(a.labels()[i], Label::Background);
            }
        }
        m.surface_amplitude_mm = 0.6;
        assert!(matches!(apply_surface_noise(&lv, &m, 1), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn surface_noise_leaves_voids_alone() {
        let mut lv = block(Dims::new(30, 30, 30), [5, 5, 5], [25, 25, 25], 0.05);
        for z in 13..17 {
            for y in 13..17 {
                for x in 6..10 {
                    lv.set(x, y, z, Label::Void);
                }
            }
        }
        let m = DefectModel { surface_amplitude_mm: 0.08, surface_correlation_mm: 0.1, ..Default::default() };
        let out = apply_surface_noise(&lv, &m, 3).unwrap();
        for i in 0..lv.labels().len() {
            if lv.labels()[i] == Label::Void {
                assert_eq!(out.labels()[i], Label::Void);
            }
        }
    }

    #[test]
    fn underextrusion_identity_determinism_and_monotone() {
        let lv = block(Dims::new(30, 30, 12), [2, 2, 1], [28, 28, 11], 0.05);
        let mut m = DefectModel { bead_width_mm: 0.2, layer_height_mm: 0.05, pore_radius_mm: 0.08, ..Default::default() };
        assert_eq!(apply_underextrusion(&lv, &m, 3).unwrap(), lv);
        m.underextrusion_rate = 0.5;
        let a = apply_underextrusion(&lv, &m, 3).unwrap();
        assert_eq!(a, apply_underextrusion(&lv, &m, 3).unwrap());
        assert!(a.void_fraction() > lv.void_fraction());
        assert_eq!(a.counts().background, lv.counts().background);
    }

    #[test]
    fn raster_path_length_of_a_block() {
        // 1.3 x 1.0 x 0.5 mm block, beads 0.25 mm, layers 0.1 mm:
        // 5 layers alternate x-runs (4 lines x 1.3 mm) and y-runs (5 lines x 1.0 mm)
        let lv = block(Dims::new(26, 20, 10), [0, 0, 0], [26, 20, 10], 0.05);
        let m = DefectModel { bead_width_mm: 0.25, layer_height_mm: 0.1, ..Default::default() };
        let path = raster_path(&lv, &m);
        let total: f64 = path.iter().map(PathSegment::length).sum();
        let expect = 3.0 * 4.0 * 1.3 + 2.0 * 5.0 * 1.0;
        assert!((total - expect).abs() < 1e-9, "{total} vs {expect}");
        // serpentine: consecutive x-lines run in opposite directions
        assert!(path[0].end[0] > path[0].start[0]);
        assert!(path[1].end[0] < path[1].start[0]);
    }

    #[test]
    fn simulate_print_zero_profile_is_voxelize() {
        let spec = PhantomSpec::new("t", [1.0, 1.0, 1.0], 0.1, vec![VoidSpec::cube(0.3, [0.5, 0.5, 0.5])]).unwrap();
        let zero = PrinterProfile::zero("zero");
        let (g, l) = simulate_print(&spec, &settings_table()[4], &zero, 0.05).unwrap();
        let (g0, l0) = voxelize(&spec, 0.05).unwrap();
        assert_eq!(g, g0);
        assert_eq!(l, l0);
    }
}
