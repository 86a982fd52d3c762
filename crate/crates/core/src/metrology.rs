//! Quality metrics on label volumes: cusp density, surface roughness,
//! porosity, integer-shift registration and per-printer setting ranking.
//!
//! The XY family is the stack of constant-z slices, the XZ family the stack
//! of constant-y slices.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{close_2d, edt_squared, open_2d};
use crate::segmet::VoidDetection;
use crate::volume::{Dims, Label, LabelVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Plane {
    #[serde(rename = "XY")]
    Xy,
    #[serde(rename = "XZ")]
    Xz,
}

impl Plane {
    pub const BOTH: [Plane; 2] = [Plane::Xy, Plane::Xz];

    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Xy => "XY",
            Plane::Xz => "XZ",
        }
    }

    /// Number of slices and in-plane `(width, height)` for a volume.
    fn layout(self, d: Dims) -> (usize, usize, usize) {
        match self {
            Plane::Xy => (d.nz, d.nx, d.ny),
            Plane::Xz => (d.ny, d.nx, d.nz),
        }
    }

    /// Volume index of in-plane pixel `(u, v)` of slice `s`.
    fn index(self, d: Dims, s: usize, u: usize, v: usize) -> usize {
        match self {
            Plane::Xy => d.index(u, v, s),
            Plane::Xz => d.index(u, s, v),
        }
    }
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "XY" => Ok(Plane::Xy),
            "XZ" => Ok(Plane::Xz),
            other => Err(Error::Config(format!("unknown plane `{other}` (expected XY or XZ)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    /// Half-width of the square structuring element of the reference surface.
    pub structuring_radius_vox: usize,
    /// In-plane distance around designed voids left out of roughness counts.
    pub void_exclusion_radius_mm: f64,
}

impl Default for SmoothingSpec {
    fn default() -> Self {
        SmoothingSpec { structuring_radius_vox: 3, void_exclusion_radius_mm: 0.1 }
    }
}

impl SmoothingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.structuring_radius_vox < 1 {
            return Err(Error::Config("structuring radius must be >= 1 voxel".into()));
        }
        if !(self.void_exclusion_radius_mm >= 0.0 && self.void_exclusion_radius_mm.is_finite()) {
            return Err(Error::Config(format!("void exclusion radius must be >= 0, got {}", self.void_exclusion_radius_mm)));
        }
        Ok(())
    }
}

fn slice_mask(labels: &LabelVolume, plane: Plane, s: usize, pred: impl Fn(Label) -> bool) -> Vec<bool> {
    let d = labels.dims();
    let (_, w, h) = plane.layout(d);
    let l = labels.labels();
    let mut m = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            m.push(pred(l[plane.index(d, s, u, v)]));
        }
    }
    m
}

/// Voxels where a slice's body mask (material or void) differs from its
/// open-then-close smoothing, as a percentage of the material volume.
/// Cavities are part of the body so they do not register as cusps.
pub fn cusp_density(labels: &LabelVolume, plane: Plane, spec: &SmoothingSpec) -> Result<f64> {
    spec.validate()?;
    let material = labels.counts().material;
    if material == 0 {
        return Err(Error::EmptySample("no material voxels".into()));
    }
    let (n, w, h) = plane.layout(labels.dims());
    let r = spec.structuring_radius_vox;
    let cusps: usize = (0..n)
        .into_par_iter()
        .map(|s| {
            let m = slice_mask(labels, plane, s, Label::is_body);
            if !m.iter().any(|b| *b) {
                return 0;
            }
            let smooth = close_2d(&open_2d(&m, w, h, r), w, h, r);
            m.iter().zip(&smooth).filter(|(a, b)| a != b).count()
        })
        .sum();
    Ok(100.0 * cusps as f64 / material as f64)
}

/// Voxels whose material/non-material state differs between `labels` and
/// `reference`, summed over the slices of `plane`. Voxels within
/// `void_exclusion_radius_mm` (in-plane) of a reference void are skipped.
pub fn roughness(labels: &LabelVolume, reference: &LabelVolume, plane: Plane, spec: &SmoothingSpec) -> Result<u64> {
    spec.validate()?;
    if !labels.same_dims(reference) {
        return Err(Error::Registration(format!("dims differ: {:?} vs {:?}", labels.dims(), reference.dims())));
    }
    let (n, w, h) = plane.layout(labels.dims());
    let r_vox = spec.void_exclusion_radius_mm / labels.spacing_mm();
    let total: u64 = (0..n)
        .into_par_iter()
        .map(|s| {
            let a = slice_mask(labels, plane, s, |l| l == Label::Material);
            let b = slice_mask(reference, plane, s, |l| l == Label::Material);
            let voids = slice_mask(reference, plane, s, |l| l == Label::Void);
            let excluded: Vec<bool> = if r_vox > 0.0 && voids.iter().any(|v| *v) {
                let limit = (r_vox * r_vox) as f32 * (1.0 + 1e-6);
                edt_squared(&voids, Dims::new(w, h, 1)).into_iter().map(|d2| d2 <= limit).collect()
            } else {
                vec![false; w * h]
            };
            (0..w * h).filter(|&i| a[i] != b[i] && !excluded[i]).count() as u64
        })
        .sum();
    Ok(total)
}

/// Void share of the body, in percent.
pub fn porosity(labels: &LabelVolume) -> Result<f64> {
    let c = labels.counts();
    let body = c.material + c.void;
    if body == 0 {
        return Err(Error::EmptySample("no material or void voxels".into()));
    }
    Ok(100.0 * c.void as f64 / body as f64)
}

/// Result of [`align`]: `moving` is `reference` displaced by `shift` voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub shift: [i64; 3],
    /// Material voxels shared after registration.
    pub overlap: u64,
    pub registered: LabelVolume,
}

/// Material rows packed as bitsets, one row per `(y, z)`.
struct BitRows {
    words: usize,
    bits: Vec<u64>,
}

impl BitRows {
    fn new(labels: &LabelVolume) -> Self {
        let d = labels.dims();
        let words = d.nx.div_ceil(64);
        let mut bits = vec![0u64; words * d.ny * d.nz];
        for (i, l) in labels.labels().iter().enumerate() {
            if *l == Label::Material {
                let row = i / d.nx;
                let x = i % d.nx;
                bits[row * words + x / 64] |= 1 << (x % 64);
            }
        }
        BitRows { words, bits }
    }

    fn row(&self, r: usize) -> &[u64] {
        &self.bits[r * self.words..(r + 1) * self.words]
    }
}

/// `sum_x popcount(a[x] & b[x - dx])` for two packed rows.
fn shifted_and_count(a: &[u64], b: &[u64], dx: i64, buf: &mut [u64]) -> u32 {
    let n = a.len() as i64;
    let (ws, bs) = (dx.div_euclid(64), dx.rem_euclid(64) as u32);
    for (i, out) in buf.iter_mut().enumerate() {
        // bit x of the shifted row is bit x - dx of b
        let src = i as i64 - ws;
        let get = |k: i64| if k >= 0 && k < n { b[k as usize] } else { 0 };
        *out = if bs == 0 { get(src) } else { (get(src) << bs) | (get(src - 1) >> (64 - bs)) };
    }
    a.iter().zip(buf.iter()).map(|(x, y)| (x & y).count_ones()).sum()
}

fn material_centroid(labels: &LabelVolume) -> Option<[f64; 3]> {
    let d = labels.dims();
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for (i, l) in labels.labels().iter().enumerate() {
        if *l == Label::Material {
            let (x, y, z) = d.coords(i);
            sum[0] += x as f64;
            sum[1] += y as f64;
            sum[2] += z as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

/// Integer-shift registration of `moving` onto `reference`: searches the
/// `(2k+1)^3` shifts around the centroid offset for maximal material
/// overlap. Ties go to the smallest shift magnitude, then lexicographic
/// order.
pub fn align(moving: &LabelVolume, reference: &LabelVolume, search_radius_vox: usize) -> Result<Alignment> {
    if !moving.same_dims(reference) {
        return Err(Error::Registration(format!("dims differ: {:?} vs {:?}", moving.dims(), reference.dims())));
    }
    let (Some(cm), Some(cr)) = (material_centroid(moving), material_centroid(reference)) else {
        return Err(Error::AlignmentFailure("a volume has no material".into()));
    };
    let centre: [i64; 3] = std::array::from_fn(|a| (cm[a] - cr[a]).round() as i64);
    let d = moving.dims();
    let (rm, rr) = (BitRows::new(moving), BitRows::new(reference));
    let k = search_radius_vox as i64;
    let mut shifts = Vec::new();
    for dz in -k..=k {
        for dy in -k..=k {
            for dx in -k..=k {
                shifts.push([centre[0] + dx, centre[1] + dy, centre[2] + dz]);
            }
        }
    }
    let scored: Vec<(u64, [i64; 3])> = shifts
        .par_iter()
        .map(|&s| {
            // registered(x) = moving(x + s); overlap with reference(x)
            let mut buf = vec![0u64; rr.words];
            let mut total = 0u64;
            for z in 0..d.nz as i64 {
                let zm = z + s[2];
                if zm < 0 || zm >= d.nz as i64 {
                    continue;
                }
                for y in 0..d.ny as i64 {
                    let ym = y + s[1];
                    if ym < 0 || ym >= d.ny as i64 {
                        continue;
                    }
                    let a = rr.row((z as usize) * d.ny + y as usize);
                    let b = rm.row((zm as usize) * d.ny + ym as usize);
                    total += shifted_and_count(a, b, -s[0], &mut buf) as u64;
                }
            }
            (total, s)
        })
        .collect();
    let mag = |s: &[i64; 3]| s.iter().map(|v| v * v).sum::<i64>();
    let (overlap, shift) = scored
        .into_iter()
        .min_by(|a, b| b.0.cmp(&a.0).then(mag(&a.1).cmp(&mag(&b.1))).then(a.1.cmp(&b.1)))
        .expect("non-empty search window");
    if overlap == 0 {
        return Err(Error::AlignmentFailure(format!("no material overlap within {search_radius_vox} voxels of the centroid offset")));
    }
    Ok(Alignment { shift, overlap, registered: shift_labels(moving, [-shift[0], -shift[1], -shift[2]]) })
}

/// `out(x) = labels(x - shift)`, background where that falls outside.
pub fn shift_labels(labels: &LabelVolume, shift: [i64; 3]) -> LabelVolume {
    let d = labels.dims();
    let mut out = LabelVolume::filled(*labels.frame(), Label::Background);
    let dst = out.labels_mut();
    let src = labels.labels();
    for z in 0..d.nz as i64 {
        let zs = z - shift[2];
        if zs < 0 || zs >= d.nz as i64 {
            continue;
        }
        for y in 0..d.ny as i64 {
            let ys = y - shift[1];
            if ys < 0 || ys >= d.ny as i64 {
                continue;
            }
            for x in 0..d.nx as i64 {
                let xs = x - shift[0];
                if xs >= 0 && xs < d.nx as i64 {
                    dst[d.index(x as usize, y as usize, z as usize)] = src[d.index(xs as usize, ys as usize, zs as usize)];
                }
            }
        }
    }
    out
}

/// Count of detected voids per equivalent-size bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo_mm: f64,
    pub hi_mm: f64,
    pub count: usize,
}

/// Histogram of equivalent cube edges with bins `[k w, (k+1) w)`, from zero
/// up to the largest occupied bin.
pub fn void_histogram(voids: &[VoidDetection], bin_mm: f64) -> Vec<HistogramBin> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in voids {
        *counts.entry((v.equivalent_size_mm / bin_mm + 1e-9).floor() as usize).or_default() += 1;
    }
    let top = counts.keys().next_back().copied();
    top.map_or_else(Vec::new, |top| {
        (0..=top)
            .map(|k| HistogramBin { lo_mm: k as f64 * bin_mm, hi_mm: (k + 1) as f64 * bin_mm, count: counts.get(&k).copied().unwrap_or(0) })
            .collect()
    })
}

/// Metrics for one (sample, printer, setting) analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sample_id: String,
    pub printer_id: String,
    pub setting_id: String,
    /// Order of the setting within its printer; lower wins ties.
    pub setting_index: usize,
    pub cusp_density_xy: f64,
    pub cusp_density_xz: f64,
    /// Absent when no reference geometry was available.
    pub roughness_xy: Option<f64>,
    pub roughness_xz: Option<f64>,
    pub porosity_pct: f64,
    #[serde(default)]
    pub void_histogram: Vec<HistogramBin>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CuspDensity,
    Roughness,
    Porosity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::CuspDensity, Metric::Roughness, Metric::Porosity];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::CuspDensity => "cusp_density",
            Metric::Roughness => "roughness",
            Metric::Porosity => "porosity",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::CuspDensity => "Cusp Density",
            Metric::Roughness => "Roughness",
            Metric::Porosity => "Porosity",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cusp_density" | "cusp" => Ok(Metric::CuspDensity),
            "roughness" => Ok(Metric::Roughness),
            "porosity" => Ok(Metric::Porosity),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

impl MetricsReport {
    /// Value of `metric` in `plane` (porosity has no plane).
    pub fn value(&self, metric: Metric, plane: Plane) -> Option<f64> {
        match (metric, plane) {
            (Metric::CuspDensity, Plane::Xy) => Some(self.cusp_density_xy),
            (Metric::CuspDensity, Plane::Xz) => Some(self.cusp_density_xz),
            (Metric::Roughness, Plane::Xy) => self.roughness_xy,
            (Metric::Roughness, Plane::Xz) => self.roughness_xz,
            (Metric::Porosity, _) => Some(self.porosity_pct),
        }
    }

    fn set(&mut self, metric: Metric, plane: Option<Plane>, v: f64) {
        match (metric, plane) {
            (Metric::CuspDensity, Some(Plane::Xy)) => self.cusp_density_xy = v,
            (Metric::CuspDensity, Some(Plane::Xz)) => self.cusp_density_xz = v,
            (Metric::Roughness, Some(Plane::Xy)) => self.roughness_xy = Some(v),
            (Metric::Roughness, Some(Plane::Xz)) => self.roughness_xz = Some(v),
            (Metric::Porosity, _) => self.porosity_pct = v,
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pct = [self.cusp_density_xy, self.cusp_density_xz, self.porosity_pct];
        if pct.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Invalid(format!("percentages out of [0, 100] in {self:?}")));
        }
        if [self.roughness_xy, self.roughness_xz].iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid(format!("negative roughness in {self:?}")));
        }
        Ok(())
    }
}

/// Best setting of one printer for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub sample_id: String,
    pub printer_id: String,
    pub setting_id: String,
    pub setting_index: usize,
    pub value: f64,
}

/// For every (sample, printer) pair, in order of first appearance, the
/// setting with the smallest `metric` in `plane`; ties go to the lowest
/// setting index. Reports lacking the metric are ignored.
pub fn rank_settings(reports: &[MetricsReport], metric: Metric, plane: Plane) -> Result<Vec<Ranking>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no metrics reports to rank".into()));
    }
    let mut groups: Vec<((String, String), Vec<&MetricsReport>)> = Vec::new();
    for r in reports {
        let key = (r.sample_id.clone(), r.printer_id.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut out = Vec::new();
    for ((sample_id, printer_id), group) in groups {
        let best = group
            .iter()
            .filter_map(|r| r.value(metric, plane).map(|v| (v, *r)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.setting_index.cmp(&b.1.setting_index)));
        if let Some((value, r)) = best {
            out.push(Ranking { sample_id, printer_id, setting_id: r.setting_id.clone(), setting_index: r.setting_index, value });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("no report carries {} values", metric.as_str())));
    }
    Ok(out)
}

/// Lowest-valued ranking overall (first on ties).
pub fn global_minimum(rankings: &[Ranking]) -> Option<&Ranking> {
    rankings.iter().min_by(|a, b| a.value.total_cmp(&b.value))
}

#[derive(Serialize, Deserialize)]
struct MetricRow {
    sample: String,
    printer: String,
    setting: String,
    setting_index: usize,
    plane: String,
    metric: String,
    value: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// Long-format metrics CSV: one row per (sample, printer, setting, plane,
/// metric); porosity rows carry plane `-`.
pub fn write_metrics_csv<W: Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        let mut row = |plane: &str, metric: Metric, value: f64| {
            w.serialize(MetricRow {
                sample: r.sample_id.clone(),
                printer: r.printer_id.clone(),
                setting: r.setting_id.clone(),
                setting_index: r.setting_index,
                plane: plane.into(),
                metric: metric.as_str().into(),
                value,
            })
        };
        for p in Plane::BOTH {
            row(p.as_str(), Metric::CuspDensity, r.value(Metric::CuspDensity, p).unwrap()).map_err(csv_err)?;
        }
        for p in Plane::BOTH {
            if let Some(v) = r.value(Metric::Roughness, p) {
                row(p.as_str(), Metric::Roughness, v).map_err(csv_err)?;
            }
        }
        row("-", Metric::Porosity, r.porosity_pct).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads [`write_metrics_csv`] output back into reports (without void
/// histograms), in order of first appearance.
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsReport>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out: Vec<MetricsReport> = Vec::new();
    for row in rd.deserialize::<MetricRow>() {
        let row = row.map_err(csv_err)?;
        let metric: Metric = row.metric.parse()?;
        let plane = if row.plane == "-" { None } else { Some(row.plane.parse::<Plane>()?) };
        let idx = out.iter().position(|r| {
            r.sample_id == row.sample && r.printer_id == row.printer && r.setting_id == row.setting && r.setting_index == row.setting_index
        });
        let idx = idx.unwrap_or_else(|| {
            out.push(MetricsReport {
                sample_id: row.sample.clone(),
                printer_id: row.printer.clone(),
                setting_id: row.setting.clone(),
                setting_index: row.setting_index,
                cusp_density_xy: 0.0,
                cusp_density_xz: 0.0,
                roughness_xy: None,
                roughness_xz: None,
                porosity_pct: 0.0,
                void_histogram: Vec::new(),
            });
            out.len() - 1
        });
        out[idx].set(metric, plane, row.value);
    }
    Ok(out)
}

/// Table-shaped ranking CSV: one row per printer, then a setting and a
/// value column per sample.
pub fn write_rankings_csv<W: Write>(out: W, metric: Metric, rankings: &[Ranking]) -> Result<()> {
    let mut samples: Vec<&str> = Vec::new();
    let mut printers: Vec<&str> = Vec::new();
    for r in rankings {
        if !samples.contains(&r.sample_id.as_str()) {
            samples.push(&r.sample_id);
        }
        if !printers.contains(&r.printer_id.as_str()) {
            printers.push(&r.printer_id);
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["3D Printer".to_string()];
    for s in &samples {
        header.push(format!("{s} Printer setting"));
        header.push(format!("{s} {}", metric.title()));
    }
    w.write_record(&header).map_err(csv_err)?;
    for p in &printers {
        let mut rec = vec![p.to_string()];
        for s in &samples {
            match rankings.iter().find(|r| r.printer_id == *p && r.sample_id == *s) {
                Some(r) => {
                    rec.push(r.setting_id.clone());
                    rec.push(format!("{}", r.value));
                }
                None => {
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
