//! Segmentation of reconstructed volumes and void detectability.
//!
//! Material is everything at or above an Otsu threshold, cleaned by one
//! corner-preserving 3x3x3 median pass. Sub-threshold voxels that reach the grid boundary through a
//! 6-connected sub-threshold path are background; the enclosed rest are voids.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::morphology::conservative_majority_fixed_point;
use crate::volume::{Dims, Label, LabelVolume, Vec3, VoxelGrid};
use crate::voxphantom::{PhantomSpec, VoidShape};

pub const HISTOGRAM_BINS: usize = 256;

/// 256-bin histogram over `[min, max]` of the values, plus that range.
pub fn histogram(values: &[f32]) -> Result<([u64; HISTOGRAM_BINS], f32, f32)> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !(hi > lo) {
        return Err(Error::DegenerateHistogram(format!("need at least two distinct values, range is [{lo}, {hi}]")));
    }
    let mut hist = [0u64; HISTOGRAM_BINS];
    let scale = HISTOGRAM_BINS as f64 / (hi as f64 - lo as f64);
    for v in values {
        let b = (((*v as f64 - lo as f64) * scale) as usize).min(HISTOGRAM_BINS - 1);
        hist[b] += 1;
    }
    Ok((hist, lo, hi))
}

/// Between-class variance (up to a constant factor) when bins `0..=t` form
/// the lower class, with bin indices as class values.
pub fn between_class_variance(hist: &[u64], t: usize) -> f64 {
    let total: f64 = hist.iter().sum::<u64>() as f64;
    let (mut w0, mut s0) = (0.0, 0.0);
    for (i, h) in hist[..=t].iter().enumerate() {
        w0 += *h as f64;
        s0 += i as f64 * *h as f64;
    }
    let s_all: f64 = hist.iter().enumerate().map(|(i, h)| i as f64 * *h as f64).sum();
    let w1 = total - w0;
    if w0 == 0.0 || w1 == 0.0 {
        return 0.0;
    }
    let (m0, m1) = (s0 / w0, (s_all - s0) / w1);
    w0 * w1 * (m0 - m1).powi(2) / (total * total)
}

/// Bin maximizing the between-class variance; the first such bin on ties.
pub fn otsu_bin(hist: &[u64]) -> usize {
    let total: f64 = hist.iter().sum::<u64>() as f64;
    let s_all: f64 = hist.iter().enumerate().map(|(i, h)| i as f64 * *h as f64).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0, f64::NEG_INFINITY);
    for t in 0..hist.len() - 1 {
        w0 += hist[t] as f64;
        s0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        let var = if w0 == 0.0 || w1 == 0.0 {
            0.0
        } else {
            let (m0, m1) = (s0 / w0, (s_all - s0) / w1);
            w0 * w1 * (m0 - m1).powi(2) / (total * total)
        };
        if var > best_var * (1.0 + 1e-12) {
            best = t;
            best_var = var;
        }
    }
    best
}

/// Otsu threshold (1/mm): the upper edge of the optimal histogram bin.
pub fn otsu_threshold(grid: &VoxelGrid) -> Result<f32> {
    let (hist, lo, hi) = histogram(grid.values())?;
    let t = otsu_bin(&hist);
    Ok((lo as f64 + (t + 1) as f64 * (hi as f64 - lo as f64) / HISTOGRAM_BINS as f64) as f32)
}

/// Passes of the cleanup filter before giving up on a fixed point.
pub const MAX_CLEANUP_PASSES: usize = 16;

/// Material where the grid is `>= threshold`, cleaned by
/// [`conservative_majority_3x3x3`](crate::morphology::conservative_majority_3x3x3) repeated to a fixed point; enclosed
/// sub-threshold regions become voids, the rest background. Because the
/// cleaned mask is a fixed point, segmenting the output again reproduces it.
pub fn segment(grid: &VoxelGrid, threshold: f32) -> Result<LabelVolume> {
    if !threshold.is_finite() {
        return Err(Error::Invalid(format!("threshold must be finite, got {threshold}")));
    }
    let d = grid.dims();
    let raw: Vec<bool> = grid.values().iter().map(|v| *v >= threshold).collect();
    let (material, converged) = conservative_majority_fixed_point(&raw, d, MAX_CLEANUP_PASSES);
    if !converged {
        log::warn!("segmentation cleanup did not settle after {MAX_CLEANUP_PASSES} passes");
    }
    let outside = outside_region(&material, d);
    let labels = material
        .iter()
        .zip(&outside)
        .map(|(m, o)| if *m { Label::Material } else if *o { Label::Background } else { Label::Void })
        .collect();
    LabelVolume::new(*grid.frame(), labels)
}

/// Non-material voxels 6-connected to the grid boundary.
fn outside_region(material: &[bool], d: Dims) -> Vec<bool> {
    let mut seen = vec![false; material.len()];
    let mut queue = VecDeque::new();
    for i in 0..material.len() {
        let (x, y, z) = d.coords(i);
        let edge = x == 0 || y == 0 || z == 0 || x + 1 == d.nx || y + 1 == d.ny || z + 1 == d.nz;
        if edge && !material[i] {
            seen[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours6(i, d) {
            if !seen[j] && !material[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn neighbours6(i: usize, d: Dims) -> impl Iterator<Item = usize> {
    let (x, y, z) = d.coords(i);
    let sx = 1;
    let sy = d.nx;
    let sz = d.slice_len();
    [
        (x > 0).then(|| i - sx),
        (x + 1 < d.nx).then(|| i + sx),
        (y > 0).then(|| i - sy),
        (y + 1 < d.ny).then(|| i + sy),
        (z > 0).then(|| i - sz),
        (z + 1 < d.nz).then(|| i + sz),
    ]
    .into_iter()
    .flatten()
}

/// One connected void region found in a label volume.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VoidDetection {
    pub centroid_mm: Vec3,
    pub voxel_count: usize,
    pub volume_mm3: f64,
    /// Edge of the cube with the same volume.
    pub equivalent_size_mm: f64,
    /// Diameter of the sphere with the same volume.
    pub equivalent_diameter_mm: f64,
    /// Index into the ground-truth void list once scored.
    pub matched_truth: Option<usize>,
}

/// 6-connected components of void voxels, in scan order of their first voxel.
pub fn extract_voids(labels: &LabelVolume) -> Vec<VoidDetection> {
    let d = labels.dims();
    let f = labels.frame();
    let voxel = f.voxel_volume_mm3();
    let l = labels.labels();
    let mut seen = vec![false; l.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..l.len() {
        if l[start] != Label::Void || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = d.coords(i);
            let c = f.voxel_center(x, y, z);
            for a in 0..3 {
                sum[a] += c[a];
            }
            count += 1;
            for j in neighbours6(i, d) {
                if !seen[j] && l[j] == Label::Void {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let volume = count as f64 * voxel;
        out.push(VoidDetection {
            centroid_mm: sum.map(|s| s / count as f64),
            voxel_count: count,
            volume_mm3: volume,
            equivalent_size_mm: volume.cbrt(),
            equivalent_diameter_mm: (6.0 * volume / std::f64::consts::PI).cbrt(),
            matched_truth: None,
        });
    }
    out
}

/// Outcome for one designed void.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruthOutcome {
    pub truth_index: usize,
    pub shape: VoidShape,
    pub size_mm: f64,
    pub detected: bool,
    pub centroid_error_mm: Option<f64>,
    /// Found volume over designed volume.
    pub volume_ratio: Option<f64>,
}

/// Detection statistics for designed voids with `lo_mm <= size < hi_mm`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeBin {
    pub lo_mm: f64,
    pub hi_mm: f64,
    pub n_truth: usize,
    pub n_detected: usize,
    pub detection_rate: f64,
    /// Mean found/designed volume ratio over detected voids.
    pub mean_volume_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectabilityReport {
    pub match_radius_mm: f64,
    pub outcomes: Vec<TruthOutcome>,
    pub bins: Vec<SizeBin>,
    /// Smallest bin edge from which every bin is fully detected.
    pub min_size_full_mm: Option<f64>,
    /// Smallest bin edge from which every bin is at least half detected.
    pub min_size_half_mm: Option<f64>,
    /// Detections (with their matches) in input order.
    pub found: Vec<VoidDetection>,
}

impl DetectabilityReport {
    pub fn bin_containing(&self, size_mm: f64) -> Option<&SizeBin> {
        self.bins.iter().find(|b| size_mm >= b.lo_mm - 1e-9 && size_mm < b.hi_mm - 1e-9)
    }

    /// Detection rate over all designed voids of at least `size_mm`.
    pub fn rate_at_least(&self, size_mm: f64) -> Option<f64> {
        let sel: Vec<&TruthOutcome> = self.outcomes.iter().filter(|o| o.size_mm >= size_mm - 1e-9).collect();
        (!sel.is_empty()).then(|| sel.iter().filter(|o| o.detected).count() as f64 / sel.len() as f64)
    }

    /// Detection rate for designed sizes in `[lo, hi)`.
    pub fn rate_between(&self, lo: f64, hi: f64) -> Option<f64> {
        let sel: Vec<&TruthOutcome> = self.outcomes.iter().filter(|o| o.size_mm >= lo - 1e-9 && o.size_mm < hi - 1e-9).collect();
        (!sel.is_empty()).then(|| sel.iter().filter(|o| o.detected).count() as f64 / sel.len() as f64)
    }
}

/// Width of the size bins in a [`DetectabilityReport`].
pub const SIZE_BIN_MM: f64 = 0.1;

/// Greedy matching: designed voids, largest first (index order on ties), each
/// take the nearest still-unmatched detection within `match_radius_mm`.
pub fn score_detectability(found: &[VoidDetection], truth: &PhantomSpec, match_radius_mm: f64) -> Result<DetectabilityReport> {
    score_with_bins(found, truth, match_radius_mm, SIZE_BIN_MM)
}

pub fn score_with_bins(found: &[VoidDetection], truth: &PhantomSpec, match_radius_mm: f64, bin_mm: f64) -> Result<DetectabilityReport> {
    if !(match_radius_mm > 0.0) {
        return Err(Error::Invalid(format!("match radius must be > 0, got {match_radius_mm}")));
    }
    if !(bin_mm > 0.0) {
        return Err(Error::Invalid(format!("size bin width must be > 0, got {bin_mm}")));
    }
    let mut order: Vec<usize> = (0..truth.voids.len()).collect();
    order.sort_by(|&a, &b| truth.voids[b].size_mm.total_cmp(&truth.voids[a].size_mm).then(a.cmp(&b)));
    let mut found = found.to_vec();
    for f in &mut found {
        f.matched_truth = None;
    }
    let mut outcomes: Vec<Option<TruthOutcome>> = vec![None; truth.voids.len()];
    for &t in &order {
        let v = &truth.voids[t];
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in found.iter().enumerate() {
            if f.matched_truth.is_some() {
                continue;
            }
            let dist = (0..3).map(|a| (f.centroid_mm[a] - v.center_mm[a]).powi(2)).sum::<f64>().sqrt();
            if dist <= match_radius_mm && best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        if let Some((i, _)) = best {
            found[i].matched_truth = Some(t);
        }
        outcomes[t] = Some(TruthOutcome {
            truth_index: t,
            shape: v.shape,
            size_mm: v.size_mm,
            detected: best.is_some(),
            centroid_error_mm: best.map(|b| b.1),
            volume_ratio: best.map(|(i, _)| found[i].volume_mm3 / v.volume_mm3()),
        });
    }
    let outcomes: Vec<TruthOutcome> = outcomes.into_iter().flatten().collect();

    let bin_of = |s: f64| ((s / bin_mm) + 1e-9).floor() as i64;
    let mut keys: Vec<i64> = outcomes.iter().map(|o| bin_of(o.size_mm)).collect();
    keys.sort_unstable();
    keys.dedup();
    let bins: Vec<SizeBin> = keys
        .iter()
        .map(|&k| {
            let sel: Vec<&TruthOutcome> = outcomes.iter().filter(|o| bin_of(o.size_mm) == k).collect();
            let det: Vec<&&TruthOutcome> = sel.iter().filter(|o| o.detected).collect();
            let ratios: Vec<f64> = det.iter().filter_map(|o| o.volume_ratio).collect();
            SizeBin {
                lo_mm: k as f64 * bin_mm,
                hi_mm: (k + 1) as f64 * bin_mm,
                n_truth: sel.len(),
                n_detected: det.len(),
                detection_rate: det.len() as f64 / sel.len() as f64,
                mean_volume_ratio: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
            }
        })
        .collect();
    let threshold = |rate: f64| -> Option<f64> {
        let mut edge = None;
        for b in bins.iter().rev() {
            if b.detection_rate >= rate {
                edge = Some(b.lo_mm);
            } else {
                break;
            }
        }
        edge
    };
    Ok(DetectabilityReport {
        match_radius_mm,
        min_size_full_mm: threshold(1.0),
        min_size_half_mm: threshold(0.5),
        outcomes,
        bins,
        found,
    })
}

#[derive(Serialize)]
struct VoidRow {
    id: usize,
    centroid_x_mm: f64,
    centroid_y_mm: f64,
    centroid_z_mm: f64,
    voxels: usize,
    volume_mm3: f64,
    equivalent_size_mm: f64,
    equivalent_diameter_mm: f64,
    matched_truth: Option<usize>,
}

/// Void list as CSV, one row per detection.
pub fn write_voids_csv<W: Write>(out: W, voids: &[VoidDetection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (id, v) in voids.iter().enumerate() {
        w.serialize(VoidRow {
            id,
            centroid_x_mm: v.centroid_mm[0],
            centroid_y_mm: v.centroid_mm[1],
            centroid_z_mm: v.centroid_mm[2],
            voxels: v.voxel_count,
            volume_mm3: v.volume_mm3,
            equivalent_size_mm: v.equivalent_size_mm,
            equivalent_diameter_mm: v.equivalent_diameter_mm,
            matched_truth: v.matched_truth,
        })
        .map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Per-bin detectability as CSV.
pub fn write_detectability_csv<W: Write>(out: W, report: &DetectabilityReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in &report.bins {
        w.serialize(b).map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Frame;
    use crate::voxphantom::{voxelize, VoidSpec};

    #[test]
    fn otsu_separates_two_modes_and_is_brute_force_optimal() {
        let f = Frame::new(Dims::new(8, 8, 2), 1.0, [0.0; 3]).unwrap();
        let g = VoxelGrid::new(f, (0..128).map(|i| if i % 2 == 0 { 0.0 } else { 0.1 }).collect()).unwrap();
        let t = otsu_threshold(&g).unwrap();
        assert!(t > 0.0 && t < 0.1);
        let values: Vec<f32> = (0..2000u32).map(|i| ((i.wrapping_mul(2654435761) >> 7) % 1000) as f32 * 1e-3 + if i % 3 == 0 { 0.8 } else { 0.0 }).collect();
        let (hist, _, _) = histogram(&values).unwrap();
        let best = otsu_bin(&hist);
        let best_var = between_class_variance(&hist, best);
        for t in 0..HISTOGRAM_BINS - 1 {
            assert!(between_class_variance(&hist, t) <= best_var * (1.0 + 1e-9));
        }
        let flat = VoxelGrid::new(f, vec![0.3; 128]).unwrap();
        assert!(matches!(otsu_threshold(&flat), Err(Error::DegenerateHistogram(_))));
    }

    #[test]
    fn otsu_scales_with_the_grid() {
        let f = Frame::new(Dims::new(10, 10, 10), 1.0, [0.0; 3]).unwrap();
        let g = VoxelGrid::new(f, (0..1000).map(|i| ((i * 37) % 101) as f32 * 0.001 + if i % 4 == 0 { 0.2 } else { 0.0 }).collect()).unwrap();
        let t = otsu_threshold(&g).unwrap();
        let t3 = otsu_threshold(&g.scaled(3.0).unwrap()).unwrap();
        assert!((t3 - 3.0 * t).abs() < 1e-5 * t3);
    }

    #[test]
    fn segmentation_of_ground_truth() {
        let spec = PhantomSpec::new(
            "t",
            [2.0, 2.0, 2.0],
            0.1,
            vec![VoidSpec::cube(0.6, [0.6, 0.6, 0.6]), VoidSpec::sphere(0.7, [1.3, 1.3, 1.3])],
        )
        .unwrap();
        let (grid, truth) = voxelize(&spec, 0.05).unwrap();
        let grid = grid.padded(3);
        let truth = truth.padded(3);
        let labels = segment(&grid, 0.05).unwrap();
        let d = labels.dims();
        // disagreements only within one voxel of a truth interface
        for i in 0..d.len() {
            if labels.labels()[i] != truth.labels()[i] {
                let near = neighbours6(i, d).any(|j| truth.labels()[j] != truth.labels()[i]);
                assert!(near, "voxel {:?}", d.coords(i));
            }
        }
        let again = segment(&VoxelGrid::from_labels(&labels, 0.1), 0.05).unwrap();
        assert_eq!(again, labels);
        let empty = VoxelGrid::zeros(*grid.frame());
        assert!(segment(&empty, 0.05).unwrap().labels().iter().all(|l| *l == Label::Background));
        let solid = PhantomSpec::new("s", [1.0, 1.0, 1.0], 0.1, vec![]).unwrap();
        let (g, _) = voxelize(&solid, 0.05).unwrap();
        assert_eq!(segment(&g.padded(2), 0.05).unwrap().counts().void, 0);
    }

    fn labels_with(d: Dims, spacing: f64, voids: &[(usize, usize, usize)]) -> LabelVolume {
        let f = Frame::new(d, spacing, [0.0; 3]).unwrap();
        let mut lv = LabelVolume::filled(f, Label::Material);
        for &(x, y, z) in voids {
            lv.set(x, y, z, Label::Void);
        }
        lv
    }

    #[test]
    fn void_extraction_counts_and_connectivity() {
        let mut cube = Vec::new();
        for z in 2..7 {
            for y in 3..8 {
                for x in 1..6 {
                    cube.push((x, y, z));
                }
            }
        }
        let v = extract_voids(&labels_with(Dims::new(10, 10, 10), 0.1, &cube));
        assert_eq!(v.len(), 1);
        assert!((v[0].volume_mm3 - 0.125).abs() < 1e-12);
        assert!((v[0].equivalent_size_mm - 0.5).abs() < 1e-12);
        assert!((v[0].centroid_mm[0] - 0.35).abs() < 1e-12);
        // edge-sharing pair stays separate
        let v = extract_voids(&labels_with(Dims::new(6, 6, 6), 0.1, &[(2, 2, 2), (3, 3, 2)]));
        assert_eq!(v.len(), 2);
        assert!(extract_voids(&labels_with(Dims::new(4, 4, 4), 0.1, &[])).is_empty());
    }

    fn truth() -> PhantomSpec {
        PhantomSpec::new(
            "t",
            [4.0, 4.0, 4.0],
            0.1,
            vec![
                VoidSpec::cube(0.2, [1.0, 1.0, 1.0]),
                VoidSpec::cube(0.25, [1.0, 3.0, 1.0]),
                VoidSpec::sphere(0.45, [3.0, 1.0, 1.0]),
                VoidSpec::cube(1.0, [2.5, 2.5, 2.8]),
            ],
        )
        .unwrap()
    }

    fn at(c: Vec3, vol: f64) -> VoidDetection {
        VoidDetection { centroid_mm: c, voxel_count: 1, volume_mm3: vol, equivalent_size_mm: vol.cbrt(), equivalent_diameter_mm: 0.0, matched_truth: None }
    }

    #[test]
    fn detectability_exact_empty_and_radius_monotone() {
        let t = truth();
        let exact: Vec<VoidDetection> = t.voids.iter().map(|v| at(v.center_mm, v.volume_mm3())).collect();
        let r = score_detectability(&exact, &t, 0.1).unwrap();
        assert!(r.bins.iter().all(|b| b.detection_rate == 1.0));
        assert_eq!(r.min_size_full_mm, Some(0.2));
        assert!(r.outcomes.iter().all(|o| o.volume_ratio == Some(1.0)));
        let none = score_detectability(&[], &t, 0.1).unwrap();
        assert!(none.bins.iter().all(|b| b.detection_rate == 0.0));
        assert_eq!(none.min_size_full_mm, None);
        assert!(score_detectability(&[], &t, 0.0).is_err());
        let jitter: Vec<VoidDetection> = t.voids.iter().enumerate().map(|(i, v)| at([v.center_mm[0] + 0.05 * i as f64, v.center_mm[1], v.center_mm[2]], 0.01)).collect();
        let mut last = 1.0;
        for radius in [0.5, 0.12, 0.07, 0.03, 0.01] {
            let rate = score_detectability(&jitter, &t, radius).unwrap().rate_at_least(0.0).unwrap();
            assert!(rate <= last);
            last = rate;
        }
        let r = score_detectability(&jitter, &t, 0.07).unwrap();
        assert_eq!(r.rate_between(0.2, 0.3), Some(1.0));
        assert_eq!(r.bin_containing(0.45).unwrap().detection_rate, 0.0);
    }

    #[test]
    fn larger_truth_claims_contested_detection() {
        let t = PhantomSpec::new("t", [4.0, 4.0, 4.0], 0.1, vec![VoidSpec::cube(0.2, [1.0, 1.0, 1.0]), VoidSpec::cube(0.6, [1.6, 1.0, 1.0])]).unwrap();
        let r = score_detectability(&[at([1.3, 1.0, 1.0], 0.1)], &t, 0.5).unwrap();
        assert!(!r.outcomes[0].detected);
        assert!(r.outcomes[1].detected);
        assert_eq!(r.found[0].matched_truth, Some(1));
    }

    #[test]
    fn csv_has_one_row_per_void() {
        let mut buf = Vec::new();
        write_voids_csv(&mut buf, &[at([0.0; 3], 1.0), at([1.0; 3], 2.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("id,centroid_x_mm"));
    }
}
