//! Ground-truth phantoms: rectangular sample bodies with cube and sphere
//! cavities, the two reference void schedules, rasterization and the analytic
//! designed porosity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Frame, Label, LabelVolume, Vec3, VoxelGrid};

/// Linear attenuation assigned to printed material when none is given (1/mm).
pub const DEFAULT_MATERIAL_MU: f64 = 0.1;

/// Allowed distance between a designed porosity and its target (absolute fraction).
pub const POROSITY_TOLERANCE: f64 = 0.005;

/// Minimum material between a void and the outer wall in the reference samples (mm).
pub const SCHEDULE_WALL_MM: f64 = 0.3;

/// Minimum material between neighbouring voids in the reference samples (mm).
pub const SCHEDULE_GAP_MM: f64 = 0.2;

const MAX_SCHEDULE_LAYERS: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoidShape {
    Cube,
    Sphere,
}

impl VoidShape {
    pub fn as_str(self) -> &'static str {
        match self {
            VoidShape::Cube => "cube",
            VoidShape::Sphere => "sphere",
        }
    }
}

/// A designed cavity. `size_mm` is the cube edge or the sphere diameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoidSpec {
    pub shape: VoidShape,
    pub size_mm: f64,
    pub center_mm: Vec3,
}

impl VoidSpec {
    pub fn cube(size_mm: f64, center_mm: Vec3) -> Self {
        VoidSpec { shape: VoidShape::Cube, size_mm, center_mm }
    }

    pub fn sphere(size_mm: f64, center_mm: Vec3) -> Self {
        VoidSpec { shape: VoidShape::Sphere, size_mm, center_mm }
    }

    pub fn volume_mm3(&self) -> f64 {
        match self.shape {
            VoidShape::Cube => self.size_mm.powi(3),
            VoidShape::Sphere => std::f64::consts::PI / 6.0 * self.size_mm.powi(3),
        }
    }

    pub fn half_extent(&self) -> f64 {
        self.size_mm / 2.0
    }

    /// Center-point membership test used for rasterization. Cubes are
    /// half-open boxes `[c - s/2, c + s/2)` so that abutting lattices tile.
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        let h = self.half_extent();
        match self.shape {
            VoidShape::Cube => (0..3).all(|a| half_open_contains(self.center_mm[a] - h, self.center_mm[a] + h, p[a])),
            VoidShape::Sphere => {
                let d2: f64 = (0..3).map(|a| (p[a] - self.center_mm[a]).powi(2)).sum();
                d2 < h * h
            }
        }
    }

    /// Euclidean distance from `p` to the void (zero inside).
    pub fn distance(&self, p: Vec3) -> f64 {
        let h = self.half_extent();
        match self.shape {
            VoidShape::Cube => {
                let d2: f64 = (0..3)
                    .map(|a| {
                        let d = (p[a] - self.center_mm[a]).abs() - h;
                        d.max(0.0).powi(2)
                    })
                    .sum();
                d2.sqrt()
            }
            VoidShape::Sphere => {
                let d: f64 = (0..3).map(|a| (p[a] - self.center_mm[a]).powi(2)).sum::<f64>().sqrt();
                (d - h).max(0.0)
            }
        }
    }

    /// True if the interiors of the two cavities intersect.
    pub fn overlaps(&self, other: &VoidSpec) -> bool {
        let (a, b) = (self, other);
        match (a.shape, b.shape) {
            (VoidShape::Cube, VoidShape::Cube) => {
                (0..3).all(|k| (a.center_mm[k] - b.center_mm[k]).abs() < a.half_extent() + b.half_extent())
            }
            (VoidShape::Sphere, VoidShape::Sphere) => {
                let d: f64 = (0..3).map(|k| (a.center_mm[k] - b.center_mm[k]).powi(2)).sum::<f64>().sqrt();
                d < a.half_extent() + b.half_extent()
            }
            (VoidShape::Sphere, VoidShape::Cube) => b.distance(a.center_mm) < a.half_extent(),
            (VoidShape::Cube, VoidShape::Sphere) => a.distance(b.center_mm) < b.half_extent(),
        }
    }

    fn validate_in(&self, outer: Vec3) -> Result<()> {
        if !(self.size_mm > 0.0 && self.size_mm.is_finite()) {
            return Err(Error::Invalid(format!("void size must be > 0, got {}", self.size_mm)));
        }
        let h = self.half_extent();
        for a in 0..3 {
            let c = self.center_mm[a];
            if !(c - h > 0.0 && c + h < outer[a]) {
                return Err(Error::Invalid(format!(
                    "void {:?} at {:?} does not lie strictly inside the body {:?}",
                    self.shape, self.center_mm, outer
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn half_open_contains(lo: f64, hi: f64, v: f64) -> bool {
    let eps = 1e-9 * (hi - lo).abs().max(1e-3);
    v - lo >= -eps && hi - v > eps
}

/// Declarative sample: an axis-aligned box `[0, L) x [0, W) x [0, H)` with cavities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub label: String,
    pub outer_dims_mm: Vec3,
    pub material_mu: f64,
    #[serde(default)]
    pub voids: Vec<VoidSpec>,
}

impl PhantomSpec {
    pub fn new(label: impl Into<String>, outer_dims_mm: Vec3, material_mu: f64, voids: Vec<VoidSpec>) -> Result<Self> {
        let spec = PhantomSpec { label: label.into(), outer_dims_mm, material_mu, voids };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_dims_mm.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Invalid(format!("outer dims must be > 0, got {:?}", self.outer_dims_mm)));
        }
        if !(self.material_mu > 0.0 && self.material_mu.is_finite()) {
            return Err(Error::Invalid(format!("material_mu must be > 0, got {}", self.material_mu)));
        }
        for v in &self.voids {
            v.validate_in(self.outer_dims_mm)?;
        }
        if let Some((i, j)) = first_overlap(&self.voids) {
            return Err(Error::Invalid(format!("voids {i} and {j} overlap")));
        }
        Ok(())
    }

    pub fn body_volume_mm3(&self) -> f64 {
        self.outer_dims_mm.iter().product()
    }

    pub fn smallest_void_mm(&self) -> Option<f64> {
        self.voids.iter().map(|v| v.size_mm).min_by(f64::total_cmp)
    }
}

/// Pairwise overlap test with a z-sorted sweep; returns the first offending pair.
fn first_overlap(voids: &[VoidSpec]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..voids.len()).collect();
    order.sort_by(|&a, &b| {
        let za = voids[a].center_mm[2] - voids[a].half_extent();
        let zb = voids[b].center_mm[2] - voids[b].half_extent();
        za.total_cmp(&zb)
    });
    for (k, &i) in order.iter().enumerate() {
        let top = voids[i].center_mm[2] + voids[i].half_extent();
        for &j in &order[k + 1..] {
            if voids[j].center_mm[2] - voids[j].half_extent() >= top {
                break;
            }
            if voids[i].overlaps(&voids[j]) {
                return Some((i.min(j), i.max(j)));
            }
        }
    }
    None
}

/// Analytic void volume over body volume, independent of any voxelization.
pub fn designed_porosity(spec: &PhantomSpec) -> f64 {
    let voids: f64 = spec.voids.iter().map(VoidSpec::volume_mm3).sum();
    voids / spec.body_volume_mm3()
}

/// One z-layer of identical voids laid out on a lateral lattice.
#[derive(Clone, Copy, Debug)]
struct Layer {
    shape: VoidShape,
    size_mm: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn round_um(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn ramp(n: usize, i: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Alternating large/small cube layers: large edges fall 1.40 -> 0.20 mm top to
/// bottom, small edges rise 0.20 -> 0.70 mm towards the middle and fall back.
fn sample1_layers(n: usize) -> Vec<Layer> {
    let n_large = n.div_ceil(2);
    let n_small = n / 2;
    (0..n)
        .map(|i| {
            let k = i / 2;
            let size = if i % 2 == 0 {
                lerp(1.40, 0.20, ramp(n_large, k))
            } else {
                let t = ramp(n_small, k);
                lerp(0.20, 0.70, 1.0 - (2.0 * t - 1.0).abs())
            };
            Layer { shape: VoidShape::Cube, size_mm: round_um(size) }
        })
        .collect()
}

/// Alternating sphere/cube layers, both shrinking top to bottom: spheres
/// 1.20 -> 0.20 mm diameter, cubes 0.70 -> 0.20 mm edge.
fn sample2_layers(n: usize) -> Vec<Layer> {
    let n_sph = n.div_ceil(2);
    let n_cube = n / 2;
    (0..n)
        .map(|i| {
            let k = i / 2;
            if i % 2 == 0 {
                Layer { shape: VoidShape::Sphere, size_mm: round_um(lerp(1.20, 0.20, ramp(n_sph, k))) }
            } else {
                Layer { shape: VoidShape::Cube, size_mm: round_um(lerp(0.70, 0.20, ramp(n_cube, k))) }
            }
        })
        .collect()
}

fn lattice_positions(width: f64, size: f64, wall: f64, gap: f64) -> Vec<f64> {
    let avail = width - 2.0 * wall;
    if avail < size {
        return Vec::new();
    }
    let count = ((avail + gap) / (size + gap) + 1e-9).floor() as usize;
    let span = count as f64 * size + (count as f64 - 1.0) * gap;
    let start = (width - span) / 2.0 + size / 2.0;
    (0..count).map(|i| start + i as f64 * (size + gap)).collect()
}

/// Lays out `layers` top (high z) to bottom with uniform axial pitch. Returns
/// one void list per layer, or `None` if adjacent layers would collide.
fn layout_layers(outer: Vec3, layers: &[Layer], wall: f64, gap: f64) -> Option<Vec<Vec<VoidSpec>>> {
    let n = layers.len();
    if n == 0 {
        return Some(Vec::new());
    }
    let z_top = outer[2] - wall - layers[0].size_mm / 2.0;
    let z_bottom = wall + layers[n - 1].size_mm / 2.0;
    let pitch = if n > 1 { (z_top - z_bottom) / (n - 1) as f64 } else { 0.0 };
    if z_top < z_bottom - 1e-9 {
        return None;
    }
    for w in layers.windows(2) {
        if pitch + 1e-9 < (w[0].size_mm + w[1].size_mm) / 2.0 + gap {
            return None;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (i, layer) in layers.iter().enumerate() {
        let z = if n > 1 { z_top - i as f64 * pitch } else { outer[2] / 2.0 };
        let xs = lattice_positions(outer[0], layer.size_mm, wall, gap);
        let ys = lattice_positions(outer[1], layer.size_mm, wall, gap);
        if xs.is_empty() || ys.is_empty() {
            return None;
        }
        let mut row = Vec::with_capacity(xs.len() * ys.len());
        for &y in &ys {
            for &x in &xs {
                row.push(VoidSpec { shape: layer.shape, size_mm: layer.size_mm, center_mm: [x, y, z] });
            }
        }
        out.push(row);
    }
    Some(out)
}

fn layers_porosity(outer: Vec3, layers: &[Vec<VoidSpec>]) -> f64 {
    let v: f64 = layers.iter().flatten().map(VoidSpec::volume_mm3).sum();
    v / outer.iter().product::<f64>()
}

/// Fits a layered schedule to `target`: the fewest layers whose full lattices
/// reach the target, then voids are dropped round-robin from the bottom layer
/// upwards until the porosity is as close to the target as one void allows.
fn fit_schedule(
    label: &str,
    outer: Vec3,
    target: f64,
    layers_for: impl Fn(usize) -> Vec<Layer>,
) -> Result<PhantomSpec> {
    if !(target > 0.0 && target < 0.5) {
        return Err(Error::Invalid(format!("target porosity must be in (0, 0.5), got {target}")));
    }
    let mut best_full: Option<(f64, Vec<Vec<VoidSpec>>)> = None;
    let mut chosen = None;
    for n in 2..=MAX_SCHEDULE_LAYERS {
        let Some(layout) = layout_layers(outer, &layers_for(n), SCHEDULE_WALL_MM, SCHEDULE_GAP_MM) else {
            continue;
        };
        let p = layers_porosity(outer, &layout);
        if p >= target {
            chosen = Some(layout);
            break;
        }
        if best_full.as_ref().is_none_or(|(bp, _)| p > *bp) {
            best_full = Some((p, layout));
        }
    }
    let mut layout = match (chosen, best_full) {
        (Some(l), _) => l,
        (None, Some((p, l))) if target - p <= POROSITY_TOLERANCE => l,
        (None, best) => {
            return Err(Error::ScheduleInfeasible(format!(
                "target porosity {target} exceeds the largest non-overlapping schedule ({:.4})",
                best.map(|b| b.0).unwrap_or(0.0)
            )))
        }
    };

    let body = outer.iter().product::<f64>();
    let mut void_volume: f64 = layout.iter().flatten().map(VoidSpec::volume_mm3).sum();
    let total: usize = layout.iter().map(Vec::len).sum();
    let mut remaining = total;
    'drop: while void_volume / body > target && remaining > 1 {
        for li in (0..layout.len()).rev() {
            if remaining <= 1 || void_volume / body <= target {
                break 'drop;
            }
            if let Some(v) = layout[li].pop() {
                let before = void_volume / body;
                let after = (void_volume - v.volume_mm3()) / body;
                if after < target && (before - target) < (target - after) {
                    layout[li].push(v);
                    break 'drop;
                }
                void_volume -= v.volume_mm3();
                remaining -= 1;
            }
        }
    }
    let voids: Vec<VoidSpec> = layout.into_iter().flatten().collect();
    let spec = PhantomSpec::new(label, outer, DEFAULT_MATERIAL_MU, voids)?;
    let p = designed_porosity(&spec);
    if (p - target).abs() > POROSITY_TOLERANCE {
        return Err(Error::ScheduleInfeasible(format!("closest schedule porosity {p:.5} misses target {target}")));
    }
    Ok(spec)
}

/// 8 x 8 x 26 mm body with alternating large/small cubic cavities.
pub fn sample1_spec(target_porosity: f64) -> Result<PhantomSpec> {
    fit_schedule("sample1", [8.0, 8.0, 26.0], target_porosity, sample1_layers)
}

/// 6 x 6 x 17.5 mm body with alternating spherical and cubic cavities.
pub fn sample2_spec(target_porosity: f64) -> Result<PhantomSpec> {
    fit_schedule("sample2", [6.0, 6.0, 17.5], target_porosity, sample2_layers)
}

/// Designed porosity of the reference samples.
pub const SAMPLE1_POROSITY: f64 = 0.145;
pub const SAMPLE2_POROSITY: f64 = 0.148;

/// Rasterizes a phantom by voxel-center inclusion. The grid starts at the body
/// corner; dims are the body extent divided by the spacing, rounded up.
pub fn voxelize(spec: &PhantomSpec, spacing_mm: f64) -> Result<(VoxelGrid, LabelVolume)> {
    spec.validate()?;
    if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
        return Err(Error::Resolution(format!("spacing must be > 0, got {spacing_mm}")));
    }
    if let Some(min) = spec.smallest_void_mm() {
        if spacing_mm > min / 2.0 + 1e-12 {
            return Err(Error::Resolution(format!(
                "spacing {spacing_mm} mm is coarser than half the smallest void ({min} mm)"
            )));
        }
    }
    let n = |len: f64| ((len / spacing_mm) - 1e-9).ceil().max(1.0) as usize;
    let dims = Dims::new(n(spec.outer_dims_mm[0]), n(spec.outer_dims_mm[1]), n(spec.outer_dims_mm[2]));
    let frame = Frame::new(dims, spacing_mm, [0.0; 3])?;
    let mut labels = LabelVolume::filled(frame, Label::Background);

    let inside_axis: Vec<Vec<bool>> = (0..3)
        .map(|a| {
            (0..dims.as_array()[a])
                .map(|i| half_open_contains(0.0, spec.outer_dims_mm[a], (i as f64 + 0.5) * spacing_mm))
                .collect()
        })
        .collect();
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                if inside_axis[0][x] && inside_axis[1][y] && inside_axis[2][z] {
                    labels.set(x, y, z, Label::Material);
                }
            }
        }
    }

    for v in &spec.voids {
        let h = v.half_extent();
        let range = |a: usize| {
            let lo = ((v.center_mm[a] - h) / spacing_mm - 1.0).floor().max(0.0) as usize;
            let hi = (((v.center_mm[a] + h) / spacing_mm + 1.0).ceil() as usize).min(dims.as_array()[a]);
            lo..hi
        };
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    if labels.get(x, y, z) == Label::Material && v.contains(frame.voxel_center(x, y, z)) {
                        labels.set(x, y, z, Label::Void);
                    }
                }
            }
        }
    }
    let grid = VoxelGrid::from_labels(&labels, spec.material_mu as f32);
    Ok((grid, labels))
}
