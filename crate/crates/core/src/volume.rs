//! Dense voxel containers shared by every stage: attenuation grids, label
//! volumes and single 2D slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    /// Linear index with x fastest, then y, then z.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl From<(usize, usize, usize)> for Dims {
    fn from((nx, ny, nz): (usize, usize, usize)) -> Self {
        Dims { nx, ny, nz }
    }
}

/// Placement of a voxel lattice in body coordinates (mm). `origin_mm` is the
/// outer corner of voxel (0, 0, 0), so voxel centers sit at
/// `origin + (i + 0.5) * spacing`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub dims: Dims,
    pub spacing_mm: f64,
    pub origin_mm: Vec3,
}

impl Frame {
    pub fn new(dims: Dims, spacing_mm: f64, origin_mm: Vec3) -> Result<Self> {
        if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
            return Err(Error::Invalid(format!("voxel spacing must be positive, got {spacing_mm}")));
        }
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(Error::Invalid(format!("all dims must be >= 1, got {dims:?}")));
        }
        if origin_mm.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("origin must be finite".into()));
        }
        Ok(Frame { dims, spacing_mm, origin_mm })
    }

    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let s = self.spacing_mm;
        [
            self.origin_mm[0] + (x as f64 + 0.5) * s,
            self.origin_mm[1] + (y as f64 + 0.5) * s,
            self.origin_mm[2] + (z as f64 + 0.5) * s,
        ]
    }

    pub fn extent_mm(&self) -> Vec3 {
        let s = self.spacing_mm;
        [self.dims.nx as f64 * s, self.dims.ny as f64 * s, self.dims.nz as f64 * s]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.powi(3)
    }

    /// Frame grown by `margin` voxels on every side.
    pub fn padded(&self, margin: usize) -> Frame {
        let m = margin as f64 * self.spacing_mm;
        Frame {
            dims: Dims::new(self.dims.nx + 2 * margin, self.dims.ny + 2 * margin, self.dims.nz + 2 * margin),
            spacing_mm: self.spacing_mm,
            origin_mm: [self.origin_mm[0] - m, self.origin_mm[1] - m, self.origin_mm[2] - m],
        }
    }
}

/// Dense scalar field of linear attenuation coefficients (1/mm).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    frame: Frame,
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(frame: Frame, values: Vec<f32>) -> Result<Self> {
        if values.len() != frame.dims.len() {
            return Err(Error::Invalid(format!(
                "grid has {} values but dims {:?} need {}",
                values.len(),
                frame.dims,
                frame.dims.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!("attenuation values must be finite and >= 0, found {v}")));
        }
        Ok(VoxelGrid { frame, values })
    }

    pub fn zeros(frame: Frame) -> Self {
        VoxelGrid { values: vec![0.0; frame.dims.len()], frame }
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn dims(&self) -> Dims {
        self.frame.dims
    }

    pub fn spacing_mm(&self) -> f64 {
        self.frame.spacing_mm
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.frame.dims.index(x, y, z)]
    }

    pub fn slice_z(&self, z: usize) -> &[f32] {
        let n = self.frame.dims.slice_len();
        &self.values[z * n..(z + 1) * n]
    }

    /// Grid carrying `mu` on material voxels and zero elsewhere.
    pub fn from_labels(labels: &LabelVolume, mu: f32) -> Self {
        let values = labels.labels().iter().map(|l| if *l == Label::Material { mu } else { 0.0 }).collect();
        VoxelGrid { frame: *labels.frame(), values }
    }

    pub fn padded(&self, margin: usize) -> VoxelGrid {
        VoxelGrid { frame: self.frame.padded(margin), values: pad_values(&self.frame.dims, &self.values, margin, 0.0) }
    }

    pub fn scaled(&self, c: f32) -> Result<VoxelGrid> {
        VoxelGrid::new(self.frame, self.values.iter().map(|v| v * c).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Material = 1,
    Void = 2,
}

impl Label {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Background),
            1 => Some(Label::Material),
            2 => Some(Label::Void),
            _ => None,
        }
    }

    /// Inside the sample body (material or void).
    #[inline]
    pub fn is_body(self) -> bool {
        self != Label::Background
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub background: usize,
    pub material: usize,
    pub void: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.background + self.material + self.void
    }
}

/// Per-voxel classification paired with a [`VoxelGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    frame: Frame,
    labels: Vec<Label>,
}

impl LabelVolume {
    pub fn new(frame: Frame, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != frame.dims.len() {
            return Err(Error::Invalid(format!(
                "label volume has {} labels but dims {:?} need {}",
                labels.len(),
                frame.dims,
                frame.dims.len()
            )));
        }
        Ok(LabelVolume { frame, labels })
    }

    pub fn filled(frame: Frame, label: Label) -> Self {
        LabelVolume { labels: vec![label; frame.dims.len()], frame }
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn dims(&self) -> Dims {
        self.frame.dims
    }

    pub fn spacing_mm(&self) -> f64 {
        self.frame.spacing_mm
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Label] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Label {
        self.labels[self.frame.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, label: Label) {
        let i = self.frame.dims.index(x, y, z);
        self.labels[i] = label;
    }

    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for l in &self.labels {
            match l {
                Label::Background => c.background += 1,
                Label::Material => c.material += 1,
                Label::Void => c.void += 1,
            }
        }
        c
    }

    /// Fraction of body voxels labeled void.
    pub fn void_fraction(&self) -> f64 {
        let c = self.counts();
        let body = c.material + c.void;
        if body == 0 {
            0.0
        } else {
            c.void as f64 / body as f64
        }
    }

    /// Inclusive voxel bounding box of all non-background voxels.
    pub fn body_bbox(&self) -> Option<([usize; 3], [usize; 3])> {
        let d = self.frame.dims;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, l) in self.labels.iter().enumerate() {
            if l.is_body() {
                let (x, y, z) = d.coords(i);
                for (a, v) in [x, y, z].into_iter().enumerate() {
                    lo[a] = lo[a].min(v);
                    hi[a] = hi[a].max(v);
                }
                any = true;
            }
        }
        any.then_some((lo, hi))
    }

    pub fn padded(&self, margin: usize) -> LabelVolume {
        LabelVolume {
            frame: self.frame.padded(margin),
            labels: pad_values(&self.frame.dims, &self.labels, margin, Label::Background),
        }
    }

    pub fn same_dims(&self, other: &LabelVolume) -> bool {
        self.frame.dims == other.frame.dims
    }
}

fn pad_values<T: Copy>(dims: &Dims, values: &[T], margin: usize, fill: T) -> Vec<T> {
    let out_dims = Dims::new(dims.nx + 2 * margin, dims.ny + 2 * margin, dims.nz + 2 * margin);
    let mut out = vec![fill; out_dims.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            let src = dims.index(0, y, z);
            let dst = out_dims.index(margin, y + margin, z + margin);
            out[dst..dst + dims.nx].copy_from_slice(&values[src..src + dims.nx]);
        }
    }
    out
}

/// A single 2D slice, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2 {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f32>,
}

impl Field2 {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Field2 { nx, ny, values: vec![0.0; nx * ny] }
    }

    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                values.push(f(x, y));
            }
        }
        Field2 { nx, ny, values }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.nx + x]
    }
}
