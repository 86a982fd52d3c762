//! Filtered back projection for parallel-beam sinograms.
//!
//! Each detector row is zero-padded to a power of two of at least twice its
//! length, multiplied by the sampled ramp `|k| / N` (optionally Hann
//! windowed) and transformed back. Sampling the ramp directly keeps the DC
//! gain exactly zero; its impulse response is `1/4` at the centre, zero at
//! even offsets and `-1 / (N sin(pi n / N))^2` at odd ones, which converges to
//! the closed-form `-1 / (pi n)^2` as `N` grows.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Field2, VoxelGrid};
use crate::xray::{slabs, ScanGeometry, Sinogram};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    #[default]
    Ramp,
    RampHann,
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(FilterKind::Ramp),
            "ramp_hann" | "ramp-hann" | "hann" => Ok(FilterKind::RampHann),
            other => Err(Error::Config(format!("unknown filter `{other}` (expected ramp or ramp_hann)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Highest passed frequency as a fraction of Nyquist.
    pub cutoff: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec { kind: FilterKind::Ramp, cutoff: 1.0 }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::Config(format!("filter cutoff must be in (0, 1], got {}", self.cutoff)));
        }
        Ok(())
    }
}

/// Padded FFT length used for rows of `len` samples.
pub fn padded_len(len: usize) -> usize {
    (2 * len).next_power_of_two()
}

/// Filter gain at each FFT bin of a length-`n` transform.
pub fn frequency_response(n: usize, spec: &FilterSpec) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let kk = k.min(n - k) as f64;
            // fraction of Nyquist
            let f = kk / (n as f64 / 2.0);
            if f > spec.cutoff + 1e-12 {
                return 0.0;
            }
            let ramp = kk / n as f64;
            match spec.kind {
                FilterKind::Ramp => ramp,
                FilterKind::RampHann => ramp * 0.5 * (1.0 + (PI * f / spec.cutoff).cos()),
            }
        })
        .collect()
}

/// Reusable ramp filter for rows of one length.
pub struct RowFilter {
    len: usize,
    n: usize,
    gain: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RowFilter {
    pub fn new(len: usize, spec: &FilterSpec) -> Result<Self> {
        spec.validate()?;
        if len < 2 {
            return Err(Error::Geometry(format!("detector rows need at least 2 bins, got {len}")));
        }
        let n = padded_len(len);
        let mut planner = FftPlanner::new();
        let gain = frequency_response(n, spec).into_iter().map(|g| g / n as f64).collect();
        Ok(RowFilter { len, n, gain, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) })
    }

    /// Filters `a` and, when given, `b` in one complex transform; the response
    /// is real and even, so the two rows stay separable as real and imaginary
    /// parts.
    pub fn apply_pair(&self, a: &[f32], b: Option<&[f32]>, out_a: &mut [f32], out_b: Option<&mut [f32]>, buf: &mut Vec<Complex<f64>>) {
        buf.clear();
        buf.resize(self.n, Complex::new(0.0, 0.0));
        for i in 0..self.len {
            buf[i] = Complex::new(a[i] as f64, b.map_or(0.0, |b| b[i] as f64));
        }
        self.forward.process(buf);
        for (c, g) in buf.iter_mut().zip(&self.gain) {
            *c *= *g;
        }
        self.inverse.process(buf);
        for i in 0..self.len {
            out_a[i] = buf[i].re as f32;
        }
        if let Some(out_b) = out_b {
            for i in 0..self.len {
                out_b[i] = buf[i].im as f32;
            }
        }
    }

    pub fn apply(&self, row: &[f32]) -> Vec<f32> {
        let mut out = vec![0f32; self.len];
        self.apply_pair(row, None, &mut out, None, &mut Vec::new());
        out
    }
}

/// Ramp-filters one detector row (unit sample spacing).
pub fn filter_projection(row: &[f32], spec: &FilterSpec) -> Result<Vec<f32>> {
    Ok(RowFilter::new(row.len(), spec)?.apply(row))
}

/// Back-projects `k` interleaved filtered sinograms (`q[(angle * bins + bin)
/// * k + slice]`) onto an `nx x ny` grid of `pixel` spacing, accumulating
/// into `out[pixel * k + slice]`. Linear interpolation between bins; rays
/// beyond the detector contribute nothing.
fn back_project_interleaved(q: &[f32], k: usize, g: &ScanGeometry, nx: usize, ny: usize, pixel: f64, out: &mut [f32]) {
    let nb = g.detector_bins;
    let half_b = (nb as f64 - 1.0) / 2.0;
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    for a in 0..g.n_angles {
        let theta = g.angle(a);
        let (c, s) = (theta.cos() * pixel / g.detector_pitch_mm, theta.sin() * pixel / g.detector_pitch_mm);
        let qa = &q[a * nb * k..(a + 1) * nb * k];
        for y in 0..ny {
            let base = (0.0 - cx) * c + (y as f64 - cy) * s + half_b;
            for x in 0..nx {
                let u = base + x as f64 * c;
                if !(u >= 0.0 && u <= (nb - 1) as f64) {
                    continue;
                }
                let b0 = (u.floor() as usize).min(nb - 2);
                let w = (u - b0 as f64) as f32;
                let lo = &qa[b0 * k..(b0 + 1) * k];
                let hi = &qa[(b0 + 1) * k..(b0 + 2) * k];
                let o = &mut out[(y * nx + x) * k..(y * nx + x + 1) * k];
                for i in 0..k {
                    o[i] += lo[i] + w * (hi[i] - lo[i]);
                }
            }
        }
    }
}

/// Reconstructs one slice (`sino2d`: bins along x, angles along y) onto an
/// `out_dims` grid of `pixel_mm` pixels centred on the rotation axis. Output
/// is in 1/mm.
pub fn fbp_slice(sino2d: &Field2, geometry: &ScanGeometry, spec: &FilterSpec, out_dims: (usize, usize), pixel_mm: f64) -> Result<Field2> {
    geometry.validate()?;
    if sino2d.nx != geometry.detector_bins || sino2d.ny != geometry.n_angles {
        return Err(Error::Geometry(format!(
            "sinogram is {} bins x {} angles, geometry expects {} x {}",
            sino2d.nx, sino2d.ny, geometry.detector_bins, geometry.n_angles
        )));
    }
    let (nx, ny) = out_dims;
    let values = reconstruct_slab(&[&sino2d.values], geometry, spec, nx, ny, pixel_mm)?;
    Ok(Field2 { nx, ny, values })
}

/// FBP of several slices at once; returns them concatenated slice by slice.
fn reconstruct_slab(slices: &[&[f32]], g: &ScanGeometry, spec: &FilterSpec, nx: usize, ny: usize, pixel: f64) -> Result<Vec<f32>> {
    let k = slices.len();
    let nb = g.detector_bins;
    let filter = RowFilter::new(nb, spec)?;
    let mut q = vec![0f32; g.n_angles * nb * k];
    let rows: Vec<&[f32]> = slices.iter().flat_map(|s| s.chunks_exact(nb)).collect();
    let mut buf = Vec::new();
    let (mut fa, mut fb) = (vec![0f32; nb], vec![0f32; nb]);
    for (pair_idx, pair) in rows.chunks(2).enumerate() {
        filter.apply_pair(pair[0], pair.get(1).copied(), &mut fa, pair.get(1).map(|_| fb.as_mut_slice()), &mut buf);
        for (j, filtered) in [&fa, &fb].into_iter().enumerate().take(pair.len()) {
            let r = 2 * pair_idx + j;
            let (dz, a) = (r / g.n_angles, r % g.n_angles);
            for (b, v) in filtered.iter().enumerate() {
                q[(a * nb + b) * k + dz] = *v;
            }
        }
    }
    let mut acc = vec![0f32; nx * ny * k];
    back_project_interleaved(&q, k, g, nx, ny, pixel, &mut acc);
    let scale = (PI / g.n_angles as f64 / g.detector_pitch_mm) as f32;
    let plane = nx * ny;
    let mut out = vec![0f32; plane * k];
    for p in 0..plane {
        for dz in 0..k {
            out[dz * plane + p] = acc[p * k + dz] * scale;
        }
    }
    Ok(out)
}

/// Reconstructs every slice onto the sinogram's volume frame, without
/// clamping (values may dip below zero next to edges).
pub fn reconstruct_values(sino: &Sinogram, spec: &FilterSpec) -> Result<Vec<f32>> {
    spec.validate()?;
    let f = *sino.frame();
    let g = *sino.geometry();
    let d = f.dims;
    let parts: Vec<Result<Vec<f32>>> = slabs(d.nz)
        .into_par_iter()
        .map(|(z0, z1)| {
            let slices: Vec<&[f32]> = (z0..z1).map(|z| sino.slice(z)).collect();
            reconstruct_slab(&slices, &g, spec, d.nx, d.ny, f.spacing_mm)
        })
        .collect();
    let mut values = Vec::with_capacity(d.len());
    for p in parts {
        values.extend(p?);
    }
    Ok(values)
}

/// Reconstructed attenuation volume on the sinogram's frame. Negative
/// undershoot is clamped to zero, since attenuation cannot be negative.
pub fn reconstruct_volume(sino: &Sinogram, spec: &FilterSpec) -> Result<VoxelGrid> {
    let values = reconstruct_values(sino, spec)?.into_iter().map(|v| v.max(0.0)).collect();
    VoxelGrid::new(*sino.frame(), values)
}
