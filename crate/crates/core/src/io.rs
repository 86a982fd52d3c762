//! On-disk formats. Volumes and sinograms are raw little-endian streams
//! (`f32` values, `u8` label codes) next to a TOML sidecar with the same stem:
//!
//! ```toml
//! kind = "labels"          # "grid", "labels" or "sinogram"
//! dtype = "u8"             # "f32le" or "u8"
//! dims = [160, 160, 520]
//! spacing_mm = 0.05
//! origin_mm = [0.0, 0.0, 0.0]
//! ```
//!
//! Sinogram sidecars add a `[geometry]` table and the optional source
//! intensity `i0`; their raw stream is ordered slice, angle, bin. Phantom
//! specifications are plain TOML with one `[[voids]]` table per cavity.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Frame, Label, LabelVolume, VoxelGrid};
use crate::voxphantom::PhantomSpec;
use crate::xray::{ScanGeometry, Sinogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Grid,
    Labels,
    Sinogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: Kind,
    pub dtype: String,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub origin_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<ScanGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i0: Option<f64>,
}

impl Sidecar {
    fn frame(&self, path: &Path) -> Result<Frame> {
        let [nx, ny, nz] = self.dims;
        Frame::new(Dims::new(nx, ny, nz), self.spacing_mm, self.origin_mm).map_err(|e| Error::format(path, e))
    }

    fn for_frame(kind: Kind, dtype: &str, f: &Frame) -> Self {
        Sidecar {
            kind,
            dtype: dtype.into(),
            dims: f.dims.as_array(),
            spacing_mm: f.spacing_mm,
            origin_mm: f.origin_mm,
            geometry: None,
            i0: None,
        }
    }
}

/// Sidecar path belonging to a raw file.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("toml")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_sidecar(raw: &Path, car: &Sidecar) -> Result<()> {
    let text = toml::to_string(car).map_err(|e| Error::format(raw, e))?;
    write_file(&sidecar_path(raw), text.as_bytes())
}

pub fn read_sidecar(raw: &Path) -> Result<Sidecar> {
    let path = sidecar_path(raw);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(&path, e))
}

fn expect(car: &Sidecar, raw: &Path, kind: Kind, dtype: &str) -> Result<()> {
    if car.kind != kind || car.dtype != dtype {
        return Err(Error::format(
            sidecar_path(raw),
            format!("expected kind {kind:?} / dtype {dtype}, found {:?} / {}", car.kind, car.dtype),
        ));
    }
    Ok(())
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 4 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", count * 4, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes `raw` and its sidecar; returns both paths.
pub fn write_grid(raw: &Path, grid: &VoxelGrid) -> Result<Vec<PathBuf>> {
    write_file(raw, &f32_bytes(grid.values()))?;
    write_sidecar(raw, &Sidecar::for_frame(Kind::Grid, "f32le", grid.frame()))?;
    Ok(vec![raw.to_path_buf(), sidecar_path(raw)])
}

pub fn read_grid(raw: &Path) -> Result<VoxelGrid> {
    let car = read_sidecar(raw)?;
    expect(&car, raw, Kind::Grid, "f32le")?;
    let frame = car.frame(raw)?;
    let values = read_f32(raw, frame.dims.len())?;
    VoxelGrid::new(frame, values).map_err(|e| Error::format(raw, e))
}

pub fn write_labels(raw: &Path, labels: &LabelVolume) -> Result<Vec<PathBuf>> {
    let bytes: Vec<u8> = labels.labels().iter().map(|l| l.code()).collect();
    write_file(raw, &bytes)?;
    write_sidecar(raw, &Sidecar::for_frame(Kind::Labels, "u8", labels.frame()))?;
    Ok(vec![raw.to_path_buf(), sidecar_path(raw)])
}

pub fn read_labels(raw: &Path) -> Result<LabelVolume> {
    let car = read_sidecar(raw)?;
    expect(&car, raw, Kind::Labels, "u8")?;
    let frame = car.frame(raw)?;
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    if bytes.len() != frame.dims.len() {
        return Err(Error::format(raw, format!("expected {} bytes, found {}", frame.dims.len(), bytes.len())));
    }
    let labels = bytes
        .iter()
        .map(|b| Label::from_code(*b).ok_or_else(|| Error::format(raw, format!("invalid label code {b}"))))
        .collect::<Result<Vec<_>>>()?;
    LabelVolume::new(frame, labels)
}

pub fn write_sinogram(raw: &Path, sino: &Sinogram) -> Result<Vec<PathBuf>> {
    write_file(raw, &f32_bytes(sino.data()))?;
    let mut car = Sidecar::for_frame(Kind::Sinogram, "f32le", sino.frame());
    car.geometry = Some(*sino.geometry());
    car.i0 = sino.i0();
    write_sidecar(raw, &car)?;
    Ok(vec![raw.to_path_buf(), sidecar_path(raw)])
}

pub fn read_sinogram(raw: &Path) -> Result<Sinogram> {
    let car = read_sidecar(raw)?;
    expect(&car, raw, Kind::Sinogram, "f32le")?;
    let frame = car.frame(raw)?;
    let geometry = car.geometry.ok_or_else(|| Error::format(sidecar_path(raw), "missing [geometry] table"))?;
    let data = read_f32(raw, geometry.slice_len() * frame.dims.nz)?;
    Sinogram::new(geometry, frame, car.i0, data).map_err(|e| Error::format(raw, e))
}

pub fn write_phantom(path: &Path, spec: &PhantomSpec) -> Result<Vec<PathBuf>> {
    let text = toml::to_string(spec).map_err(|e| Error::format(path, e))?;
    write_file(path, text.as_bytes())?;
    Ok(vec![path.to_path_buf()])
}

pub fn read_phantom(path: &Path) -> Result<PhantomSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: PhantomSpec = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
    spec.validate().map_err(|e| Error::format(path, e))?;
    Ok(spec)
}
