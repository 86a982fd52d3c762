//! Slice stacks: one grayscale image per z-slice plus a `stack.toml` sidecar.
//!
//! ```toml
//! spacing_mm = 0.05
//! bit_depth = 16          # 8 or 16 (PGM slices) or 32 (raw f32le slices)
//! scale_per_count = 1e-5  # 1/mm per gray level; ignored for 32-bit stacks
//! origin_mm = [0.0, 0.0, 0.0]
//! ```
//!
//! Slices are taken in ascending file-name order.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Frame, VoxelGrid};

pub const STACK_SIDECAR: &str = "stack.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSidecar {
    pub spacing_mm: f64,
    pub bit_depth: u8,
    #[serde(default = "unit_scale")]
    pub scale_per_count: f64,
    #[serde(default)]
    pub origin_mm: [f64; 3],
}

fn unit_scale() -> f64 {
    1.0
}

fn ingest_err(path: &Path, reason: impl ToString) -> Error {
    Error::Ingest { path: path.to_path_buf(), reason: reason.to_string() }
}

fn slice_ext(bit_depth: u8) -> &'static str {
    if bit_depth == 32 {
        "raw"
    } else {
        "pgm"
    }
}

/// Reads a stack directory into a grid in 1/mm.
pub fn ingest_stack(dir: &Path) -> Result<VoxelGrid> {
    let car_path = dir.join(STACK_SIDECAR);
    let text = fs::read_to_string(&car_path).map_err(|e| ingest_err(&car_path, format!("sidecar not readable: {e}")))?;
    let car: StackSidecar = toml::from_str(&text).map_err(|e| ingest_err(&car_path, e))?;
    if ![8, 16, 32].contains(&car.bit_depth) {
        return Err(ingest_err(&car_path, format!("unsupported bit depth {}", car.bit_depth)));
    }
    if !(car.scale_per_count > 0.0 && car.scale_per_count.is_finite()) {
        return Err(ingest_err(&car_path, format!("scale_per_count must be > 0, got {}", car.scale_per_count)));
    }
    let ext = slice_ext(car.bit_depth);
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ingest_err(dir, format!("no .{ext} slices found")));
    }
    let mut dims: Option<(usize, usize)> = None;
    let mut values = Vec::new();
    for f in &files {
        let (w, h, vals) = if car.bit_depth == 32 { read_raw_slice(f, dims)? } else { read_pgm_slice(f, car.bit_depth, car.scale_per_count)? };
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(ingest_err(f, format!("slice is {w}x{h}, stack is {}x{}", d.0, d.1)));
            }
            _ => {}
        }
        values.extend(vals);
    }
    let (w, h) = dims.expect("at least one slice");
    let frame = Frame::new(Dims::new(w, h, files.len()), car.spacing_mm, car.origin_mm).map_err(|e| ingest_err(&car_path, e))?;
    VoxelGrid::new(frame, values).map_err(|e| ingest_err(dir, e))
}

fn read_pgm_slice(path: &Path, bit_depth: u8, scale: f64) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| ingest_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let counts: Vec<u32> = match (bit_depth, img) {
        (8, image::DynamicImage::ImageLuma8(b)) => b.into_raw().into_iter().map(u32::from).collect(),
        (16, image::DynamicImage::ImageLuma16(b)) => b.into_raw().into_iter().map(u32::from).collect(),
        (_, other) => return Err(ingest_err(path, format!("expected {bit_depth}-bit grayscale, found {:?}", other.color()))),
    };
    Ok((w, h, counts.into_iter().map(|c| (c as f64 * scale) as f32).collect()))
}

/// Raw slices carry no header; their size must match the first slice, which
/// is taken to be square.
fn read_raw_slice(path: &Path, expect: Option<(usize, usize)>) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(ingest_err(path, "size is not a multiple of 4 bytes"));
    }
    let n = bytes.len() / 4;
    let (w, h) = match expect {
        Some((w, h)) if w * h == n => (w, h),
        Some((w, h)) => return Err(ingest_err(path, format!("slice has {n} values, stack slices have {}", w * h))),
        None => {
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n {
                return Err(ingest_err(path, format!("{n} values do not form a square slice; use PGM for non-square stacks")));
            }
            (side, side)
        }
    };
    Ok((w, h, bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()))
}

/// Writes `grid` as a stack at `bit_depth`. For 8/16-bit stacks the scale maps
/// the grid maximum to full range unless given. Returns the written files.
pub fn export_stack(grid: &VoxelGrid, dir: &Path, bit_depth: u8, scale_per_count: Option<f64>) -> Result<Vec<PathBuf>> {
    if ![8, 16, 32].contains(&bit_depth) {
        return Err(Error::Config(format!("unsupported bit depth {bit_depth}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let max_count = if bit_depth == 8 { 255.0 } else { 65535.0 };
    let vmax = grid.values().iter().cloned().fold(0f32, f32::max) as f64;
    let scale = match scale_per_count {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(Error::Config(format!("scale_per_count must be > 0, got {s}"))),
        None if bit_depth == 32 || vmax == 0.0 => 1.0,
        None => vmax / max_count,
    };
    let d = grid.dims();
    let width = d.nz.to_string().len().max(4);
    let mut files = Vec::with_capacity(d.nz + 1);
    for z in 0..d.nz {
        let path = dir.join(format!("slice_{z:0width$}.{}", slice_ext(bit_depth)));
        let vals = grid.slice_z(z);
        let count = |v: f32| (v as f64 / scale).round().clamp(0.0, max_count);
        match bit_depth {
            8 => {
                let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_vec(d.nx as u32, d.ny as u32, vals.iter().map(|v| count(*v) as u8).collect()).expect("buffer size");
                buf.save_with_format(&path, image::ImageFormat::Pnm).map_err(|e| Error::format(&path, e))?;
            }
            16 => {
                let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_vec(d.nx as u32, d.ny as u32, vals.iter().map(|v| count(*v) as u16).collect()).expect("buffer size");
                buf.save_with_format(&path, image::ImageFormat::Pnm).map_err(|e| Error::format(&path, e))?;
            }
            _ => {
                let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
        files.push(path);
    }
    let car = StackSidecar { spacing_mm: grid.spacing_mm(), bit_depth, scale_per_count: scale, origin_mm: grid.frame().origin_mm };
    let car_path = dir.join(STACK_SIDECAR);
    fs::write(&car_path, toml::to_string(&car).expect("sidecar serializes")).map_err(|e| Error::io(&car_path, e))?;
    files.push(car_path);
    Ok(files)
}
