//! Tomographic metrology for 3D-printed samples.
//!
//! The crate covers the whole synthetic characterization loop:
//!
//! - [`voxphantom`]: ground-truth bodies with cube/sphere cavity schedules and
//!   their rasterization into voxel grids.
//! - [`printsim`]: printer settings and a simulated "as printed" volume
//!   (layer stair-stepping, rough outer walls, under-extrusion pores).
//! - [`xray`]: Lambert-Beer attenuation, exact parallel-beam projection and
//!   photon noise.
//! - [`fbp`]: ramp-filtered back projection.
//! - [`segmet`]: Otsu segmentation, void extraction and detectability scoring.
//! - [`metrology`]: cusp density, roughness, porosity, registration and
//!   per-printer setting ranking.
//! - [`pipeline`]: configuration, slice-stack ingestion, end-to-end runs,
//!   reports and run manifests.
//!
//! Volumes are stored x-fastest, then y, then z, in body millimetre
//! coordinates with isotropic voxels.

pub mod error;
pub mod fbp;
pub mod io;
pub mod metrology;
pub mod morphology;
pub mod pipeline;
pub mod printsim;
pub mod segmet;
pub mod volume;
pub mod voxphantom;
pub mod xray;

pub use error::{Error, ErrorClass, Result};
pub use volume::{Dims, Field2, Frame, Label, LabelCounts, LabelVolume, Vec3, VoxelGrid};
