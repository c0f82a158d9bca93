//! Registration of a rigged, blendshape-driven head template to multi-view
//! normal, parsing, and landmark targets.
//!
//! The pipeline deforms the template vertices against rendered losses,
//! corrects the topology between epochs while interpolating the rig onto new
//! vertices, fits eyeball spheres, aligns a teeth template, and bakes a UV
//! texture from the views. A synthetic harness generates fully
//! ground-truthed cases so the whole chain can be verified without any
//! learned model in the loop.
//!
//! Modules follow the pipeline stages:
//! - [`rig`]: the parametric model and linear blend skinning
//! - [`raster`]: differentiable software rasterization
//! - [`objective`]: loss terms and their vertex gradients
//! - [`remesh`]: topology correction with rig interpolation
//! - [`fitter`]: the staged optimization loop, eyeballs, teeth
//! - [`texbake`]: multi-view texture baking
//! - [`harness`]: synthetic cases, metrics, end-to-end driver
//! - [`io`]: rig container, images, meshes, configs, reports

pub mod error;
pub mod fitter;
pub mod harness;
pub mod io;
pub mod math;
pub mod objective;
pub mod raster;
pub mod remesh;
pub mod rig;
pub mod texbake;
pub mod toy;

pub use error::{Error, Result};

/// Builds the global thread pool, honoring the `RIGFIT_THREADS` cap. Safe to
/// call more than once; later calls keep the existing pool.
pub fn init_threads() {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("RIGFIT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        builder = builder.num_threads(n.max(1));
    }
    let _ = builder.build_global();
}
