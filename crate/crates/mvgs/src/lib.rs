//! CPU library for multi-view mini-batch training of 3D Gaussian splats.
//!
//! The pieces fit together in a fixed pipeline: a [`scene`] holds gaussians
//! and cameras, [`projection`] flattens gaussians to screen-space ellipses,
//! [`rasterizer`] blends them tile by tile under one of three schedulers,
//! [`losses`] scores the result, [`gradients`] walks everything backward to
//! parameter space, and [`trainer`] loops the whole thing with Adam and
//! adaptive density control. [`batchvar`] measures how mini-batch choice
//! affects gradient variance; [`cli`] wires the modules to subcommands.
//!
//! Everything is `f64` and deterministic: a fixed seed and worker count
//! reproduce results bit for bit.

pub mod batchvar;
pub mod cli;
pub mod config;
pub mod densify;
pub mod gradients;
pub mod io;
pub mod losses;
pub mod projection;
pub mod rasterizer;
pub mod scene;
pub mod trainer;
