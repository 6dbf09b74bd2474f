//! Convex-integration laboratory for 3D quasi-geostrophic flow and 2D Euler
//! on the periodic torus.

pub mod blocks;
pub mod cli;
pub mod exact_modes;
pub mod scheme;
pub mod spectral;
pub mod transport;
