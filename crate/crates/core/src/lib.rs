//! Bioluminescence tomography toolkit.
//!
//! The crate covers three things:
//!
//! - a P1 finite element solver for the stationary diffusion model
//!   `-div(D grad u) + mu_a u = q` in a disk or ball with the Robin condition
//!   `u + 2 D du/dn = g^-`, together with the boundary flux measurement
//!   `g = -D du/dn = (u - g^-)/2`;
//! - reconstruction of piecewise constant sources `q = sum phi_j chi(omega_j)`
//!   over parametrized shape families with a Levenberg-Marquardt iteration whose
//!   regularization parameter follows the sigmoid schedule
//!   `lambda(i) = 1 / (1 + exp(beta (i + i0)))`;
//! - a numerical study of the decay of complex geometric optics solutions
//!   `w = exp(-tau (xi + i xi_perp).(x - x_c)) / sqrt(D)` on truncated corners.
//!
//! [`experiment`] ties everything together into reproducible, config-driven runs.

pub mod cgo;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod lm;
pub mod media;
pub mod mesh;
pub mod noise;
pub mod quadrature;
pub mod sensors;
pub mod source;
pub mod sparse;

pub use error::{Error, Result};

/// Spatial point. Two-dimensional quantities use `z = 0`.
pub type Point = nalgebra::Vector3<f64>;

/// Builds a point from a 2- or 3-element coordinate slice.
pub fn point_from_slice(coords: &[f64]) -> Option<Point> {
    match coords.len() {
        2 => Some(Point::new(coords[0], coords[1], 0.0)),
        3 => Some(Point::new(coords[0], coords[1], coords[2])),
        _ => None,
    }
}

/// Returns the first `dim` coordinates of a point.
pub fn point_coords(p: &Point, dim: usize) -> Vec<f64> {
    p.iter().take(dim).copied().collect()
}
