//! Complex geometric optics solutions on truncated corners.
//!
//! In the constant coefficient case the CGO solution is
//! `w(x) = exp(-tau (xi + i xi_perp).(x - x_c)) / sqrt(D)` with `xi`, `xi_perp`
//! orthonormal, so `w` is harmonic. This module integrates `w`, `|w|^2`,
//! `|grad w|^2` and `|x - x_c|^alpha w` over a truncated cone `S_h` and
//! studies how these quantities decay in `tau`.

use std::cell::RefCell;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{integrate, QuadratureError, Tolerance};
use crate::Point;

#[derive(Debug, Error)]
pub enum CgoError {
    #[error("invalid cone: {0}")]
    Cone(String),
    #[error("invalid CGO parameters: {0}")]
    Params(String),
    #[error("xi violates the cone condition (rho = {rho:.6})")]
    Rho { rho: f64 },
    #[error("invalid tau grid: {0}")]
    Grid(String),
    #[error("{quantity} at tau = {tau}: {source}")]
    Quadrature {
        quantity: &'static str,
        tau: f64,
        #[source]
        source: QuadratureError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CgoError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, CgoError::Quadrature { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConeKind {
    #[default]
    Conic,
    /// Edges ordered counterclockwise seen from the apex looking along the axis.
    Polyhedral { edges: Vec<Vec<f64>> },
}

/// Cone description as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeSpec {
    pub dim: usize,
    pub apex: Vec<f64>,
    pub axis: Vec<f64>,
    pub half_angle: f64,
    pub truncation: f64,
    #[serde(default)]
    pub kind: ConeKind,
}

impl ConeSpec {
    /// 2D sector at the origin opening along `+x`.
    pub fn sector(half_angle: f64, truncation: f64) -> ConeSpec {
        ConeSpec { dim: 2, apex: vec![0.0, 0.0], axis: vec![1.0, 0.0], half_angle, truncation, kind: ConeKind::Conic }
    }

    pub fn build(&self) -> Result<Cone, CgoError> {
        Cone::new(self)
    }
}

fn vector(v: &[f64], dim: usize, what: &str) -> Result<Point, CgoError> {
    if v.len() != dim {
        return Err(CgoError::Cone(format!("{what} has {} coordinates, expected {dim}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CgoError::Cone(format!("{what} is not finite")));
    }
    Ok(crate::point_from_slice(v).expect("dim checked"))
}

/// Validated truncated cone.
#[derive(Debug, Clone, PartialEq)]
pub struct Cone {
    dim: usize,
    apex: Point,
    axis: Point,
    // orthonormal complement of the axis (second entry unused in 2D)
    perp: [Point; 2],
    half_angle: f64,
    h: f64,
    edges: Option<Vec<Point>>,
}

impl Cone {
    pub fn new(spec: &ConeSpec) -> Result<Cone, CgoError> {
        let dim = spec.dim;
        if dim != 2 && dim != 3 {
            return Err(CgoError::Cone(format!("dimension {dim}")));
        }
        let apex = vector(&spec.apex, dim, "apex")?;
        let axis = vector(&spec.axis, dim, "axis")?;
        if ((axis.norm() - 1.0).abs()) > 1e-9 {
            return Err(CgoError::Cone(format!("axis must be a unit vector, |v_c| = {}", axis.norm())));
        }
        let axis = axis.normalize();
        if !(spec.half_angle > 0.0 && spec.half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(CgoError::Cone(format!("half angle {} outside (0, pi/2)", spec.half_angle)));
        }
        if !(spec.truncation > 0.0 && spec.truncation.is_finite()) {
            return Err(CgoError::Cone(format!("truncation {} must be positive", spec.truncation)));
        }
        let perp = if dim == 2 {
            [Point::new(-axis.y, axis.x, 0.0), Point::zeros()]
        } else {
            let helper = if axis.x.abs() < 0.9 { Point::x() } else { Point::y() };
            let p1 = axis.cross(&helper).normalize();
            [p1, axis.cross(&p1)]
        };
        let edges = match &spec.kind {
            ConeKind::Conic => None,
            ConeKind::Polyhedral { edges } => {
                if dim != 3 {
                    return Err(CgoError::Cone("polyhedral corners are three-dimensional".into()));
                }
                if edges.len() < 3 {
                    return Err(CgoError::Cone(format!("polyhedral corner needs at least 3 edges, got {}", edges.len())));
                }
                let mut unit = Vec::with_capacity(edges.len());
                for (k, e) in edges.iter().enumerate() {
                    let e = vector(e, 3, "edge")?;
                    if e.norm() == 0.0 {
                        return Err(CgoError::Cone(format!("edge {k} is zero")));
                    }
                    let e = e.normalize();
                    if e.dot(&axis) < spec.half_angle.cos() - 1e-12 {
                        return Err(CgoError::Cone(format!("edge {k} is not within the half angle of the axis")));
                    }
                    unit.push(e);
                }
                let l = unit.len();
                for i in 0..l {
                    let n = unit[i].cross(&unit[(i + 1) % l]);
                    let ok_axis = n.dot(&axis) > 0.0;
                    let ok_rest = (0..l).filter(|&k| k != i && k != (i + 1) % l).all(|k| n.dot(&unit[k]) > 1e-12);
                    if !ok_axis || !ok_rest {
                        return Err(CgoError::Cone(format!(
                            "edges are not in strictly convex counterclockwise position at face {i}"
                        )));
                    }
                }
                Some(unit)
            }
        };
        Ok(Cone { dim, apex, axis, perp, half_angle: spec.half_angle, h: spec.truncation, edges })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apex(&self) -> Point {
        self.apex
    }

    pub fn axis(&self) -> Point {
        self.axis
    }

    pub fn truncation(&self) -> f64 {
        self.h
    }

    pub fn is_polyhedral(&self) -> bool {
        self.edges.is_some()
    }

    /// Unit vector orthogonal to the axis; in 2D the axis rotated by +90 degrees.
    pub fn default_xi_perp(&self) -> Point {
        self.perp[0]
    }

    pub fn contains(&self, p: &Point) -> bool {
        let y = p - self.apex;
        let r = y.norm();
        if r >= self.h {
            return false;
        }
        if r == 0.0 {
            return true;
        }
        match &self.edges {
            None => y.dot(&self.axis) >= r * self.half_angle.cos(),
            Some(e) => {
                let l = e.len();
                (0..l).all(|i| e[i].cross(&e[(i + 1) % l]).dot(&y) >= 0.0)
            }
        }
    }

    /// `min xi . d` over unit directions `d` of the cone.
    pub fn rho(&self, xi: &Point) -> f64 {
        match &self.edges {
            None => {
                let ang = xi.dot(&self.axis).clamp(-1.0, 1.0).acos();
                let s = ang + self.half_angle;
                if s >= std::f64::consts::PI {
                    -1.0
                } else {
                    s.cos()
                }
            }
            Some(e) => {
                let l = e.len();
                // -xi inside the cone gives the global minimum
                let inside = (0..l).all(|i| e[i].cross(&e[(i + 1) % l]).dot(&(-xi)) >= 0.0);
                if inside {
                    return -1.0;
                }
                let mut best = f64::INFINITY;
                for i in 0..l {
                    let a = e[i];
                    let b = e[(i + 1) % l];
                    best = best.min(xi.dot(&a)).min(xi.dot(&b));
                    // the arc from a to b: cos(t) a + sin(t) b_perp for t in [0, t_end]
                    let bp = (b - a * a.dot(&b)).normalize();
                    let t_end = a.dot(&b).clamp(-1.0, 1.0).acos();
                    let (ca, cb) = (xi.dot(&a), xi.dot(&bp));
                    let amp = ca.hypot(cb);
                    let t_min = (cb.atan2(ca) + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI);
                    if t_min <= t_end {
                        best = best.min(-amp);
                    }
                }
                best
            }
        }
    }

    /// `int_{S_h} g(d, r) dx` in polar or spherical coordinates about the apex,
    /// where `d` is the unit direction and `r` the distance to the apex.
    pub fn integrate(
        &self,
        g: &dyn Fn(&Point, f64) -> Complex64,
        tol: Tolerance,
    ) -> Result<Complex64, QuadratureError> {
        let failure: RefCell<Option<QuadratureError>> = RefCell::new(None);
        let inner_tol = Tolerance { rel: tol.rel * 1e-3, abs: 0.0, max_intervals: tol.max_intervals };
        let middle_tol = Tolerance { rel: tol.rel * 1e-2, abs: 0.0, max_intervals: tol.max_intervals };
        let n = self.dim as i32;
        let keep = |res: Result<crate::quadrature::Estimate, QuadratureError>| match res {
            Ok(e) => e.value,
            Err(e) => {
                let v = e.value;
                failure.borrow_mut().get_or_insert(e);
                v
            }
        };
        let radial = |d: &Point| {
            // the result is already lost; stop refining the outer levels
            if failure.borrow().is_some() {
                return Complex64::new(0.0, 0.0);
            }
            keep(integrate(&|r: f64| g(d, r) * r.powi(n - 1), 0.0, self.h, inner_tol))
        };

        let total = match (&self.edges, self.dim) {
            (None, 2) => {
                let (v, p) = (self.axis, self.perp[0]);
                let f = |phi: f64| radial(&(v * phi.cos() + p * phi.sin()));
                integrate(&f, -self.half_angle, self.half_angle, tol)?.value
            }
            (None, _) => {
                let (v, p1, p2) = (self.axis, self.perp[0], self.perp[1]);
                let f = |psi: f64| {
                    let (s, c) = psi.sin_cos();
                    let ring = |chi: f64| radial(&(v * c + (p1 * chi.cos() + p2 * chi.sin()) * s));
                    keep(integrate(&ring, 0.0, 2.0 * std::f64::consts::PI, middle_tol)) * s
                };
                integrate(&f, 0.0, self.half_angle, tol)?.value
            }
            (Some(edges), _) => {
                let l = edges.len();
                let mut total = Complex64::new(0.0, 0.0);
                for i in 0..l {
                    let a = self.axis;
                    let (ba, ca) = (edges[i] - a, edges[(i + 1) % l] - a);
                    let det = a.dot(&ba.cross(&ca)).abs();
                    let f = |u: f64| {
                        let line = |t: f64| {
                            let d = a + ba * u + ca * ((1.0 - u) * t);
                            let len = d.norm();
                            radial(&(d / len)) * (det / (len * len * len))
                        };
                        keep(integrate(&line, 0.0, 1.0, middle_tol)) * (1.0 - u)
                    };
                    total += integrate(&f, 0.0, 1.0, tol)?.value;
                }
                total
            }
        };
        match failure.into_inner() {
            Some(e) => Err(e),
            None => Ok(total),
        }
    }
}

/// `tau`, the orthonormal pair `(xi, xi_perp)` and the constant diffusion coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgoParams {
    pub tau: f64,
    pub xi: Point,
    pub xi_perp: Point,
    pub diffusion: f64,
}

impl CgoParams {
    pub fn new(tau: f64, xi: Point, xi_perp: Point, diffusion: f64) -> Result<CgoParams, CgoError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CgoError::Params(format!("tau = {tau} must be positive")));
        }
        if !(diffusion > 0.0 && diffusion.is_finite()) {
            return Err(CgoError::Params(format!("D = {diffusion} must be positive")));
        }
        if (xi.norm() - 1.0).abs() > 1e-12 || (xi_perp.norm() - 1.0).abs() > 1e-12 {
            return Err(CgoError::Params("xi and xi_perp must be unit vectors".into()));
        }
        if xi.dot(&xi_perp).abs() > 1e-12 {
            return Err(CgoError::Params(format!("xi . xi_perp = {:e}, expected 0", xi.dot(&xi_perp))));
        }
        Ok(CgoParams { tau, xi, xi_perp, diffusion })
    }

    pub fn with_tau(&self, tau: f64) -> Result<CgoParams, CgoError> {
        CgoParams::new(tau, self.xi, self.xi_perp, self.diffusion)
    }

    /// Components of `xi + i xi_perp`.
    pub fn zeta(&self) -> [Complex64; 3] {
        [0, 1, 2].map(|k| Complex64::new(self.xi[k], self.xi_perp[k]))
    }

    /// `(xi + i xi_perp) . (xi + i xi_perp)`, zero for an orthonormal pair.
    pub fn zeta_square(&self) -> Complex64 {
        self.zeta().iter().map(|z| z * z).sum()
    }

    fn value_at(&self, y: &Point) -> Complex64 {
        let e = Complex64::new(-self.tau * self.xi.dot(y), -self.tau * self.xi_perp.dot(y));
        e.exp() / self.diffusion.sqrt()
    }

    /// `grad w = -tau (xi + i xi_perp) w`.
    pub fn gradient_at(&self, y: &Point) -> [Complex64; 3] {
        let w = self.value_at(y);
        self.zeta().map(|z| -self.tau * z * w)
    }
}

pub fn cgo_field(params: &CgoParams, p: &Point, x_c: &Point) -> Complex64 {
    params.value_at(&(p - x_c))
}

pub fn rho(cone: &Cone, xi: &Point) -> f64 {
    cone.rho(xi)
}

/// `int_{S_h} |x - x_c|^alpha w dx`. `alpha = 0` gives the plain integral.
pub fn cone_integral(cone: &Cone, params: &CgoParams, alpha: f64, rel_tol: f64) -> Result<Complex64, CgoError> {
    let r = cone.rho(&params.xi);
    if r <= 0.0 {
        return Err(CgoError::Rho { rho: r });
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(CgoError::Params(format!("alpha = {alpha} outside [0, 1)")));
    }
    cone.integrate(
        &|d, r| {
            let w = params.value_at(&(d * r));
            if alpha == 0.0 {
                w
            } else {
                w * r.powf(alpha)
            }
        },
        Tolerance::relative(rel_tol),
    )
    .map_err(|source| CgoError::Quadrature { quantity: "cone integral", tau: params.tau, source })
}

pub fn l2_norm(cone: &Cone, params: &CgoParams, rel_tol: f64) -> Result<f64, CgoError> {
    cone.integrate(&|d, r| Complex64::new(params.value_at(&(d * r)).norm_sqr(), 0.0), Tolerance::relative(rel_tol))
        .map(|v| v.re.sqrt())
        .map_err(|source| CgoError::Quadrature { quantity: "L2 norm", tau: params.tau, source })
}

pub fn grad_l2_norm(cone: &Cone, params: &CgoParams, rel_tol: f64) -> Result<f64, CgoError> {
    cone.integrate(
        &|d, r| Complex64::new(params.gradient_at(&(d * r)).iter().map(|g| g.norm_sqr()).sum(), 0.0),
        Tolerance::relative(rel_tol),
    )
    .map(|v| v.re.sqrt())
    .map_err(|source| CgoError::Quadrature { quantity: "gradient L2 norm", tau: params.tau, source })
}

/// Largest `|Laplacian_h w| / (tau^2 |w|)` over the given points, using the
/// central five (2D) or seven (3D) point stencil with step `step`.
pub fn harmonic_residual(params: &CgoParams, x_c: &Point, dim: usize, points: &[Point], step: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for p in points {
        let w0 = cgo_field(params, p, x_c);
        let mut lap = Complex64::new(0.0, 0.0);
        for k in 0..dim {
            let mut e = Point::zeros();
            e[k] = step;
            lap += cgo_field(params, &(p + e), x_c) + cgo_field(params, &(p - e), x_c) - 2.0 * w0;
        }
        lap /= step * step;
        worst = worst.max(lap.norm() / (params.tau * params.tau * w0.norm()));
    }
    worst
}

/// Random points of the truncated cone by rejection from the bounding box.
pub fn sample_points(cone: &Cone, count: usize, seed: u64) -> Vec<Point> {
    let mut rng = crate::noise::rng(seed, 1);
    let mut out = Vec::with_capacity(count);
    let h = cone.truncation();
    while out.len() < count {
        let mut y = Point::zeros();
        for k in 0..cone.dim() {
            y[k] = rng.random_range(-h..h);
        }
        let p = cone.apex() + y;
        if y.norm() > 0.0 && cone.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn default_diffusion() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.5
}
fn default_rel_tol() -> f64 {
    1e-8
}
fn default_points() -> usize {
    100
}
fn default_fd_step() -> f64 {
    1e-4
}
fn default_bound_ratio() -> f64 {
    10.0
}

/// Input of a decay study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub cone: ConeSpec,
    /// Defaults to the cone axis.
    #[serde(default)]
    pub xi: Option<Vec<f64>>,
    /// Defaults to a unit vector orthogonal to `xi`.
    #[serde(default)]
    pub xi_perp: Option<Vec<f64>>,
    #[serde(default = "default_diffusion")]
    pub diffusion: f64,
    pub tau_grid: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_points")]
    pub harmonic_points: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub seed: u64,
    /// Largest accepted max/min ratio for the exponentially scaled norms.
    #[serde(default = "default_bound_ratio")]
    pub bound_ratio: f64,
}

impl DecayConfig {
    /// Sector of half angle pi/4, h = 1, D = 1, xi along the axis and
    /// `tau` in 4, 8, ..., 128.
    pub fn sector_default() -> DecayConfig {
        DecayConfig {
            cone: ConeSpec::sector(std::f64::consts::FRAC_PI_4, 1.0),
            xi: None,
            xi_perp: None,
            diffusion: 1.0,
            tau_grid: vec![4.0, 8.0, 16.0, 32.0, 64.0, 128.0],
            alpha: default_alpha(),
            rel_tol: default_rel_tol(),
            harmonic_points: default_points(),
            fd_step: default_fd_step(),
            seed: 0,
            bound_ratio: default_bound_ratio(),
        }
    }

    /// Cone and base parameters (with `tau` set to the first grid point).
    pub fn resolve(&self) -> Result<(Cone, CgoParams), CgoError> {
        let cone = self.cone.build()?;
        let dim = cone.dim();
        let param_vec = |v: &[f64], what: &str| -> Result<Point, CgoError> {
            if v.len() != dim {
                return Err(CgoError::Params(format!("{what} has {} coordinates, expected {dim}", v.len())));
            }
            Ok(crate::point_from_slice(v).expect("dim checked"))
        };
        let xi = match &self.xi {
            Some(v) => param_vec(v, "xi")?,
            None => cone.axis(),
        };
        let xi_perp = match &self.xi_perp {
            Some(v) => param_vec(v, "xi_perp")?,
            None if dim == 2 => Point::new(-xi.y, xi.x, 0.0),
            None => {
                let helper = if xi.x.abs() < 0.9 { Point::x() } else { Point::y() };
                xi.cross(&helper).normalize()
            }
        };
        let tau = self.tau_grid.first().copied().unwrap_or(1.0);
        Ok((cone, CgoParams::new(tau, xi, xi_perp, self.diffusion)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySample {
    pub tau: f64,
    pub abs_integral: f64,
    pub l2_norm: f64,
    pub grad_l2_norm: f64,
    pub weighted_integral: f64,
    /// `log10(exp(rho h tau) |w|_L2)`.
    pub log10_l2_scaled: f64,
    /// `log10(exp(rho h tau) |grad w|_L2 / (1 + tau))`.
    pub log10_grad_scaled: f64,
    pub harmonic_residual: f64,
}

/// Least-squares slopes of `log q` against `log tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub abs_integral: f64,
    pub l2_norm: f64,
    pub grad_l2_norm: f64,
    pub weighted_integral: f64,
    /// Slope of `ln |w|_L2` against `tau`, to compare with `-rho h`.
    pub l2_exponential_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralExponent {
    pub measured: f64,
    pub nearest_integer: i64,
    pub near_integer: bool,
    /// `-(n - 1)`, the rate in the lower bound for the plain integral.
    pub lower_bound_exponent: i64,
    /// `-n`, the rate from the substitution `x -> x / tau`.
    pub scaling_exponent: i64,
    /// "scaling", "lower_bound" or "neither".
    pub matches: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub l2_ratio: f64,
    pub l2_bounded: bool,
    pub grad_ratio: f64,
    pub grad_bounded: bool,
    pub integral_slope_near_integer: bool,
    pub harmonic: bool,
    pub abs_integral_decreasing: bool,
    pub l2_decreasing: bool,
    pub grad_decreasing: bool,
    pub weighted_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub dim: usize,
    pub rho: f64,
    pub truncation: f64,
    pub alpha: f64,
    pub samples: Vec<DecaySample>,
    pub slopes: Slopes,
    pub integral_exponent: IntegralExponent,
    pub flags: Flags,
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn log_ratio(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    10f64.powf(max - min)
}

pub fn decay_study(cfg: &DecayConfig) -> Result<DecayReport, CgoError> {
    let (cone, base) = cfg.resolve()?;
    let grid = &cfg.tau_grid;
    if grid.len() < 2 {
        return Err(CgoError::Grid("need at least two tau values".into()));
    }
    if grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CgoError::Grid("tau values must be positive and strictly increasing".into()));
    }
    if grid[grid.len() - 1] < 10.0 * grid[0] {
        return Err(CgoError::Grid("tau grid must span at least one decade".into()));
    }
    if !(cfg.rel_tol > 0.0 && cfg.fd_step > 0.0 && cfg.bound_ratio > 1.0) {
        return Err(CgoError::Params("rel_tol, fd_step must be positive and bound_ratio above 1".into()));
    }
    let rho = cone.rho(&base.xi);
    if rho <= 0.0 {
        return Err(CgoError::Rho { rho });
    }
    let h = cone.truncation();
    let points = sample_points(&cone, cfg.harmonic_points, cfg.seed);

    let samples = grid
        .par_iter()
        .map(|&tau| -> Result<DecaySample, CgoError> {
            let p = base.with_tau(tau)?;
            let abs_integral = cone_integral(&cone, &p, 0.0, cfg.rel_tol)?.norm();
            let weighted_integral = cone_integral(&cone, &p, cfg.alpha, cfg.rel_tol)?.norm();
            let l2 = l2_norm(&cone, &p, cfg.rel_tol)?;
            let grad = grad_l2_norm(&cone, &p, cfg.rel_tol)?;
            let shift = rho * h * tau / std::f64::consts::LN_10;
            Ok(DecaySample {
                tau,
                abs_integral,
                l2_norm: l2,
                grad_l2_norm: grad,
                weighted_integral,
                log10_l2_scaled: shift + l2.log10(),
                log10_grad_scaled: shift + grad.log10() - (1.0 + tau).log10(),
                harmonic_residual: harmonic_residual(&p, &cone.apex(), cone.dim(), &points, cfg.fd_step),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let lt: Vec<f64> = samples.iter().map(|s| s.tau.ln()).collect();
    let fit = |f: fn(&DecaySample) -> f64| slope(&lt, &samples.iter().map(|s| f(s).ln()).collect::<Vec<_>>());
    let slopes = Slopes {
        abs_integral: fit(|s| s.abs_integral),
        l2_norm: fit(|s| s.l2_norm),
        grad_l2_norm: fit(|s| s.grad_l2_norm),
        weighted_integral: fit(|s| s.weighted_integral),
        l2_exponential_rate: slope(
            &samples.iter().map(|s| s.tau).collect::<Vec<_>>(),
            &samples.iter().map(|s| s.l2_norm.ln()).collect::<Vec<_>>(),
        ),
    };

    let n = cone.dim() as i64;
    let measured = slopes.abs_integral;
    let nearest = measured.round() as i64;
    let near_integer = (measured - nearest as f64).abs() <= 0.1;
    let matches = if (measured + n as f64).abs() <= 0.1 {
        "scaling"
    } else if (measured + (n - 1) as f64).abs() <= 0.1 {
        "lower_bound"
    } else {
        "neither"
    };

    let tail: Vec<&DecaySample> = samples.iter().filter(|s| s.tau * h >= 5.0).collect();
    let decreasing = |f: fn(&DecaySample) -> f64| tail.windows(2).all(|w| f(w[1]) < f(w[0]));
    let l2_ratio = log_ratio(&samples.iter().map(|s| s.log10_l2_scaled).collect::<Vec<_>>());
    let grad_ratio = log_ratio(&samples.iter().map(|s| s.log10_grad_scaled).collect::<Vec<_>>());
    let flags = Flags {
        l2_ratio,
        l2_bounded: l2_ratio <= cfg.bound_ratio,
        grad_ratio,
        grad_bounded: grad_ratio <= cfg.bound_ratio,
        integral_slope_near_integer: near_integer,
        harmonic: samples.iter().all(|s| s.harmonic_residual <= 1e-4),
        abs_integral_decreasing: decreasing(|s| s.abs_integral),
        l2_decreasing: decreasing(|s| s.l2_norm),
        grad_decreasing: decreasing(|s| s.grad_l2_norm),
        weighted_decreasing: decreasing(|s| s.weighted_integral),
    };

    Ok(DecayReport {
        dim: cone.dim(),
        rho,
        truncation: h,
        alpha: cfg.alpha,
        samples,
        slopes,
        integral_exponent: IntegralExponent {
            measured,
            nearest_integer: nearest,
            near_integer,
            lower_bound_exponent: -(n - 1),
            scaling_exponent: -n,
            matches: matches.into(),
        },
        flags,
    })
}

impl DecayReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "tau,abs_integral,l2_norm,grad_l2_norm,weighted_integral,log10_l2_scaled,log10_grad_scaled,harmonic_residual\n",
        );
        for r in &self.samples {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.tau,
                r.abs_integral,
                r.l2_norm,
                r.grad_l2_norm,
                r.weighted_integral,
                r.log10_l2_scaled,
                r.log10_grad_scaled,
                r.harmonic_residual
            ));
        }
        let sl = &self.slopes;
        s.push_str(&format!(
            "# slopes abs_integral={:.6} l2_norm={:.6} grad_l2_norm={:.6} weighted_integral={:.6} l2_exponential_rate={:.6}\n",
            sl.abs_integral, sl.l2_norm, sl.grad_l2_norm, sl.weighted_integral, sl.l2_exponential_rate
        ));
        let f = &self.flags;
        s.push_str(&format!(
            "# flags l2_bounded={} grad_bounded={} integral_slope_near_integer={} harmonic={} integral_exponent_matches={}\n",
            f.l2_bounded, f.grad_bounded, f.integral_slope_near_integer, f.harmonic, self.integral_exponent.matches
        ));
        s
    }

    /// Writes `decay.json` and `decay.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), CgoError> {
        let dir = dir.as_ref();
        let io = |path: &Path, e: std::io::Error| CgoError::Io { path: path.display().to_string(), source: e };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let json = dir.join("decay.json");
        std::fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes")).map_err(|e| io(&json, e))?;
        let csv = dir.join("decay.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| io(&csv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn sector_params(tau: f64) -> (Cone, CgoParams) {
        let cone = ConeSpec::sector(FRAC_PI_4, 1.0).build().unwrap();
        (cone, CgoParams::new(tau, Point::x(), Point::y(), 1.0).unwrap())
    }

    fn gamma_2_5() -> f64 {
        0.75 * PI.sqrt()
    }

    #[test]
    fn field_at_apex_and_on_axis() {
        let p = CgoParams::new(1.0, Point::x(), Point::y(), 4.0).unwrap();
        let c = Point::new(0.2, -0.1, 0.0);
        assert!((cgo_field(&p, &c, &c) - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        let p = CgoParams::new(1.0, Point::x(), Point::y(), 1.0).unwrap();
        let v = cgo_field(&p, &Point::new(1.0, 0.0, 0.0), &Point::zeros());
        assert!((v.re - (-1.0f64).exp()).abs() < 1e-15 && v.im.abs() < 1e-15);
    }

    #[test]
    fn rejects_non_orthonormal_pair() {
        assert!(CgoParams::new(1.0, Point::x(), Point::new(1.0, 1.0, 0.0).normalize(), 1.0).is_err());
        assert!(CgoParams::new(1.0, Point::x() * 2.0, Point::y(), 1.0).is_err());
        assert!(CgoParams::new(-1.0, Point::x(), Point::y(), 1.0).is_err());
    }

    #[test]
    fn rho_conic() {
        let c = ConeSpec::sector(FRAC_PI_4, 1.0).build().unwrap();
        assert!((c.rho(&Point::x()) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(c.rho(&Point::y()) <= 0.0);
        let wide = ConeSpec::sector(PI / 2.0 - 1e-9, 1.0).build().unwrap();
        let r = wide.rho(&Point::x());
        assert!(r > 0.0 && r < 1e-8);
    }

    #[test]
    fn invalid_cones() {
        assert!(ConeSpec::sector(PI / 2.0, 1.0).build().is_err());
        assert!(ConeSpec::sector(0.3, 0.0).build().is_err());
        let mut s = ConeSpec::sector(0.3, 1.0);
        s.axis = vec![1.0, 1.0];
        assert!(s.build().is_err());
    }

    fn octant() -> ConeSpec {
        let v = 1.0 / 3f64.sqrt();
        ConeSpec {
            dim: 3,
            apex: vec![0.0; 3],
            axis: vec![v, v, v],
            half_angle: 1.0,
            truncation: 1.0,
            kind: ConeKind::Polyhedral {
                edges: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            },
        }
    }

    #[test]
    fn polyhedral_orientation_checked() {
        let mut s = octant();
        s.kind = ConeKind::Polyhedral { edges: vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]] };
        assert!(s.build().is_err());
        let mut narrow = octant();
        narrow.half_angle = 0.5;
        assert!(narrow.build().is_err());
    }

    #[test]
    fn octant_volume_and_rho() {
        let cone = octant().build().unwrap();
        let vol = cone.integrate(&|_, _| Complex64::new(1.0, 0.0), Tolerance::relative(1e-10)).unwrap();
        assert!((vol.re - PI / 6.0).abs() < 1e-9, "{}", vol.re);
        // xi along the axis: the edges are the worst directions
        let r = cone.rho(&cone.axis());
        assert!((r - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        // xi along an edge: the opposite arcs reach 0
        assert!(cone.rho(&Point::x()).abs() < 1e-12);
    }

    #[test]
    fn ball_cone_volume() {
        let spec = ConeSpec {
            dim: 3,
            apex: vec![1.0, 2.0, 3.0],
            axis: vec![0.0, 0.0, 1.0],
            half_angle: 0.6,
            truncation: 2.0,
            kind: ConeKind::Conic,
        };
        let cone = spec.build().unwrap();
        let vol = cone.integrate(&|_, _| Complex64::new(1.0, 0.0), Tolerance::relative(1e-10)).unwrap();
        let exact = 2.0 * PI * (1.0 - 0.6f64.cos()) * 8.0 / 3.0;
        assert!((vol.re - exact).abs() < 1e-9 * exact);
    }

    // Closed forms on the infinite sector |phi| < theta with xi on the axis:
    //   int w          = sin(2 theta) / tau^2
    //   int r^a w      = Gamma(a + 2) 2 sin((a + 2) theta) / ((a + 2) tau^(a + 2))
    //   int |w|^2      = tan(theta) / (2 tau^2)
    // With h tau = 64 the truncation changes these by far less than 1e-12.
    #[test]
    fn sector_closed_forms() {
        let tau = 64.0;
        let (cone, p) = sector_params(tau);
        let i0 = cone_integral(&cone, &p, 0.0, 1e-10).unwrap();
        assert!((i0 - Complex64::new(1.0 / (tau * tau), 0.0)).norm() < 1e-9 / (tau * tau), "{i0}");
        let ia = cone_integral(&cone, &p, 0.5, 1e-10).unwrap();
        let exact = gamma_2_5() * 2.0 * (2.5 * FRAC_PI_4).sin() / (2.5 * tau.powf(2.5));
        assert!((ia.norm() - exact).abs() < 1e-8 * exact);
        let l2 = l2_norm(&cone, &p, 1e-10).unwrap();
        assert!((l2 - (0.5f64).sqrt() / tau).abs() < 1e-9 / tau);
        let g = grad_l2_norm(&cone, &p, 1e-10).unwrap();
        assert!((g - 1.0).abs() < 1e-9, "{g}");
    }

    #[test]
    fn three_d_conic_l2_closed_form() {
        // int_{cone} exp(-2 tau r cos psi) = pi tan^2(theta) / (4 tau^3)
        let theta = 0.5;
        let spec = ConeSpec {
            dim: 3,
            apex: vec![0.0; 3],
            axis: vec![0.0, 0.0, 1.0],
            half_angle: theta,
            truncation: 1.0,
            kind: ConeKind::Conic,
        };
        let cone = spec.build().unwrap();
        let tau = 60.0;
        let p = CgoParams::new(tau, Point::z(), Point::x(), 1.0).unwrap();
        let l2 = l2_norm(&cone, &p, 1e-9).unwrap();
        let exact = (PI * theta.tan().powi(2) / (4.0 * tau.powi(3))).sqrt();
        assert!((l2 - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn scaling_under_tau_doubling() {
        let (cone, p) = sector_params(64.0);
        let q = p.with_tau(128.0).unwrap();
        let a = cone_integral(&cone, &p, 0.0, 1e-9).unwrap().norm();
        let b = cone_integral(&cone, &q, 0.0, 1e-9).unwrap().norm();
        assert!((b / a - 0.25).abs() < 1e-6);
        let a = cone_integral(&cone, &p, 0.5, 1e-9).unwrap().norm();
        let b = cone_integral(&cone, &q, 0.5, 1e-9).unwrap().norm();
        assert!((b / a - 2f64.powf(-2.5)).abs() < 1e-6);
    }

    #[test]
    fn harmonicity() {
        let (cone, p) = sector_params(20.0);
        let pts = sample_points(&cone, 100, 3);
        assert!(pts.iter().all(|q| cone.contains(q)));
        assert!(harmonic_residual(&p, &cone.apex(), 2, &pts, 1e-4) <= 1e-4);
        // a non-harmonic exponential fails the same check
        let bad = CgoParams { xi_perp: Point::zeros(), ..p };
        assert!(harmonic_residual(&bad, &cone.apex(), 2, &pts, 1e-4) > 0.5);
    }

    #[test]
    fn default_study_flags() {
        let report = decay_study(&DecayConfig::sector_default()).unwrap();
        assert_eq!(report.samples.len(), 6);
        assert!(report.integral_exponent.near_integer);
        assert_eq!(report.integral_exponent.nearest_integer, -2);
        assert_eq!(report.integral_exponent.matches, "scaling");
        assert!(report.flags.harmonic);
        assert!(report.flags.abs_integral_decreasing && report.flags.l2_decreasing && report.flags.weighted_decreasing);
        // |grad w| = sqrt(2) tau |w| tends to a constant, and exp(rho h tau) |w| grows without bound
        assert!(!report.flags.grad_decreasing);
        assert!(!report.flags.l2_bounded);
        assert!((report.slopes.l2_norm + 1.0).abs() < 0.05);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn polyhedral_study_decays() {
        let cfg = DecayConfig {
            cone: ConeSpec {
                dim: 3,
                apex: vec![0.0; 3],
                axis: vec![0.0, 0.0, 1.0],
                half_angle: PI / 5.0,
                truncation: 1.0,
                kind: ConeKind::Polyhedral {
                    edges: (0..3)
                        .map(|k| {
                            let a = 2.0 * PI * k as f64 / 3.0;
                            let t = 0.5f64;
                            vec![t.sin() * a.cos(), t.sin() * a.sin(), t.cos()]
                        })
                        .collect(),
                },
            },
            tau_grid: vec![4.0, 16.0, 64.0],
            rel_tol: 1e-6,
            harmonic_points: 20,
            ..DecayConfig::sector_default()
        };
        let report = decay_study(&cfg).unwrap();
        assert!(report.rho > 0.0);
        assert!(report.samples.iter().all(|s| s.abs_integral.is_finite() && s.l2_norm.is_finite()));
        assert!(report.flags.abs_integral_decreasing && report.flags.l2_decreasing);
        assert_eq!(report.integral_exponent.nearest_integer, -3);
    }

    #[test]
    fn bad_grids() {
        let mut cfg = DecayConfig::sector_default();
        cfg.tau_grid = vec![4.0, 8.0];
        assert!(matches!(decay_study(&cfg), Err(CgoError::Grid(_))));
        cfg.tau_grid = vec![4.0, 2.0, 100.0];
        assert!(matches!(decay_study(&cfg), Err(CgoError::Grid(_))));
        let mut cfg = DecayConfig::sector_default();
        cfg.xi = Some(vec![0.0, 1.0]);
        assert!(matches!(decay_study(&cfg), Err(CgoError::Rho { .. })));
    }

    #[test]
    fn config_is_strict() {
        let text = r#"{"cone":{"dim":2,"apex":[0,0],"axis":[1,0],"half_angle":0.7,"truncation":1},"tau_grid":[1,10],"tua":3}"#;
        assert!(serde_json::from_str::<DecayConfig>(text).is_err());
    }

    proptest::proptest! {
        #[test]
        fn modulus_and_zeta(x in -2.0f64..2.0, y in -2.0f64..2.0, a in 0.0f64..6.3, tau in 0.1f64..50.0) {
            let xi = Point::new(a.cos(), a.sin(), 0.0);
            let xp = Point::new(-a.sin(), a.cos(), 0.0);
            let p = CgoParams::new(tau, xi, xp, 2.0).unwrap();
            let z = p.zeta_square();
            proptest::prop_assert!(z.norm() <= 1e-15);
            let pt = Point::new(x, y, 0.0);
            let w = cgo_field(&p, &pt, &Point::zeros());
            let expect = (-tau * xi.dot(&pt)).exp() / 2f64.sqrt();
            proptest::prop_assert!((w.norm() - expect).abs() <= 1e-12 * expect);
        }

        #[test]
        fn rho_decreases_with_opening(t1 in 0.05f64..1.5, dt in 0.001f64..0.05) {
            let a = ConeSpec::sector(t1, 1.0).build().unwrap();
            let b = ConeSpec::sector((t1 + dt).min(1.5707), 1.0).build().unwrap();
            proptest::prop_assert!(b.rho(&Point::x()) < a.rho(&Point::x()));
        }
    }
}
