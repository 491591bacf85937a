//! Piecewise constant sources `q = sum_j phi_j chi(omega_j)` over
//! parametrized shape families, and their packing into flat parameter vectors.
//!
//! Shapes are closed sets, except that the hole of an [`Shape::Annulus`] or
//! [`Shape::Shell`] is closed too (it is removed), so that a shell and the
//! body filling its hole are disjoint.
//!
//! Parameter layouts (one block per layer, then one intensity per layer):
//!
//! | family           | block                                   |
//! |------------------|-----------------------------------------|
//! | `disk`           | `c_x, c_y, r`                           |
//! | `ball`           | `c_x, c_y, c_z, r`                      |
//! | `ellipsoid`      | centre, then semiaxes                   |
//! | `convex_polygon` | `x_1, y_1, ..., x_k, y_k`               |
//! | `box`            | min corner, then side lengths           |
//! | `corona`         | apex coordinates (base disk is fixed)   |
//! | `annulus`        | centre, inner radius, outer radius      |
//! | `shell`          | outer block, then inner block           |

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{point_coords, point_from_slice, Point};

/// Default margin for compact containment `omega ⋐ Omega`.
pub const DIST_MIN: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("invalid source: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("representation error: {0}")]
    Representation(String),
    #[error("parameter layout: {0}")]
    Layout(String),
}

/// Circle / sphere `|x| = radius` centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub dim: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Shape,
    Containment,
    Nesting,
    Overlap,
    Intensity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    /// Intensity conditions are admissibility requirements of the uniqueness
    /// theory; they do not make a field unusable as an iterate.
    pub fn is_hard(&self) -> bool {
        self.kind != ViolationKind::Intensity
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l}: {:?}: {}", self.kind, self.message),
            None => write!(f, "{:?}: {}", self.kind, self.message),
        }
    }
}

/// Base disk with protruding triangular cones.
///
/// Each protrusion is the triangle spanned by its apex and the two tangent
/// points from the apex to the base circle, so the cone is fixed by the apex.
/// The optional carve-out removes the open sector `start < angle < end` of the
/// base disk. Membership is `(base ∪ protrusions) \ carved sector`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corona {
    pub center: Point,
    pub radius: f64,
    pub carve: Option<(f64, f64)>,
    pub apexes: Vec<Point>,
}

impl Corona {
    /// Triangle (apex, tangent point, tangent point), counterclockwise.
    pub fn protrusion(&self, k: usize) -> [Point; 3] {
        let a = self.apexes[k];
        let d = a - self.center;
        let dist = d.norm();
        let alpha = (self.radius / dist).clamp(-1.0, 1.0).acos();
        let base = d.y.atan2(d.x);
        let t1 = self.center + self.radius * Point::new((base + alpha).cos(), (base + alpha).sin(), 0.0);
        let t2 = self.center + self.radius * Point::new((base - alpha).cos(), (base - alpha).sin(), 0.0);
        [a, t1, t2]
    }

    fn in_carve(&self, p: &Point) -> bool {
        match self.carve {
            None => false,
            Some((s, e)) => {
                let d = p - self.center;
                if d.norm() > self.radius || (d.x == 0.0 && d.y == 0.0) {
                    return false;
                }
                let mut t = d.y.atan2(d.x) - s;
                t = t.rem_euclid(2.0 * PI);
                t > 0.0 && t < (e - s)
            }
        }
    }

    fn carve_distance(&self, p: &Point) -> f64 {
        match self.carve {
            None => f64::INFINITY,
            Some((s, e)) => {
                // open wedge as intersection of two half-planes through the centre
                let d = p - self.center;
                let n1 = Point::new(s.sin(), -s.cos(), 0.0); // outward of the start ray
                let n2 = Point::new(-e.sin(), e.cos(), 0.0); // outward of the end ray
                let wedge = if e - s <= PI { d.dot(&n1).max(d.dot(&n2)) } else { d.dot(&n1).min(d.dot(&n2)) };
                wedge.max(d.norm() - self.radius)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Disk { center: Point, radius: f64 },
    Ball { center: Point, radius: f64 },
    /// Axis-aligned ellipse / ellipsoid.
    Ellipsoid { center: Point, semiaxes: Vec<f64> },
    /// Vertices in counterclockwise order.
    ConvexPolygon { vertices: Vec<Point> },
    AxisAlignedBox { min: Point, sides: Vec<f64> },
    Corona(Corona),
    /// `B_outer(center) \ closed B_inner(center)`.
    Annulus { center: Point, inner: f64, outer: f64 },
    /// `outer \ inner`.
    Shell { outer: Box<Shape>, inner: Box<Shape> },
}

fn polygon_signed_distance(vertices: &[Point], p: &Point) -> f64 {
    let n = vertices.len();
    let mut inside = true;
    let mut max_line = f64::NEG_INFINITY;
    let mut min_seg = f64::INFINITY;
    for k in 0..n {
        let a = vertices[k];
        let b = vertices[(k + 1) % n];
        let e = b - a;
        let len = e.norm();
        // outward normal for counterclockwise order
        let normal = Point::new(e.y, -e.x, 0.0) / len;
        let s = (p - a).dot(&normal);
        if s > 0.0 {
            inside = false;
        }
        max_line = max_line.max(s);
        let t = ((p - a).dot(&e) / (len * len)).clamp(0.0, 1.0);
        min_seg = min_seg.min((p - (a + t * e)).norm());
    }
    if inside {
        max_line
    } else {
        min_seg
    }
}

fn box_signed_distance(min: &Point, sides: &[f64], p: &Point) -> f64 {
    let mut outside = 0.0;
    let mut inner = f64::NEG_INFINITY;
    for (d, &s) in sides.iter().enumerate() {
        let half = 0.5 * s;
        let q = (p[d] - (min[d] + half)).abs() - half;
        outside += q.max(0.0).powi(2);
        inner = inner.max(q);
    }
    outside.sqrt() + inner.min(0.0)
}

impl Shape {
    pub fn family(&self) -> &'static str {
        match self {
            Shape::Disk { .. } => "disk",
            Shape::Ball { .. } => "ball",
            Shape::Ellipsoid { .. } => "ellipsoid",
            Shape::ConvexPolygon { .. } => "convex_polygon",
            Shape::AxisAlignedBox { .. } => "box",
            Shape::Corona(_) => "corona",
            Shape::Annulus { .. } => "annulus",
            Shape::Shell { .. } => "shell",
        }
    }

    /// Membership in the closed set.
    pub fn contains(&self, p: &Point) -> bool {
        match self {
            Shape::Disk { center, radius } | Shape::Ball { center, radius } => {
                (p - center).norm() <= *radius
            }
            Shape::Ellipsoid { center, semiaxes } => {
                semiaxes.iter().enumerate().map(|(d, a)| ((p[d] - center[d]) / a).powi(2)).sum::<f64>() <= 1.0
            }
            Shape::ConvexPolygon { vertices } => {
                let n = vertices.len();
                (0..n).all(|k| {
                    let a = vertices[k];
                    let e = vertices[(k + 1) % n] - a;
                    let w = p - a;
                    e.x * w.y - e.y * w.x >= 0.0
                })
            }
            Shape::AxisAlignedBox { min, sides } => {
                sides.iter().enumerate().all(|(d, s)| p[d] >= min[d] && p[d] <= min[d] + s)
            }
            Shape::Corona(c) => {
                let in_base = (p - c.center).norm() <= c.radius;
                let in_prot = (0..c.apexes.len()).any(|k| {
                    Shape::ConvexPolygon { vertices: c.protrusion(k).to_vec() }.contains(p)
                });
                (in_base || in_prot) && !c.in_carve(p)
            }
            Shape::Annulus { center, inner, outer } => {
                let r = (p - center).norm();
                r > *inner && r <= *outer
            }
            Shape::Shell { outer, inner } => outer.contains(p) && !inner.contains(p),
        }
    }

    /// Signed distance estimate (negative inside), accurate near the boundary.
    pub fn signed_distance(&self, p: &Point) -> f64 {
        match self {
            Shape::Ellipsoid { center, semiaxes } => {
                let mut s2 = 0.0;
                let mut grad2 = 0.0;
                for (d, a) in semiaxes.iter().enumerate() {
                    let y = p[d] - center[d];
                    s2 += (y / a).powi(2);
                    grad2 += (y / (a * a)).powi(2);
                }
                let s = s2.sqrt();
                if s < 1e-12 {
                    return self.distance_bound(p);
                }
                // g = s - 1, |grad g| = |y / a^2| / s
                (s - 1.0) * s / grad2.sqrt()
            }
            Shape::Corona(c) => {
                let mut d = (p - c.center).norm() - c.radius;
                for k in 0..c.apexes.len() {
                    d = d.min(polygon_signed_distance(&c.protrusion(k), p));
                }
                d.max(-c.carve_distance(p))
            }
            Shape::Shell { outer, inner } => outer.signed_distance(p).max(-inner.signed_distance(p)),
            _ => self.distance_bound(p),
        }
    }

    /// 1-Lipschitz function with the sign of the signed distance whose
    /// magnitude never exceeds the true distance to the boundary.
    pub fn distance_bound(&self, p: &Point) -> f64 {
        match self {
            Shape::Disk { center, radius } | Shape::Ball { center, radius } => {
                (p - center).norm() - radius
            }
            Shape::Ellipsoid { center, semiaxes } => {
                let s = semiaxes
                    .iter()
                    .enumerate()
                    .map(|(d, a)| ((p[d] - center[d]) / a).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let amin = semiaxes.iter().copied().fold(f64::INFINITY, f64::min);
                amin * (s - 1.0)
            }
            Shape::ConvexPolygon { vertices } => polygon_signed_distance(vertices, p),
            Shape::AxisAlignedBox { min, sides } => box_signed_distance(min, sides, p),
            Shape::Corona(c) => {
                let mut d = (p - c.center).norm() - c.radius;
                for k in 0..c.apexes.len() {
                    d = d.min(polygon_signed_distance(&c.protrusion(k), p));
                }
                d.max(-c.carve_distance(p))
            }
            Shape::Annulus { center, inner, outer } => {
                let r = (p - center).norm();
                (r - outer).max(inner - r)
            }
            Shape::Shell { outer, inner } => outer.distance_bound(p).max(-inner.distance_bound(p)),
        }
    }

    /// Largest `|x|` over the shape.
    pub fn max_norm(&self) -> f64 {
        match self {
            Shape::Disk { center, radius } | Shape::Ball { center, radius } => center.norm() + radius,
            Shape::Ellipsoid { .. } => self
                .boundary_samples(3, 64)
                .iter()
                .map(|p| p.norm())
                .fold(0.0, f64::max),
            Shape::ConvexPolygon { vertices } => vertices.iter().map(|v| v.norm()).fold(0.0, f64::max),
            Shape::AxisAlignedBox { min, sides } => {
                let mut s = 0.0;
                for (d, side) in sides.iter().enumerate() {
                    s += min[d].abs().max((min[d] + side).abs()).powi(2);
                }
                s.sqrt()
            }
            Shape::Corona(c) => c
                .apexes
                .iter()
                .map(|a| a.norm())
                .fold(c.center.norm() + c.radius, f64::max),
            Shape::Annulus { center, outer, .. } => center.norm() + outer,
            Shape::Shell { outer, .. } => outer.max_norm(),
        }
    }

    /// Points on (a superset of) the boundary, `n` per parametric direction.
    pub fn boundary_samples(&self, dim: usize, n: usize) -> Vec<Point> {
        let sphere = |c: &Point, axes: &[f64]| -> Vec<Point> {
            if axes.len() == 2 {
                (0..4 * n)
                    .map(|k| {
                        let t = 2.0 * PI * k as f64 / (4 * n) as f64;
                        c + Point::new(axes[0] * t.cos(), axes[1] * t.sin(), 0.0)
                    })
                    .collect()
            } else {
                let mut v = Vec::new();
                for i in 0..=n {
                    let th = PI * i as f64 / n as f64;
                    for j in 0..2 * n {
                        let ph = PI * j as f64 / n as f64;
                        v.push(
                            c + Point::new(
                                axes[0] * th.sin() * ph.cos(),
                                axes[1] * th.sin() * ph.sin(),
                                axes[2] * th.cos(),
                            ),
                        );
                    }
                }
                v
            }
        };
        let edges = |verts: &[Point]| -> Vec<Point> {
            let m = verts.len();
            let mut v = Vec::new();
            for k in 0..m {
                for s in 0..n {
                    let t = s as f64 / n as f64;
                    v.push(verts[k] + t * (verts[(k + 1) % m] - verts[k]));
                }
            }
            v
        };
        match self {
            Shape::Disk { center, radius } => sphere(center, &[*radius; 2]),
            Shape::Ball { center, radius } => sphere(center, &[*radius; 3]),
            Shape::Ellipsoid { center, semiaxes } => sphere(center, semiaxes),
            Shape::ConvexPolygon { vertices } => edges(vertices),
            Shape::AxisAlignedBox { min, sides } => {
                if sides.len() == 2 {
                    let v = [
                        *min,
                        min + Point::new(sides[0], 0.0, 0.0),
                        min + Point::new(sides[0], sides[1], 0.0),
                        min + Point::new(0.0, sides[1], 0.0),
                    ];
                    edges(&v)
                } else {
                    let mut v = Vec::new();
                    for a in 0..=n {
                        for b in 0..=n {
                            let (s, t) = (a as f64 / n as f64, b as f64 / n as f64);
                            for fixed in 0..3 {
                                for side in [0.0, 1.0] {
                                    let mut u = [0.0; 3];
                                    u[fixed] = side;
                                    u[(fixed + 1) % 3] = s;
                                    u[(fixed + 2) % 3] = t;
                                    v.push(min + Point::new(u[0] * sides[0], u[1] * sides[1], u[2] * sides[2]));
                                }
                            }
                        }
                    }
                    v
                }
            }
            Shape::Corona(c) => {
                let mut v = sphere(&c.center, &[c.radius; 2]);
                for k in 0..c.apexes.len() {
                    v.extend(edges(&c.protrusion(k)));
                }
                v
            }
            Shape::Annulus { center, outer, .. } => {
                if dim == 2 {
                    sphere(center, &[*outer; 2])
                } else {
                    sphere(center, &[*outer; 3])
                }
            }
            Shape::Shell { outer, .. } => outer.boundary_samples(dim, n),
        }
    }

    /// Shape invariants (positive sizes, convexity, apex position).
    pub fn violations(&self, dim: usize) -> Vec<String> {
        let mut v = Vec::new();
        let pos = |x: f64| x > 0.0 && x.is_finite();
        let finite = |p: &Point| p.iter().all(|x| x.is_finite());
        match self {
            Shape::Disk { center, radius } => {
                if dim != 2 {
                    v.push("disk requires dimension 2".into());
                }
                if !pos(*radius) {
                    v.push(format!("radius {radius} must be positive"));
                }
                if !finite(center) {
                    v.push("non-finite centre".into());
                }
            }
            Shape::Ball { center, radius } => {
                if dim != 3 {
                    v.push("ball requires dimension 3".into());
                }
                if !pos(*radius) {
                    v.push(format!("radius {radius} must be positive"));
                }
                if !finite(center) {
                    v.push("non-finite centre".into());
                }
            }
            Shape::Ellipsoid { semiaxes, center } => {
                if semiaxes.len() != dim {
                    v.push(format!("{} semiaxes for dimension {dim}", semiaxes.len()));
                }
                if let Some(a) = semiaxes.iter().find(|a| !pos(**a)) {
                    v.push(format!("semiaxis {a} must be positive"));
                }
                if !finite(center) {
                    v.push("non-finite centre".into());
                }
            }
            Shape::ConvexPolygon { vertices } => {
                if dim != 2 {
                    v.push("convex polygon requires dimension 2".into());
                }
                let n = vertices.len();
                if n < 3 {
                    v.push(format!("polygon needs at least 3 vertices, got {n}"));
                } else if !vertices.iter().all(finite) {
                    v.push("non-finite vertex".into());
                } else {
                    for k in 0..n {
                        let a = vertices[k];
                        let b = vertices[(k + 1) % n];
                        let c = vertices[(k + 2) % n];
                        let cross = (b - a).x * (c - b).y - (b - a).y * (c - b).x;
                        if !(cross > 0.0) {
                            v.push(format!("polygon is not strictly convex counterclockwise at vertex {}", (k + 1) % n));
                            break;
                        }
                    }
                }
            }
            Shape::AxisAlignedBox { sides, min } => {
                if sides.len() != dim {
                    v.push(format!("{} side lengths for dimension {dim}", sides.len()));
                }
                if let Some(s) = sides.iter().find(|s| !pos(**s)) {
                    v.push(format!("side length {s} must be positive"));
                }
                if !finite(min) {
                    v.push("non-finite corner".into());
                }
            }
            Shape::Corona(c) => {
                if dim != 2 {
                    v.push("corona requires dimension 2".into());
                }
                if !pos(c.radius) {
                    v.push(format!("base radius {} must be positive", c.radius));
                }
                for (k, a) in c.apexes.iter().enumerate() {
                    if !finite(a) || !((a - c.center).norm() > c.radius) {
                        v.push(format!("apex {k} must lie strictly outside the base disk"));
                    }
                }
                if let Some((s, e)) = c.carve {
                    if !(e > s && e - s <= PI) {
                        v.push(format!("carve-out sector ({s}, {e}) must have an opening in (0, pi]"));
                    }
                }
            }
            Shape::Annulus { inner, outer, center } => {
                if !(pos(*inner) && inner < outer && outer.is_finite()) {
                    v.push(format!("annulus radii must satisfy 0 < {inner} < {outer}"));
                }
                if !finite(center) {
                    v.push("non-finite centre".into());
                }
            }
            Shape::Shell { outer, inner } => {
                v.extend(outer.violations(dim));
                v.extend(inner.violations(dim));
                if v.is_empty() && !strictly_inside(inner, outer, dim) {
                    v.push("shell hole is not compactly contained in its outer shape".into());
                }
            }
        }
        v
    }

    pub fn param_count(&self, dim: usize) -> usize {
        match self {
            Shape::Disk { .. } => 3,
            Shape::Ball { .. } => 4,
            Shape::Ellipsoid { .. } | Shape::AxisAlignedBox { .. } => 2 * dim,
            Shape::ConvexPolygon { vertices } => 2 * vertices.len(),
            Shape::Corona(c) => 2 * c.apexes.len(),
            Shape::Annulus { .. } => dim + 2,
            Shape::Shell { outer, inner } => outer.param_count(dim) + inner.param_count(dim),
        }
    }

    pub fn params(&self, dim: usize) -> Vec<f64> {
        match self {
            Shape::Disk { center, radius } => vec![center.x, center.y, *radius],
            Shape::Ball { center, radius } => vec![center.x, center.y, center.z, *radius],
            Shape::Ellipsoid { center, semiaxes } => {
                let mut v = point_coords(center, dim);
                v.extend(semiaxes);
                v
            }
            Shape::ConvexPolygon { vertices } => vertices.iter().flat_map(|p| [p.x, p.y]).collect(),
            Shape::AxisAlignedBox { min, sides } => {
                let mut v = point_coords(min, dim);
                v.extend(sides);
                v
            }
            Shape::Corona(c) => c.apexes.iter().flat_map(|p| [p.x, p.y]).collect(),
            Shape::Annulus { center, inner, outer } => {
                let mut v = point_coords(center, dim);
                v.extend([*inner, *outer]);
                v
            }
            Shape::Shell { outer, inner } => {
                let mut v = outer.params(dim);
                v.extend(inner.params(dim));
                v
            }
        }
    }

    /// Same family and fixed parts as `self`, geometry from `theta`.
    pub fn with_params(&self, dim: usize, theta: &[f64]) -> Shape {
        let pt = |s: &[f64]| point_from_slice(s).expect("layout sizes are fixed by the template");
        match self {
            Shape::Disk { .. } => Shape::Disk { center: Point::new(theta[0], theta[1], 0.0), radius: theta[2] },
            Shape::Ball { .. } => Shape::Ball { center: pt(&theta[..3]), radius: theta[3] },
            Shape::Ellipsoid { .. } => Shape::Ellipsoid { center: pt(&theta[..dim]), semiaxes: theta[dim..2 * dim].to_vec() },
            Shape::ConvexPolygon { vertices } => Shape::ConvexPolygon {
                vertices: (0..vertices.len()).map(|k| Point::new(theta[2 * k], theta[2 * k + 1], 0.0)).collect(),
            },
            Shape::AxisAlignedBox { .. } => Shape::AxisAlignedBox { min: pt(&theta[..dim]), sides: theta[dim..2 * dim].to_vec() },
            Shape::Corona(c) => Shape::Corona(Corona {
                apexes: (0..c.apexes.len()).map(|k| Point::new(theta[2 * k], theta[2 * k + 1], 0.0)).collect(),
                ..c.clone()
            }),
            Shape::Annulus { .. } => Shape::Annulus { center: pt(&theta[..dim]), inner: theta[dim], outer: theta[dim + 1] },
            Shape::Shell { outer, inner } => {
                let k = outer.param_count(dim);
                Shape::Shell {
                    outer: Box::new(outer.with_params(dim, &theta[..k])),
                    inner: Box::new(inner.with_params(dim, &theta[k..])),
                }
            }
        }
    }
}

/// `inner ⋐ interior(outer)`: exact for disk/ball pairs, boundary sampling otherwise.
pub fn strictly_inside(inner: &Shape, outer: &Shape, dim: usize) -> bool {
    use Shape::*;
    match (inner, outer) {
        (Disk { center: c1, radius: r1 }, Disk { center: c2, radius: r2 })
        | (Ball { center: c1, radius: r1 }, Ball { center: c2, radius: r2 }) => (c1 - c2).norm() + r1 < *r2,
        _ => {
            let n = if dim == 2 { 128 } else { 24 };
            inner.boundary_samples(dim, n).iter().all(|p| outer.signed_distance(p) < 0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// `q = sum_j phi_j chi(omega_j)` with `omega_{j+1} ⋐ omega_j`.
    NestedSum,
    /// Pairwise disjoint layers, `q = phi_j` on layer `j`.
    DisjointLayers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub shape: Shape,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "dto::SourceFieldDto", into = "dto::SourceFieldDto")]
pub struct SourceField {
    pub dim: usize,
    pub representation: Representation,
    pub layers: Vec<Layer>,
}

impl SourceField {
    pub fn single(dim: usize, shape: Shape, intensity: f64) -> SourceField {
        SourceField {
            dim,
            representation: Representation::NestedSum,
            layers: vec![Layer { shape, intensity }],
        }
    }

    pub fn eval(&self, p: &Point) -> f64 {
        eval_source(self, p)
    }

    /// Rejects fields violating a hard invariant.
    pub fn ensure_valid(&self, domain: &Domain, dist_min: f64) -> Result<(), SourceError> {
        let hard: Vec<Violation> = validate(self, domain, dist_min).into_iter().filter(Violation::is_hard).collect();
        if hard.is_empty() {
            Ok(())
        } else {
            Err(SourceError::Invalid(hard))
        }
    }
}

/// Indicator `chi_omega(p)` of the closed shape.
pub fn indicator(s: &Shape, p: &Point) -> u8 {
    u8::from(s.contains(p))
}

pub fn eval_source(q: &SourceField, p: &Point) -> f64 {
    match q.representation {
        Representation::NestedSum => q
            .layers
            .iter()
            .filter(|l| l.shape.contains(p))
            .map(|l| l.intensity)
            .sum(),
        Representation::DisjointLayers => q
            .layers
            .iter()
            .find(|l| l.shape.contains(p))
            .map_or(0.0, |l| l.intensity),
    }
}

fn same_shape(a: &Shape, b: &Shape) -> bool {
    a == b
}

/// Converts a nested-sum field into disjoint layers `omega_j \ omega_{j+1}`
/// carrying the prefix sums of the intensities.
pub fn to_disjoint_layers(q: &SourceField) -> Result<SourceField, SourceError> {
    if q.representation == Representation::DisjointLayers {
        return Ok(q.clone());
    }
    let m = q.layers.len();
    for j in 1..m {
        if !strictly_inside(&q.layers[j].shape, &q.layers[j - 1].shape, q.dim) {
            return Err(SourceError::Representation(format!(
                "layer {j} is not compactly contained in layer {}",
                j - 1
            )));
        }
    }
    let mut layers = Vec::with_capacity(m);
    let mut value = 0.0;
    for j in 0..m {
        value += q.layers[j].intensity;
        let shape = if j + 1 < m {
            match (&q.layers[j].shape, &q.layers[j + 1].shape) {
                (Shape::Disk { center: c1, radius: r1 }, Shape::Disk { center: c2, radius: r2 })
                | (Shape::Ball { center: c1, radius: r1 }, Shape::Ball { center: c2, radius: r2 })
                    if c1 == c2 =>
                {
                    Shape::Annulus { center: *c1, inner: *r2, outer: *r1 }
                }
                (outer, inner) => Shape::Shell { outer: Box::new(outer.clone()), inner: Box::new(inner.clone()) },
            }
        } else {
            q.layers[j].shape.clone()
        };
        layers.push(Layer { shape, intensity: value });
    }
    Ok(SourceField { dim: q.dim, representation: Representation::DisjointLayers, layers })
}

/// Inverse of [`to_disjoint_layers`]: every layer but the last must be a shell
/// (or annulus) whose hole is exactly the next layer's full shape.
pub fn to_nested_sum(q: &SourceField) -> Result<SourceField, SourceError> {
    if q.representation == Representation::NestedSum {
        return Ok(q.clone());
    }
    let m = q.layers.len();
    let mut full: Vec<Shape> = vec![Shape::Disk { center: Point::zeros(), radius: 0.0 }; m];
    for j in (0..m).rev() {
        let shape = &q.layers[j].shape;
        full[j] = if j + 1 == m {
            shape.clone()
        } else {
            let next = &full[j + 1];
            match shape {
                Shape::Shell { outer, inner } if same_shape(inner, next) => (**outer).clone(),
                Shape::Annulus { center, inner, outer } => match next {
                    Shape::Disk { center: c, radius } if c == center && radius == inner => {
                        Shape::Disk { center: *center, radius: *outer }
                    }
                    Shape::Ball { center: c, radius } if c == center && radius == inner => {
                        Shape::Ball { center: *center, radius: *outer }
                    }
                    _ => return Err(not_nested(j)),
                },
                _ => return Err(not_nested(j)),
            }
        };
    }
    let mut layers = Vec::with_capacity(m);
    let mut prev = 0.0;
    for (j, shape) in full.into_iter().enumerate() {
        layers.push(Layer { shape, intensity: q.layers[j].intensity - prev });
        prev = q.layers[j].intensity;
    }
    Ok(SourceField { dim: q.dim, representation: Representation::NestedSum, layers })
}

fn not_nested(j: usize) -> SourceError {
    SourceError::Representation(format!(
        "layer {j} is not a shell around layer {}; supports are not nested",
        j + 1
    ))
}

/// Checks admissibility of `q` in `domain`; returns every violation found.
pub fn validate(q: &SourceField, domain: &Domain, dist_min: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |layer: Option<usize>, kind, message: String| out.push(Violation { layer, kind, message });
    if q.dim != domain.dim {
        push(None, ViolationKind::Shape, format!("source dimension {} differs from domain dimension {}", q.dim, domain.dim));
        return out;
    }
    if q.layers.is_empty() {
        push(None, ViolationKind::Shape, "source has no layers".into());
        return out;
    }
    let mut shapes_ok = true;
    for (j, l) in q.layers.iter().enumerate() {
        let v = l.shape.violations(q.dim);
        shapes_ok &= v.is_empty();
        for m in v {
            push(Some(j), ViolationKind::Shape, m);
        }
        if !l.intensity.is_finite() {
            push(Some(j), ViolationKind::Shape, "non-finite intensity".into());
        }
    }
    if !shapes_ok {
        return out;
    }
    for (j, l) in q.layers.iter().enumerate() {
        let n = l.shape.max_norm();
        if n > domain.radius - dist_min {
            push(
                Some(j),
                ViolationKind::Containment,
                format!("reaches |x| = {n:.4}, beyond R - dist_min = {}", domain.radius - dist_min),
            );
        }
    }
    match q.representation {
        Representation::NestedSum => {
            for j in 1..q.layers.len() {
                if !strictly_inside(&q.layers[j].shape, &q.layers[j - 1].shape, q.dim) {
                    push(Some(j), ViolationKind::Nesting, format!("not compactly contained in layer {}", j - 1));
                }
            }
            if q.layers[0].intensity == 0.0 {
                push(Some(0), ViolationKind::Intensity, "outermost intensity must be nonzero".into());
            }
            for j in 1..q.layers.len() {
                if q.layers[j].intensity == 0.0 {
                    push(Some(j), ViolationKind::Intensity, "no jump in source value across this layer".into());
                }
            }
        }
        Representation::DisjointLayers => {
            if let Some((a, b)) = overlapping_layers(q, domain) {
                push(Some(b), ViolationKind::Overlap, format!("overlaps layer {a}"));
            }
            if q.layers[0].intensity == 0.0 {
                push(Some(0), ViolationKind::Intensity, "outermost intensity must be nonzero".into());
            }
            for j in 1..q.layers.len() {
                if q.layers[j].intensity == q.layers[j - 1].intensity {
                    push(Some(j), ViolationKind::Intensity, "same value as the previous layer".into());
                }
            }
        }
    }
    out
}

fn overlapping_layers(q: &SourceField, domain: &Domain) -> Option<(usize, usize)> {
    let n: i64 = if q.dim == 2 { 300 } else { 60 };
    let step = 2.0 * domain.radius / n as f64;
    let coord = |i: i64| -domain.radius + (i as f64 + 0.5) * step;
    let zr = if q.dim == 2 { 0..1 } else { 0..n };
    for i in 0..n {
        for j in 0..n {
            for k in zr.clone() {
                let p = Point::new(coord(i), coord(j), if q.dim == 2 { 0.0 } else { coord(k) });
                let mut first = None;
                for (l, layer) in q.layers.iter().enumerate() {
                    if layer.shape.signed_distance(&p) < -1e-9 {
                        match first {
                            None => first = Some(l),
                            Some(a) => return Some((a, l)),
                        }
                    }
                }
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Geometric,
    Intensity,
}

/// Packing layout fixed by a template field: family, layer count and any
/// parts that are not optimized (corona base, polygon vertex count).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    template: SourceField,
    kinds: Vec<ParamKind>,
    // intensities packed as layer values v_j = phi_1 + ... + phi_j
    layer_values: bool,
}

impl ParamLayout {
    pub fn of(template: &SourceField) -> ParamLayout {
        let mut kinds = Vec::new();
        for l in &template.layers {
            kinds.extend(std::iter::repeat(ParamKind::Geometric).take(l.shape.param_count(template.dim)));
        }
        kinds.extend(std::iter::repeat(ParamKind::Intensity).take(template.layers.len()));
        ParamLayout { template: template.clone(), kinds, layer_values: false }
    }

    /// Nested-sum geometry with the layer values `v_j = sum_{k<=j} phi_k` as
    /// intensity unknowns instead of the increments `phi_j`.
    pub fn with_layer_values(template: &SourceField) -> Result<ParamLayout, SourceError> {
        if template.representation != Representation::NestedSum {
            return Err(SourceError::Layout("layer values need a nested-sum template".into()));
        }
        Ok(ParamLayout { layer_values: true, ..ParamLayout::of(template) })
    }

    pub fn uses_layer_values(&self) -> bool {
        self.layer_values
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    pub fn dim(&self) -> usize {
        self.template.dim
    }

    /// Human-readable parameter names, e.g. `c_x[0]`, `phi[1]`.
    pub fn names(&self) -> Vec<String> {
        let dim = self.template.dim;
        let axis = ["x", "y", "z"];
        let mut names = Vec::new();
        for (j, l) in self.template.layers.iter().enumerate() {
            let local: Vec<String> = match &l.shape {
                Shape::Disk { .. } | Shape::Ball { .. } => {
                    let mut v: Vec<String> = axis[..dim].iter().map(|a| format!("c_{a}")).collect();
                    v.push("r".into());
                    v
                }
                Shape::Ellipsoid { .. } => axis[..dim]
                    .iter()
                    .map(|a| format!("c_{a}"))
                    .chain(axis[..dim].iter().map(|a| format!("a_{a}")))
                    .collect(),
                Shape::AxisAlignedBox { .. } => axis[..dim]
                    .iter()
                    .map(|a| format!("min_{a}"))
                    .chain(axis[..dim].iter().map(|a| format!("side_{a}")))
                    .collect(),
                Shape::ConvexPolygon { vertices } => (0..vertices.len())
                    .flat_map(|k| [format!("v{k}_x"), format!("v{k}_y")])
                    .collect(),
                Shape::Corona(c) => (0..c.apexes.len())
                    .flat_map(|k| [format!("apex{k}_x"), format!("apex{k}_y")])
                    .collect(),
                Shape::Annulus { .. } => {
                    let mut v: Vec<String> = axis[..dim].iter().map(|a| format!("c_{a}")).collect();
                    v.extend(["r_in".to_string(), "r_out".to_string()]);
                    v
                }
                Shape::Shell { .. } => (0..l.shape.param_count(dim)).map(|k| format!("p{k}")).collect(),
            };
            names.extend(local.into_iter().map(|n| format!("{n}[{j}]")));
        }
        let label = if self.layer_values { "v" } else { "phi" };
        for j in 0..self.template.layers.len() {
            names.push(format!("{label}[{j}]"));
        }
        names
    }

    pub fn pack(&self, q: &SourceField) -> Result<Vec<f64>, SourceError> {
        if q.layers.len() != self.template.layers.len() || q.dim != self.template.dim {
            return Err(SourceError::Layout("field does not match the layout template".into()));
        }
        let mut theta = Vec::with_capacity(self.len());
        for (l, t) in q.layers.iter().zip(&self.template.layers) {
            if l.shape.family() != t.shape.family() || l.shape.param_count(q.dim) != t.shape.param_count(q.dim) {
                return Err(SourceError::Layout(format!(
                    "shape family {} does not match template {}",
                    l.shape.family(),
                    t.shape.family()
                )));
            }
            theta.extend(l.shape.params(q.dim));
        }
        let mut acc = 0.0;
        for l in &q.layers {
            acc = if self.layer_values { acc + l.intensity } else { l.intensity };
            theta.push(acc);
        }
        Ok(theta)
    }

    /// Unpacks without validation.
    pub fn unpack_unchecked(&self, theta: &[f64]) -> Result<SourceField, SourceError> {
        if theta.len() != self.len() {
            return Err(SourceError::Layout(format!(
                "parameter vector has length {}, layout expects {}",
                theta.len(),
                self.len()
            )));
        }
        let dim = self.template.dim;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.template.layers.len());
        let n_geo = self.len() - self.template.layers.len();
        for (j, t) in self.template.layers.iter().enumerate() {
            let k = t.shape.param_count(dim);
            let intensity = if self.layer_values && j > 0 {
                theta[n_geo + j] - theta[n_geo + j - 1]
            } else {
                theta[n_geo + j]
            };
            layers.push(Layer { shape: t.shape.with_params(dim, &theta[offset..offset + k]), intensity });
            offset += k;
        }
        Ok(SourceField { dim, representation: self.template.representation, layers })
    }

    /// Unpacks and checks shape invariants and nesting.
    pub fn unpack(&self, theta: &[f64]) -> Result<SourceField, SourceError> {
        let q = self.unpack_unchecked(theta)?;
        let mut violations = Vec::new();
        for (j, l) in q.layers.iter().enumerate() {
            for m in l.shape.violations(q.dim) {
                violations.push(Violation { layer: Some(j), kind: ViolationKind::Shape, message: m });
            }
        }
        if violations.is_empty() && q.representation == Representation::NestedSum {
            for j in 1..q.layers.len() {
                if !strictly_inside(&q.layers[j].shape, &q.layers[j - 1].shape, q.dim) {
                    violations.push(Violation {
                        layer: Some(j),
                        kind: ViolationKind::Nesting,
                        message: format!("not compactly contained in layer {}", j - 1),
                    });
                }
            }
        }
        if violations.is_empty() {
            Ok(q)
        } else {
            Err(SourceError::Invalid(violations))
        }
    }
}

/// Flat parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub layout: ParamLayout,
}

pub fn pack_params(q: &SourceField) -> ParamVector {
    let layout = ParamLayout::of(q);
    let theta = layout.pack(q).expect("a field always matches its own layout");
    ParamVector { theta, layout }
}

pub fn unpack_params(v: &ParamVector) -> Result<SourceField, SourceError> {
    v.layout.unpack(&v.theta)
}

mod dto {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
    pub enum ShapeDto {
        Disk { center: Vec<f64>, radius: f64 },
        Ball { center: Vec<f64>, radius: f64 },
        Ellipsoid { center: Vec<f64>, semiaxes: Vec<f64> },
        ConvexPolygon { vertices: Vec<Vec<f64>> },
        Box { min: Vec<f64>, sides: Vec<f64> },
        Corona {
            center: Vec<f64>,
            radius: f64,
            #[serde(default, skip_serializing_if = "Option::is_none")]
            carve: Option<[f64; 2]>,
            apexes: Vec<Vec<f64>>,
        },
        Annulus { center: Vec<f64>, inner: f64, outer: f64 },
        Shell { outer: Box<ShapeDto>, inner: Box<ShapeDto> },
    }

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct LayerDto {
        pub shape: ShapeDto,
        pub intensity: f64,
    }

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct SourceFieldDto {
        pub dim: usize,
        pub representation: Representation,
        pub layers: Vec<LayerDto>,
    }

    fn pt(v: &[f64], dim: usize) -> Result<Point, String> {
        if v.len() != dim {
            return Err(format!("point {v:?} must have {dim} coordinates"));
        }
        point_from_slice(v).ok_or_else(|| format!("bad point {v:?}"))
    }

    fn shape_from(d: ShapeDto, dim: usize) -> Result<Shape, String> {
        Ok(match d {
            ShapeDto::Disk { center, radius } => Shape::Disk { center: pt(&center, 2)?, radius },
            ShapeDto::Ball { center, radius } => Shape::Ball { center: pt(&center, 3)?, radius },
            ShapeDto::Ellipsoid { center, semiaxes } => Shape::Ellipsoid { center: pt(&center, dim)?, semiaxes },
            ShapeDto::ConvexPolygon { vertices } => Shape::ConvexPolygon {
                vertices: vertices.iter().map(|v| pt(v, 2)).collect::<Result<_, _>>()?,
            },
            ShapeDto::Box { min, sides } => Shape::AxisAlignedBox { min: pt(&min, dim)?, sides },
            ShapeDto::Corona { center, radius, carve, apexes } => Shape::Corona(Corona {
                center: pt(&center, 2)?,
                radius,
                carve: carve.map(|c| (c[0], c[1])),
                apexes: apexes.iter().map(|v| pt(v, 2)).collect::<Result<_, _>>()?,
            }),
            ShapeDto::Annulus { center, inner, outer } => Shape::Annulus { center: pt(&center, dim)?, inner, outer },
            ShapeDto::Shell { outer, inner } => Shape::Shell {
                outer: Box::new(shape_from(*outer, dim)?),
                inner: Box::new(shape_from(*inner, dim)?),
            },
        })
    }

    fn shape_to(s: &Shape, dim: usize) -> ShapeDto {
        let c = |p: &Point, d: usize| point_coords(p, d);
        match s {
            Shape::Disk { center, radius } => ShapeDto::Disk { center: c(center, 2), radius: *radius },
            Shape::Ball { center, radius } => ShapeDto::Ball { center: c(center, 3), radius: *radius },
            Shape::Ellipsoid { center, semiaxes } => ShapeDto::Ellipsoid { center: c(center, dim), semiaxes: semiaxes.clone() },
            Shape::ConvexPolygon { vertices } => ShapeDto::ConvexPolygon { vertices: vertices.iter().map(|v| c(v, 2)).collect() },
            Shape::AxisAlignedBox { min, sides } => ShapeDto::Box { min: c(min, dim), sides: sides.clone() },
            Shape::Corona(k) => ShapeDto::Corona {
                center: c(&k.center, 2),
                radius: k.radius,
                carve: k.carve.map(|(a, b)| [a, b]),
                apexes: k.apexes.iter().map(|v| c(v, 2)).collect(),
            },
            Shape::Annulus { center, inner, outer } => ShapeDto::Annulus { center: c(center, dim), inner: *inner, outer: *outer },
            Shape::Shell { outer, inner } => ShapeDto::Shell {
                outer: Box::new(shape_to(outer, dim)),
                inner: Box::new(shape_to(inner, dim)),
            },
        }
    }

    impl TryFrom<SourceFieldDto> for SourceField {
        type Error = String;

        fn try_from(d: SourceFieldDto) -> Result<Self, String> {
            if d.dim != 2 && d.dim != 3 {
                return Err(format!("dimension {} must be 2 or 3", d.dim));
            }
            let layers = d
                .layers
                .into_iter()
                .map(|l| Ok(Layer { shape: shape_from(l.shape, d.dim)?, intensity: l.intensity }))
                .collect::<Result<Vec<_>, String>>()?;
            Ok(SourceField { dim: d.dim, representation: d.representation, layers })
        }
    }

    impl From<SourceField> for SourceFieldDto {
        fn from(q: SourceField) -> Self {
            SourceFieldDto {
                dim: q.dim,
                representation: q.representation,
                layers: q
                    .layers
                    .iter()
                    .map(|l| LayerDto { shape: shape_to(&l.shape, q.dim), intensity: l.intensity })
                    .collect(),
            }
        }
    }
}
