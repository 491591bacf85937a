//! Boundary sensor placement and location on boundary facets.

use std::f64::consts::PI;

use crate::mesh::{tol_geom, Mesh, MeshError};
use crate::Point;

/// Sensor points on `|x| = R`, each located on a boundary facet of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSet {
    pub radius: f64,
    pub points: Vec<Point>,
    /// Containing facet and barycentric weights of the facet point hit by
    /// the ray from the origin through the sensor.
    pub locations: Vec<FacetLocation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FacetLocation {
    pub facet: usize,
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SensorSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Linear interpolation of a nodal field at every sensor.
    pub fn interpolate(&self, u: &[f64]) -> Vec<f64> {
        self.locations
            .iter()
            .map(|loc| loc.nodes.iter().zip(&loc.weights).map(|(&i, w)| w * u[i]).sum())
            .collect()
    }
}

/// Equiangular points on the circle (2D) or a Fibonacci lattice on the sphere (3D).
pub fn sensor_points(dim: usize, radius: f64, count: usize) -> Vec<Point> {
    match dim {
        2 => (0..count)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / count as f64;
                Point::new(radius * t.cos(), radius * t.sin(), 0.0)
            })
            .collect(),
        _ => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - (2 * k + 1) as f64 / count as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let t = golden * k as f64;
                    Point::new(r * t.cos(), r * t.sin(), z) * radius
                })
                .collect()
        }
    }
}

/// Places `count` sensors on `|x| = radius` and locates each on a boundary
/// facet of `mesh`.
pub fn boundary_sensors(radius: f64, count: usize, mesh: &Mesh) -> Result<SensorSet, MeshError> {
    if count == 0 {
        return Err(MeshError::InvalidParameters("sensor count must be positive".into()));
    }
    let points = sensor_points(mesh.dim(), radius, count);
    locate_sensors(radius, points, mesh)
}

/// Locates given boundary points on the facets of `mesh`.
pub fn locate_sensors(radius: f64, points: Vec<Point>, mesh: &Mesh) -> Result<SensorSet, MeshError> {
    let tol = tol_geom(radius);
    let mut locations = Vec::with_capacity(points.len());
    for (k, p) in points.iter().enumerate() {
        if (p.norm() - radius).abs() > tol {
            return Err(MeshError::InvalidParameters(format!(
                "sensor {k} at |x| = {} is not on the sphere of radius {radius}",
                p.norm()
            )));
        }
        let loc = (0..mesh.num_facets())
            .find_map(|f| ray_hit(mesh, f, p))
            .ok_or_else(|| {
                MeshError::InvalidParameters(format!("sensor {k} is not on any boundary facet"))
            })?;
        locations.push(loc);
    }
    Ok(SensorSet { radius, points, locations })
}

/// Intersects the ray from the origin through `p` with facet `f`.
fn ray_hit(mesh: &Mesh, f: usize, p: &Point) -> Option<FacetLocation> {
    let v = mesh.facet(f);
    let x = mesh.nodes();
    let eps = 1e-12;
    let d = p.normalize();
    match mesh.dim() {
        2 => {
            let (a, b) = (x[v[0]], x[v[1]]);
            // s d = a + t (b - a)
            let e = b - a;
            let det = d.x * (-e.y) - d.y * (-e.x);
            if det.abs() < eps {
                return None;
            }
            let s = (a.x * (-e.y) - a.y * (-e.x)) / det;
            let t = (d.x * a.y - d.y * a.x) / det;
            (s > 0.0 && (-eps..=1.0 + eps).contains(&t)).then(|| FacetLocation {
                facet: f,
                nodes: v.to_vec(),
                weights: vec![1.0 - t.clamp(0.0, 1.0), t.clamp(0.0, 1.0)],
            })
        }
        _ => {
            let (a, b, c) = (x[v[0]], x[v[1]], x[v[2]]);
            let e1 = b - a;
            let e2 = c - a;
            let pv = d.cross(&e2);
            let det = e1.dot(&pv);
            if det.abs() < eps {
                return None;
            }
            let tv = -a;
            let u = tv.dot(&pv) / det;
            let qv = tv.cross(&e1);
            let w = d.dot(&qv) / det;
            let s = e2.dot(&qv) / det;
            let inside = u >= -eps && w >= -eps && u + w <= 1.0 + eps && s > 0.0;
            inside.then(|| {
                let (u, w) = (u.max(0.0), w.max(0.0));
                let sum = (u + w).max(1.0);
                let (u, w) = (u / sum, w / sum);
                FacetLocation {
                    facet: f,
                    nodes: v.to_vec(),
                    weights: vec![1.0 - u - w, u, w],
                }
            })
        }
    }
}
