//! Simplicial meshes of the disk / ball `B_R(0)`.
//!
//! Meshes are built from structured templates: concentric rings in 2D
//! (followed by Lawson edge flips) and a radially mapped Kuhn-subdivided cube
//! in 3D. Boundary nodes always lie on `|x| = R` to within [`tol_geom`].

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::Point;

/// Upper bound on the number of nodes any builder will produce.
pub const MAX_NODES: usize = 3_000_000;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh parameters: {0}")]
    InvalidParameters(String),
    #[error("requested mesh needs about {estimated} nodes, above the limit of {limit}")]
    ResourceLimit { estimated: usize, limit: usize },
    #[error("mesh too coarse to resolve the domain: {0}")]
    TooCoarse(String),
    #[error("element {element} is degenerate (signed volume {volume:e})")]
    Degenerate { element: usize, volume: f64 },
    #[error("boundary is not watertight: {0}")]
    NotWatertight(String),
    #[error("boundary node {node} at |x| = {norm} is off the sphere |x| = {radius}")]
    OffBoundary { node: usize, norm: f64, radius: f64 },
    #[error("mesh parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Geometric tolerance for "on the boundary" predicates.
pub fn tol_geom(radius: f64) -> f64 {
    1e-9 * radius
}

/// Simplicial mesh of `B_R(0)` in two or three dimensions.
///
/// Elements are stored positively oriented. Boundary facets are oriented with
/// outward normals.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    radius: f64,
    nodes: Vec<Point>,
    elements: Vec<usize>,
    tags: Vec<i32>,
    facets: Vec<usize>,
}

impl Mesh {
    /// Assembles a mesh from raw parts, fixing element orientation and
    /// extracting the boundary facets.
    pub fn from_parts(
        dim: usize,
        radius: f64,
        nodes: Vec<Point>,
        elements: Vec<usize>,
        tags: Vec<i32>,
    ) -> Result<Mesh, MeshError> {
        if dim != 2 && dim != 3 {
            return Err(MeshError::InvalidParameters(format!("dimension {dim}")));
        }
        let nv = dim + 1;
        if elements.len() % nv != 0 || elements.len() / nv != tags.len() {
            return Err(MeshError::InvalidParameters(
                "element table and tag table disagree".into(),
            ));
        }
        if let Some(&bad) = elements.iter().find(|&&i| i >= nodes.len()) {
            return Err(MeshError::InvalidParameters(format!(
                "node index {bad} out of range"
            )));
        }
        let mut mesh = Mesh {
            dim,
            radius,
            nodes,
            elements,
            tags,
            facets: Vec::new(),
        };
        for e in 0..mesh.num_elements() {
            let vol = mesh.signed_volume(e);
            if vol.abs() <= 1e-14 * radius.powi(dim as i32) {
                return Err(MeshError::Degenerate { element: e, volume: vol });
            }
            if vol < 0.0 {
                mesh.elements.swap(e * nv, e * nv + 1);
            }
        }
        mesh.facets = mesh.extract_boundary();
        Ok(mesh)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Radius of the domain this mesh discretizes.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.tags.len()
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len() / self.dim
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let nv = self.dim + 1;
        &self.elements[e * nv..(e + 1) * nv]
    }

    pub fn elements(&self) -> impl Iterator<Item = &[usize]> {
        self.elements.chunks_exact(self.dim + 1)
    }

    pub fn facet(&self, f: usize) -> &[usize] {
        &self.facets[f * self.dim..(f + 1) * self.dim]
    }

    pub fn facets(&self) -> impl Iterator<Item = &[usize]> {
        self.facets.chunks_exact(self.dim)
    }

    pub fn region_tag(&self, e: usize) -> i32 {
        self.tags[e]
    }

    pub fn region_tags(&self) -> &[i32] {
        &self.tags
    }

    /// Overwrites the region tag of every element from a function of its centroid.
    pub fn tag_regions(&mut self, f: impl Fn(&Point) -> i32) {
        for e in 0..self.num_elements() {
            self.tags[e] = f(&self.centroid(e));
        }
    }

    pub fn signed_volume(&self, e: usize) -> f64 {
        let v = self.element(e);
        simplex_signed_volume(self.dim, &self.element_points(v))
    }

    pub fn volume(&self, e: usize) -> f64 {
        self.signed_volume(e).abs()
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.num_elements()).map(|e| self.volume(e)).sum()
    }

    pub fn centroid(&self, e: usize) -> Point {
        let v = self.element(e);
        v.iter().map(|&i| self.nodes[i]).sum::<Point>() / v.len() as f64
    }

    fn element_points(&self, v: &[usize]) -> [Point; 4] {
        let mut pts = [Point::zeros(); 4];
        for (k, &i) in v.iter().enumerate() {
            pts[k] = self.nodes[i];
        }
        pts
    }

    /// Longest edge of element `e`.
    pub fn element_diameter(&self, e: usize) -> f64 {
        let v = self.element(e);
        let mut d: f64 = 0.0;
        for a in 0..v.len() {
            for b in a + 1..v.len() {
                d = d.max((self.nodes[v[a]] - self.nodes[v[b]]).norm());
            }
        }
        d
    }

    pub fn h_max(&self) -> f64 {
        (0..self.num_elements())
            .map(|e| self.element_diameter(e))
            .fold(0.0, f64::max)
    }

    /// Smallest interior angle over all triangles, in degrees (2D only).
    pub fn min_angle_deg(&self) -> f64 {
        assert_eq!(self.dim, 2, "min_angle_deg is defined for triangles");
        let mut min = f64::INFINITY;
        for v in self.elements() {
            for k in 0..3 {
                let a = self.nodes[v[k]];
                let b = self.nodes[v[(k + 1) % 3]];
                let c = self.nodes[v[(k + 2) % 3]];
                let u = (b - a).normalize();
                let w = (c - a).normalize();
                min = min.min(u.dot(&w).clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        min
    }

    /// Normalized radius ratio `3 r_in / r_circ` of tetrahedron `e` (1 for a regular one).
    pub fn radius_ratio(&self, e: usize) -> f64 {
        assert_eq!(self.dim, 3, "radius_ratio is defined for tetrahedra");
        let p = self.element_points(self.element(e));
        tet_radius_ratio(&p)
    }

    pub fn min_radius_ratio(&self) -> f64 {
        (0..self.num_elements())
            .map(|e| self.radius_ratio(e))
            .fold(f64::INFINITY, f64::min)
    }

    /// Indices of nodes lying on some boundary facet.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        let mut flag = vec![false; self.num_nodes()];
        for &i in &self.facets {
            flag[i] = true;
        }
        (0..self.num_nodes()).filter(|&i| flag[i]).collect()
    }

    /// Area (2D: length) of boundary facet `f`.
    pub fn facet_measure(&self, f: usize) -> f64 {
        let v = self.facet(f);
        match self.dim {
            2 => (self.nodes[v[1]] - self.nodes[v[0]]).norm(),
            _ => {
                0.5 * (self.nodes[v[1]] - self.nodes[v[0]])
                    .cross(&(self.nodes[v[2]] - self.nodes[v[0]]))
                    .norm()
            }
        }
    }

    fn extract_boundary(&self) -> Vec<usize> {
        let nv = self.dim + 1;
        let mut faces: HashMap<Vec<usize>, (usize, usize)> = HashMap::new();
        for e in 0..self.num_elements() {
            let v = self.element(e);
            for skip in 0..nv {
                let mut key: Vec<usize> = (0..nv).filter(|&k| k != skip).map(|k| v[k]).collect();
                key.sort_unstable();
                faces.entry(key).and_modify(|c| c.1 += 1).or_insert((e * nv + skip, 1));
            }
        }
        let mut bnd: Vec<(usize, usize)> = faces
            .into_values()
            .filter(|&(_, count)| count == 1)
            .map(|(slot, _)| (slot / nv, slot % nv))
            .collect();
        bnd.sort_unstable();
        let mut facets = Vec::with_capacity(bnd.len() * self.dim);
        for (e, skip) in bnd {
            let v = self.element(e);
            let mut face: Vec<usize> = (0..nv).filter(|&k| k != skip).map(|k| v[k]).collect();
            let opposite = self.nodes[v[skip]];
            let a = self.nodes[face[0]];
            let normal = match self.dim {
                2 => {
                    let t = self.nodes[face[1]] - a;
                    Point::new(t.y, -t.x, 0.0)
                }
                _ => (self.nodes[face[1]] - a).cross(&(self.nodes[face[2]] - a)),
            };
            if normal.dot(&(opposite - a)) > 0.0 {
                face.swap(0, 1);
            }
            facets.extend(face);
        }
        facets
    }

    /// Checks the structural invariants: positive orientation, watertight
    /// boundary, boundary nodes on the sphere.
    pub fn check_invariants(&self) -> Result<(), MeshError> {
        for e in 0..self.num_elements() {
            let vol = self.signed_volume(e);
            if !(vol > 0.0) {
                return Err(MeshError::Degenerate { element: e, volume: vol });
            }
        }
        self.check_watertight()?;
        let tol = tol_geom(self.radius);
        for i in self.boundary_nodes() {
            let norm = self.nodes[i].norm();
            if (norm - self.radius).abs() > tol {
                return Err(MeshError::OffBoundary {
                    node: i,
                    norm,
                    radius: self.radius,
                });
            }
        }
        Ok(())
    }

    /// Every (n-2)-face of the boundary must be shared by exactly two facets.
    pub fn check_watertight(&self) -> Result<(), MeshError> {
        if self.facets.is_empty() {
            return Err(MeshError::NotWatertight("no boundary facets".into()));
        }
        let mut ridges: HashMap<Vec<usize>, usize> = HashMap::new();
        for f in self.facets() {
            for skip in 0..self.dim {
                let mut key: Vec<usize> =
                    (0..self.dim).filter(|&k| k != skip).map(|k| f[k]).collect();
                key.sort_unstable();
                *ridges.entry(key).or_default() += 1;
            }
        }
        match ridges.iter().find(|(_, &c)| c != 2) {
            Some((r, c)) => Err(MeshError::NotWatertight(format!(
                "ridge {r:?} shared by {c} facets"
            ))),
            None => Ok(()),
        }
    }

    /// Writes the plain-text mesh format.
    ///
    /// ```text
    /// blt-mesh 1
    /// dim <d> radius <R> nodes <N> elements <E> facets <F>
    /// nodes
    /// <x> <y> [<z>]                 (N lines)
    /// elements
    /// <i0> .. <id> <region tag>     (E lines)
    /// facets
    /// <i0> .. <i(d-1)>              (F lines)
    /// ```
    /// Floating point values use Rust's shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "blt-mesh 1");
        let _ = writeln!(
            s,
            "dim {} radius {} nodes {} elements {} facets {}",
            self.dim,
            self.radius,
            self.num_nodes(),
            self.num_elements(),
            self.num_facets()
        );
        s.push_str("nodes\n");
        for p in &self.nodes {
            let c: Vec<String> = p.iter().take(self.dim).map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{}", c.join(" "));
        }
        s.push_str("elements\n");
        for e in 0..self.num_elements() {
            let c: Vec<String> = self.element(e).iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{} {}", c.join(" "), self.tags[e]);
        }
        s.push_str("facets\n");
        for f in self.facets() {
            let c: Vec<String> = f.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{}", c.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh, MeshError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| MeshError::Parse {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let (ln, magic) = next("header")?;
        if magic != "blt-mesh 1" {
            return Err(MeshError::Parse { line: ln, message: format!("bad magic {magic:?}") });
        }
        let (ln, header) = next("counts")?;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.len() != 10 || tok[0] != "dim" || tok[2] != "radius" || tok[4] != "nodes" {
            return Err(MeshError::Parse { line: ln, message: "malformed count line".into() });
        }
        let perr = |line: usize, m: &str| MeshError::Parse { line, message: m.to_string() };
        let dim: usize = tok[1].parse().map_err(|_| perr(ln, "bad dim"))?;
        let radius: f64 = tok[3].parse().map_err(|_| perr(ln, "bad radius"))?;
        let n: usize = tok[5].parse().map_err(|_| perr(ln, "bad node count"))?;
        let ne: usize = tok[7].parse().map_err(|_| perr(ln, "bad element count"))?;
        let nf: usize = tok[9].parse().map_err(|_| perr(ln, "bad facet count"))?;
        if dim != 2 && dim != 3 {
            return Err(perr(ln, "dim must be 2 or 3"));
        }
        let expect = |got: (usize, &str), want: &str| -> Result<(), MeshError> {
            if got.1 == want {
                Ok(())
            } else {
                Err(MeshError::Parse { line: got.0, message: format!("expected section {want:?}") })
            }
        };
        expect(next("nodes")?, "nodes")?;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, l) = next("node")?;
            let c: Result<Vec<f64>, _> = l.split_whitespace().map(str::parse).collect();
            let c = c.map_err(|_| perr(ln, "bad coordinate"))?;
            if c.len() != dim {
                return Err(perr(ln, "wrong number of coordinates"));
            }
            nodes.push(crate::point_from_slice(&c).expect("dim checked"));
        }
        expect(next("elements")?, "elements")?;
        let mut elements = Vec::with_capacity(ne * (dim + 1));
        let mut tags = Vec::with_capacity(ne);
        for _ in 0..ne {
            let (ln, l) = next("element")?;
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != dim + 2 {
                return Err(perr(ln, "wrong number of element fields"));
            }
            for s in &t[..dim + 1] {
                elements.push(s.parse().map_err(|_| perr(ln, "bad node index"))?);
            }
            tags.push(t[dim + 1].parse().map_err(|_| perr(ln, "bad region tag"))?);
        }
        expect(next("facets")?, "facets")?;
        for _ in 0..nf {
            let (ln, l) = next("facet")?;
            if l.split_whitespace().count() != dim {
                return Err(perr(ln, "wrong number of facet fields"));
            }
        }
        let mesh = Mesh::from_parts(dim, radius, nodes, elements, tags)?;
        if mesh.num_facets() != nf {
            return Err(MeshError::Parse {
                line: 0,
                message: format!(
                    "facet table lists {nf} facets but the elements bound {}",
                    mesh.num_facets()
                ),
            });
        }
        Ok(mesh)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
        Mesh::from_text(&std::fs::read_to_string(path)?)
    }

    /// VTK legacy (ASCII, unstructured grid) export with optional nodal and
    /// cell scalars.
    pub fn write_vtk(
        &self,
        path: impl AsRef<Path>,
        point_data: &[(&str, &[f64])],
        cell_data: &[(&str, &[f64])],
    ) -> Result<(), MeshError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# vtk DataFile Version 3.0")?;
        writeln!(out, "blt mesh")?;
        writeln!(out, "ASCII")?;
        writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(out, "POINTS {} double", self.num_nodes())?;
        for p in &self.nodes {
            writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
        }
        let nv = self.dim + 1;
        writeln!(out, "CELLS {} {}", self.num_elements(), self.num_elements() * (nv + 1))?;
        for v in self.elements() {
            let c: Vec<String> = v.iter().map(|i| i.to_string()).collect();
            writeln!(out, "{} {}", nv, c.join(" "))?;
        }
        writeln!(out, "CELL_TYPES {}", self.num_elements())?;
        let cell_type = if self.dim == 2 { 5 } else { 10 };
        for _ in 0..self.num_elements() {
            writeln!(out, "{cell_type}")?;
        }
        writeln!(out, "CELL_DATA {}", self.num_elements())?;
        writeln!(out, "SCALARS region_tag int 1\nLOOKUP_TABLE default")?;
        for t in &self.tags {
            writeln!(out, "{t}")?;
        }
        for (name, vals) in cell_data {
            writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default")?;
            for v in vals.iter() {
                writeln!(out, "{v}")?;
            }
        }
        if !point_data.is_empty() {
            writeln!(out, "POINT_DATA {}", self.num_nodes())?;
            for (name, vals) in point_data {
                writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default")?;
                for v in vals.iter() {
                    writeln!(out, "{v}")?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn simplex_signed_volume(dim: usize, p: &[Point]) -> f64 {
    match dim {
        2 => {
            let a = p[1] - p[0];
            let b = p[2] - p[0];
            0.5 * (a.x * b.y - a.y * b.x)
        }
        _ => (p[1] - p[0]).dot(&(p[2] - p[0]).cross(&(p[3] - p[0]))) / 6.0,
    }
}

fn tet_radius_ratio(p: &[Point; 4]) -> f64 {
    let vol = simplex_signed_volume(3, p).abs();
    let faces = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];
    let area: f64 = faces
        .iter()
        .map(|f| 0.5 * (p[f[1]] - p[f[0]]).cross(&(p[f[2]] - p[f[0]])).norm())
        .sum();
    let r_in = 3.0 * vol / area;
    // circumcenter c solves 2 (p_k - p_0) . c' = |p_k - p_0|^2 with c' = c - p_0
    let a = nalgebra::Matrix3::from_rows(&[
        (p[1] - p[0]).transpose(),
        (p[2] - p[0]).transpose(),
        (p[3] - p[0]).transpose(),
    ]) * 2.0;
    let b = nalgebra::Vector3::new(
        (p[1] - p[0]).norm_squared(),
        (p[2] - p[0]).norm_squared(),
        (p[3] - p[0]).norm_squared(),
    );
    match a.lu().solve(&b) {
        Some(c) => 3.0 * r_in / c.norm(),
        None => 0.0,
    }
}

/// Target-size parameters for the mesh builders.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSpec {
    pub dim: usize,
    pub radius: f64,
    pub h: f64,
    /// Radii of internal circles the 2D mesh should conform to (media interfaces).
    pub interfaces: Vec<f64>,
}

impl MeshSpec {
    pub fn build(&self) -> Result<Mesh, MeshError> {
        match self.dim {
            2 => build_disk_mesh_with_interfaces(self.radius, self.h, &self.interfaces),
            3 => build_ball_mesh(self.radius, self.h),
            d => Err(MeshError::InvalidParameters(format!("dimension {d}"))),
        }
    }
}

fn check_size(radius: f64, h: f64) -> Result<(), MeshError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(MeshError::InvalidParameters(format!("radius {radius}")));
    }
    if !(h > 0.0 && h < radius) {
        return Err(MeshError::InvalidParameters(format!(
            "element size {h} must satisfy 0 < h < R = {radius}"
        )));
    }
    Ok(())
}

pub fn build_disk_mesh(radius: f64, h: f64) -> Result<Mesh, MeshError> {
    build_disk_mesh_with_interfaces(radius, h, &[])
}

/// Triangulates `B_R(0)` with concentric rings; every radius in `interfaces`
/// becomes a ring so that piecewise media resolved at centroids follow it.
pub fn build_disk_mesh_with_interfaces(
    radius: f64,
    h: f64,
    interfaces: &[f64],
) -> Result<Mesh, MeshError> {
    check_size(radius, h)?;
    let mut breaks: Vec<f64> = interfaces
        .iter()
        .copied()
        .filter(|&r| r > 0.5 * h && r < radius - 0.5 * h)
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 0.5 * h);
    breaks.insert(0, 0.0);
    breaks.push(radius);

    // ring radii and the segment (media layer) each band belongs to
    let mut radii = vec![0.0];
    let mut band_segment = Vec::new();
    for (s, w) in breaks.windows(2).enumerate() {
        let m = (((w[1] - w[0]) / h) - 1e-9).ceil().max(1.0) as usize;
        for k in 1..=m {
            radii.push(w[0] + (w[1] - w[0]) * k as f64 / m as f64);
            band_segment.push(s);
        }
    }
    let last = radii.len() - 1;
    radii[last] = radius;

    let rings = radii.len() - 1;
    let mut counts = vec![1usize];
    for k in 1..=rings {
        let dr_in = radii[k] - radii[k - 1];
        let dr_out = if k < rings { radii[k + 1] - radii[k] } else { dr_in };
        let spacing = 0.5 * (dr_in + dr_out) * 2.0 / 3f64.sqrt();
        let n = (2.0 * PI * radii[k] / spacing).round() as usize;
        counts.push(n.max(6));
    }
    let estimated: usize = counts.iter().sum();
    if estimated > MAX_NODES {
        return Err(MeshError::ResourceLimit { estimated, limit: MAX_NODES });
    }

    let mut nodes = vec![Point::zeros()];
    let mut ring_start = vec![0usize];
    let mut ring_angles: Vec<Vec<f64>> = vec![vec![0.0]];
    for k in 1..=rings {
        ring_start.push(nodes.len());
        let n = counts[k];
        let offset = if k % 2 == 1 { 0.0 } else { PI / n as f64 };
        let mut angles = Vec::with_capacity(n);
        for i in 0..n {
            let t = offset + 2.0 * PI * i as f64 / n as f64;
            angles.push(t);
            nodes.push(Point::new(radii[k] * t.cos(), radii[k] * t.sin(), 0.0));
        }
        ring_angles.push(angles);
    }

    let mut tris: Vec<[usize; 3]> = Vec::new();
    let mut tri_segment: Vec<usize> = Vec::new();
    for k in 1..=rings {
        let outer: Vec<usize> = (0..counts[k]).map(|i| ring_start[k] + i).collect();
        let band = merge_rings(
            &(0..counts[k - 1]).map(|i| ring_start[k - 1] + i).collect::<Vec<_>>(),
            &ring_angles[k - 1],
            &outer,
            &ring_angles[k],
        );
        tri_segment.extend(std::iter::repeat(band_segment[k - 1]).take(band.len()));
        tris.extend(band);
    }
    for t in tris.iter_mut() {
        let p = [nodes[t[0]], nodes[t[1]], nodes[t[2]]];
        if simplex_signed_volume(2, &p) < 0.0 {
            t.swap(1, 2);
        }
    }
    lawson_flips(&nodes, &mut tris, &tri_segment);

    let elements: Vec<usize> = tris.iter().flat_map(|t| t.iter().copied()).collect();
    let tags = vec![0; tris.len()];
    Mesh::from_parts(2, radius, nodes, elements, tags)
}

/// Triangulates the band between two consecutive rings by sweeping both in
/// angle order.
fn merge_rings(inner: &[usize], a_ang: &[f64], outer: &[usize], b_ang: &[f64]) -> Vec<[usize; 3]> {
    let n = outer.len();
    if inner.len() == 1 {
        return (0..n).map(|j| [inner[0], outer[j], outer[(j + 1) % n]]).collect();
    }
    let m = inner.len();
    let b0 = b_ang[0];
    let wrap = |x: f64| {
        let mut d = (x - b0) % (2.0 * PI);
        if d < -PI {
            d += 2.0 * PI;
        } else if d > PI {
            d -= 2.0 * PI;
        }
        d
    };
    let i0 = (0..m)
        .min_by(|&i, &j| wrap(a_ang[i]).abs().total_cmp(&wrap(a_ang[j]).abs()))
        .unwrap_or(0);
    let a_un: Vec<f64> = (0..=m)
        .map(|t| b0 + wrap(a_ang[(i0 + t) % m]) + if t == m { 2.0 * PI } else { 0.0 })
        .map(|x| x)
        .collect();
    // unwrap monotonically
    let mut a_mono = a_un.clone();
    for t in 1..=m {
        while a_mono[t] <= a_mono[t - 1] {
            a_mono[t] += 2.0 * PI;
        }
    }
    let b_mono: Vec<f64> = (0..=n).map(|t| b0 + 2.0 * PI * t as f64 / n as f64).collect();
    let ai = |t: usize| inner[(i0 + t) % m];
    let bj = |t: usize| outer[t % n];
    let mut tris = Vec::with_capacity(m + n);
    let (mut i, mut j) = (0usize, 0usize);
    while i < m || j < n {
        let advance_outer = j < n && (i == m || b_mono[j + 1] < a_mono[i + 1]);
        if advance_outer {
            tris.push([ai(i), bj(j), bj(j + 1)]);
            j += 1;
        } else {
            tris.push([ai(i), bj(j), ai(i + 1)]);
            i += 1;
        }
    }
    let _ = b_ang;
    tris
}

fn in_circumcircle(a: Point, b: Point, c: Point, d: Point) -> bool {
    // a, b, c counterclockwise
    let m = nalgebra::Matrix3::new(
        a.x - d.x,
        a.y - d.y,
        (a.x - d.x).powi(2) + (a.y - d.y).powi(2),
        b.x - d.x,
        b.y - d.y,
        (b.x - d.x).powi(2) + (b.y - d.y).powi(2),
        c.x - d.x,
        c.y - d.y,
        (c.x - d.x).powi(2) + (c.y - d.y).powi(2),
    );
    m.determinant() > 1e-12
}

/// Delaunay edge flips within each media segment.
fn lawson_flips(nodes: &[Point], tris: &mut [[usize; 3]], segment: &[usize]) {
    for _pass in 0..50 {
        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, tri) in tris.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edges.entry((a.min(b), a.max(b))).or_default().push(t);
            }
        }
        let mut keys: Vec<(usize, usize)> = edges.keys().copied().collect();
        keys.sort_unstable();
        let mut touched = vec![false; tris.len()];
        let mut flipped = 0;
        for key in keys {
            let ts = &edges[&key];
            if ts.len() != 2 {
                continue;
            }
            let (t1, t2) = (ts[0], ts[1]);
            if touched[t1] || touched[t2] || segment[t1] != segment[t2] {
                continue;
            }
            let (a, b) = key;
            let c = *tris[t1].iter().find(|&&v| v != a && v != b).unwrap();
            let d = *tris[t2].iter().find(|&&v| v != a && v != b).unwrap();
            let mut abc = [a, b, c];
            if simplex_signed_volume(2, &[nodes[a], nodes[b], nodes[c]]) < 0.0 {
                abc.swap(0, 1);
            }
            if !in_circumcircle(nodes[abc[0]], nodes[abc[1]], nodes[abc[2]], nodes[d]) {
                continue;
            }
            let n1 = [c, d, a];
            let n2 = [d, c, b];
            let v1 = simplex_signed_volume(2, &[nodes[n1[0]], nodes[n1[1]], nodes[n1[2]]]);
            let v2 = simplex_signed_volume(2, &[nodes[n2[0]], nodes[n2[1]], nodes[n2[2]]]);
            if v1 == 0.0 || v2 == 0.0 || v1.signum() != v2.signum() {
                continue;
            }
            let fix = |mut t: [usize; 3], v: f64| {
                if v < 0.0 {
                    t.swap(1, 2);
                }
                t
            };
            tris[t1] = fix(n1, v1);
            tris[t2] = fix(n2, v2);
            touched[t1] = true;
            touched[t2] = true;
            flipped += 1;
        }
        if flipped == 0 {
            break;
        }
    }
}

/// Tetrahedral mesh of `B_R(0)`: a cube with `2n` cells per axis, each cell
/// split into six Kuhn tetrahedra mirrored per octant, mapped radially onto
/// the ball by `x -> R x |x|_inf / |x|_2`.
pub fn build_ball_mesh(radius: f64, h: f64) -> Result<Mesh, MeshError> {
    check_size(radius, h)?;
    if radius / h < 1.5 {
        return Err(MeshError::TooCoarse(format!(
            "h = {h} is too large for a tetrahedral mesh of a ball of radius {radius}"
        )));
    }
    let n = (1.2 * radius / h - 1e-9).ceil() as usize;
    let side = 2 * n + 1;
    let estimated = side.pow(3);
    if estimated > MAX_NODES {
        return Err(MeshError::ResourceLimit { estimated, limit: MAX_NODES });
    }
    let idx = |i: usize, j: usize, k: usize| (i * side + j) * side + k;
    let mut nodes = Vec::with_capacity(estimated);
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                let x = Point::new(
                    i as f64 / n as f64 - 1.0,
                    j as f64 / n as f64 - 1.0,
                    k as f64 / n as f64 - 1.0,
                );
                let inf = x.amax();
                let p = if inf == 0.0 { x } else { x * (radius * inf / x.norm()) };
                nodes.push(p);
            }
        }
    }
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut elements = Vec::with_capacity(8 * n * n * n * 6 * 4);
    for i in 0..2 * n {
        for j in 0..2 * n {
            for k in 0..2 * n {
                let base = [i, j, k];
                // start at the corner nearest the centre and step outward
                let start: [usize; 3] =
                    std::array::from_fn(|d| if base[d] >= n { base[d] } else { base[d] + 1 });
                let step: [isize; 3] = std::array::from_fn(|d| if base[d] >= n { 1 } else { -1 });
                for perm in &perms {
                    let mut c = start;
                    let mut tet = [idx(c[0], c[1], c[2]); 4];
                    for (s, &d) in perm.iter().enumerate() {
                        c[d] = (c[d] as isize + step[d]) as usize;
                        tet[s + 1] = idx(c[0], c[1], c[2]);
                    }
                    elements.extend(tet);
                }
            }
        }
    }
    let tags = vec![0; elements.len() / 4];
    Mesh::from_parts(3, radius, nodes, elements, tags)
}

/// Splits every simplex into `2^dim` children (red refinement; the interior
/// octahedron of a tetrahedron is cut along its shortest diagonal). Midpoints
/// of boundary edges are projected radially onto `|x| = R`.
pub fn refine_uniform(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let dim = mesh.dim();
    let estimated = mesh.num_nodes() * if dim == 2 { 4 } else { 8 };
    if estimated > MAX_NODES {
        return Err(MeshError::ResourceLimit { estimated, limit: MAX_NODES });
    }
    let mut boundary_edges = std::collections::HashSet::new();
    for f in mesh.facets() {
        for a in 0..dim {
            for b in a + 1..dim {
                boundary_edges.insert((f[a].min(f[b]), f[a].max(f[b])));
            }
        }
    }
    let mut nodes = mesh.nodes().to_vec();
    let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
    let radius = mesh.radius();
    let mut midpoint = |a: usize, b: usize, nodes: &mut Vec<Point>| -> usize {
        let key = (a.min(b), a.max(b));
        *mid.entry(key).or_insert_with(|| {
            let mut p = 0.5 * (nodes[a] + nodes[b]);
            if boundary_edges.contains(&key) {
                p *= radius / p.norm();
            }
            nodes.push(p);
            nodes.len() - 1
        })
    };
    let mut elements = Vec::with_capacity(mesh.num_elements() * (1 << dim) * (dim + 1));
    let mut tags = Vec::with_capacity(mesh.num_elements() * (1 << dim));
    for e in 0..mesh.num_elements() {
        let v = mesh.element(e).to_vec();
        let tag = mesh.region_tag(e);
        if dim == 2 {
            let m01 = midpoint(v[0], v[1], &mut nodes);
            let m12 = midpoint(v[1], v[2], &mut nodes);
            let m02 = midpoint(v[0], v[2], &mut nodes);
            for t in [
                [v[0], m01, m02],
                [m01, v[1], m12],
                [m02, m12, v[2]],
                [m01, m12, m02],
            ] {
                elements.extend(t);
                tags.push(tag);
            }
        } else {
            let mut m = |a: usize, b: usize, nodes: &mut Vec<Point>| midpoint(v[a], v[b], nodes);
            let x01 = m(0, 1, &mut nodes);
            let x02 = m(0, 2, &mut nodes);
            let x03 = m(0, 3, &mut nodes);
            let x12 = m(1, 2, &mut nodes);
            let x13 = m(1, 3, &mut nodes);
            let x23 = m(2, 3, &mut nodes);
            let mut children = vec![
                [v[0], x01, x02, x03],
                [x01, v[1], x12, x13],
                [x02, x12, v[2], x23],
                [x03, x13, x23, v[3]],
            ];
            let diagonals = [
                (x01, x23, [x02, x03, x13, x12]),
                (x02, x13, [x01, x03, x23, x12]),
                (x03, x12, [x01, x02, x23, x13]),
            ];
            let (p, q, ring) = diagonals
                .iter()
                .min_by(|a, b| {
                    (nodes[a.0] - nodes[a.1])
                        .norm()
                        .total_cmp(&(nodes[b.0] - nodes[b.1]).norm())
                })
                .copied()
                .expect("three diagonals");
            for s in 0..4 {
                children.push([p, q, ring[s], ring[(s + 1) % 4]]);
            }
            for t in children {
                elements.extend(t);
                tags.push(tag);
            }
        }
    }
    Mesh::from_parts(dim, radius, nodes, elements, tags)
}
