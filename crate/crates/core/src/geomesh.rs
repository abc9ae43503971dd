//! Polygonal scatterers and triangulations of the disk `|x| < R` around them.
//!
//! Meshes are constrained Delaunay triangulations of polygon nodes, circle
//! nodes and a hexagonal lattice. Elements touching the circle keep a curved
//! side: the chord between two consecutive circle nodes is stored as an arc
//! edge and never used for integration.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::{c64, Point};

/// Tolerance for geometric incidence checks.
const GEOM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScattererKind {
    SoundSoft,
    /// Penetrable obstacle; the interior wavenumber is `kappa * sqrt(n_interior)`.
    Penetrable { n_interior: c64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonScatterer {
    pub label: String,
    /// Counterclockwise vertex list.
    pub vertices: Vec<Point>,
    pub kind: ScattererKind,
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

/// Signed area of a closed polygon (positive when counterclockwise).
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| cross(poly[i], poly[(i + 1) % n])).sum::<f64>() * 0.5
}

fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(sub(q2, q1), sub(p1, q1));
    let d2 = cross(sub(q2, q1), sub(p2, q1));
    let d3 = cross(sub(p2, p1), sub(q1, p1));
    let d4 = cross(sub(p2, p1), sub(q2, p1));
    if d1 == 0.0 && d2 == 0.0 {
        // Collinear: intersect only if the projections overlap.
        let axis = sub(p2, p1);
        let t = |x: Point| (x[0] - p1[0]) * axis[0] + (x[1] - p1[1]) * axis[1];
        let (a, b) = (t(q1).min(t(q2)), t(q1).max(t(q2)));
        return b >= 0.0 && a <= t(p2);
    }
    (d1 * d2 <= 0.0) && (d3 * d4 <= 0.0)
}

/// Distance from `p` to the segment `[a, b]`.
pub fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2
    } else {
        0.0
    };
    let t = t.clamp(0.0, 1.0);
    norm(sub(p, [a[0] + t * ab[0], a[1] + t * ab[1]]))
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

impl PolygonScatterer {
    /// Validates the polygon and reorders it counterclockwise if needed.
    pub fn new(label: impl Into<String>, vertices: Vec<Point>, kind: ScattererKind) -> Result<Self> {
        let mut vertices = vertices;
        if vertices.len() < 3 {
            return Err(Error::Geometry(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::Geometry("polygon has non-finite vertices".into()));
        }
        let n = vertices.len();
        for i in 0..n {
            if norm(sub(vertices[(i + 1) % n], vertices[i])) == 0.0 {
                return Err(Error::Geometry(format!("repeated vertex at index {i}")));
            }
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if !adjacent
                    && segments_cross(
                        vertices[i],
                        vertices[(i + 1) % n],
                        vertices[j],
                        vertices[(j + 1) % n],
                    )
                {
                    return Err(Error::Geometry(format!(
                        "polygon is not simple: sides {i} and {j} intersect"
                    )));
                }
            }
        }
        let area = signed_area(&vertices);
        if area.abs() == 0.0 {
            return Err(Error::Geometry("polygon has zero area".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        if let ScattererKind::Penetrable { n_interior } = kind {
            if !(n_interior.re > 0.0) || !n_interior.im.is_finite() {
                return Err(Error::Geometry(format!(
                    "interior index must have positive real part, got {n_interior}"
                )));
            }
        }
        Ok(Self {
            label: label.into(),
            vertices,
            kind,
        })
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    /// Area centroid.
    pub fn centroid(&self) -> Point {
        let n = self.vertices.len();
        let mut c = [0.0, 0.0];
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            let w = cross(a, b);
            c[0] += (a[0] + b[0]) * w;
            c[1] += (a[1] + b[1]) * w;
        }
        let s = 1.0 / (6.0 * self.area());
        [c[0] * s, c[1] * s]
    }

    /// Largest vertex distance from the centroid.
    pub fn circumradius(&self) -> f64 {
        let c = self.centroid();
        self.vertices
            .iter()
            .map(|v| norm(sub(*v, c)))
            .fold(0.0, f64::max)
    }

    /// Largest vertex distance from the coordinate origin.
    pub fn radius_about_origin(&self) -> f64 {
        self.vertices.iter().map(|v| norm(*v)).fold(0.0, f64::max)
    }

    /// Copy translated so that its centroid is at the origin.
    pub fn centered(&self) -> Self {
        let c = self.centroid();
        Self {
            vertices: self.vertices.iter().map(|v| sub(*v, c)).collect(),
            ..self.clone()
        }
    }

    /// Copy rotated by `alpha` about the origin.
    pub fn rotated(&self, alpha: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| rotate_point(*v, alpha)).collect(),
            ..self.clone()
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_polygon(p, &self.vertices)
    }

    pub fn distance_to_boundary(&self, p: Point) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| segment_distance(p, self.vertices[i], self.vertices[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_penetrable(&self) -> bool {
        matches!(self.kind, ScattererKind::Penetrable { .. })
    }

    /// SHA-256 of a canonical text form of geometry and boundary condition.
    pub fn descriptor_hash(&self) -> String {
        let mut s = String::from("polygon");
        for v in &self.vertices {
            let _ = write!(s, ";{:?},{:?}", v[0], v[1]);
        }
        match self.kind {
            ScattererKind::SoundSoft => s.push_str(";dir"),
            ScattererKind::Penetrable { n_interior } => {
                let _ = write!(s, ";trans,{:?},{:?}", n_interior.re, n_interior.im);
            }
        }
        hex_digest(s.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn rotate_point(p: Point, alpha: f64) -> Point {
    let (s, c) = alpha.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// `R_D + 2h`, with `R_D` the circumradius about the centroid.
pub fn artificial_radius(scatterer: &PolygonScatterer, h: f64) -> f64 {
    scatterer.circumradius() + 2.0 * h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Interior,
    Exterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeTag {
    Inner,
    Gamma,
    GammaR,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Element {
    /// Counterclockwise vertex indices.
    pub vertices: [usize; 3],
    pub region: Region,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// For arc edges, ordered counterclockwise around the circle.
    pub vertices: [usize; 2],
    pub tag: EdgeTag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeGeometry {
    Straight { a: Point, b: Point },
    /// Arc of the circle `|x| = radius` centred at the origin, from angle
    /// `theta0` counterclockwise to `theta0 + span`.
    Arc { radius: f64, theta0: f64, span: f64 },
}

impl EdgeGeometry {
    pub fn length(&self) -> f64 {
        match *self {
            EdgeGeometry::Straight { a, b } => norm(sub(b, a)),
            EdgeGeometry::Arc { radius, span, .. } => radius * span,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<Point>,
    pub elements: Vec<Element>,
    pub edges: Vec<Edge>,
    pub radius: f64,
    pub h: f64,
    /// Scatterer boundary (counterclockwise), in mesh coordinates.
    pub polygon: Vec<Point>,
}

/// Element/edge incidence derived from a mesh.
#[derive(Debug, Clone)]
pub struct Topology {
    /// `element_edges[k][s]` is the edge joining vertices `s` and `s+1` of element `k`.
    pub element_edges: Vec<[usize; 3]>,
    /// Elements sharing each edge, in increasing order.
    pub edge_elements: Vec<Vec<usize>>,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * cross(sub(b, a), sub(c, a))
}

impl Mesh {
    /// Incidence tables. Element sides missing from the edge list map to `usize::MAX`.
    pub fn topology(&self) -> Topology {
        let lookup: HashMap<(usize, usize), usize> = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| (key(e.vertices[0], e.vertices[1]), i))
            .collect();
        let mut edge_elements = vec![Vec::new(); self.edges.len()];
        let element_edges = self
            .elements
            .iter()
            .enumerate()
            .map(|(k, el)| {
                let mut out = [usize::MAX; 3];
                for s in 0..3 {
                    let kk = key(el.vertices[s], el.vertices[(s + 1) % 3]);
                    if let Some(&e) = lookup.get(&kk) {
                        out[s] = e;
                        edge_elements[e].push(k);
                    }
                }
                out
            })
            .collect();
        Topology {
            element_edges,
            edge_elements,
        }
    }

    pub fn element_points(&self, k: usize) -> [Point; 3] {
        let v = self.elements[k].vertices;
        [self.nodes[v[0]], self.nodes[v[1]], self.nodes[v[2]]]
    }

    /// Vertex average; used as the plane-wave phase centre.
    pub fn element_center(&self, k: usize) -> Point {
        let p = self.element_points(k);
        [
            (p[0][0] + p[1][0] + p[2][0]) / 3.0,
            (p[0][1] + p[1][1] + p[2][1]) / 3.0,
        ]
    }

    pub fn edge_geometry(&self, e: usize) -> EdgeGeometry {
        let edge = self.edges[e];
        let a = self.nodes[edge.vertices[0]];
        let b = self.nodes[edge.vertices[1]];
        match edge.tag {
            EdgeTag::GammaR => {
                let theta0 = a[1].atan2(a[0]);
                let span = (b[1].atan2(b[0]) - theta0).rem_euclid(2.0 * PI);
                EdgeGeometry::Arc {
                    radius: self.radius,
                    theta0,
                    span,
                }
            }
            _ => EdgeGeometry::Straight { a, b },
        }
    }

    /// Area between a chord and its arc.
    fn segment_area(&self, e: usize) -> f64 {
        match self.edge_geometry(e) {
            EdgeGeometry::Arc { radius, span, .. } => 0.5 * radius * radius * (span - span.sin()),
            EdgeGeometry::Straight { .. } => 0.0,
        }
    }

    /// Element areas with curved sides integrated exactly.
    pub fn element_areas(&self) -> Vec<f64> {
        let topo = self.topology();
        (0..self.elements.len())
            .map(|k| {
                let p = self.element_points(k);
                let mut a = triangle_area(p[0], p[1], p[2]);
                for &e in &topo.element_edges[k] {
                    if e != usize::MAX && self.edges[e].tag == EdgeTag::GammaR {
                        a += self.segment_area(e);
                    }
                }
                a
            })
            .collect()
    }

    /// Per-element wavenumber: `kappa` outside, `kappa * sqrt(n_interior)` inside.
    pub fn element_wavenumbers(&self, kappa: f64, n_interior: Option<c64>) -> Vec<c64> {
        let k_in = n_interior.map_or(c64::new(kappa, 0.0), |n| n.sqrt() * kappa);
        self.elements
            .iter()
            .map(|e| match e.region {
                Region::Exterior => c64::new(kappa, 0.0),
                Region::Interior => k_in,
            })
            .collect()
    }

    /// Whether `p` lies in element `k` (closed, with a small tolerance).
    pub fn element_contains(&self, k: usize, p: Point, arc_sides: &[usize; 3]) -> bool {
        let q = self.element_points(k);
        let scale = self.h.max(1e-300);
        let tol = -1e-12 * scale * scale;
        let mut outside_side = None;
        for s in 0..3 {
            let a = q[s];
            let b = q[(s + 1) % 3];
            if cross(sub(b, a), sub(p, a)) < tol {
                if outside_side.is_some() {
                    return false;
                }
                outside_side = Some(s);
            }
        }
        match outside_side {
            None => true,
            Some(s) => {
                let e = arc_sides[s];
                if e == usize::MAX || self.edges[e].tag != EdgeTag::GammaR {
                    return false;
                }
                // Beyond the chord: accept if inside the circle and within the
                // angular sector of the arc.
                if norm(p) > self.radius * (1.0 + 1e-12) {
                    return false;
                }
                let a = q[s];
                let b = q[(s + 1) % 3];
                cross(a, p) >= -1e-12 * self.radius * self.radius
                    && cross(p, b) >= -1e-12 * self.radius * self.radius
            }
        }
    }

    /// Lowest-index element containing `p`.
    pub fn locate(&self, p: Point, topo: &Topology) -> Option<usize> {
        (0..self.elements.len()).find(|&k| self.element_contains(k, p, &topo.element_edges[k]))
    }

    /// Exact rotation of nodes and polygon about the origin by `alpha`.
    pub fn rotated(&self, alpha: f64) -> Mesh {
        Mesh {
            nodes: self.nodes.iter().map(|p| rotate_point(*p, alpha)).collect(),
            polygon: self.polygon.iter().map(|p| rotate_point(*p, alpha)).collect(),
            ..self.clone()
        }
    }

    pub fn count_region(&self, region: Region) -> usize {
        self.elements.iter().filter(|e| e.region == region).count()
    }

    pub fn max_straight_edge(&self) -> f64 {
        (0..self.edges.len())
            .filter_map(|e| match self.edge_geometry(e) {
                EdgeGeometry::Straight { a, b } => Some(norm(sub(b, a))),
                EdgeGeometry::Arc { .. } => None,
            })
            .fold(0.0, f64::max)
    }
}

fn triangulate(
    points: &[Point],
    constraints: &[[usize; 2]],
    scatterer: &PolygonScatterer,
    keep_inside: bool,
) -> Result<Vec<Element>> {
    let vertices: Vec<Point2<f64>> = points.iter().map(|p| Point2::new(p[0], p[1])).collect();
    let mut conflicts = 0usize;
    let cdt = ConstrainedDelaunayTriangulation::<Point2<f64>>::try_bulk_load_cdt(
        vertices,
        constraints.to_vec(),
        |_| conflicts += 1,
    )
    .map_err(|e| Error::Meshing(format!("triangulation failed: {e:?}")))?;
    if cdt.num_vertices() != points.len() || conflicts > 0 {
        return Err(Error::Meshing(format!(
            "triangulation merged {} vertices and dropped {conflicts} constraints",
            points.len() - cdt.num_vertices()
        )));
    }
    let mut elements = Vec::new();
    for face in cdt.inner_faces() {
        let vs = face.vertices();
        let mut idx = [vs[0].fix().index(), vs[1].fix().index(), vs[2].fix().index()];
        let (a, b, c) = (points[idx[0]], points[idx[1]], points[idx[2]]);
        if triangle_area(a, b, c) < 0.0 {
            idx.swap(1, 2);
        }
        let centroid = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0];
        let region = if scatterer.contains(centroid) {
            Region::Interior
        } else {
            Region::Exterior
        };
        if region == Region::Interior && !keep_inside {
            continue;
        }
        elements.push(Element {
            vertices: idx,
            region,
        });
    }
    Ok(elements)
}

/// Number of geometric refinement layers placed around each polygon vertex
/// by [`build_mesh`]; layer `k` sits at distance `h / 2^k`.
pub const DEFAULT_CORNER_LAYERS: usize = 3;

/// Triangulates the disk `|x| < radius` around `scatterer`, whose vertices
/// are taken in mesh coordinates (circle centred at the origin).
pub fn build_mesh(scatterer: &PolygonScatterer, radius: f64, h: f64) -> Result<Mesh> {
    build_mesh_graded(scatterer, radius, h, DEFAULT_CORNER_LAYERS)
}

/// [`build_mesh`] with an explicit number of corner layers (0 gives a
/// quasi-uniform mesh).
pub fn build_mesh_graded(scatterer: &PolygonScatterer, radius: f64, h: f64, layers: usize) -> Result<Mesh> {
    if !(h > 0.0) || !(radius > 0.0) || !h.is_finite() || !radius.is_finite() {
        return Err(Error::Argument(format!(
            "mesh width and radius must be positive, got h = {h}, R = {radius}"
        )));
    }
    if h > radius / 2.0 {
        return Err(Error::Argument(format!(
            "mesh width {h} exceeds half the radius {radius}"
        )));
    }
    let poly = &scatterer.vertices;
    let n_circle = ((2.0 * PI * radius / h).ceil() as usize).max(8);
    let chord_depth = radius * (PI / n_circle as f64).cos();
    let r_poly = scatterer.radius_about_origin();
    if r_poly >= chord_depth {
        return Err(Error::Geometry(format!(
            "polygon (radius {r_poly}) is not strictly inside the disk of radius {radius} at mesh width {h}"
        )));
    }

    let mut points: Vec<Point> = Vec::new();
    let mut constraints: Vec<[usize; 2]> = Vec::new();
    let nv = poly.len();
    let layer_radii: Vec<f64> = (1..=layers).map(|k| h * 0.5f64.powi(k as i32)).collect();
    for i in 0..nv {
        let a = poly[i];
        let b = poly[(i + 1) % nv];
        let len = norm(sub(b, a));
        let pieces = ((len / h).ceil() as usize).max(1);
        let mut ts: Vec<f64> = (0..pieces).map(|s| s as f64 / pieces as f64).collect();
        for &r in &layer_radii {
            if r < 0.5 * len / pieces as f64 {
                ts.push(r / len);
                ts.push(1.0 - r / len);
            }
        }
        ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for t in ts {
            points.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    let n_poly = points.len();
    for i in 0..n_poly {
        constraints.push([i, (i + 1) % n_poly]);
    }
    let circle_start = points.len();
    for i in 0..n_circle {
        let t = 2.0 * PI * i as f64 / n_circle as f64;
        points.push([radius * t.cos(), radius * t.sin()]);
    }
    for i in 0..n_circle {
        constraints.push([circle_start + i, circle_start + (i + 1) % n_circle]);
    }

    let keep_inside = scatterer.is_penetrable();
    // Rings of nodes around each vertex, in the sectors on either side of it.
    for i in 0..nv {
        let v = poly[i];
        let next = sub(poly[(i + 1) % nv], v);
        let prev = sub(poly[(i + nv - 1) % nv], v);
        let phi_next = next[1].atan2(next[0]);
        let phi_prev = prev[1].atan2(prev[0]);
        let inner = (phi_prev - phi_next).rem_euclid(2.0 * PI);
        let sectors = [(phi_next, inner, true), (phi_prev, 2.0 * PI - inner, false)];
        for &r in &layer_radii {
            for &(start, span, inside) in &sectors {
                if inside && !keep_inside {
                    continue;
                }
                let n = ((span / 0.6).ceil() as usize).max(2);
                for j in 1..n {
                    let t = start + span * j as f64 / n as f64;
                    let p = [v[0] + r * t.cos(), v[1] + r * t.sin()];
                    if scatterer.distance_to_boundary(p) > 0.3 * r {
                        points.push(p);
                    }
                }
            }
        }
    }
    let near_vertex = |p: Point| layers > 0 && poly.iter().any(|v| norm(sub(p, *v)) < 0.8 * h);
    let gap = 0.45 * h;
    let dy = h * 3f64.sqrt() / 2.0;
    let ny = (radius / dy).ceil() as i64 + 1;
    let nx = (radius / h).ceil() as i64 + 1;
    for j in -ny..=ny {
        let shift = if j.rem_euclid(2) == 1 { 0.5 * h } else { 0.0 };
        for i in -nx..=nx {
            let p = [i as f64 * h + shift, j as f64 * dy];
            if norm(p) > chord_depth - gap {
                continue;
            }
            if scatterer.distance_to_boundary(p) < gap {
                continue;
            }
            if !keep_inside && scatterer.contains(p) {
                continue;
            }
            if near_vertex(p) {
                continue;
            }
            points.push(p);
        }
    }

    // Long edges left where the lattice meets the boundary nodes are split
    // by inserting their midpoints and re-triangulating.
    let mut elements;
    let mut rounds = 0;
    loop {
        elements = triangulate(&points, &constraints, scatterer, keep_inside)?;
        let mut extra: Vec<Point> = Vec::new();
        let mut split = std::collections::HashSet::new();
        for el in &elements {
            for s in 0..3 {
                let (a, b) = (el.vertices[s], el.vertices[(s + 1) % 3]);
                let (pa, pb) = (points[a], points[b]);
                if norm(sub(pb, pa)) > 1.4 * h && split.insert(key(a, b)) {
                    extra.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                }
            }
        }
        if extra.is_empty() {
            break;
        }
        rounds += 1;
        if rounds > 8 {
            return Err(Error::Meshing("edge-length refinement did not terminate".into()));
        }
        points.extend(extra);
    }
    // Deterministic element order independent of the triangulation internals.
    elements.sort_by(|x, y| {
        let mut a = x.vertices;
        let mut b = y.vertices;
        a.sort_unstable();
        b.sort_unstable();
        a.cmp(&b)
    });

    let poly_sides: std::collections::HashSet<(usize, usize)> = (0..n_poly)
        .map(|i| key(i, (i + 1) % n_poly))
        .collect();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges = Vec::new();
    for el in &elements {
        for s in 0..3 {
            let (a, b) = (el.vertices[s], el.vertices[(s + 1) % 3]);
            let k = key(a, b);
            if seen.contains_key(&k) {
                continue;
            }
            seen.insert(k, edges.len());
            let on_circle = |v: usize| v >= circle_start && v < circle_start + n_circle;
            let edge = if poly_sides.contains(&k) {
                Edge {
                    vertices: [a, b],
                    tag: EdgeTag::Gamma,
                }
            } else if on_circle(a) && on_circle(b) {
                let (ia, ib) = (a - circle_start, b - circle_start);
                let ccw = if (ia + 1) % n_circle == ib { [a, b] } else { [b, a] };
                Edge {
                    vertices: ccw,
                    tag: EdgeTag::GammaR,
                }
            } else {
                Edge {
                    vertices: [a, b],
                    tag: EdgeTag::Inner,
                }
            };
            edges.push(edge);
        }
    }

    let mesh = Mesh {
        nodes: points,
        elements,
        edges,
        radius,
        h,
        polygon: poly.clone(),
    };
    let report = validate_mesh(&mesh);
    if !report.is_empty() {
        return Err(Error::Meshing(format!(
            "generated mesh is invalid: {}",
            report.summary()
        )));
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    BadIndex,
    Orientation,
    Conformity,
    ArcEndpoint,
    GammaOffPolygon,
    RegionMismatch,
    Coverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshViolation {
    pub kind: ViolationKind,
    /// Element or edge index the violation refers to, when there is one.
    pub index: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeshReport {
    pub violations: Vec<MeshViolation>,
}

impl MeshReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    pub fn summary(&self) -> String {
        let shown: Vec<String> = self
            .violations
            .iter()
            .take(5)
            .map(|v| format!("{:?}{}: {}", v.kind, v.index.map_or(String::new(), |i| format!(" #{i}")), v.detail))
            .collect();
        let more = self.violations.len().saturating_sub(5);
        if more > 0 {
            format!("{} (and {more} more)", shown.join("; "))
        } else {
            shown.join("; ")
        }
    }

    fn push(&mut self, kind: ViolationKind, index: Option<usize>, detail: String) {
        self.violations.push(MeshViolation {
            kind,
            index,
            detail,
        });
    }
}

/// Checks conformity, region consistency, boundary placement and coverage.
pub fn validate_mesh(mesh: &Mesh) -> MeshReport {
    let mut r = MeshReport::default();
    let nn = mesh.nodes.len();
    for (k, el) in mesh.elements.iter().enumerate() {
        if el.vertices.iter().any(|&v| v >= nn) {
            r.push(ViolationKind::BadIndex, Some(k), "element vertex out of range".into());
        }
    }
    for (e, ed) in mesh.edges.iter().enumerate() {
        if ed.vertices.iter().any(|&v| v >= nn) || ed.vertices[0] == ed.vertices[1] {
            r.push(ViolationKind::BadIndex, Some(e), "edge vertex out of range".into());
        }
    }
    if !r.is_empty() {
        return r;
    }
    let topo = mesh.topology();
    let penetrable = mesh.elements.iter().any(|e| e.region == Region::Interior);

    for k in 0..mesh.elements.len() {
        let p = mesh.element_points(k);
        if !(triangle_area(p[0], p[1], p[2]) > 0.0) {
            r.push(ViolationKind::Orientation, Some(k), "element is degenerate or clockwise".into());
        }
        for s in 0..3 {
            if topo.element_edges[k][s] == usize::MAX {
                r.push(ViolationKind::Conformity, Some(k), format!("side {s} missing from the edge list"));
            }
        }
    }
    let mut keys = std::collections::HashSet::new();
    for (e, ed) in mesh.edges.iter().enumerate() {
        if !keys.insert(key(ed.vertices[0], ed.vertices[1])) {
            r.push(ViolationKind::Conformity, Some(e), "duplicate edge".into());
        }
        let owners = &topo.edge_elements[e];
        let expected: &[usize] = match ed.tag {
            EdgeTag::Inner => &[2],
            EdgeTag::GammaR => &[1],
            EdgeTag::Gamma if penetrable => &[2],
            EdgeTag::Gamma => &[1],
        };
        if !expected.contains(&owners.len()) {
            r.push(
                ViolationKind::Conformity,
                Some(e),
                format!("{:?} edge shared by {} elements", ed.tag, owners.len()),
            );
            continue;
        }
        if ed.tag == EdgeTag::Inner {
            let (a, b) = (owners[0], owners[1]);
            if mesh.elements[a].region != mesh.elements[b].region {
                r.push(ViolationKind::RegionMismatch, Some(e), "inner edge separates regions".into());
            }
        }
        if ed.tag == EdgeTag::Gamma && owners.len() == 2 {
            let (a, b) = (owners[0], owners[1]);
            if mesh.elements[a].region == mesh.elements[b].region {
                r.push(ViolationKind::RegionMismatch, Some(e), "interface edge inside one region".into());
            }
        }
        match ed.tag {
            EdgeTag::GammaR => {
                for &v in &ed.vertices {
                    let d = (norm(mesh.nodes[v]) - mesh.radius).abs();
                    if d > GEOM_TOL * mesh.radius.max(1.0) {
                        r.push(
                            ViolationKind::ArcEndpoint,
                            Some(e),
                            format!("endpoint {v} is {d:e} off the circle"),
                        );
                    }
                }
                if let EdgeGeometry::Arc { span, .. } = mesh.edge_geometry(e) {
                    if !(span > 0.0 && span < PI) {
                        r.push(ViolationKind::ArcEndpoint, Some(e), format!("arc span {span} outside (0, pi)"));
                    }
                }
            }
            EdgeTag::Gamma => {
                let a = mesh.nodes[ed.vertices[0]];
                let b = mesh.nodes[ed.vertices[1]];
                let np = mesh.polygon.len();
                let on_side = (0..np).any(|i| {
                    let (s0, s1) = (mesh.polygon[i], mesh.polygon[(i + 1) % np]);
                    segment_distance(a, s0, s1) <= GEOM_TOL * mesh.radius.max(1.0)
                        && segment_distance(b, s0, s1) <= GEOM_TOL * mesh.radius.max(1.0)
                });
                if !on_side {
                    r.push(ViolationKind::GammaOffPolygon, Some(e), "gamma edge not on a polygon side".into());
                }
            }
            EdgeTag::Inner => {}
        }
    }
    // Boundary edges (one owner) must be tagged.
    for (e, owners) in topo.edge_elements.iter().enumerate() {
        if owners.len() == 1 && mesh.edges[e].tag == EdgeTag::Inner {
            r.push(ViolationKind::Conformity, Some(e), "boundary edge tagged inner".into());
        }
    }
    if mesh.polygon.len() >= 3 {
        for (k, el) in mesh.elements.iter().enumerate() {
            let c = mesh.element_center(k);
            let inside = point_in_polygon(c, &mesh.polygon);
            if inside != (el.region == Region::Interior) {
                r.push(ViolationKind::RegionMismatch, Some(k), format!("region tag {:?} disagrees with geometry", el.region));
            }
        }
    }
    let total: f64 = mesh.element_areas().iter().sum();
    let disk = PI * mesh.radius * mesh.radius;
    let hole = if penetrable || mesh.polygon.len() < 3 {
        0.0
    } else {
        signed_area(&mesh.polygon).abs()
    };
    let expect = disk - hole;
    if (total - expect).abs() > 1e-10 * disk {
        r.push(
            ViolationKind::Coverage,
            None,
            format!("element areas sum to {total}, expected {expect}"),
        );
    }
    r
}

const MESH_HEADER: &str = "helmscatter-mesh v1";

/// Text form: header, `PARAMS`, then `POLYGON`, `NODES`, `ELEMENTS`, `EDGES` sections.
pub fn export_mesh(mesh: &Mesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MESH_HEADER}");
    let _ = writeln!(s, "PARAMS radius {:?} h {:?}", mesh.radius, mesh.h);
    let _ = writeln!(s, "POLYGON");
    for (i, p) in mesh.polygon.iter().enumerate() {
        let _ = writeln!(s, "{i} {:?} {:?}", p[0], p[1]);
    }
    let _ = writeln!(s, "NODES");
    for (i, p) in mesh.nodes.iter().enumerate() {
        let _ = writeln!(s, "{i} {:?} {:?}", p[0], p[1]);
    }
    let _ = writeln!(s, "ELEMENTS");
    for (i, e) in mesh.elements.iter().enumerate() {
        let region = match e.region {
            Region::Interior => "interior",
            Region::Exterior => "exterior",
        };
        let [a, b, c] = e.vertices;
        let _ = writeln!(s, "{i} {a} {b} {c} {region}");
    }
    let _ = writeln!(s, "EDGES");
    for (i, e) in mesh.edges.iter().enumerate() {
        let [a, b] = e.vertices;
        match e.tag {
            EdgeTag::Inner => {
                let _ = writeln!(s, "{i} {a} {b} inner");
            }
            EdgeTag::Gamma => {
                let _ = writeln!(s, "{i} {a} {b} gamma");
            }
            EdgeTag::GammaR => {
                let _ = writeln!(s, "{i} {a} {b} gamma_r arc {:?}", mesh.radius);
            }
        }
    }
    s
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let t = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    t.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} '{t}'")))
}

pub fn import_mesh(text: &str) -> Result<Mesh> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Polygon,
        Nodes,
        Elements,
        Edges,
    }
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == MESH_HEADER => {}
        Some((n, l)) => return Err(parse_err(n, format!("expected header '{MESH_HEADER}', got '{l}'"))),
        None => return Err(parse_err(1, "empty mesh document")),
    }
    let mut radius = None;
    let mut h = None;
    let mut section = Section::None;
    let mut polygon = Vec::new();
    let mut nodes = Vec::new();
    let mut elements = Vec::new();
    let mut edges = Vec::new();
    for (n, l) in lines {
        let mut tok = l.split_whitespace();
        let head = tok.next().unwrap_or("");
        match head {
            "PARAMS" => {
                while let Some(name) = tok.next() {
                    match name {
                        "radius" => radius = Some(field::<f64>(tok.next(), n, "radius")?),
                        "h" => h = Some(field::<f64>(tok.next(), n, "h")?),
                        other => return Err(parse_err(n, format!("unknown parameter '{other}'"))),
                    }
                }
                continue;
            }
            "POLYGON" => {
                section = Section::Polygon;
                continue;
            }
            "NODES" => {
                section = Section::Nodes;
                continue;
            }
            "ELEMENTS" => {
                section = Section::Elements;
                continue;
            }
            "EDGES" => {
                section = Section::Edges;
                continue;
            }
            _ => {}
        }
        let idx: usize = field(Some(head), n, "index")?;
        let expected = match section {
            Section::Polygon => polygon.len(),
            Section::Nodes => nodes.len(),
            Section::Elements => elements.len(),
            Section::Edges => edges.len(),
            Section::None => return Err(parse_err(n, "data line outside of any section")),
        };
        if idx != expected {
            return Err(parse_err(n, format!("expected index {expected}, got {idx}")));
        }
        match section {
            Section::Polygon | Section::Nodes => {
                let p = [field(tok.next(), n, "x")?, field(tok.next(), n, "y")?];
                if section == Section::Polygon {
                    polygon.push(p);
                } else {
                    nodes.push(p);
                }
            }
            Section::Elements => {
                let v = [
                    field(tok.next(), n, "vertex")?,
                    field(tok.next(), n, "vertex")?,
                    field(tok.next(), n, "vertex")?,
                ];
                let region = match tok.next() {
                    Some("interior") => Region::Interior,
                    Some("exterior") => Region::Exterior,
                    Some(other) => return Err(parse_err(n, format!("unknown region '{other}'"))),
                    None => return Err(parse_err(n, "missing region")),
                };
                elements.push(Element { vertices: v, region });
            }
            Section::Edges => {
                let v = [field(tok.next(), n, "vertex")?, field(tok.next(), n, "vertex")?];
                let tag = match tok.next() {
                    Some("inner") => EdgeTag::Inner,
                    Some("gamma") => EdgeTag::Gamma,
                    Some("gamma_r") => {
                        if tok.next() != Some("arc") {
                            return Err(parse_err(n, "gamma_r edge needs 'arc <R>'"));
                        }
                        let r: f64 = field(tok.next(), n, "arc radius")?;
                        if Some(r) != radius {
                            return Err(parse_err(n, format!("arc radius {r} differs from PARAMS radius")));
                        }
                        EdgeTag::GammaR
                    }
                    Some(other) => return Err(parse_err(n, format!("unknown edge tag '{other}'"))),
                    None => return Err(parse_err(n, "missing edge tag")),
                };
                edges.push(Edge { vertices: v, tag });
            }
            Section::None => unreachable!(),
        }
        if let Some(extra) = tok.next() {
            return Err(parse_err(n, format!("unexpected token '{extra}'")));
        }
    }
    let last = text.lines().count().max(1);
    let radius = radius.ok_or_else(|| parse_err(last, "missing PARAMS radius"))?;
    let h = h.ok_or_else(|| parse_err(last, "missing PARAMS h"))?;
    if nodes.is_empty() || elements.is_empty() {
        return Err(parse_err(last, "mesh has no nodes or elements"));
    }
    Ok(Mesh {
        nodes,
        elements,
        edges,
        radius,
        h,
        polygon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(kind: ScattererKind) -> PolygonScatterer {
        // Clockwise on purpose.
        PolygonScatterer::new(
            "square",
            vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [1.0, -1.0]],
            kind,
        )
        .unwrap()
    }

    fn triangle() -> PolygonScatterer {
        PolygonScatterer::new(
            "tri",
            vec![[-1.0, -0.8], [1.2, -0.5], [0.1, 1.1]],
            ScattererKind::Penetrable {
                n_interior: c64::new(2.5, 0.0),
            },
        )
        .unwrap()
        .centered()
    }

    #[test]
    fn scatterer_normalization() {
        let s = square(ScattererKind::SoundSoft);
        assert!(s.area() > 0.0);
        assert!((s.area() - 4.0).abs() < 1e-15);
        assert_eq!(s.centroid(), [0.0, 0.0]);
        assert!(PolygonScatterer::new("x", vec![[0.0, 0.0], [1.0, 0.0]], ScattererKind::SoundSoft).is_err());
        let bow = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(PolygonScatterer::new("bow", bow, ScattererKind::SoundSoft).is_err());
        // Collinear but disjoint sides are fine; overlapping ones are not.
        let t = 1.0 / 3.0;
        let cross = vec![
            [t, t], [t, 1.0], [-t, 1.0], [-t, t], [-1.0, t], [-1.0, -t],
            [-t, -t], [-t, -1.0], [t, -1.0], [t, -t], [1.0, -t], [1.0, t],
        ];
        assert!(PolygonScatterer::new("cross", cross, ScattererKind::SoundSoft).is_ok());
        let folded = vec![[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.5, 0.0], [0.5, 2.0], [0.0, 2.0]];
        assert!(PolygonScatterer::new("folded", folded, ScattererKind::SoundSoft).is_err());
        let bad = ScattererKind::Penetrable {
            n_interior: c64::new(-1.0, 0.0),
        };
        assert!(PolygonScatterer::new("neg", vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], bad).is_err());
    }

    #[test]
    fn artificial_radius_examples() {
        let s = square(ScattererKind::SoundSoft);
        assert!((artificial_radius(&s, 0.5) - (2f64.sqrt() + 1.0)).abs() < 1e-12);
        let hex: Vec<Point> = (0..6)
            .map(|k| {
                let t = PI / 6.0 + k as f64 * PI / 3.0;
                [0.05 * t.cos(), 0.05 * t.sin()]
            })
            .collect();
        let hex = PolygonScatterer::new("hex", hex, ScattererKind::SoundSoft).unwrap();
        assert!((artificial_radius(&hex, 0.02) - 0.09).abs() < 1e-12);
        assert!(artificial_radius(&s, 0.1) < artificial_radius(&s, 0.2));
    }

    #[test]
    fn sound_soft_square_mesh() {
        let s = square(ScattererKind::SoundSoft);
        let r = artificial_radius(&s, 0.5);
        let m = build_mesh(&s, r, 0.5).unwrap();
        assert!(validate_mesh(&m).is_empty());
        assert_eq!(m.count_region(Region::Interior), 0);
        assert!(m.max_straight_edge() <= 1.5 * 0.5);
        for v in &s.vertices {
            assert!(m.nodes.iter().any(|n| n == v));
        }
        for e in m.edges.iter().filter(|e| e.tag == EdgeTag::Gamma) {
            for &v in &e.vertices {
                assert!(s.distance_to_boundary(m.nodes[v]) < 1e-12);
            }
        }
        let arcs: Vec<f64> = (0..m.edges.len())
            .filter(|&e| m.edges[e].tag == EdgeTag::GammaR)
            .map(|e| m.edge_geometry(e).length())
            .collect();
        assert!(arcs.iter().all(|&l| l <= 0.5 + 1e-12));
        assert!((arcs.iter().sum::<f64>() - 2.0 * PI * r).abs() < 1e-10);
    }

    #[test]
    fn penetrable_triangle_mesh() {
        let t = triangle();
        let m = build_mesh(&t, artificial_radius(&t, 0.3), 0.3).unwrap();
        assert!(validate_mesh(&m).is_empty());
        assert!(m.count_region(Region::Interior) > 0);
        let k = m.element_wavenumbers(2.0, Some(c64::new(2.5, 0.0)));
        for (e, el) in m.elements.iter().enumerate() {
            let inside = t.contains(m.element_center(e));
            assert_eq!(inside, el.region == Region::Interior);
            let expect = if inside { 2.0 * 2.5f64.sqrt() } else { 2.0 };
            assert!((k[e].re - expect).abs() < 1e-14 && k[e].im == 0.0);
        }
    }

    #[test]
    fn mesh_rejects_bad_inputs() {
        let s = square(ScattererKind::SoundSoft);
        assert!(matches!(build_mesh(&s, 1.2, 0.3), Err(Error::Geometry(_))));
        assert!(matches!(build_mesh(&s, 3.0, 2.0), Err(Error::Argument(_))));
    }

    #[test]
    fn validation_flags_constructed_failures() {
        let s = square(ScattererKind::SoundSoft);
        let m = build_mesh(&s, artificial_radius(&s, 0.5), 0.5).unwrap();
        let mut moved = m.clone();
        let e = moved.edges.iter().position(|e| e.tag == EdgeTag::GammaR).unwrap();
        let v = moved.edges[e].vertices[0];
        moved.nodes[v][0] *= 1.0 + 1e-3 / moved.radius;
        assert!(validate_mesh(&moved).has(ViolationKind::ArcEndpoint));

        let mut dangling = m.clone();
        dangling.edges.push(Edge {
            vertices: [0, m.nodes.len() - 1],
            tag: EdgeTag::Inner,
        });
        assert!(validate_mesh(&dangling).has(ViolationKind::Conformity));

        let mut hole = m.clone();
        hole.elements.pop();
        assert!(!validate_mesh(&hole).is_empty());
    }

    #[test]
    fn export_import_roundtrip() {
        let s = square(ScattererKind::SoundSoft);
        let m = build_mesh(&s, artificial_radius(&s, 0.5), 0.5).unwrap();
        let back = import_mesh(&export_mesh(&m)).unwrap();
        assert_eq!(back, m);
        let t = triangle();
        let m2 = build_mesh(&t, artificial_radius(&t, 0.4), 0.4).unwrap();
        assert_eq!(import_mesh(&export_mesh(&m2)).unwrap(), m2);
    }

    #[test]
    fn import_errors_carry_line_numbers() {
        assert!(matches!(import_mesh(""), Err(Error::Parse { line: 1, .. })));
        let doc = "helmscatter-mesh v1\nPARAMS radius 2.0 h 0.5\nNODES\n0 0.0 0.0\n1 1.0 0.0\n2 0.0 1.0\nELEMENTS\n0 0 1 2 exterior\nEDGES\n0 0 1 wiggly\n";
        match import_mesh(doc) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 10);
                assert!(message.contains("wiggly"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let doc = "helmscatter-mesh v1\n# comment\nNODES\n0 0.0 x\n";
        assert!(matches!(import_mesh(doc), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn rotation_is_exact_transform() {
        let s = square(ScattererKind::SoundSoft);
        let m = build_mesh(&s, artificial_radius(&s, 0.5), 0.5).unwrap();
        let r = m.rotated(0.3);
        assert!(validate_mesh(&r).is_empty());
        assert_eq!(r.elements, m.elements);
        for (a, b) in m.nodes.iter().zip(&r.nodes) {
            let back = rotate_point(*b, -0.3);
            assert!((back[0] - a[0]).abs() < 1e-14 && (back[1] - a[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn point_location() {
        let s = square(ScattererKind::SoundSoft);
        let m = build_mesh(&s, artificial_radius(&s, 0.5), 0.5).unwrap();
        let topo = m.topology();
        assert!(m.locate([0.0, 0.0], &topo).is_none());
        assert!(m.locate([5.0, 0.0], &topo).is_none());
        // Just inside the circle, between chord and arc somewhere.
        let r = m.radius * (1.0 - 1e-9);
        for i in 0..100 {
            let t = 2.0 * PI * (i as f64 + 0.37) / 100.0;
            assert!(m.locate([r * t.cos(), r * t.sin()], &topo).is_some());
        }
        assert!(m.locate([1.0, 0.0], &topo).is_some());
    }

    #[test]
    fn deterministic_build() {
        let s = square(ScattererKind::SoundSoft);
        let a = build_mesh(&s, 2.5, 0.4).unwrap();
        let b = build_mesh(&s, 2.5, 0.4).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_convex_polygons_mesh_cleanly(
            n in 3usize..9,
            radii in proptest::collection::vec(0.5f64..1.0, 9),
            jitter in proptest::collection::vec(0.0f64..0.6, 9),
            h in 0.15f64..0.5,
            penetrable in any::<bool>(),
        ) {
            let verts: Vec<Point> = (0..n)
                .map(|k| {
                    let t = 2.0 * PI * (k as f64 + jitter[k]) / n as f64;
                    [radii[k] * t.cos(), radii[k] * t.sin()]
                })
                .collect();
            let kind = if penetrable {
                ScattererKind::Penetrable { n_interior: c64::new(2.0, 0.5) }
            } else {
                ScattererKind::SoundSoft
            };
            let s = PolygonScatterer::new("p", verts, kind).unwrap().centered();
            let m = build_mesh(&s, artificial_radius(&s, h), h).unwrap();
            prop_assert!(validate_mesh(&m).is_empty());
            prop_assert!(m.max_straight_edge() <= 1.5 * h);
            prop_assert_eq!(import_mesh(&export_mesh(&m)).unwrap(), m);
        }
    }
}
