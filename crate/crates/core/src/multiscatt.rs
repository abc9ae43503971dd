//! Multiple scattering by ensembles of obstacles described through their
//! T-matrices: arrangement checks, the coupled system, total fields and
//! parameter sweeps.
//!
//! Obstacle `j` is shape `s_j` rotated by `alpha_j` about its centroid and
//! translated so the centroid sits at `c_j`. Its scattered field is
//! `sum_m b_{j,m} phi_m(x - c_j)`, and the coefficients solve
//! `b_j = T_j (a_j + sum_{i != j} S_ji b_i)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use faer::linalg::solvers::Solve;
use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomesh::{build_mesh_graded, rotate_point, PolygonScatterer, Region, ScattererKind, DEFAULT_CORNER_LAYERS};
use crate::oracle::{circle_interior_field, CircleScatterer};
use crate::tdg::{assemble_system, TdgParams, TdgSystem};
use crate::tmatrix::{compute_tmatrix, rotate_tmatrix, to_local, truncation_order, Shape, TMatrix, TmatConfig};
use crate::wavefield::{
    plane_wave_coeffs, point_source_coeffs, radiating_values, translation_matrix, Expansion, ExpansionKind, Field,
    PlaneWave, PointSource, TranslationKind,
};
use crate::{c64, Point};

/// Extra orders used when re-expanding the field around an obstacle for a
/// near-field solve.
pub const NEAR_FIELD_PADDING: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Index into [`Ensemble::shapes`].
    pub shape: usize,
    pub position: Point,
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub kappa: f64,
    pub shapes: Vec<Shape>,
    pub placements: Vec<Placement>,
    /// Mesh size and plane-wave count suggested by the file, if any.
    pub h: Option<f64>,
    pub p: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RefractiveIndex {
    Real(f64),
    Complex([f64; 2]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ShapeRecord {
    #[serde(default)]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vertices: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    circle_radius: Option<f64>,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_in: Option<RefractiveIndex>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrangementRecord {
    /// One-based shape indices.
    shape: Vec<usize>,
    pos: Vec<Point>,
    #[serde(default)]
    rot: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleFile {
    kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<usize>,
    shapes: Vec<ShapeRecord>,
    arrangement: ArrangementRecord,
}

fn shape_from_record(rec: &ShapeRecord, k: usize) -> Result<Shape> {
    let label = rec.label.clone().unwrap_or_else(|| format!("shape{}", k + 1));
    let kind = match rec.kind.as_str() {
        "dir" => ScattererKind::SoundSoft,
        "trans" => {
            let n = match rec.n_in {
                Some(RefractiveIndex::Real(x)) => c64::new(x, 0.0),
                Some(RefractiveIndex::Complex([re, im])) => c64::new(re, im),
                None => return Err(Error::Argument(format!("penetrable shape {label} needs n_in"))),
            };
            ScattererKind::Penetrable { n_interior: n }
        }
        other => {
            return Err(Error::Argument(format!(
                "shape {label}: unknown type {other:?} (expected \"dir\" or \"trans\")"
            )))
        }
    };
    match (&rec.vertices, rec.circle_radius) {
        (Some(v), None) => Ok(Shape::Polygon(PolygonScatterer::new(label, v.clone(), kind)?)),
        (None, Some(r)) => Ok(Shape::Circle(CircleScatterer::new(label, r, kind)?)),
        _ => Err(Error::Argument(format!(
            "shape {label} needs exactly one of \"vertices\" and \"circle_radius\""
        ))),
    }
}

fn shape_to_record(s: &Shape) -> ShapeRecord {
    let (kind, n_in) = match s.kind() {
        ScattererKind::SoundSoft => ("dir".to_string(), None),
        ScattererKind::Penetrable { n_interior } => {
            ("trans".to_string(), Some(RefractiveIndex::Complex([n_interior.re, n_interior.im])))
        }
    };
    match s {
        Shape::Polygon(p) => ShapeRecord {
            label: Some(p.label.clone()),
            vertices: Some(p.vertices.clone()),
            circle_radius: None,
            kind,
            n_in,
        },
        Shape::Circle(c) => ShapeRecord {
            label: Some(c.label.clone()),
            vertices: None,
            circle_radius: Some(c.radius),
            kind,
            n_in,
        },
    }
}

/// Parses a single shape in the ensemble-file shape syntax.
pub fn shape_from_json(text: &str) -> Result<Shape> {
    let rec: ShapeRecord = serde_json::from_str(text)?;
    shape_from_record(&rec, 0)
}

pub fn shape_to_json(s: &Shape) -> Result<String> {
    Ok(serde_json::to_string_pretty(&shape_to_record(s))?)
}

impl Ensemble {
    pub fn new(kappa: f64, shapes: Vec<Shape>, placements: Vec<Placement>) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Argument(format!("wavenumber must be positive, got {kappa}")));
        }
        if placements.is_empty() {
            return Err(Error::Argument("ensemble has no obstacles".into()));
        }
        for (j, p) in placements.iter().enumerate() {
            if p.shape >= shapes.len() {
                return Err(Error::Argument(format!(
                    "obstacle {} refers to shape {} but only {} shapes are defined",
                    j + 1,
                    p.shape + 1,
                    shapes.len()
                )));
            }
            if !(p.position[0].is_finite() && p.position[1].is_finite() && p.rotation.is_finite()) {
                return Err(Error::Argument(format!("obstacle {} has a non-finite placement", j + 1)));
            }
        }
        Ok(Self {
            kappa,
            shapes,
            placements,
            h: None,
            p: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EnsembleFile = serde_json::from_str(text)?;
        let shapes = file
            .shapes
            .iter()
            .enumerate()
            .map(|(k, rec)| shape_from_record(rec, k))
            .collect::<Result<Vec<_>>>()?;
        let arr = &file.arrangement;
        let n = arr.shape.len();
        if arr.pos.len() != n {
            return Err(Error::Argument(format!(
                "arrangement lists {n} shapes but {} positions",
                arr.pos.len()
            )));
        }
        let rot = arr.rot.clone().unwrap_or_else(|| vec![0.0; n]);
        if rot.len() != n {
            return Err(Error::Argument(format!("arrangement lists {n} shapes but {} rotations", rot.len())));
        }
        let mut placements = Vec::with_capacity(n);
        for j in 0..n {
            if arr.shape[j] == 0 {
                return Err(Error::Argument("shape indices are one-based".into()));
            }
            placements.push(Placement {
                shape: arr.shape[j] - 1,
                position: arr.pos[j],
                rotation: rot[j],
            });
        }
        let mut ens = Self::new(file.kappa, shapes, placements)?;
        ens.h = file.h;
        ens.p = file.p;
        Ok(ens)
    }

    pub fn to_json(&self) -> Result<String> {
        let shapes = self.shapes.iter().map(shape_to_record).collect();
        let file = EnsembleFile {
            kappa: self.kappa,
            h: self.h,
            p: self.p,
            shapes,
            arrangement: ArrangementRecord {
                shape: self.placements.iter().map(|p| p.shape + 1).collect(),
                pos: self.placements.iter().map(|p| p.position).collect(),
                rot: Some(self.placements.iter().map(|p| p.rotation).collect()),
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Radius `R_D` of each shape about its centroid.
    pub fn shape_radii(&self) -> Vec<f64> {
        self.shapes.iter().map(shape_radius).collect()
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }
}

fn shape_radius(s: &Shape) -> f64 {
    match s {
        Shape::Polygon(p) => p.centered().radius_about_origin(),
        Shape::Circle(c) => c.radius,
    }
}

/// `n` copies of `shape` with centroids on the circle of radius `rho`,
/// obstacle `j` at angle `2 pi j / n` and rotated by the same angle.
pub fn ring_ensemble(shape: Shape, kappa: f64, n: usize, rho: f64) -> Result<Ensemble> {
    let placements = (0..n)
        .map(|j| {
            let t = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            Placement {
                shape: 0,
                position: [rho * t.cos(), rho * t.sin()],
                rotation: t,
            }
        })
        .collect();
    Ensemble::new(kappa, vec![shape], placements)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationIssue {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    pub required: f64,
    /// Obstacle disks overlap: the T-matrix coupling is invalid.
    pub hard: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrangementReport {
    pub issues: Vec<SeparationIssue>,
}

impl ArrangementReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_hard(&self) -> bool {
        self.issues.iter().any(|x| x.hard)
    }

    pub fn has_soft(&self) -> bool {
        self.issues.iter().any(|x| !x.hard)
    }

    pub fn summary(&self) -> String {
        self.issues
            .iter()
            .map(|x| {
                format!(
                    "obstacles {} and {}: distance {:.6} <= {:.6} ({})",
                    x.i + 1,
                    x.j + 1,
                    x.distance,
                    x.required,
                    if x.hard {
                        "scatterer disks overlap"
                    } else {
                        "near-field disks overlap; obstacles too close for near-field evaluation"
                    }
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Pairwise separation checks. `gamma_radii` (per shape) enables the
/// near-field check on the artificial disks.
pub fn validate_arrangement(ens: &Ensemble, gamma_radii: Option<&[f64]>) -> ArrangementReport {
    let rd = ens.shape_radii();
    let mut issues = Vec::new();
    let n = ens.len();
    for i in 0..n {
        for j in i + 1..n {
            let (pi, pj) = (ens.placements[i], ens.placements[j]);
            let dist = (pi.position[0] - pj.position[0]).hypot(pi.position[1] - pj.position[1]);
            let hard = rd[pi.shape] + rd[pj.shape];
            if dist <= hard {
                issues.push(SeparationIssue {
                    i,
                    j,
                    distance: dist,
                    required: hard,
                    hard: true,
                });
                continue;
            }
            if let Some(g) = gamma_radii {
                let soft = g[pi.shape] + g[pj.shape];
                if dist <= soft {
                    issues.push(SeparationIssue {
                        i,
                        j,
                        distance: dist,
                        required: soft,
                        hard: false,
                    });
                }
            }
        }
    }
    ArrangementReport { issues }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Incident {
    PlaneWave { theta: f64, amplitude: c64 },
    /// `amplitude * H_0(kappa |x - source|)`.
    PointSource { source: Point, amplitude: c64 },
}

impl Incident {
    pub fn plane(theta: f64) -> Self {
        Incident::PlaneWave {
            theta,
            amplitude: c64::new(1.0, 0.0),
        }
    }

    pub fn point(source: Point) -> Self {
        Incident::PointSource {
            source,
            amplitude: c64::new(1.0, 0.0),
        }
    }

    /// Parses `plane:<theta>` or `point:<x>,<y>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("bad incident spec {spec:?}; expected plane:<theta> or point:<x>,<y>"));
        let (kind, rest) = spec.split_once(':').ok_or_else(bad)?;
        match kind.trim() {
            "plane" => Ok(Self::plane(parse_real(rest).ok_or_else(bad)?)),
            "point" => {
                let (x, y) = rest.split_once(',').ok_or_else(bad)?;
                Ok(Self::point([
                    parse_real(x).ok_or_else(bad)?,
                    parse_real(y).ok_or_else(bad)?,
                ]))
            }
            _ => Err(bad()),
        }
    }

    pub fn scaled(&self, s: c64) -> Self {
        match *self {
            Incident::PlaneWave { theta, amplitude } => Incident::PlaneWave {
                theta,
                amplitude: amplitude * s,
            },
            Incident::PointSource { source, amplitude } => Incident::PointSource {
                source,
                amplitude: amplitude * s,
            },
        }
    }

    pub fn field(&self, kappa: f64) -> Box<dyn Field> {
        match *self {
            Incident::PlaneWave { theta, amplitude } => Box::new(PlaneWave {
                theta,
                kappa,
                amplitude,
            }),
            Incident::PointSource { source, amplitude } => Box::new(PointSource {
                source,
                kappa,
                amplitude,
            }),
        }
    }
}

/// Reals with an optional `pi` factor: `1.5`, `-pi/3`, `3*pi/4`, `pi`.
pub fn parse_real(text: &str) -> Option<f64> {
    let t = text.trim().replace(' ', "");
    if let Ok(v) = t.parse::<f64>() {
        return Some(v);
    }
    let (num, den) = match t.split_once('/') {
        Some((a, b)) => (a.to_string(), b.parse::<f64>().ok()?),
        None => (t.clone(), 1.0),
    };
    let (sign, body) = match num.strip_prefix('-') {
        Some(b) => (-1.0, b.to_string()),
        None => (1.0, num.trim_start_matches('+').to_string()),
    };
    let factor = if body == "pi" {
        1.0
    } else if let Some(c) = body.strip_suffix("*pi") {
        c.parse::<f64>().ok()?
    } else if let Some(c) = body.strip_suffix("pi") {
        c.parse::<f64>().ok()?
    } else {
        return None;
    };
    Some(sign * factor * std::f64::consts::PI / den)
}

/// Regular expansion of the incident field about `center` (global frame).
pub fn incident_coeffs_at(inc: &Incident, kappa: f64, center: Point, order: usize) -> Result<Vec<c64>> {
    match *inc {
        Incident::PlaneWave { theta, amplitude } => {
            let phase = c64::from_polar(1.0, kappa * (theta.cos() * center[0] + theta.sin() * center[1]));
            Ok(plane_wave_coeffs(theta, kappa, order)
                .coeffs
                .into_iter()
                .map(|a| a * phase * amplitude)
                .collect())
        }
        Incident::PointSource { source, amplitude } => {
            let rel = [source[0] - center[0], source[1] - center[1]];
            Ok(point_source_coeffs(rel, kappa, order)?
                .coeffs
                .into_iter()
                .map(|a| a * amplitude)
                .collect())
        }
    }
}

/// Incident coefficients `a_j` about every obstacle centre at the given orders.
pub fn incident_local_coeffs(inc: &Incident, ens: &Ensemble, orders: &[usize]) -> Result<Vec<Vec<c64>>> {
    let rd = ens.shape_radii();
    ens.placements
        .iter()
        .zip(orders)
        .enumerate()
        .map(|(j, (p, &n))| {
            if let Incident::PointSource { source, .. } = inc {
                let d = (source[0] - p.position[0]).hypot(source[1] - p.position[1]);
                if d <= rd[p.shape] {
                    return Err(Error::Domain(format!(
                        "point source ({}, {}) lies inside the disk of obstacle {}",
                        source[0],
                        source[1],
                        j + 1
                    )));
                }
            }
            incident_coeffs_at(inc, ens.kappa, p.position, n)
        })
        .collect()
}

/// Result of a GMRES run.
#[derive(Debug, Clone)]
pub struct GmresOutcome {
    pub x: Vec<c64>,
    pub iterations: usize,
    /// Relative residual estimate after each iteration, starting with 1.
    pub history: Vec<f64>,
}

fn vnorm(v: &[c64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dot(a: &[c64], b: &[c64]) -> c64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Unrestarted GMRES with modified Gram–Schmidt, started from zero.
pub fn gmres(apply: &dyn Fn(&[c64]) -> Vec<c64>, rhs: &[c64], tol: f64, max_iter: usize) -> Result<GmresOutcome> {
    let n = rhs.len();
    let beta = vnorm(rhs);
    let mut history = vec![1.0];
    if beta == 0.0 {
        return Ok(GmresOutcome {
            x: vec![c64::new(0.0, 0.0); n],
            iterations: 0,
            history,
        });
    }
    let mut basis: Vec<Vec<c64>> = vec![rhs.iter().map(|z| z / beta).collect()];
    let mut hess: Vec<Vec<c64>> = Vec::new();
    let mut cs: Vec<c64> = Vec::new();
    let mut sn: Vec<c64> = Vec::new();
    let mut g = vec![c64::new(beta, 0.0)];
    let zero = c64::new(0.0, 0.0);
    for k in 0..max_iter.min(n.max(1)) {
        let mut w = apply(&basis[k]);
        let mut hcol = vec![zero; k + 2];
        for (i, v) in basis.iter().enumerate() {
            let hij = dot(v, &w);
            for (wi, vi) in w.iter_mut().zip(v) {
                *wi -= hij * vi;
            }
            hcol[i] = hij;
        }
        let hnext = vnorm(&w);
        hcol[k + 1] = c64::new(hnext, 0.0);
        for i in 0..k {
            let t = cs[i].conj() * hcol[i] + sn[i].conj() * hcol[i + 1];
            hcol[i + 1] = -sn[i] * hcol[i] + cs[i] * hcol[i + 1];
            hcol[i] = t;
        }
        let (a, b) = (hcol[k], hcol[k + 1]);
        let r = (a.norm_sqr() + b.norm_sqr()).sqrt();
        let (c, s) = if r == 0.0 {
            (c64::new(1.0, 0.0), zero)
        } else {
            (a / r, b / r)
        };
        hcol[k] = c64::new(r, 0.0);
        hcol[k + 1] = zero;
        cs.push(c);
        sn.push(s);
        let gk = g[k];
        g[k] = c.conj() * gk;
        g.push(-s * gk);
        hess.push(hcol);
        let rel = g[k + 1].norm() / beta;
        history.push(rel);
        let done = rel <= tol || hnext <= 1e-300;
        if !done {
            basis.push(w.iter().map(|z| z / hnext).collect());
        }
        if done || k + 1 == max_iter.min(n.max(1)) {
            let m = k + 1;
            let mut y = vec![zero; m];
            for i in (0..m).rev() {
                let mut s = g[i];
                for j in i + 1..m {
                    s -= hess[j][i] * y[j];
                }
                y[i] = s / hess[i][i];
            }
            let mut x = vec![zero; n];
            for (j, yj) in y.iter().enumerate() {
                for (xi, vi) in x.iter_mut().zip(&basis[j]) {
                    *xi += yj * vi;
                }
            }
            if rel <= tol {
                return Ok(GmresOutcome {
                    x,
                    iterations: m,
                    history,
                });
            }
            return Err(Error::Convergence {
                iterations: m,
                last: rel,
                history,
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Per-shape data: the T-matrix and, for polygons, the factorised TDG
/// system used for near-field evaluation.
#[derive(Debug)]
pub struct ShapeSolver {
    pub tmatrix: TMatrix,
    pub tdg: Option<TdgSystem>,
}

impl ShapeSolver {
    /// Computes the T-matrix of one shape (polygons through the TDG solver,
    /// circles analytically).
    pub fn compute(shape: &Shape, kappa: f64, cfg: &TmatConfig) -> Result<Self> {
        match shape {
            Shape::Polygon(p) => {
                let (t, sys) = compute_tmatrix(p, kappa, cfg)?;
                Ok(Self { tmatrix: t, tdg: Some(sys) })
            }
            Shape::Circle(c) => {
                let n = cfg.order.unwrap_or_else(|| truncation_order(kappa, c.radius));
                Ok(Self {
                    tmatrix: c.tmatrix(kappa, n)?,
                    tdg: None,
                })
            }
        }
    }

    /// Wraps a stored T-matrix. A rotated file is brought back to the
    /// reference orientation of its embedded shape. With `near_field`, the
    /// TDG system of a polygon is rebuilt from the recorded solver parameters.
    pub fn from_tmatrix(t: TMatrix, near_field: bool) -> Result<Self> {
        let mut t = if t.rotation != 0.0 {
            let mut u = rotate_tmatrix(&t, -t.rotation);
            u.rotation = 0.0;
            u
        } else {
            t
        };
        t.origin = [0.0, 0.0];
        let tdg = match (&t.shape, t.solver) {
            (Some(Shape::Polygon(poly)), Some(sp)) if near_field => {
                let mesh = build_mesh_graded(poly, sp.artificial_radius, sp.h, DEFAULT_CORNER_LAYERS)?;
                let n_interior = match poly.kind {
                    ScattererKind::SoundSoft => None,
                    ScattererKind::Penetrable { n_interior } => Some(n_interior),
                };
                let params = TdgParams {
                    p: sp.p,
                    flux: sp.flux,
                    dtn_order: Some(sp.dtn_order),
                    allow_large_p: true,
                    filter: crate::tdg::DEFAULT_FILTER,
                };
                Some(assemble_system(mesh, t.kappa, n_interior, &params)?)
            }
            (Some(Shape::Polygon(_)), None) if near_field => {
                return Err(Error::Format("file has no solver parameters; near field unavailable".into()))
            }
            _ => None,
        };
        Ok(Self { tmatrix: t, tdg })
    }

    /// Outer radius of the near-field region (artificial circle, or the
    /// disc itself for circles).
    pub fn near_radius(&self) -> f64 {
        match &self.tdg {
            Some(sys) => sys.space.mesh.radius,
            None => self.tmatrix.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    Gmres,
    Dense,
    /// Fixed-point (Neumann series) iteration; converges only for weak coupling.
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub method: SolveMethod,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: SolveMethod::Gmres,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSolution {
    /// Radiating coefficients per obstacle, in the global frame.
    pub b: Vec<Vec<c64>>,
    pub incident: Incident,
    pub iterations: usize,
    pub history: Vec<f64>,
}

/// Mask value attached to evaluated field points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointClass {
    /// Outside every scatterer disk: expansions are used.
    Exterior = 0,
    /// Inside an artificial disk, evaluated by a local TDG solve.
    NearField = 1,
    /// Inside an obstacle.
    InsideObstacle = 2,
    /// No representation available.
    Excluded = 3,
}

/// Ensemble with per-shape solvers and the rotated T-matrices of every obstacle.
#[derive(Debug)]
pub struct MultiProblem {
    pub ensemble: Ensemble,
    pub solvers: Vec<Arc<ShapeSolver>>,
    tmats: Vec<TMatrix>,
    orders: Vec<usize>,
    coupling: Vec<Vec<Option<Mat<c64>>>>,
    near_cache: Mutex<HashMap<usize, Vec<c64>>>,
}

impl MultiProblem {
    /// Refuses arrangements whose scatterer disks overlap.
    pub fn new(ensemble: Ensemble, solvers: Vec<Arc<ShapeSolver>>) -> Result<Self> {
        if solvers.len() != ensemble.shapes.len() {
            return Err(Error::Argument(format!(
                "{} shapes but {} T-matrices",
                ensemble.shapes.len(),
                solvers.len()
            )));
        }
        for (k, s) in solvers.iter().enumerate() {
            let t = &s.tmatrix;
            if (t.kappa - ensemble.kappa).abs() > 1e-12 * ensemble.kappa {
                return Err(Error::Argument(format!(
                    "T-matrix of shape {} was computed for kappa = {}, ensemble has {}",
                    k + 1,
                    t.kappa,
                    ensemble.kappa
                )));
            }
            let want = match &ensemble.shapes[k] {
                Shape::Polygon(p) => p.centered().descriptor_hash(),
                Shape::Circle(c) => c.descriptor_hash(),
            };
            if !t.scatterer_hash.is_empty() && t.scatterer_hash != want {
                return Err(Error::Argument(format!(
                    "T-matrix of shape {} does not describe that shape (hash mismatch)",
                    k + 1
                )));
            }
        }
        let report = validate_arrangement(&ensemble, None);
        if report.has_hard() {
            return Err(Error::Separation(report.summary()));
        }
        let tmats: Vec<TMatrix> = ensemble
            .placements
            .iter()
            .map(|p| {
                let t = rotate_tmatrix(&solvers[p.shape].tmatrix, p.rotation);
                crate::tmatrix::set_origin(&t, p.position)
            })
            .collect();
        let orders: Vec<usize> = tmats.iter().map(|t| t.order).collect();
        let n = tmats.len();
        let kappa = ensemble.kappa;
        let coupling = (0..n)
            .into_par_iter()
            .map(|j| {
                (0..n)
                    .map(|i| {
                        if i == j {
                            return Ok(None);
                        }
                        let (cj, ci) = (tmats[j].origin, tmats[i].origin);
                        let off = [cj[0] - ci[0], cj[1] - ci[1]];
                        translation_matrix(TranslationKind::RadiatingToRegular, off, kappa, orders[j], orders[i]).map(Some)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ensemble,
            solvers,
            tmats,
            orders,
            coupling,
            near_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Computes the T-matrices of all shapes (in parallel), then builds the problem.
    pub fn compute(ensemble: Ensemble, cfg: &TmatConfig) -> Result<Self> {
        let solvers = ensemble
            .shapes
            .par_iter()
            .map(|s| ShapeSolver::compute(s, ensemble.kappa, cfg).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ensemble, solvers)
    }

    /// Same shapes and solvers, different arrangement.
    pub fn rearranged(&self, placements: Vec<Placement>) -> Result<Self> {
        let ens = Ensemble::new(self.ensemble.kappa, self.ensemble.shapes.clone(), placements)?;
        Self::new(ens, self.solvers.clone())
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    /// Rotated T-matrix of obstacle `j`, with origin at its centre.
    pub fn obstacle_tmatrix(&self, j: usize) -> &TMatrix {
        &self.tmats[j]
    }

    /// Near-field disk radius per shape.
    pub fn near_radii(&self) -> Vec<f64> {
        self.solvers.iter().map(|s| s.near_radius()).collect()
    }

    pub fn validate(&self) -> ArrangementReport {
        validate_arrangement(&self.ensemble, Some(&self.near_radii()))
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.orders.len() + 1);
        let mut acc = 0;
        for n in &self.orders {
            off.push(acc);
            acc += 2 * n + 1;
        }
        off.push(acc);
        off
    }

    /// `x -> x - T S x` on the stacked coefficient vector.
    pub fn apply_operator(&self, x: &[c64]) -> Vec<c64> {
        let coupled = self.apply_coupling(x);
        x.iter().zip(&coupled).map(|(a, b)| a - b).collect()
    }

    /// `x -> T S x`.
    pub fn apply_coupling(&self, x: &[c64]) -> Vec<c64> {
        let off = self.offsets();
        let n = self.tmats.len();
        let parts: Vec<Vec<c64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut acc = vec![c64::new(0.0, 0.0); 2 * self.orders[j] + 1];
                for i in 0..n {
                    if let Some(s) = &self.coupling[j][i] {
                        let xi = &x[off[i]..off[i + 1]];
                        for (r, a) in acc.iter_mut().enumerate() {
                            *a += (0..xi.len()).map(|c| s[(r, c)] * xi[c]).sum::<c64>();
                        }
                    }
                }
                self.tmats[j].apply(&acc)
            })
            .collect();
        parts.concat()
    }

    /// Dense `I - T S`.
    pub fn dense_operator(&self) -> Mat<c64> {
        let off = self.offsets();
        let total = off[off.len() - 1];
        let mut m = Mat::<c64>::identity(total, total);
        let n = self.tmats.len();
        for j in 0..n {
            for i in 0..n {
                if let Some(s) = &self.coupling[j][i] {
                    let ts = &self.tmats[j].entries * s;
                    for r in 0..ts.nrows() {
                        for c in 0..ts.ncols() {
                            m[(off[j] + r, off[i] + c)] -= ts[(r, c)];
                        }
                    }
                }
            }
        }
        m
    }

    pub fn solve(&self, inc: &Incident, opts: &SolveOptions) -> Result<MultiSolution> {
        let a = incident_local_coeffs(inc, &self.ensemble, &self.orders)?;
        let rhs: Vec<c64> = self.tmats.iter().zip(&a).flat_map(|(t, aj)| t.apply(aj)).collect();
        let (x, iterations, history) = match opts.method {
            SolveMethod::Gmres => {
                let out = gmres(&|v| self.apply_operator(v), &rhs, opts.tol, opts.max_iter)?;
                (out.x, out.iterations, out.history)
            }
            SolveMethod::Dense => {
                let m = self.dense_operator();
                let b = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
                let x = m.partial_piv_lu().solve(&b);
                let x: Vec<c64> = (0..rhs.len()).map(|i| x[(i, 0)]).collect();
                let r = self.apply_operator(&x);
                let res = vnorm(&r.iter().zip(&rhs).map(|(a, b)| a - b).collect::<Vec<_>>()) / vnorm(&rhs).max(1e-300);
                (x, 1, vec![1.0, res])
            }
            SolveMethod::Neumann => {
                let mut x = rhs.clone();
                let scale = vnorm(&rhs).max(1e-300);
                let mut history = vec![1.0];
                let mut it = 0;
                loop {
                    let next: Vec<c64> = self.apply_coupling(&x).iter().zip(&rhs).map(|(c, r)| c + r).collect();
                    let change = vnorm(&next.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>()) / scale;
                    x = next;
                    it += 1;
                    history.push(change);
                    if change <= opts.tol {
                        break;
                    }
                    if it >= opts.max_iter || !change.is_finite() {
                        return Err(Error::Convergence {
                            iterations: it,
                            last: change,
                            history,
                        });
                    }
                }
                (x, it, history)
            }
        };
        let off = self.offsets();
        let b = (0..self.tmats.len()).map(|j| x[off[j]..off[j + 1]].to_vec()).collect();
        self.near_cache.lock().expect("cache lock").clear();
        Ok(MultiSolution {
            b,
            incident: *inc,
            iterations,
            history,
        })
    }

    /// Sum of all scattered fields at `x` (valid outside every scatterer disk).
    pub fn scattered_field(&self, sol: &MultiSolution, x: Point) -> Result<c64> {
        let mut u = c64::new(0.0, 0.0);
        for (j, t) in self.tmats.iter().enumerate() {
            let y = [x[0] - t.origin[0], x[1] - t.origin[1]];
            let phi = radiating_values(t.order, self.ensemble.kappa, y)?;
            u += phi.iter().zip(&sol.b[j]).map(|(p, b)| p * b).sum::<c64>();
        }
        Ok(u)
    }

    /// Where `x` lies, given whether near-field evaluation is requested.
    pub fn classify(&self, x: Point, near_field: bool) -> (PointClass, Option<usize>) {
        let near_ok = near_field && !self.validate().has_soft();
        for (j, p) in self.ensemble.placements.iter().enumerate() {
            let shape = &self.ensemble.shapes[p.shape];
            let t = &self.tmats[j];
            let d = (x[0] - t.origin[0]).hypot(x[1] - t.origin[1]);
            let local = to_local(x, t.origin, p.rotation);
            let inside = match shape {
                Shape::Polygon(poly) => poly.centered().contains(local),
                Shape::Circle(c) => d < c.radius,
            };
            if near_ok && d < self.solvers[p.shape].near_radius() {
                return (if inside { PointClass::InsideObstacle } else { PointClass::NearField }, Some(j));
            }
            if d < t.radius {
                return (if inside { PointClass::InsideObstacle } else { PointClass::Excluded }, Some(j));
            }
        }
        (PointClass::Exterior, None)
    }

    /// Regular coefficients, in the local frame of obstacle `j`, of
    /// everything incident on it (incident wave plus the other obstacles).
    fn local_incident(&self, sol: &MultiSolution, j: usize, order: usize) -> Result<Vec<c64>> {
        let c = self.tmats[j].origin;
        let mut a = incident_coeffs_at(&sol.incident, self.ensemble.kappa, c, order)?;
        for (i, t) in self.tmats.iter().enumerate() {
            if i == j {
                continue;
            }
            let off = [c[0] - t.origin[0], c[1] - t.origin[1]];
            let s = translation_matrix(TranslationKind::RadiatingToRegular, off, self.ensemble.kappa, order, t.order)?;
            for (r, ar) in a.iter_mut().enumerate() {
                *ar += (0..s.ncols()).map(|k| s[(r, k)] * sol.b[i][k]).sum::<c64>();
            }
        }
        let rot = crate::wavefield::rotation_diag(self.ensemble.placements[j].rotation, order);
        Ok(a.iter().zip(rot).map(|(x, d)| x * d).collect())
    }

    fn near_coeffs(&self, sol: &MultiSolution, j: usize) -> Result<Vec<c64>> {
        if let Some(c) = self.near_cache.lock().expect("cache lock").get(&j) {
            return Ok(c.clone());
        }
        let p = self.ensemble.placements[j];
        let sys = self.solvers[p.shape]
            .tdg
            .as_ref()
            .ok_or_else(|| Error::Domain("no near-field solver for this obstacle".into()))?;
        let order = self.orders[j] + NEAR_FIELD_PADDING;
        let a = self.local_incident(sol, j, order)?;
        let inc = Expansion::new(ExpansionKind::Regular, self.ensemble.kappa, [0.0, 0.0], a)?;
        let coeffs = sys.solve(&sys.rhs_for_incident(&inc))?.coeffs;
        self.near_cache.lock().expect("cache lock").insert(j, coeffs.clone());
        Ok(coeffs)
    }

    /// Total field at `x` from the local near-field solve of obstacle `j`.
    pub fn near_value(&self, sol: &MultiSolution, j: usize, x: Point) -> Result<c64> {
        let p = self.ensemble.placements[j];
        let solver = &self.solvers[p.shape];
        let local = to_local(x, self.tmats[j].origin, p.rotation);
        let order = self.orders[j] + NEAR_FIELD_PADDING;
        match (&self.ensemble.shapes[p.shape], &solver.tdg) {
            (Shape::Circle(c), _) => {
                let a = self.local_incident(sol, j, order)?;
                if local[0].hypot(local[1]) < c.radius {
                    return circle_interior_field(c, self.ensemble.kappa, &a, local);
                }
                let inc = Expansion::new(ExpansionKind::Regular, self.ensemble.kappa, [0.0, 0.0], a)?;
                Ok(inc.eval(local)? + self.scattered_field(sol, x)? - self.others_scattered(sol, j, x)?)
            }
            (Shape::Polygon(_), Some(sys)) => {
                let coeffs = self.near_coeffs(sol, j)?;
                let k = sys
                    .space
                    .locate(local)
                    .ok_or_else(|| Error::Domain(format!("point ({}, {}) not covered by the near-field mesh", x[0], x[1])))?;
                let v = sys.space.eval_in_element(&coeffs, k, local);
                if sys.space.mesh.elements[k].region == Region::Interior {
                    Ok(v)
                } else {
                    let a = self.local_incident(sol, j, order)?;
                    let inc = Expansion::new(ExpansionKind::Regular, self.ensemble.kappa, [0.0, 0.0], a)?;
                    Ok(v + inc.eval(local)?)
                }
            }
            (Shape::Polygon(_), None) => Err(Error::Domain("no near-field solver for this obstacle".into())),
        }
    }

    fn others_scattered(&self, sol: &MultiSolution, j: usize, x: Point) -> Result<c64> {
        let mut u = c64::new(0.0, 0.0);
        for (i, t) in self.tmats.iter().enumerate() {
            if i == j {
                continue;
            }
            let y = [x[0] - t.origin[0], x[1] - t.origin[1]];
            let phi = radiating_values(t.order, self.ensemble.kappa, y)?;
            u += phi.iter().zip(&sol.b[i]).map(|(p, b)| p * b).sum::<c64>();
        }
        Ok(u)
    }

    /// Total field and point class at each point. Points without a
    /// representation get `NaN` and [`PointClass::Excluded`].
    pub fn field_with_mask(&self, sol: &MultiSolution, points: &[Point], near_field: bool) -> Result<Vec<(c64, PointClass)>> {
        let inc = sol.incident.field(self.ensemble.kappa);
        let nan = c64::new(f64::NAN, f64::NAN);
        if near_field && !self.validate().has_soft() {
            // Solve the local problems up front, once each.
            let needed: Vec<usize> = (0..self.tmats.len())
                .filter(|&j| self.solvers[self.ensemble.placements[j].shape].tdg.is_some())
                .filter(|&j| points.iter().any(|x| self.classify(*x, true).1 == Some(j)))
                .collect();
            let solved: Vec<(usize, Vec<c64>)> = needed
                .par_iter()
                .map(|&j| self.near_coeffs(sol, j).map(|c| (j, c)))
                .collect::<Result<_>>()?;
            let mut cache = self.near_cache.lock().expect("cache lock");
            for (j, c) in solved {
                cache.insert(j, c);
            }
        }
        points
            .par_iter()
            .map(|&x| {
                let (class, j) = self.classify(x, near_field);
                Ok(match class {
                    PointClass::Exterior => (inc.value(x) + self.scattered_field(sol, x)?, class),
                    PointClass::NearField => (self.near_value(sol, j.expect("obstacle index"), x)?, class),
                    PointClass::InsideObstacle => {
                        let j = j.expect("obstacle index");
                        let kind = self.ensemble.shapes[self.ensemble.placements[j].shape].kind();
                        match kind {
                            ScattererKind::SoundSoft => (c64::new(0.0, 0.0), class),
                            ScattererKind::Penetrable { .. } if near_field && !self.validate().has_soft() => {
                                (self.near_value(sol, j, x)?, class)
                            }
                            ScattererKind::Penetrable { .. } => (nan, PointClass::Excluded),
                        }
                    }
                    PointClass::Excluded => (nan, class),
                })
            })
            .collect()
    }

    /// Total field at `points`; errors on points with no representation.
    pub fn total_field(&self, sol: &MultiSolution, points: &[Point], near_field: bool) -> Result<Vec<c64>> {
        if near_field {
            let report = self.validate();
            if report.has_soft() {
                return Err(Error::Separation(report.summary()));
            }
        }
        let vals = self.field_with_mask(sol, points, near_field)?;
        vals.into_iter()
            .zip(points)
            .map(|((v, class), x)| {
                if class == PointClass::Excluded {
                    let (_, j) = self.classify(*x, near_field);
                    Err(Error::Domain(format!(
                        "point ({}, {}) lies inside the disk of obstacle {}; no representation there",
                        x[0],
                        x[1],
                        j.map(|j| j + 1).unwrap_or(0)
                    )))
                } else {
                    Ok(v)
                }
            })
            .collect()
    }

    /// `(int_{|x - c| < r} |u|^2)^{1/2}` with `n_quad` radial Gauss points and
    /// `2 n_quad` angles.
    pub fn l2_norm_on_disk(&self, sol: &MultiSolution, center: Point, radius: f64, n_quad: usize) -> Result<f64> {
        let pts = disk_quadrature(center, radius, n_quad);
        let xs: Vec<Point> = pts.iter().map(|(x, _)| *x).collect();
        let u = self.total_field(sol, &xs, false)?;
        Ok(u.iter().zip(&pts).map(|(v, (_, w))| v.norm_sqr() * w).sum::<f64>().sqrt())
    }
}

/// Polar tensor quadrature on a disk: Gauss in `r` (with the `r dr` weight
/// folded in) times the trapezoid rule in angle.
pub fn disk_quadrature(center: Point, radius: f64, n_quad: usize) -> Vec<(Point, f64)> {
    let (x, w) = crate::tdg::gauss_legendre(n_quad);
    let na = 2 * n_quad;
    let mut out = Vec::with_capacity(n_quad * na);
    for (t, wt) in x.iter().zip(&w) {
        let r = 0.5 * radius * (t + 1.0);
        let wr = 0.5 * radius * wt * r * 2.0 * std::f64::consts::PI / na as f64;
        for k in 0..na {
            let th = 2.0 * std::f64::consts::PI * k as f64 / na as f64;
            out.push(([center[0] + r * th.cos(), center[1] + r * th.sin()], wr));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub parameter: f64,
    pub value: Option<f64>,
    /// Why the row has no value.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn argmax(&self) -> Option<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.value.map(|v| (r.parameter, v)))
            .fold(None, |best, (p, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((p, v)),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,value,flag\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:?},{},{}\n",
                r.parameter,
                r.value.map(|v| format!("{v:?}")).unwrap_or_default(),
                r.flag.clone().unwrap_or_default().replace([',', '\n'], ";")
            ));
        }
        s
    }
}

/// Norm of the total field on a disk, the observable of [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskObservable {
    pub center: Point,
    pub radius: f64,
    pub n_quad: usize,
}

/// Evaluates the observable for each parameter value, reusing the shape
/// solvers of `base`. Invalid arrangements are flagged and skipped.
pub fn sweep(
    base: &MultiProblem,
    placements: &(dyn Fn(f64) -> Vec<Placement> + Sync),
    values: &[f64],
    inc: &Incident,
    obs: &DiskObservable,
    opts: &SolveOptions,
) -> SweepTable {
    let rows = values
        .par_iter()
        .map(|&v| {
            let run = || -> Result<f64> {
                let prob = base.rearranged(placements(v))?;
                let sol = prob.solve(inc, opts)?;
                prob.l2_norm_on_disk(&sol, obs.center, obs.radius, obs.n_quad)
            };
            match run() {
                Ok(x) => SweepRow {
                    parameter: v,
                    value: Some(x),
                    flag: None,
                },
                Err(e) => SweepRow {
                    parameter: v,
                    value: None,
                    flag: Some(e.to_string()),
                },
            }
        })
        .collect();
    SweepTable { rows }
}

/// Placements of `n` copies of shape 0 on a circle of radius `rho`.
pub fn ring_placements(n: usize, rho: f64) -> Vec<Placement> {
    (0..n)
        .map(|j| {
            let t = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            Placement {
                shape: 0,
                position: rotate_point([rho, 0.0], t),
                rotation: t,
            }
        })
        .collect()
}
