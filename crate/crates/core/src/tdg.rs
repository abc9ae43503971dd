//! DtN Trefftz discontinuous Galerkin discretisation with plane-wave bases.
//!
//! Unknowns are `p` plane-wave amplitudes per element,
//! `phi_{K,j}(x) = exp(i kappa_K d_j . (x - x_K))` with `x_K` the element centre.
//! Test functions enter the sesquilinear form through their conjugate, which
//! is taken as `exp(-i kappa_K d_j . (x - x_K))` (wavenumber not conjugated)
//! so the method stays consistent when `kappa_K` is complex. The matrix is
//! stored as `A[test, trial]` and the system solved is `A eta = l`.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomesh::{EdgeGeometry, EdgeTag, Mesh, Region, Topology};
use crate::specfun::dtn_symbols;
use crate::wavefield::Field;
use crate::{c64, Point};

const I: c64 = c64 { re: 0.0, im: 1.0 };

/// Largest `p` accepted without an explicit override.
pub const MAX_DIRECTIONS: usize = 40;
/// Relative residual above which a solve is reported as ill-conditioned.
pub const RESIDUAL_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneWaveBasis {
    pub p: usize,
    pub directions: Vec<Point>,
}

impl PlaneWaveBasis {
    /// `d_j = (cos 2 pi j / p, sin 2 pi j / p)`, `j = 1..=p`.
    pub fn new(p: usize) -> Result<Self> {
        if p < 3 {
            return Err(Error::Config(format!("need at least 3 plane-wave directions, got {p}")));
        }
        let directions = (1..=p)
            .map(|j| {
                let t = 2.0 * std::f64::consts::PI * j as f64 / p as f64;
                [t.cos(), t.sin()]
            })
            .collect();
        Ok(Self { p, directions })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxParams {
    pub a: f64,
    pub b: f64,
    pub d: f64,
}

impl Default for FluxParams {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 0.5,
            d: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdgParams {
    pub p: usize,
    pub flux: FluxParams,
    /// DtN truncation; `None` selects `ceil(kappa R) + 10`.
    pub dtn_order: Option<usize>,
    pub allow_large_p: bool,
    /// Relative eigenvalue cutoff for the per-element basis filter; zero
    /// keeps the raw plane-wave basis.
    pub filter: f64,
}

/// Default relative cutoff of the local basis filter.
pub const DEFAULT_FILTER: f64 = 1e-13;

impl TdgParams {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            flux: FluxParams::default(),
            dtn_order: None,
            allow_large_p: false,
            filter: DEFAULT_FILTER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemKind {
    Dirichlet,
    Transmission,
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pi = std::f64::consts::PI;
    for i in 0..n.div_ceil(2) {
        let mut z = (pi * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            if n == 1 {
                dp = 1.0;
            }
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Quadrature on an edge: points, arc-length weights, and the polar angle
/// of each point (arcs only; zero on straight edges).
#[derive(Debug, Clone)]
pub struct EdgeQuadrature {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub angles: Vec<f64>,
}

/// Gauss–Legendre rule in the angle parameter of an arc edge.
pub fn arc_quadrature(edge: &EdgeGeometry, n_points: usize) -> Result<EdgeQuadrature> {
    if n_points < 1 {
        return Err(Error::Argument("quadrature needs at least one point".into()));
    }
    let (radius, theta0, span) = match *edge {
        EdgeGeometry::Arc {
            radius,
            theta0,
            span,
        } => (radius, theta0, span),
        EdgeGeometry::Straight { .. } => {
            return Err(Error::Argument("arc quadrature requested on a straight edge".into()))
        }
    };
    let (x, w) = gauss_legendre(n_points);
    let half = 0.5 * span;
    let angles: Vec<f64> = x.iter().map(|t| theta0 + half * (t + 1.0)).collect();
    Ok(EdgeQuadrature {
        points: angles.iter().map(|t| [radius * t.cos(), radius * t.sin()]).collect(),
        weights: w.iter().map(|w| w * half * radius).collect(),
        angles,
    })
}

/// Gauss–Legendre rule on a straight segment.
pub fn segment_quadrature(a: Point, b: Point, n_points: usize) -> EdgeQuadrature {
    let (x, w) = gauss_legendre(n_points);
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    EdgeQuadrature {
        points: x
            .iter()
            .map(|t| {
                let s = 0.5 * (t + 1.0);
                [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
            })
            .collect(),
        weights: w.iter().map(|w| 0.5 * w * len).collect(),
        angles: vec![0.0; n_points],
    }
}

/// `sinh(z)/z`, with a Taylor branch near zero.
fn sinhc(z: c64, small: bool) -> c64 {
    if small {
        let z2 = z * z;
        1.0 + z2 * (1.0 / 6.0 + z2 * (1.0 / 120.0 + z2 / 5040.0))
    } else {
        z.sinh() / z
    }
}

/// `int_e exp(i kappa_col d_col . (x - c_col) - i kappa_row d_row . (x - c_row)) ds`
/// over the segment `[e0, e1]`, in closed form.
#[allow(clippy::too_many_arguments)]
pub fn edge_integral(
    kappa_row: c64,
    kappa_col: c64,
    d_row: Point,
    d_col: Point,
    c_row: Point,
    c_col: Point,
    e0: Point,
    e1: Point,
) -> c64 {
    let len = (e1[0] - e0[0]).hypot(e1[1] - e0[1]);
    let t = [(e1[0] - e0[0]) / len, (e1[1] - e0[1]) / len];
    let m = [0.5 * (e0[0] + e1[0]), 0.5 * (e0[1] + e1[1])];
    let phase = I
        * (kappa_col * (d_col[0] * (m[0] - c_col[0]) + d_col[1] * (m[1] - c_col[1]))
            - kappa_row * (d_row[0] * (m[0] - c_row[0]) + d_row[1] * (m[1] - c_row[1])));
    let w = I * (kappa_col * (d_col[0] * t[0] + d_col[1] * t[1])
        - kappa_row * (d_row[0] * t[0] + d_row[1] * t[1]));
    let small = w.norm() * len < 1e-6;
    phase.exp() * len * sinhc(w * (0.5 * len), small)
}

/// `int_e exp(i (kappa_col d_col - kappa_row d_row) . x) ds` over `[e0, e1]`.
pub fn straight_edge_integral(
    kappa_row: c64,
    kappa_col: c64,
    d_row: Point,
    d_col: Point,
    e0: Point,
    e1: Point,
) -> c64 {
    edge_integral(kappa_row, kappa_col, d_row, d_col, [0.0; 2], [0.0; 2], e0, e1)
}

/// Gauss points used on an arc of length `len` and angular span `span`.
pub fn arc_order(kappa: f64, len: f64, span: f64, modes: usize) -> usize {
    (2.0 * kappa * len + modes as f64 * span).ceil() as usize + 12
}

/// Fourier coefficients `w_l = (1/2pi) int f(R, theta) e^{-i l theta} d theta`,
/// `l = -m..=m`, of a function given on a set of arcs of the circle `|x| = radius`.
pub fn circle_fourier_coeffs(
    f: &dyn Fn(Point) -> c64,
    arcs: &[EdgeGeometry],
    m: usize,
    n_points: usize,
) -> Result<Vec<c64>> {
    let mut out = vec![c64::new(0.0, 0.0); 2 * m + 1];
    for arc in arcs {
        let q = arc_quadrature(arc, n_points)?;
        let radius = match *arc {
            EdgeGeometry::Arc { radius, .. } => radius,
            EdgeGeometry::Straight { .. } => unreachable!(),
        };
        for ((x, w), th) in q.points.iter().zip(&q.weights).zip(&q.angles) {
            let v = f(*x) * (w / radius / (2.0 * std::f64::consts::PI));
            for (i, o) in out.iter_mut().enumerate() {
                let l = i as f64 - m as f64;
                *o += v * c64::from_polar(1.0, -l * th);
            }
        }
    }
    Ok(out)
}

/// Mesh, plane-wave basis and per-element wavenumbers: everything needed to
/// evaluate a discrete function.
#[derive(Debug, Clone)]
pub struct TdgSpace {
    pub mesh: Mesh,
    pub topo: Topology,
    pub basis: PlaneWaveBasis,
    pub kappa: f64,
    pub n_interior: Option<c64>,
    pub element_kappa: Vec<c64>,
    pub centers: Vec<Point>,
}

/// Sample of a discrete function and its outward normal derivative on the
/// artificial circle.
#[derive(Debug, Clone, Copy)]
pub struct TraceSample {
    pub x: Point,
    pub weight: f64,
    pub value: c64,
    pub normal_derivative: c64,
}

impl TdgSpace {
    pub fn new(mesh: Mesh, kappa: f64, n_interior: Option<c64>, p: usize) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::Argument(format!("wavenumber must be positive, got {kappa}")));
        }
        let basis = PlaneWaveBasis::new(p)?;
        let topo = mesh.topology();
        let element_kappa = mesh.element_wavenumbers(kappa, n_interior);
        let centers = (0..mesh.elements.len()).map(|k| mesh.element_center(k)).collect();
        Ok(Self {
            mesh,
            topo,
            basis,
            kappa,
            n_interior,
            element_kappa,
            centers,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.p * self.mesh.elements.len()
    }

    /// `phi_{k,j}(x)` (trial form).
    #[inline]
    pub fn basis_value(&self, k: usize, j: usize, x: Point) -> c64 {
        let d = self.basis.directions[j];
        let c = self.centers[k];
        (I * self.element_kappa[k] * (d[0] * (x[0] - c[0]) + d[1] * (x[1] - c[1]))).exp()
    }

    /// Conjugated test function `exp(-i kappa_k d_j . (x - x_k))`.
    #[inline]
    pub fn test_value(&self, k: usize, j: usize, x: Point) -> c64 {
        let d = self.basis.directions[j];
        let c = self.centers[k];
        (-I * self.element_kappa[k] * (d[0] * (x[0] - c[0]) + d[1] * (x[1] - c[1]))).exp()
    }

    pub fn eval_in_element(&self, coeffs: &[c64], k: usize, x: Point) -> c64 {
        let p = self.basis.p;
        (0..p).map(|j| coeffs[k * p + j] * self.basis_value(k, j, x)).sum()
    }

    pub fn gradient_in_element(&self, coeffs: &[c64], k: usize, x: Point) -> [c64; 2] {
        let p = self.basis.p;
        let mut g = [c64::new(0.0, 0.0); 2];
        for j in 0..p {
            let d = self.basis.directions[j];
            let v = coeffs[k * p + j] * self.basis_value(k, j, x) * I * self.element_kappa[k];
            g[0] += v * d[0];
            g[1] += v * d[1];
        }
        g
    }

    pub fn locate(&self, x: Point) -> Option<usize> {
        self.mesh.locate(x, &self.topo)
    }

    /// Values of a discrete function at points; edges go to the lowest element index.
    pub fn eval(&self, coeffs: &[c64], points: &[Point]) -> Result<Vec<c64>> {
        points
            .iter()
            .map(|&x| {
                let k = self.locate(x).ok_or_else(|| {
                    Error::Domain(format!("point ({}, {}) is outside the meshed domain", x[0], x[1]))
                })?;
                Ok(self.eval_in_element(coeffs, k, x))
            })
            .collect()
    }

    /// Indices of the arc edges of the artificial boundary.
    pub fn arc_edges(&self) -> Vec<usize> {
        (0..self.mesh.edges.len())
            .filter(|&e| self.mesh.edges[e].tag == EdgeTag::GammaR)
            .collect()
    }

    /// Quadrature samples of `u` and `du/dr` on the artificial circle.
    pub fn gamma_r_trace(&self, coeffs: &[c64], extra_modes: usize) -> Result<Vec<TraceSample>> {
        let mut out = Vec::new();
        for e in self.arc_edges() {
            let geom = self.mesh.edge_geometry(e);
            let k = self.topo.edge_elements[e][0];
            let n = match geom {
                EdgeGeometry::Arc { span, .. } => arc_order(self.kappa, geom.length(), span, extra_modes),
                EdgeGeometry::Straight { .. } => unreachable!(),
            };
            let q = arc_quadrature(&geom, n)?;
            for (x, w) in q.points.iter().zip(&q.weights) {
                let nr = [x[0] / self.mesh.radius, x[1] / self.mesh.radius];
                let g = self.gradient_in_element(coeffs, k, *x);
                out.push(TraceSample {
                    x: *x,
                    weight: *w,
                    value: self.eval_in_element(coeffs, k, *x),
                    normal_derivative: g[0] * nr[0] + g[1] * nr[1],
                });
            }
        }
        Ok(out)
    }

    /// Outward unit normal of element `k` on its side `s`.
    fn side_normal(&self, k: usize, s: usize) -> Point {
        let q = self.mesh.element_points(k);
        let (a, b) = (q[s], q[(s + 1) % 3]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        [(b[1] - a[1]) / len, -(b[0] - a[0]) / len]
    }

    fn normal_on_edge(&self, k: usize, e: usize) -> Point {
        let s = self.topo.element_edges[k]
            .iter()
            .position(|&x| x == e)
            .expect("edge belongs to element");
        self.side_normal(k, s)
    }

    /// Boundary elements and their arc edges.
    fn boundary_elements(&self) -> Vec<(usize, Vec<usize>)> {
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for e in self.arc_edges() {
            map.entry(self.topo.edge_elements[e][0]).or_default().push(e);
        }
        map.into_iter().collect()
    }
}

/// Fourier coefficients on the artificial circle of every basis function of
/// the boundary elements: `u_l` of the trace and `g_l` of `d/dr`, for
/// trial functions, and the same built from the conjugated test functions
/// (with `e^{+i l theta}`). Columns follow `elements`, `p` per element.
#[derive(Debug, Clone)]
pub struct GammaRTraces {
    pub elements: Vec<usize>,
    pub modes: usize,
    pub trial_value: Mat<c64>,
    pub trial_normal: Mat<c64>,
    pub test_value: Mat<c64>,
    pub test_normal: Mat<c64>,
}

pub fn gamma_r_fourier_traces(space: &TdgSpace, m: usize) -> Result<GammaRTraces> {
    let p = space.basis.p;
    let bnd = space.boundary_elements();
    let nb = bnd.len() * p;
    let nl = 2 * m + 1;
    let two_pi = 2.0 * std::f64::consts::PI;
    let radius = space.mesh.radius;
    let cols: Vec<Vec<[c64; 4]>> = bnd
        .par_iter()
        .map(|(k, arcs)| {
            let k = *k;
            let mut acc = vec![[c64::new(0.0, 0.0); 4]; p * nl];
            for &e in arcs {
                let geom = space.mesh.edge_geometry(e);
                let span = match geom {
                    EdgeGeometry::Arc { span, .. } => span,
                    EdgeGeometry::Straight { .. } => unreachable!(),
                };
                let q = arc_quadrature(&geom, arc_order(space.kappa, geom.length(), span, m))?;
                for ((x, w), th) in q.points.iter().zip(&q.weights).zip(&q.angles) {
                    let scale = w / radius / two_pi;
                    let nr = [x[0] / radius, x[1] / radius];
                    let phases: Vec<c64> = (0..nl)
                        .map(|i| c64::from_polar(1.0, -(i as f64 - m as f64) * th))
                        .collect();
                    for j in 0..p {
                        let d = space.basis.directions[j];
                        let dn = d[0] * nr[0] + d[1] * nr[1];
                        let kap = space.element_kappa[k];
                        let u = space.basis_value(k, j, *x) * scale;
                        let ur = u * I * kap * dn;
                        let v = space.test_value(k, j, *x) * scale;
                        let vr = -v * I * kap * dn;
                        for i in 0..nl {
                            let e_minus = phases[i];
                            let e_plus = e_minus.conj();
                            let slot = &mut acc[j * nl + i];
                            slot[0] += u * e_minus;
                            slot[1] += ur * e_minus;
                            slot[2] += v * e_plus;
                            slot[3] += vr * e_plus;
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut tv = Mat::zeros(nl, nb);
    let mut tn = Mat::zeros(nl, nb);
    let mut sv = Mat::zeros(nl, nb);
    let mut sn = Mat::zeros(nl, nb);
    for (b, acc) in cols.iter().enumerate() {
        for j in 0..p {
            for i in 0..nl {
                let s = acc[j * nl + i];
                tv[(i, b * p + j)] = s[0];
                tn[(i, b * p + j)] = s[1];
                sv[(i, b * p + j)] = s[2];
                sn[(i, b * p + j)] = s[3];
            }
        }
    }
    Ok(GammaRTraces {
        elements: bnd.into_iter().map(|(k, _)| k).collect(),
        modes: m,
        trial_value: tv,
        trial_normal: tn,
        test_value: sv,
        test_normal: sn,
    })
}

/// Which parts of the sesquilinear form to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Terms {
    Full,
    /// Only the `a`- and `b`-weighted jump penalties.
    PenaltyOnly,
}

struct Block {
    test: usize,
    trial: usize,
    values: Vec<c64>,
}

/// Interface-type face between test element `t` and trial element `a`
/// (interior faces and transmission faces on the scatterer boundary).
#[allow(clippy::too_many_arguments)]
fn interface_block(
    space: &TdgSpace,
    flux: &FluxParams,
    t: usize,
    a: usize,
    n_t: Point,
    n_a: Point,
    kappa_face: c64,
    e0: Point,
    e1: Point,
    terms: Terms,
) -> Block {
    let p = space.basis.p;
    let (kt, ka) = (space.element_kappa[t], space.element_kappa[a]);
    let nn = n_a[0] * n_t[0] + n_a[1] * n_t[1];
    let mut values = vec![c64::new(0.0, 0.0); p * p];
    for jt in 0..p {
        let d = space.basis.directions[jt];
        let dnt = d[0] * n_t[0] + d[1] * n_t[1];
        for ja in 0..p {
            let dp = space.basis.directions[ja];
            let dpna = dp[0] * n_a[0] + dp[1] * n_a[1];
            let dpnt = dp[0] * n_t[0] + dp[1] * n_t[1];
            // {u}[[grad w]] - {grad u}.[[w]] - i kF a [[u]].[[w]] - i b/kF [[grad u]][[grad w]]
            let penalty = -I * kappa_face * flux.a * nn - I * flux.b * ka * kt * dpna * dnt / kappa_face;
            let coeff = match terms {
                Terms::Full => -0.5 * I * kt * dnt - 0.5 * I * ka * dpnt + penalty,
                Terms::PenaltyOnly => penalty,
            };
            values[jt * p + ja] = coeff
                * edge_integral(kt, ka, d, dp, space.centers[t], space.centers[a], e0, e1);
        }
    }
    Block {
        test: t,
        trial: a,
        values,
    }
}

/// Sound-soft face: the only element is on the exterior side.
fn dirichlet_block(space: &TdgSpace, flux: &FluxParams, k: usize, n: Point, e0: Point, e1: Point, terms: Terms) -> Block {
    let p = space.basis.p;
    let kap = space.element_kappa[k];
    let mut values = vec![c64::new(0.0, 0.0); p * p];
    for jt in 0..p {
        let d = space.basis.directions[jt];
        for ja in 0..p {
            let dp = space.basis.directions[ja];
            let dpn = dp[0] * n[0] + dp[1] * n[1];
            let coeff = match terms {
                Terms::Full => -I * kap * dpn - I * kap * flux.a,
                Terms::PenaltyOnly => -I * kap * flux.a,
            };
            values[jt * p + ja] =
                coeff * edge_integral(kap, kap, d, dp, space.centers[k], space.centers[k], e0, e1);
        }
    }
    Block {
        test: k,
        trial: k,
        values,
    }
}

/// Local (same-element) part of the artificial-boundary terms on one arc.
fn arc_block(space: &TdgSpace, flux: &FluxParams, k: usize, e: usize, modes: usize) -> Result<Block> {
    let p = space.basis.p;
    let geom = space.mesh.edge_geometry(e);
    let span = match geom {
        EdgeGeometry::Arc { span, .. } => span,
        EdgeGeometry::Straight { .. } => unreachable!(),
    };
    let q = arc_quadrature(&geom, arc_order(space.kappa, geom.length(), span, modes))?;
    let kap = space.element_kappa[k];
    let radius = space.mesh.radius;
    let mut values = vec![c64::new(0.0, 0.0); p * p];
    for (x, w) in q.points.iter().zip(&q.weights) {
        let nr = [x[0] / radius, x[1] / radius];
        let tests: Vec<c64> = (0..p).map(|j| space.test_value(k, j, *x) * *w).collect();
        let trials: Vec<c64> = (0..p).map(|j| space.basis_value(k, j, *x)).collect();
        for jt in 0..p {
            let d = space.basis.directions[jt];
            let dn = d[0] * nr[0] + d[1] * nr[1];
            for ja in 0..p {
                let dp = space.basis.directions[ja];
                let dpn = dp[0] * nr[0] + dp[1] * nr[1];
                // u conj(dn v) - d i/k dn u conj(dn v)
                let coeff = -I * kap * dn - flux.d * I * kap * dpn * dn;
                values[jt * p + ja] += coeff * trials[ja] * tests[jt];
            }
        }
    }
    Ok(Block {
        test: k,
        trial: k,
        values,
    })
}

fn assemble(space: &TdgSpace, kind: ProblemKind, flux: &FluxParams, dtn_order: usize, terms: Terms) -> Result<Mat<c64>> {
    let mesh = &space.mesh;
    let xi = match space.n_interior {
        Some(n) => 0.5 * (space.kappa + (n.sqrt() * space.kappa).re),
        None => space.kappa,
    };
    let blocks: Vec<Vec<Block>> = (0..mesh.edges.len())
        .into_par_iter()
        .map(|e| -> Result<Vec<Block>> {
            let edge = mesh.edges[e];
            let owners = &space.topo.edge_elements[e];
            let (e0, e1) = (mesh.nodes[edge.vertices[0]], mesh.nodes[edge.vertices[1]]);
            let mut out = Vec::new();
            match (edge.tag, owners.len()) {
                (EdgeTag::Inner, 2) | (EdgeTag::Gamma, 2) => {
                    let kf = if edge.tag == EdgeTag::Gamma {
                        c64::new(xi, 0.0)
                    } else {
                        space.element_kappa[owners[0]]
                    };
                    let normals = [space.normal_on_edge(owners[0], e), space.normal_on_edge(owners[1], e)];
                    for (it, &t) in owners.iter().enumerate() {
                        for (ia, &a) in owners.iter().enumerate() {
                            out.push(interface_block(space, flux, t, a, normals[it], normals[ia], kf, e0, e1, terms));
                        }
                    }
                }
                (EdgeTag::Gamma, 1) => {
                    if kind != ProblemKind::Dirichlet {
                        return Err(Error::Geometry(format!("interface edge {e} has a single element")));
                    }
                    let k = owners[0];
                    out.push(dirichlet_block(space, flux, k, space.normal_on_edge(k, e), e0, e1, terms));
                }
                (EdgeTag::GammaR, 1) => {
                    if terms == Terms::Full {
                        out.push(arc_block(space, flux, owners[0], e, dtn_order)?);
                    }
                }
                (tag, n) => {
                    return Err(Error::Geometry(format!("edge {e} tagged {tag:?} has {n} elements")));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let p = space.basis.p;
    let n = space.dim();
    let mut a = Mat::<c64>::zeros(n, n);
    for b in blocks.iter().flatten() {
        for jt in 0..p {
            for ja in 0..p {
                a[(b.test * p + jt, b.trial * p + ja)] += b.values[jt * p + ja];
            }
        }
    }

    if terms == Terms::Full {
        let tr = gamma_r_fourier_traces(space, dtn_order)?;
        let kappa = space.kappa;
        let t = dtn_symbols(dtn_order, kappa, mesh.radius);
        let nl = 2 * dtn_order + 1;
        let scale = 2.0 * std::f64::consts::PI * mesh.radius;
        let di = I * flux.d / kappa;
        let nb = tr.elements.len() * p;
        // Rows of the test matrices scaled by the mode multipliers.
        let mut va = Mat::<c64>::zeros(nb, nl);
        let mut vb = Mat::<c64>::zeros(nb, nl);
        let mut wc = Mat::<c64>::zeros(nb, nl);
        for i in 0..nl {
            let tl = t[(i as i64 - dtn_order as i64).unsigned_abs() as usize];
            let alpha = -tl - di * tl.norm_sqr();
            let beta = di * tl.conj();
            let gamma = di * tl;
            for b in 0..nb {
                va[(b, i)] = tr.test_value[(i, b)] * alpha * scale;
                vb[(b, i)] = tr.test_value[(i, b)] * beta * scale;
                wc[(b, i)] = tr.test_normal[(i, b)] * gamma * scale;
            }
        }
        let dtn = &va * &tr.trial_value + &vb * &tr.trial_normal + &wc * &tr.trial_value;
        let global: Vec<usize> = tr
            .elements
            .iter()
            .flat_map(|&k| (0..p).map(move |j| k * p + j))
            .collect();
        for (bt, &gt) in global.iter().enumerate() {
            for (ba, &ga) in global.iter().enumerate() {
                a[(gt, ga)] += dtn[(bt, ba)];
            }
        }
    }
    Ok(a)
}

/// Full plane-wave system matrix `A[test, trial]`, without filtering or scaling.
pub fn system_matrix(space: &TdgSpace, kind: ProblemKind, flux: &FluxParams, dtn_order: usize) -> Result<Mat<c64>> {
    assemble(space, kind, flux, dtn_order, Terms::Full)
}

/// Matrix of the jump-penalty terms alone (sound-soft problems). For real
/// wavenumbers `i P` is Hermitian positive semidefinite.
pub fn penalty_matrix(space: &TdgSpace, flux: &FluxParams) -> Result<Mat<c64>> {
    assemble(space, ProblemKind::Dirichlet, flux, 1, Terms::PenaltyOnly)
}

/// `A_h^M(u, v)` for coefficient vectors `u`, `v`.
pub fn sesquilinear(matrix: &Mat<c64>, u: &[c64], v: &[c64]) -> c64 {
    let mut s = c64::new(0.0, 0.0);
    for t in 0..matrix.nrows() {
        let mut row = c64::new(0.0, 0.0);
        for a in 0..matrix.ncols() {
            row += matrix[(t, a)] * u[a];
        }
        s += v[t].conj() * row;
    }
    s
}

#[derive(Debug, Clone)]
pub struct TdgSolution {
    pub coeffs: Vec<c64>,
    /// `|A eta - l| / |l|` (zero for a zero load).
    pub residual: f64,
}

/// Assembled and factorised DtN-TDG system.
pub struct TdgSystem {
    pub space: TdgSpace,
    pub kind: ProblemKind,
    pub flux: FluxParams,
    pub dtn_order: usize,
    /// Local changes of basis when filtering is on.
    local: Option<LocalBases>,
    /// Column-scaled (reduced) matrix.
    scaled: Mat<c64>,
    col_scale: Vec<f64>,
    lu: PartialPivLu<c64>,
    pub pivot_ratio: f64,
}

impl std::fmt::Debug for TdgSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TdgSystem")
            .field("kind", &self.kind)
            .field("dim", &self.space.dim())
            .field("dtn_order", &self.dtn_order)
            .field("pivot_ratio", &self.pivot_ratio)
            .finish()
    }
}

pub fn default_dtn_order(kappa: f64, radius: f64) -> usize {
    (kappa * radius).ceil() as usize + 10
}

/// Element-wise bases `Q_K` (columns of `p x r_K`), orthonormal for the
/// `L^2` inner product on the element boundary, with near-dependent
/// directions of the plane-wave set removed.
#[derive(Debug, Clone)]
pub struct LocalBases {
    pub q: Vec<Mat<c64>>,
    pub offsets: Vec<usize>,
    pub dim: usize,
}

impl LocalBases {
    /// `Q^H A Q` for the block-diagonal `Q`.
    pub fn reduce(&self, a: &Mat<c64>, p: usize) -> Mat<c64> {
        let ne = self.q.len();
        let rows: Vec<Vec<(usize, Mat<c64>)>> = (0..ne)
            .into_par_iter()
            .map(|t| {
                let mut out = Vec::new();
                for k in 0..ne {
                    let blk = a.submatrix(t * p, k * p, p, p);
                    if (0..p).all(|j| (0..p).all(|i| blk[(i, j)] == c64::new(0.0, 0.0))) {
                        continue;
                    }
                    out.push((k, self.q[t].adjoint() * blk * &self.q[k]));
                }
                out
            })
            .collect();
        let mut r = Mat::zeros(self.dim, self.dim);
        for (t, row) in rows.iter().enumerate() {
            for (k, b) in row {
                for j in 0..b.ncols() {
                    for i in 0..b.nrows() {
                        r[(self.offsets[t] + i, self.offsets[*k] + j)] = b[(i, j)];
                    }
                }
            }
        }
        r
    }

    pub fn reduce_vec(&self, v: &[c64], p: usize) -> Vec<c64> {
        let mut out = vec![c64::new(0.0, 0.0); self.dim];
        for (k, q) in self.q.iter().enumerate() {
            for j in 0..q.ncols() {
                out[self.offsets[k] + j] = (0..p).map(|i| q[(i, j)].conj() * v[k * p + i]).sum();
            }
        }
        out
    }

    pub fn expand(&self, y: &[c64], p: usize) -> Vec<c64> {
        let mut out = vec![c64::new(0.0, 0.0); self.q.len() * p];
        for (k, q) in self.q.iter().enumerate() {
            for i in 0..p {
                out[k * p + i] = (0..q.ncols()).map(|j| q[(i, j)] * y[self.offsets[k] + j]).sum();
            }
        }
        out
    }
}

/// Gram matrix `G_ij = int_{dK} phi_j conj(phi_i) ds` over the straight sides of element `k`.
pub fn element_gram(space: &TdgSpace, k: usize) -> Mat<c64> {
    let p = space.basis.p;
    let kap = space.element_kappa[k];
    let c = space.centers[k];
    let pts = space.mesh.element_points(k);
    Mat::from_fn(p, p, |i, j| {
        (0..3)
            .map(|s| {
                edge_integral(
                    kap.conj(),
                    kap,
                    space.basis.directions[i],
                    space.basis.directions[j],
                    c,
                    c,
                    pts[s],
                    pts[(s + 1) % 3],
                )
            })
            .sum()
    })
}

pub fn local_bases(space: &TdgSpace, tol: f64) -> Result<LocalBases> {
    let ne = space.mesh.elements.len();
    let q: Vec<Mat<c64>> = (0..ne)
        .into_par_iter()
        .map(|k| {
            let g = element_gram(space, k);
            let evd = g.self_adjoint_eigen(faer::Side::Lower).map_err(|e| {
                Error::Config(format!("eigensolver failed on element {k}: {e:?}"))
            })?;
            let lam: Vec<f64> = (0..g.nrows()).map(|i| evd.S().column_vector()[i].re).collect();
            let top = lam.iter().cloned().fold(0.0, f64::max);
            let keep: Vec<usize> = (0..lam.len()).filter(|&i| lam[i] > tol * top).collect();
            let u = evd.U();
            Ok(Mat::from_fn(g.nrows(), keep.len(), |i, j| u[(i, keep[j])] / lam[keep[j]].sqrt()))
        })
        .collect::<Result<_>>()?;
    let mut offsets = Vec::with_capacity(ne);
    let mut dim = 0;
    for m in &q {
        offsets.push(dim);
        dim += m.ncols();
    }
    Ok(LocalBases { q, offsets, dim })
}

/// Assembles and factorises the system for `mesh` (scatterer centred at the
/// origin). The problem is a transmission problem iff `n_interior` is given.
pub fn assemble_system(mesh: Mesh, kappa: f64, n_interior: Option<c64>, params: &TdgParams) -> Result<TdgSystem> {
    let p = params.p;
    if p > MAX_DIRECTIONS && !params.allow_large_p {
        return Err(Error::Config(format!(
            "p = {p} exceeds {MAX_DIRECTIONS} directions; plane-wave bases this large are severely ill-conditioned"
        )));
    }
    let f = params.flux;
    if !(f.a > 0.0 && f.b > 0.0 && f.d > 0.0) {
        return Err(Error::Config("flux coefficients must be positive".into()));
    }
    let space = TdgSpace::new(mesh, kappa, n_interior, p)?;
    let radius = space.mesh.radius;
    let m = params.dtn_order.unwrap_or_else(|| default_dtn_order(kappa, radius));
    if (m as f64) <= kappa * radius {
        return Err(Error::Config(format!(
            "DtN truncation M = {m} must exceed kappa R = {}",
            kappa * radius
        )));
    }
    if space.arc_edges().is_empty() {
        return Err(Error::Geometry("mesh has no artificial-boundary edges".into()));
    }
    let has_interior = space.mesh.count_region(Region::Interior) > 0;
    let kind = if n_interior.is_some() {
        if !has_interior {
            return Err(Error::Geometry("transmission problem needs interior elements".into()));
        }
        ProblemKind::Transmission
    } else {
        if has_interior {
            return Err(Error::Geometry("sound-soft problem mesh must not contain interior elements".into()));
        }
        ProblemKind::Dirichlet
    };
    let full = assemble(&space, kind, &f, m, Terms::Full)?;
    let local = if params.filter > 0.0 {
        Some(local_bases(&space, params.filter)?)
    } else {
        None
    };
    let mut scaled = match &local {
        Some(lb) => lb.reduce(&full, p),
        None => full,
    };
    let n = scaled.nrows();
    let col_scale: Vec<f64> = (0..n)
        .map(|j| {
            let d = scaled[(j, j)].norm();
            if d > 0.0 && d.is_finite() {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();
    for j in 0..n {
        let s = col_scale[j];
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    let lu = scaled.partial_piv_lu();
    let u = lu.U();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let v = u[(i, i)].norm();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let pivot_ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    if !(pivot_ratio > 0.0) || !pivot_ratio.is_finite() {
        return Err(Error::Conditioning {
            pivot_ratio,
            residual: f64::NAN,
        });
    }
    Ok(TdgSystem {
        space,
        kind,
        flux: f,
        dtn_order: m,
        local,
        scaled,
        col_scale,
        lu,
        pivot_ratio,
    })
}

impl TdgSystem {
    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// Number of unknowns actually solved for (after filtering).
    pub fn reduced_dim(&self) -> usize {
        self.scaled.nrows()
    }

    pub fn local_bases(&self) -> Option<&LocalBases> {
        self.local.as_ref()
    }

    /// Unscaled matrix of the solved system (`Q^H A Q` when filtering).
    pub fn matrix(&self) -> Mat<c64> {
        let n = self.reduced_dim();
        Mat::from_fn(n, n, |i, j| self.scaled[(i, j)] / self.col_scale[j])
    }

    /// Load vector from boundary data on the scatterer boundary: `g_d`
    /// returns `(g_D, grad g_D)` and `g_n(x, n_gamma)` the Neumann datum.
    /// The boundary-value problem is `u = g_D` (sound-soft) or
    /// `u_i = u_o - g_D`, `d_n u_i = d_n u_o + g_N` (transmission).
    pub fn assemble_rhs(
        &self,
        g_d: &(dyn Fn(Point) -> (c64, [c64; 2]) + Sync),
        g_n: &(dyn Fn(Point, Point) -> c64 + Sync),
    ) -> Vec<c64> {
        let sp = &self.space;
        let mesh = &sp.mesh;
        let p = sp.basis.p;
        let a = self.flux.a;
        let b = self.flux.b;
        let xi = match sp.n_interior {
            Some(n) => 0.5 * (sp.kappa + (n.sqrt() * sp.kappa).re),
            None => sp.kappa,
        };
        let pieces: Vec<(usize, Vec<c64>)> = (0..mesh.edges.len())
            .into_par_iter()
            .filter(|&e| mesh.edges[e].tag == EdgeTag::Gamma)
            .flat_map_iter(|e| {
                let edge = mesh.edges[e];
                let owners = sp.topo.edge_elements[e].clone();
                let (e0, e1) = (mesh.nodes[edge.vertices[0]], mesh.nodes[edge.vertices[1]]);
                let len = (e1[0] - e0[0]).hypot(e1[1] - e0[1]);
                let kmax = owners.iter().map(|&k| sp.element_kappa[k].norm()).fold(0.0, f64::max);
                let q = segment_quadrature(e0, e1, (2.0 * kmax * len).ceil() as usize + 20);
                let mut out = Vec::new();
                match self.kind {
                    ProblemKind::Dirichlet => {
                        let k = owners[0];
                        let n = sp.normal_on_edge(k, e);
                        let kap = sp.element_kappa[k];
                        let mut l = vec![c64::new(0.0, 0.0); p];
                        for (x, w) in q.points.iter().zip(&q.weights) {
                            let g = g_d(*x).0 * *w;
                            for (j, lj) in l.iter_mut().enumerate() {
                                let d = sp.basis.directions[j];
                                let dn = d[0] * n[0] + d[1] * n[1];
                                *lj += g * sp.test_value(k, j, *x) * (I * kap * dn - I * kap * a);
                            }
                        }
                        out.push((k, l));
                    }
                    ProblemKind::Transmission => {
                        let inner = owners
                            .iter()
                            .copied()
                            .find(|&k| mesh.elements[k].region == Region::Interior)
                            .expect("interface edge has an interior element");
                        let n_gamma = sp.normal_on_edge(inner, e);
                        for &t in &owners {
                            let n_t = sp.normal_on_edge(t, e);
                            let s = n_t[0] * n_gamma[0] + n_t[1] * n_gamma[1];
                            let kt = sp.element_kappa[t];
                            let mut l = vec![c64::new(0.0, 0.0); p];
                            for (x, w) in q.points.iter().zip(&q.weights) {
                                // Jump data u_i - u_o and d_n u_i - d_n u_o.
                                let (gd, grad) = g_d(*x);
                                let jd = -gd;
                                let jn_grad = -(grad[0] * n_gamma[0] + grad[1] * n_gamma[1]);
                                let jn = g_n(*x, n_gamma);
                                for (j, lj) in l.iter_mut().enumerate() {
                                    let d = sp.basis.directions[j];
                                    let dn = d[0] * n_t[0] + d[1] * n_t[1];
                                    let f = (0.5 * s * jd + I * b * jn / xi) * (I * kt * dn)
                                        + 0.5 * jn_grad
                                        - I * xi * a * s * jd;
                                    *lj += f * sp.test_value(t, j, *x) * *w;
                                }
                            }
                            out.push((t, l));
                        }
                    }
                }
                out
            })
            .collect();
        let mut rhs = vec![c64::new(0.0, 0.0); self.dim()];
        for (k, l) in pieces {
            for (j, v) in l.into_iter().enumerate() {
                rhs[k * p + j] += v;
            }
        }
        rhs
    }

    /// Load for the scattering problem with incident field `inc`
    /// (`g_D = -u_inc`, `g_N = d_n u_inc`).
    pub fn rhs_for_incident(&self, inc: &dyn Field) -> Vec<c64> {
        let g_d = |x: Point| {
            let g = inc.gradient(x);
            (-inc.value(x), [-g[0], -g[1]])
        };
        let g_n = |x: Point, n: Point| {
            let g = inc.gradient(x);
            g[0] * n[0] + g[1] * n[1]
        };
        self.assemble_rhs(&g_d, &g_n)
    }

    /// Solves for several right-hand sides with the cached factorisation.
    pub fn solve_many(&self, rhs: &[Vec<c64>]) -> Result<Vec<TdgSolution>> {
        let n = self.dim();
        if rhs.iter().any(|r| r.len() != n) {
            return Err(Error::Argument(format!("right-hand side length must be {n}")));
        }
        if rhs.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.space.basis.p;
        let nr = self.reduced_dim();
        let reduced: Vec<Vec<c64>> = match &self.local {
            Some(lb) => rhs.iter().map(|r| lb.reduce_vec(r, p)).collect(),
            None => rhs.to_vec(),
        };
        let b = Mat::from_fn(nr, rhs.len(), |i, j| reduced[j][i]);
        let y = self.lu.solve(&b);
        let r = &self.scaled * &y - &b;
        (0..rhs.len())
            .map(|j| {
                let bn: f64 = (0..nr).map(|i| b[(i, j)].norm_sqr()).sum::<f64>().sqrt();
                let rn: f64 = (0..nr).map(|i| r[(i, j)].norm_sqr()).sum::<f64>().sqrt();
                let yj: Vec<c64> = (0..nr).map(|i| y[(i, j)] * self.col_scale[i]).collect();
                let coeffs = match &self.local {
                    Some(lb) => lb.expand(&yj, p),
                    None => yj,
                };
                let residual = if bn > 0.0 { rn / bn } else { rn };
                if !residual.is_finite() || coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) || residual > RESIDUAL_LIMIT {
                    return Err(Error::Conditioning {
                        pivot_ratio: self.pivot_ratio,
                        residual,
                    });
                }
                Ok(TdgSolution { coeffs, residual })
            })
            .collect()
    }

    pub fn solve(&self, rhs: &[c64]) -> Result<TdgSolution> {
        Ok(self.solve_many(&[rhs.to_vec()])?.remove(0))
    }

    pub fn eval_solution(&self, sol: &TdgSolution, points: &[Point]) -> Result<Vec<c64>> {
        self.space.eval(&sol.coeffs, points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomesh::{artificial_radius, build_mesh, PolygonScatterer, ScattererKind};
    use crate::specfun::bessel_j;
    use crate::wavefield::PlaneWave;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn square(kind: ScattererKind) -> PolygonScatterer {
        PolygonScatterer::new("sq", vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]], kind).unwrap()
    }

    fn small_system(kind: ScattererKind, kappa: f64, h: f64, p: usize) -> TdgSystem {
        let s = square(kind);
        let mesh = build_mesh(&s, artificial_radius(&s, h), h).unwrap();
        let n = match kind {
            ScattererKind::SoundSoft => None,
            ScattererKind::Penetrable { n_interior } => Some(n_interior),
        };
        assemble_system(mesh, kappa, n, &TdgParams::new(p)).unwrap()
    }

    fn gauss_oracle(f: impl Fn(Point) -> c64, a: Point, b: Point, n: usize) -> c64 {
        let q = segment_quadrature(a, b, n);
        q.points.iter().zip(&q.weights).map(|(x, w)| f(*x) * *w).sum()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [1usize, 2, 5, 16, 32, 64] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
            for deg in 0..(2 * n).min(40) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn edge_integral_degenerate_case_is_length() {
        let v = straight_edge_integral(c64::new(3.0, 0.0), c64::new(3.0, 0.0), [0.6, 0.8], [0.6, 0.8], [0.0, 0.0], [1.0, 2.0]);
        assert!((v - c64::new(5f64.sqrt(), 0.0)).norm() < 1e-14);
    }

    #[test]
    fn edge_integral_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kappas = [c64::new(5.0, 0.0), c64::new(5.0, 0.0) * c64::new(3.0, 1.0).sqrt()];
        for _ in 0..50 {
            let kr = kappas[rng.gen_range(0..2)];
            let kc = kappas[rng.gen_range(0..2)];
            let tr = rng.gen::<f64>() * 2.0 * PI;
            let tc = rng.gen::<f64>() * 2.0 * PI;
            let (dr, dc) = ([tr.cos(), tr.sin()], [tc.cos(), tc.sin()]);
            let e0 = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let e1 = [e0[0] + rng.gen::<f64>() * 0.5, e0[1] - rng.gen::<f64>() * 0.5];
            let cr = [0.1, 0.2];
            let cc = [-0.3, 0.05];
            let exact = edge_integral(kr, kc, dr, dc, cr, cc, e0, e1);
            let f = |x: Point| {
                (I * kc * (dc[0] * (x[0] - cc[0]) + dc[1] * (x[1] - cc[1]))
                    - I * kr * (dr[0] * (x[0] - cr[0]) + dr[1] * (x[1] - cr[1])))
                .exp()
            };
            let q = gauss_oracle(f, e0, e1, 32);
            assert!((exact - q).norm() < 1e-12 * q.norm().max(1.0), "{exact} vs {q}");
            // Swapping roles gives the conjugate when both wavenumbers are real.
            if kr.im == 0.0 && kc.im == 0.0 {
                let sw = edge_integral(kc, kr, dc, dr, cc, cr, e0, e1);
                assert!((sw - exact.conj()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn edge_integral_small_w_branch_is_continuous() {
        let k = c64::new(2.0, 0.0);
        let d = [1.0, 0.0];
        let eps: f64 = 1e-8;
        let d2 = [eps.cos(), eps.sin()];
        let a = straight_edge_integral(k, k, d, d2, [0.0, 0.0], [0.0, 1.0]);
        let f = |x: Point| (I * k * (d2[0] * x[0] + d2[1] * x[1]) - I * k * x[0]).exp();
        assert!((a - gauss_oracle(f, [0.0, 0.0], [0.0, 1.0], 8)).norm() < 1e-14);
    }

    #[test]
    fn arc_quadrature_basics() {
        let arc = EdgeGeometry::Arc { radius: 2.0, theta0: 0.3, span: 0.7 };
        let q = arc_quadrature(&arc, 7).unwrap();
        assert!((q.weights.iter().sum::<f64>() - 1.4).abs() < 1e-14);
        assert!(arc_quadrature(&arc, 0).is_err());
        let n = 13;
        let arcs: Vec<EdgeGeometry> = (0..n)
            .map(|i| EdgeGeometry::Arc { radius: 1.5, theta0: 2.0 * PI * i as f64 / n as f64, span: 2.0 * PI / n as f64 })
            .collect();
        for l in -5i32..=5 {
            let mut s = c64::new(0.0, 0.0);
            for a in &arcs {
                let q = arc_quadrature(a, 10).unwrap();
                for (t, w) in q.angles.iter().zip(&q.weights) {
                    s += c64::from_polar(1.0, l as f64 * t) * (w / 1.5);
                }
            }
            let expect = if l == 0 { 2.0 * PI } else { 0.0 };
            assert!((s - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn arc_quadrature_self_convergence() {
        let kappa = 5.0;
        let arc = EdgeGeometry::Arc { radius: 2.4, theta0: 1.0, span: 0.2 };
        let f = |x: Point| (I * kappa * (0.6 * x[0] - 0.8 * x[1])).exp();
        let n = arc_order(kappa, arc.length(), 0.2, 20);
        let integ = |n| {
            let q = arc_quadrature(&arc, n).unwrap();
            q.points.iter().zip(&q.weights).map(|(x, w)| f(*x) * *w).sum::<c64>()
        };
        let (a, b) = (integ(n), integ(2 * n));
        assert!((a - b).norm() / b.norm() < 1e-10);
    }

    #[test]
    fn fourier_traces_of_a_plane_wave() {
        let kappa = 3.0;
        let radius = 1.7;
        let theta_d = 0.4;
        let pw = PlaneWave::new(theta_d, kappa);
        let arcs: Vec<EdgeGeometry> = (0..4)
            .map(|i| EdgeGeometry::Arc { radius, theta0: i as f64 * PI / 2.0, span: PI / 2.0 })
            .collect();
        let m = 12;
        let c = circle_fourier_coeffs(&|x| pw.value(x), &arcs, m, 60).unwrap();
        for l in -(m as i64)..=(m as i64) {
            let expect = crate::wavefield::i_pow(l)
                * bessel_j(l as i32, kappa * radius).unwrap()
                * c64::from_polar(1.0, -(l as f64) * theta_d);
            assert!((c[(l + m as i64) as usize] - expect).norm() < 1e-10);
        }
        let one = circle_fourier_coeffs(&|_| c64::new(1.0, 0.0), &arcs, 2, 8).unwrap();
        assert!((one[2] - 1.0).norm() < 1e-14 && one[0].norm() < 1e-14);
    }

    #[test]
    fn mesh_traces_match_direct_quadrature() {
        let sys = small_system(ScattererKind::SoundSoft, 2.0, 0.5, 5);
        let tr = gamma_r_fourier_traces(&sys.space, 6).unwrap();
        let k = tr.elements[3];
        let arcs: Vec<EdgeGeometry> = sys
            .space
            .arc_edges()
            .into_iter()
            .filter(|&e| sys.space.topo.edge_elements[e][0] == k)
            .map(|e| sys.space.mesh.edge_geometry(e))
            .collect();
        let c = circle_fourier_coeffs(&|x| sys.space.basis_value(k, 2, x), &arcs, 6, 40).unwrap();
        for i in 0..13 {
            assert!((c[i] - tr.trial_value[(i, 3 * 5 + 2)]).norm() < 1e-12);
        }
    }

    #[test]
    fn configuration_errors() {
        let s = square(ScattererKind::SoundSoft);
        let h = 0.5;
        let mesh = build_mesh(&s, artificial_radius(&s, h), h).unwrap();
        let mut p = TdgParams::new(41);
        assert!(matches!(assemble_system(mesh.clone(), 5.0, None, &p), Err(Error::Config(_))));
        p.p = 5;
        p.dtn_order = Some(5);
        assert!(matches!(assemble_system(mesh.clone(), 5.0, None, &p), Err(Error::Config(_))));
        p.dtn_order = None;
        assert!(assemble_system(mesh.clone(), 5.0, Some(c64::new(2.0, 0.0)), &p).is_err());
    }

    #[test]
    fn system_dimension_and_zero_rhs() {
        let sys = small_system(ScattererKind::SoundSoft, 2.0, 0.5, 6);
        assert_eq!(sys.dim(), 6 * sys.space.mesh.elements.len());
        let zero = sys.assemble_rhs(&|_| (c64::new(0.0, 0.0), [c64::new(0.0, 0.0); 2]), &|_, _| c64::new(0.0, 0.0));
        assert!(zero.iter().all(|v| v.norm() == 0.0));
        let sol = sys.solve(&zero).unwrap();
        assert!(sol.coeffs.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn block_sparsity_follows_adjacency() {
        let sys = small_system(ScattererKind::SoundSoft, 2.0, 0.5, 4);
        let a = system_matrix(&sys.space, sys.kind, &sys.flux, sys.dtn_order).unwrap();
        let p = 4;
        let ne = sys.space.mesh.elements.len();
        let mut adjacent = vec![vec![false; ne]; ne];
        for owners in &sys.space.topo.edge_elements {
            for &x in owners {
                for &y in owners {
                    adjacent[x][y] = true;
                }
            }
        }
        let bnd: std::collections::HashSet<usize> = sys.space.boundary_elements().into_iter().map(|(k, _)| k).collect();
        for t in 0..ne {
            for s in 0..ne {
                let nz = (0..p).any(|i| (0..p).any(|j| a[(t * p + i, s * p + j)].norm() > 0.0));
                let allowed = adjacent[t][s] || (bnd.contains(&t) && bnd.contains(&s));
                if nz {
                    assert!(allowed, "unexpected block ({t}, {s})");
                }
            }
        }
    }

    #[test]
    fn rhs_is_linear_and_matches_oracle() {
        let sys = small_system(ScattererKind::Penetrable { n_interior: c64::new(3.0, 1.0) }, 2.0, 0.5, 5);
        let inc = PlaneWave::new(-PI / 3.0, 2.0);
        let l = sys.rhs_for_incident(&inc);
        let inc2 = PlaneWave { amplitude: c64::new(0.5, -2.0), ..inc };
        let l2 = sys.rhs_for_incident(&inc2);
        for (a, b) in l.iter().zip(&l2) {
            assert!((a * c64::new(0.5, -2.0) - b).norm() < 1e-12 * a.norm().max(1.0));
        }
        // Independent evaluation of the transmission load on one interface edge.
        let sp = &sys.space;
        let e = (0..sp.mesh.edges.len()).find(|&e| sp.mesh.edges[e].tag == EdgeTag::Gamma).unwrap();
        let owners = &sp.topo.edge_elements[e];
        let inner = *owners.iter().find(|&&k| sp.mesh.elements[k].region == Region::Interior).unwrap();
        let ng = sp.normal_on_edge(inner, e);
        let xi = 0.5 * (2.0 + (c64::new(3.0, 1.0).sqrt() * 2.0).re);
        let (e0, e1) = (sp.mesh.nodes[sp.mesh.edges[e].vertices[0]], sp.mesh.nodes[sp.mesh.edges[e].vertices[1]]);
        for &t in owners {
            // Only this edge contributes if the element has no other interface edge.
            let others = sp.topo.element_edges[t].iter().filter(|&&x| x != e && sp.mesh.edges[x].tag == EdgeTag::Gamma).count();
            if others > 0 {
                continue;
            }
            let nt = sp.normal_on_edge(t, e);
            let s = nt[0] * ng[0] + nt[1] * ng[1];
            for j in 0..5 {
                let f = |x: Point| {
                    let u = inc.value(x);
                    let g = inc.gradient(x);
                    let un = g[0] * ng[0] + g[1] * ng[1];
                    let w = sp.test_value(t, j, x);
                    let d = sp.basis.directions[j];
                    let dwn = -I * sp.element_kappa[t] * (d[0] * nt[0] + d[1] * nt[1]) * w;
                    -(0.5 * s * u + I * 0.5 * un / xi) * dwn + (0.5 * un - I * xi * 0.5 * s * u) * w
                };
                let oracle = gauss_oracle(f, e0, e1, 64);
                assert!((oracle - l[t * 5 + j]).norm() < 1e-10 * oracle.norm().max(1.0));
            }
        }
    }

    #[test]
    fn stacked_solves_equal_separate_solves() {
        let sys = small_system(ScattererKind::SoundSoft, 2.0, 0.5, 6);
        let a = sys.rhs_for_incident(&PlaneWave::new(0.2, 2.0));
        let b = sys.rhs_for_incident(&PlaneWave::new(1.9, 2.0));
        let both = sys.solve_many(&[a.clone(), b.clone()]).unwrap();
        let sa = sys.solve(&a).unwrap();
        let sb = sys.solve(&b).unwrap();
        for (x, y) in [(&both[0], &sa), (&both[1], &sb)] {
            let scale = y.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
            for (u, v) in x.coeffs.iter().zip(&y.coeffs) {
                assert!((u - v).norm() <= 1e-12 * scale);
            }
        }
        assert!(sa.residual < 1e-10, "residual {}", sa.residual);
    }

    #[test]
    fn eval_single_coefficient_is_a_plane_wave() {
        let sys = small_system(ScattererKind::SoundSoft, 2.0, 0.5, 4);
        let mut c = vec![c64::new(0.0, 0.0); sys.dim()];
        let x = [1.6, 0.2];
        let k = sys.space.locate(x).unwrap();
        c[k * 4 + 1] = c64::new(1.0, 0.0);
        let v = sys.space.eval(&c, &[x]).unwrap()[0];
        assert!((v - sys.space.basis_value(k, 1, x)).norm() < 1e-15);
        assert!(sys.space.eval(&c, &[[10.0, 0.0]]).is_err());
    }

    #[test]
    fn penalty_part_is_dissipative_hermitian() {
        let sys = small_system(ScattererKind::SoundSoft, 2.0, 0.5, 5);
        let pm = penalty_matrix(&sys.space, &sys.flux).unwrap();
        let n = pm.nrows();
        for i in 0..n {
            for j in 0..n {
                let x = pm[(i, j)] * I;
                let y = (pm[(j, i)] * I).conj();
                assert!((x - y).norm() < 1e-12 * (1.0 + x.norm()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v: Vec<c64> = (0..n).map(|_| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
            let q = sesquilinear(&pm, &v, &v) * I;
            assert!(q.re >= -1e-10 && q.im.abs() < 1e-9 * q.re.abs().max(1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn form_has_nonpositive_imaginary_part(seed in any::<u64>()) {
            thread_local! {
                static A: Mat<c64> = {
                    let sys = small_system(ScattererKind::SoundSoft, 2.0, 0.5, 5);
                    system_matrix(&sys.space, sys.kind, &sys.flux, sys.dtn_order).unwrap()
                };
            }
            A.with(|a| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v: Vec<c64> = (0..a.nrows()).map(|_| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
                let q = sesquilinear(a, &v, &v);
                let scale: f64 = v.iter().map(|x| x.norm_sqr()).sum();
                assert!(q.im <= 1e-10 * scale, "Im A(v,v) = {}", q.im);
            });
        }
    }
}
