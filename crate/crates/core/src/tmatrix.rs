//! T-matrices: far fields of TDG solutions, column-by-column construction,
//! the unitarity diagnostic, rotation and file persistence.

use std::path::Path;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomesh::{artificial_radius, build_mesh_graded, rotate_point, PolygonScatterer, ScattererKind};
use crate::oracle::CircleScatterer;
use crate::tdg::{assemble_system, FluxParams, TdgParams, TdgSpace, TdgSystem, TraceSample};
use crate::wavefield::{i_pow, rotation_diag, Expansion, ExpansionKind};
use crate::{c64, Point};

pub const FILE_FORMAT: &str = "helmscatter-tmatrix";
pub const FILE_VERSION: u32 = 1;

/// `ceil(kappa R + 4 (kappa R)^{1/3} + 5)`.
pub fn truncation_order(kappa: f64, radius: f64) -> usize {
    let x = kappa * radius;
    (x + 4.0 * x.cbrt() + 5.0).ceil() as usize
}

/// Shape embedded in a T-matrix, in the scatterer's own frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Polygon(PolygonScatterer),
    Circle(CircleScatterer),
}

impl Shape {
    pub fn label(&self) -> &str {
        match self {
            Shape::Polygon(p) => &p.label,
            Shape::Circle(c) => &c.label,
        }
    }

    pub fn kind(&self) -> ScattererKind {
        match self {
            Shape::Polygon(p) => p.kind,
            Shape::Circle(c) => c.kind,
        }
    }

    pub fn descriptor_hash(&self) -> String {
        match self {
            Shape::Polygon(p) => p.descriptor_hash(),
            Shape::Circle(c) => c.descriptor_hash(),
        }
    }

    /// Radius of the smallest origin-centred disc containing the shape.
    pub fn radius(&self) -> f64 {
        match self {
            Shape::Polygon(p) => p.radius_about_origin(),
            Shape::Circle(c) => c.radius,
        }
    }

    /// Point-in-obstacle test in the shape frame.
    pub fn contains(&self, x: Point) -> bool {
        match self {
            Shape::Polygon(p) => p.contains(x),
            Shape::Circle(c) => x[0].hypot(x[1]) < c.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub h: f64,
    pub p: usize,
    pub dtn_order: usize,
    pub artificial_radius: f64,
    pub flux: FluxParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TMatrix {
    /// Rows `m`, columns `l`, both `-N..=N` at index `+N`.
    pub entries: Mat<c64>,
    pub kappa: f64,
    pub order: usize,
    pub origin: Point,
    /// Cumulative rotation applied since construction.
    pub rotation: f64,
    /// Radius `R_D` of the scatterer about the expansion centre.
    pub radius: f64,
    pub scatterer_hash: String,
    pub solver: Option<SolverParams>,
    pub symmetry_residual: f64,
    pub shape: Option<Shape>,
}

impl TMatrix {
    pub fn from_entries(entries: Mat<c64>, kappa: f64, radius: f64) -> Self {
        assert_eq!(entries.nrows(), entries.ncols());
        assert_eq!(entries.nrows() % 2, 1);
        let order = entries.nrows() / 2;
        let res = matrix_symmetry_residual(&entries);
        Self {
            entries,
            kappa,
            order,
            origin: [0.0, 0.0],
            rotation: 0.0,
            radius,
            scatterer_hash: String::new(),
            solver: None,
            symmetry_residual: res,
            shape: None,
        }
    }

    pub fn size(&self) -> usize {
        2 * self.order + 1
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.norm_l2()
    }

    pub fn apply(&self, a: &[c64]) -> Vec<c64> {
        let n = self.size();
        (0..n).map(|m| (0..n).map(|l| self.entries[(m, l)] * a[l]).sum()).collect()
    }

    pub fn entry(&self, m: i64, l: i64) -> c64 {
        let n = self.order as i64;
        self.entries[((m + n) as usize, (l + n) as usize)]
    }

    /// Whether the embedded shape still matches the recorded hash.
    pub fn hash_matches(&self) -> bool {
        match &self.shape {
            Some(s) => s.descriptor_hash() == self.scatterer_hash,
            None => true,
        }
    }
}

/// `|| T + T^* + 2 T T^* ||_F`, which vanishes for a lossless scatterer.
pub fn matrix_symmetry_residual(t: &Mat<c64>) -> f64 {
    let th = t.adjoint().to_owned();
    let r = t + &th + faer::Scale(c64::new(2.0, 0.0)) * (t * &th);
    r.norm_l2()
}

pub fn symmetry_residual(t: &TMatrix) -> f64 {
    matrix_symmetry_residual(&t.entries)
}

/// `T'_ml = e^{-i m alpha} T_ml e^{i l alpha}`: T-matrix of the obstacle rotated by `alpha`.
pub fn rotate_tmatrix(t: &TMatrix, alpha: f64) -> TMatrix {
    let n = t.order;
    let d = rotation_diag(alpha, n);
    let entries = Mat::from_fn(t.size(), t.size(), |m, l| d[m].conj() * t.entries[(m, l)] * d[l]);
    TMatrix {
        symmetry_residual: matrix_symmetry_residual(&entries),
        entries,
        rotation: t.rotation + alpha,
        ..t.clone()
    }
}

pub fn set_origin(t: &TMatrix, origin: Point) -> TMatrix {
    TMatrix { origin, ..t.clone() }
}

/// Far-field pattern from samples of `u` and `du/dn` on a closed curve
/// enclosing the scatterer.
pub fn far_field_from_trace(samples: &[TraceSample], kappa: f64, angles: &[f64]) -> Result<Vec<c64>> {
    if angles.is_empty() {
        return Err(Error::Argument("far field needs at least one angle".into()));
    }
    let pre = c64::from_polar(1.0, std::f64::consts::FRAC_PI_4) / (8.0 * std::f64::consts::PI * kappa).sqrt();
    Ok(angles
        .iter()
        .map(|th| {
            let d = [th.cos(), th.sin()];
            let mut s = c64::new(0.0, 0.0);
            for q in samples {
                let r = q.x[0].hypot(q.x[1]);
                let n = [q.x[0] / r, q.x[1] / r];
                let e = c64::from_polar(1.0, -kappa * (d[0] * q.x[0] + d[1] * q.x[1]));
                let de = e * c64::new(0.0, -kappa * (d[0] * n[0] + d[1] * n[1]));
                s += (q.value * de - q.normal_derivative * e) * q.weight;
            }
            pre * s
        })
        .collect())
}

/// Far field of a TDG solution, integrated over the artificial circle.
pub fn far_field(space: &TdgSpace, coeffs: &[c64], angles: &[f64]) -> Result<Vec<c64>> {
    let trace = space.gamma_r_trace(coeffs, 0)?;
    far_field_from_trace(&trace, space.kappa, angles)
}

/// Number of equispaced far-field angles used per column.
pub fn far_field_points(order: usize) -> usize {
    4 * order + 16
}

/// Column of `T` from samples of the far field on `4N + 16` equispaced angles:
/// `T_ml = (1/4) sqrt(kappa/pi) (1 + i) i^m int phi_l^inf e^{-i m theta} dtheta`.
pub fn column_from_far_field(far: &[c64], kappa: f64, order: usize) -> Vec<c64> {
    let k = far.len();
    let pre = 0.25 * (kappa / std::f64::consts::PI).sqrt() * c64::new(1.0, 1.0) * (2.0 * std::f64::consts::PI / k as f64);
    (-(order as i64)..=order as i64)
        .map(|m| {
            let s: c64 = far
                .iter()
                .enumerate()
                .map(|(j, f)| f * c64::from_polar(1.0, -(m as f64) * 2.0 * std::f64::consts::PI * j as f64 / k as f64))
                .sum();
            pre * i_pow(m) * s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmatConfig {
    pub h: f64,
    pub p: usize,
    pub flux: FluxParams,
    pub dtn_order: Option<usize>,
    /// Artificial radius; defaults to `R_D + 2h`.
    pub radius: Option<f64>,
    pub order: Option<usize>,
    pub allow_large_p: bool,
    pub filter: f64,
    pub corner_layers: usize,
}

impl TmatConfig {
    pub fn new(h: f64, p: usize) -> Self {
        Self {
            h,
            p,
            flux: FluxParams::default(),
            dtn_order: None,
            radius: None,
            order: None,
            allow_large_p: false,
            filter: crate::tdg::DEFAULT_FILTER,
            corner_layers: crate::geomesh::DEFAULT_CORNER_LAYERS,
        }
    }
}

/// T-matrix of a polygon plus the factorised TDG system used to build it
/// (kept for near-field evaluation). The shape is moved so its area
/// centroid is at the origin; the returned origin is the original centroid.
pub fn compute_tmatrix(scatterer: &PolygonScatterer, kappa: f64, cfg: &TmatConfig) -> Result<(TMatrix, TdgSystem)> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Argument(format!("wavenumber must be positive, got {kappa}")));
    }
    let centered = scatterer.centered();
    let r_d = centered.radius_about_origin();
    let n = cfg.order.unwrap_or_else(|| truncation_order(kappa, r_d));
    let radius = cfg.radius.unwrap_or_else(|| artificial_radius(&centered, cfg.h));
    let mesh = build_mesh_graded(&centered, radius, cfg.h, cfg.corner_layers)?;
    let dtn = cfg
        .dtn_order
        .unwrap_or_else(|| crate::tdg::default_dtn_order(kappa, radius).max(n + 5));
    let params = TdgParams {
        p: cfg.p,
        flux: cfg.flux,
        dtn_order: Some(dtn),
        allow_large_p: cfg.allow_large_p,
        filter: cfg.filter,
    };
    let n_interior = match centered.kind {
        ScattererKind::SoundSoft => None,
        ScattererKind::Penetrable { n_interior } => Some(n_interior),
    };
    let system = assemble_system(mesh, kappa, n_interior, &params)?;
    let entries = tmatrix_entries(&system, n)?;
    let mut t = TMatrix::from_entries(entries, kappa, r_d);
    t.origin = scatterer.centroid();
    t.scatterer_hash = centered.descriptor_hash();
    t.solver = Some(SolverParams {
        h: cfg.h,
        p: cfg.p,
        dtn_order: dtn,
        artificial_radius: radius,
        flux: cfg.flux,
    });
    t.shape = Some(Shape::Polygon(centered));
    Ok((t, system))
}

/// Solves for every regular wavefunction `psi_l`, `|l| <= order`, and
/// converts the far fields into the columns of `T`.
pub fn tmatrix_entries(system: &TdgSystem, order: usize) -> Result<Mat<c64>> {
    let size = 2 * order + 1;
    let kappa = system.space.kappa;
    let rhs: Vec<Vec<c64>> = (0..size)
        .into_par_iter()
        .map(|l| {
            let mut c = vec![c64::new(0.0, 0.0); size];
            c[l] = c64::new(1.0, 0.0);
            let psi = Expansion::new(ExpansionKind::Regular, kappa, [0.0, 0.0], c).expect("odd length");
            system.rhs_for_incident(&psi)
        })
        .collect();
    let sols = system.solve_many(&rhs)?;
    let k = far_field_points(order);
    let angles: Vec<f64> = (0..k).map(|j| 2.0 * std::f64::consts::PI * j as f64 / k as f64).collect();
    let cols: Vec<Vec<c64>> = sols
        .par_iter()
        .map(|s| {
            let far = far_field(&system.space, &s.coeffs, &angles)?;
            Ok(column_from_far_field(&far, kappa, order))
        })
        .collect::<Result<_>>()?;
    Ok(Mat::from_fn(size, size, |m, l| cols[l][m]))
}

#[derive(Serialize, Deserialize)]
struct TmatFile {
    format: String,
    version: u32,
    kappa: f64,
    order: usize,
    origin: Point,
    rotation: f64,
    radius: f64,
    scatterer_hash: String,
    solver_params: Option<SolverParams>,
    symmetry_residual: f64,
    #[serde(default)]
    scatterer: Option<Shape>,
    entries: Vec<[f64; 2]>,
}

pub fn tmatrix_to_json(t: &TMatrix) -> Result<String> {
    let n = t.size();
    let file = TmatFile {
        format: FILE_FORMAT.into(),
        version: FILE_VERSION,
        kappa: t.kappa,
        order: t.order,
        origin: t.origin,
        rotation: t.rotation,
        radius: t.radius,
        scatterer_hash: t.scatterer_hash.clone(),
        solver_params: t.solver,
        symmetry_residual: t.symmetry_residual,
        scatterer: t.shape.clone(),
        entries: (0..n * n)
            .map(|k| {
                let z = t.entries[(k / n, k % n)];
                [z.re, z.im]
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn tmatrix_from_json(text: &str) -> Result<TMatrix> {
    let file: TmatFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed JSON: {e}")))?;
    if file.format != FILE_FORMAT {
        return Err(Error::Format(format!("unexpected format tag {:?}", file.format)));
    }
    if file.version != FILE_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (expected {FILE_VERSION})",
            file.version
        )));
    }
    let n = 2 * file.order + 1;
    if file.entries.len() != n * n {
        return Err(Error::Format(format!(
            "expected {} entries for order {}, found {}",
            n * n,
            file.order,
            file.entries.len()
        )));
    }
    if file.entries.iter().flatten().any(|v| !v.is_finite()) || !(file.kappa > 0.0) {
        return Err(Error::Format("non-finite entry or invalid wavenumber".into()));
    }
    let entries = Mat::from_fn(n, n, |i, j| {
        let [re, im] = file.entries[i * n + j];
        c64::new(re, im)
    });
    Ok(TMatrix {
        entries,
        kappa: file.kappa,
        order: file.order,
        origin: file.origin,
        rotation: file.rotation,
        radius: file.radius,
        scatterer_hash: file.scatterer_hash,
        solver: file.solver_params,
        symmetry_residual: file.symmetry_residual,
        shape: file.scatterer,
    })
}

pub fn save_tmatrix(t: &TMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, tmatrix_to_json(t)?)?;
    Ok(())
}

pub fn load_tmatrix(path: &Path) -> Result<TMatrix> {
    tmatrix_from_json(&std::fs::read_to_string(path)?)
}

/// Maps a global point into the frame of a scatterer placed at `center`
/// with rotation `alpha`.
pub fn to_local(x: Point, center: Point, alpha: f64) -> Point {
    rotate_point([x[0] - center[0], x[1] - center[1]], -alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{circle_tmatrix_penetrable, circle_tmatrix_soundsoft};
    use crate::specfun::hankel1;
    use crate::tdg::gauss_legendre;
    use crate::wavefield::{eval_radiating, radiating_gradients};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_tmatrix(order: usize, seed: u64) -> TMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * order + 1;
        let e = Mat::from_fn(n, n, |_, _| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        TMatrix::from_entries(e, 2.0, 1.0)
    }

    #[test]
    fn truncation_order_examples() {
        assert_eq!(truncation_order(1.0, 1.0), 10);
        assert_eq!(truncation_order(5.0, 2f64.sqrt()), 20);
        assert_eq!(truncation_order(2.39, 0.05), 8);
    }

    #[test]
    fn symmetry_residual_cases() {
        let z = TMatrix::from_entries(Mat::zeros(5, 5), 1.0, 1.0);
        assert_eq!(symmetry_residual(&z), 0.0);
        let t = circle_tmatrix_soundsoft(3.0, 1.0, 15).unwrap();
        assert!(symmetry_residual(&t) < 1e-12);
        let t2 = TMatrix::from_entries(faer::Scale(c64::new(2.0, 0.0)) * &t.entries, 3.0, 1.0);
        assert!(symmetry_residual(&t2) > 1e-3);
        let pen = circle_tmatrix_penetrable(3.0, c64::new(6.0, 0.0), 1.0, 15).unwrap();
        assert!(symmetry_residual(&pen) < 1e-12);
    }

    #[test]
    fn rotation_algebra() {
        let t = random_tmatrix(6, 1);
        assert_eq!(rotate_tmatrix(&t, 0.0).entries, t.entries);
        let back = rotate_tmatrix(&rotate_tmatrix(&t, 0.83), -0.83);
        assert!((&back.entries - &t.entries).norm_l2() <= 1e-15 * t.frobenius_norm().max(1.0) * 10.0);
        assert!((rotate_tmatrix(&t, 1.1).symmetry_residual - t.symmetry_residual).abs() < 1e-13 * t.symmetry_residual.max(1.0));
        let o = set_origin(&t, [1.0, -1.0]);
        assert_eq!(o.entries, t.entries);
        assert_eq!(set_origin(&o, t.origin).origin, t.origin);
    }

    #[test]
    fn rotation_matches_rotated_incidence() {
        // The rotated obstacle scatters a wave exactly like the original
        // obstacle scatters the wave rotated back.
        let t = random_tmatrix(4, 2);
        let alpha = 0.4;
        let r = rotate_tmatrix(&t, alpha);
        let a: Vec<c64> = (0..9).map(|i| c64::new(i as f64, 1.0)).collect();
        let d = rotation_diag(alpha, 4);
        let a_loc: Vec<c64> = a.iter().zip(&d).map(|(x, y)| x * y).collect();
        let b_loc = t.apply(&a_loc);
        let b = r.apply(&a);
        for i in 0..9 {
            assert!((b[i] - b_loc[i] * d[i].conj()).norm() < 1e-13);
        }
    }

    #[test]
    fn far_field_of_radiating_wavefunction() {
        let kappa = 2.5;
        let radius = 1.3;
        let n = 64;
        let (x, w) = gauss_legendre(n);
        for m in [-3i32, 0, 2, 5] {
            let mut samples = Vec::new();
            for seg in 0..4 {
                for (t, wt) in x.iter().zip(&w) {
                    let th = (seg as f64 + 0.5 * (t + 1.0)) * PI / 2.0;
                    let p = [radius * th.cos(), radius * th.sin()];
                    let g = radiating_gradients(5, kappa, p).unwrap()[(m + 5) as usize];
                    samples.push(TraceSample {
                        x: p,
                        weight: wt * PI / 4.0 * radius,
                        value: eval_radiating(m, kappa, p).unwrap(),
                        normal_derivative: g[0] * th.cos() + g[1] * th.sin(),
                    });
                }
            }
            let angles = [0.0, 0.7, 2.0, 4.4];
            let far = far_field_from_trace(&samples, kappa, &angles).unwrap();
            // Large-argument constant of H_m, checked against hankel1 itself.
            let big = 4000.0;
            let c_asym = hankel1(m, big).unwrap() * c64::from_polar(1.0, -big) * big.sqrt();
            let c = (2.0 / PI).sqrt() * i_pow(-(m as i64)) * c64::from_polar(1.0, -PI / 4.0);
            assert!((c_asym - c).norm() < 1e-2);
            for (th, f) in angles.iter().zip(&far) {
                let expect = c / kappa.sqrt() * c64::from_polar(1.0, m as f64 * th);
                assert!((f - expect).norm() < 1e-8 * expect.norm(), "m={m}: {f} vs {expect}");
            }
            // Columns recovered from the far field of phi_m are unit vectors.
            let k = far_field_points(6);
            let grid: Vec<f64> = (0..k).map(|j| 2.0 * PI * j as f64 / k as f64).collect();
            let col = column_from_far_field(&far_field_from_trace(&samples, kappa, &grid).unwrap(), kappa, 6);
            for (i, v) in col.iter().enumerate() {
                let e = if i as i32 - 6 == m { 1.0 } else { 0.0 };
                assert!((v - e).norm() < 1e-8);
            }
        }
        assert!(far_field_from_trace(&[], 1.0, &[]).is_err());
    }

    #[test]
    fn file_round_trip_is_exact() {
        let mut t = random_tmatrix(3, 9);
        t.origin = [0.1, -1.0 / 3.0];
        t.scatterer_hash = "abc".into();
        let text = tmatrix_to_json(&t).unwrap();
        let back = tmatrix_from_json(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(symmetry_residual(&back), t.symmetry_residual);
        assert!(tmatrix_from_json(&text[..text.len() / 2]).is_err());
        let bumped = text.replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(tmatrix_from_json(&bumped), Err(Error::Format(_))));
    }

    #[test]
    fn polygon_close_to_circle_reproduces_disc() {
        // A 24-gon inscribed in the unit circle scatters almost like the disc.
        let verts: Vec<Point> = (0..24).map(|i| {
            let t = 2.0 * PI * i as f64 / 24.0;
            [t.cos(), t.sin()]
        }).collect();
        let s = PolygonScatterer::new("24gon", verts, ScattererKind::SoundSoft).unwrap();
        let (t, sys) = compute_tmatrix(&s, 2.0, &TmatConfig::new(0.3, 15)).unwrap();
        let disc = circle_tmatrix_soundsoft(2.0, 1.0, t.order).unwrap();
        let diff = (&t.entries - &disc.entries).norm_l2() / disc.frobenius_norm();
        assert!(diff < 0.05, "relative difference {diff}");
        assert!(t.symmetry_residual < 1e-3, "residual {}", t.symmetry_residual);
        assert_eq!(sys.space.basis.p, 15);
    }

    #[test]
    fn matched_penetrable_square_does_not_scatter() {
        let s = PolygonScatterer::new(
            "sq",
            vec![[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]],
            ScattererKind::Penetrable { n_interior: c64::new(1.0, 0.0) },
        )
        .unwrap();
        let (t, _) = compute_tmatrix(&s, 2.0, &TmatConfig::new(0.4, 11)).unwrap();
        assert!(t.frobenius_norm() < 1e-6, "{}", t.frobenius_norm());
    }
}
