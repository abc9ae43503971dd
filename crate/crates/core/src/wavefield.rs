//! Regular and radiating cylindrical wavefunctions and the algebra that
//! moves expansions between origins.
//!
//! `psi_l(x) = J_l(kappa r) e^{i l theta}` and `phi_m(x) = H_m^(1)(kappa r) e^{i m theta}`
//! in polar coordinates `(r, theta)` about the expansion origin. Coefficient
//! vectors are stored for `l = -N..=N`, index `l + N`.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specfun::{bessel_j_array, hankel1_array, signed_orders};
use crate::{c64, Point};

/// Extra orders added to `kappa * r_max` when reconstructing a plane wave.
pub const PLANE_WAVE_PADDING: usize = 10;
/// Extra orders used for point-source reconstructions.
pub const POINT_SOURCE_PADDING: usize = 15;
/// Extra orders when composing translations.
pub const TRANSLATION_PADDING: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpansionKind {
    /// Built from `psi_l`; valid for every `r >= 0`.
    Regular,
    /// Built from `phi_m`; valid outside the disk enclosing the sources.
    Radiating,
}

#[inline]
pub(crate) fn index(l: i64, order: usize) -> usize {
    (l + order as i64) as usize
}

/// Polar coordinates `(r, theta)` of a point.
pub fn polar(x: Point) -> (f64, f64) {
    (x[0].hypot(x[1]), x[1].atan2(x[0]))
}

/// `e^{i l theta}` for `l = -n..=n`.
pub fn angular_phases(n: usize, theta: f64) -> Vec<c64> {
    (-(n as i64)..=n as i64)
        .map(|l| c64::from_polar(1.0, l as f64 * theta))
        .collect()
}

/// `psi_l(x)` for `l = -order..=order`, `x` relative to the expansion origin.
pub fn regular_values(order: usize, kappa: f64, x: Point) -> Vec<c64> {
    let (r, theta) = polar(x);
    let j = signed_orders(&bessel_j_array(order, kappa * r), order);
    angular_phases(order, theta)
        .into_iter()
        .zip(j)
        .map(|(e, j)| e * j)
        .collect()
}

/// `phi_m(x)` for `m = -order..=order`; `x` must be away from the origin.
pub fn radiating_values(order: usize, kappa: f64, x: Point) -> Result<Vec<c64>> {
    let (r, theta) = polar(x);
    if !(r > 0.0) {
        return Err(Error::Domain(
            "radiating wavefunctions are singular at their origin".into(),
        ));
    }
    let h = signed_orders(&hankel1_array(order, kappa * r), order);
    Ok(angular_phases(order, theta)
        .into_iter()
        .zip(h)
        .map(|(e, h)| e * h)
        .collect())
}

/// Gradients of the wavefunctions of order `-order..=order` from values of
/// order `-(order+1)..=order+1`, using
/// `d_x C_l = kappa/2 (C_{l-1} - C_{l+1})`, `d_y C_l = i kappa/2 (C_{l-1} + C_{l+1})`.
fn gradients_from(values: &[c64], order: usize, kappa: f64) -> Vec<[c64; 2]> {
    let wide = order + 1;
    (-(order as i64)..=order as i64)
        .map(|l| {
            let lo = values[index(l - 1, wide)];
            let hi = values[index(l + 1, wide)];
            [
                (lo - hi) * (0.5 * kappa),
                (lo + hi) * c64::new(0.0, 0.5 * kappa),
            ]
        })
        .collect()
}

pub fn regular_gradients(order: usize, kappa: f64, x: Point) -> Vec<[c64; 2]> {
    gradients_from(&regular_values(order + 1, kappa, x), order, kappa)
}

pub fn radiating_gradients(order: usize, kappa: f64, x: Point) -> Result<Vec<[c64; 2]>> {
    Ok(gradients_from(
        &radiating_values(order + 1, kappa, x)?,
        order,
        kappa,
    ))
}

/// `psi_l(x) = J_l(kappa r) e^{i l theta}`.
pub fn eval_regular(l: i32, kappa: f64, x: Point) -> c64 {
    let n = l.unsigned_abs() as usize;
    regular_values(n, kappa, x)[index(l as i64, n)]
}

/// `phi_m(x) = H_m^(1)(kappa r) e^{i m theta}`.
pub fn eval_radiating(m: i32, kappa: f64, x: Point) -> Result<c64> {
    let n = m.unsigned_abs() as usize;
    Ok(radiating_values(n, kappa, x)?[index(m as i64, n)])
}

/// A field that can be sampled together with its gradient.
pub trait Field: Sync {
    fn value(&self, x: Point) -> c64;
    fn gradient(&self, x: Point) -> [c64; 2];
}

/// Truncated expansion in regular or radiating wavefunctions about `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub kind: ExpansionKind,
    pub kappa: f64,
    pub origin: Point,
    pub coeffs: Vec<c64>,
}

impl Expansion {
    pub fn new(kind: ExpansionKind, kappa: f64, origin: Point, coeffs: Vec<c64>) -> Result<Self> {
        if coeffs.len() % 2 != 1 {
            return Err(Error::Argument(format!(
                "coefficient vector must have odd length 2N+1, got {}",
                coeffs.len()
            )));
        }
        Ok(Self {
            kind,
            kappa,
            origin,
            coeffs,
        })
    }

    pub fn order(&self) -> usize {
        (self.coeffs.len() - 1) / 2
    }

    /// Coefficient of order `l`, zero outside the stored range.
    pub fn coeff(&self, l: i64) -> c64 {
        let n = self.order() as i64;
        if l.abs() > n {
            c64::new(0.0, 0.0)
        } else {
            self.coeffs[index(l, self.order())]
        }
    }

    fn relative(&self, x: Point) -> Point {
        [x[0] - self.origin[0], x[1] - self.origin[1]]
    }

    pub fn eval(&self, x: Point) -> Result<c64> {
        let rel = self.relative(x);
        let basis = match self.kind {
            ExpansionKind::Regular => regular_values(self.order(), self.kappa, rel),
            ExpansionKind::Radiating => radiating_values(self.order(), self.kappa, rel)?,
        };
        Ok(basis.iter().zip(&self.coeffs).map(|(b, a)| b * a).sum())
    }

    pub fn eval_gradient(&self, x: Point) -> Result<[c64; 2]> {
        let rel = self.relative(x);
        let grads = match self.kind {
            ExpansionKind::Regular => regular_gradients(self.order(), self.kappa, rel),
            ExpansionKind::Radiating => radiating_gradients(self.order(), self.kappa, rel)?,
        };
        let mut g = [c64::new(0.0, 0.0); 2];
        for (gl, a) in grads.iter().zip(&self.coeffs) {
            g[0] += gl[0] * a;
            g[1] += gl[1] * a;
        }
        Ok(g)
    }

    /// Same expansion with every coefficient multiplied by `s`.
    pub fn scaled(&self, s: c64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|a| a * s).collect(),
            ..self.clone()
        }
    }

    /// Regular expansion about `new_origin` of order `order_out`.
    ///
    /// A radiating expansion is only representable this way inside the disk
    /// about `new_origin` that excludes the old origin.
    pub fn recentered(&self, new_origin: Point, order_out: usize) -> Result<Self> {
        let offset = [new_origin[0] - self.origin[0], new_origin[1] - self.origin[1]];
        let kind = match self.kind {
            ExpansionKind::Regular => TranslationKind::RegularToRegular,
            ExpansionKind::Radiating => TranslationKind::RadiatingToRegular,
        };
        let s = translation_matrix(kind, offset, self.kappa, order_out, self.order())?;
        let coeffs = (0..s.nrows())
            .map(|i| (0..s.ncols()).map(|j| s[(i, j)] * self.coeffs[j]).sum())
            .collect();
        Self::new(ExpansionKind::Regular, self.kappa, new_origin, coeffs)
    }
}

impl Field for Expansion {
    fn value(&self, x: Point) -> c64 {
        self.eval(x).unwrap_or(c64::new(f64::NAN, f64::NAN))
    }

    fn gradient(&self, x: Point) -> [c64; 2] {
        self.eval_gradient(x)
            .unwrap_or([c64::new(f64::NAN, f64::NAN); 2])
    }
}

/// `amplitude * exp(i kappa d . x)` with `d = (cos theta, sin theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneWave {
    pub theta: f64,
    pub kappa: f64,
    pub amplitude: c64,
}

impl PlaneWave {
    pub fn new(theta: f64, kappa: f64) -> Self {
        Self {
            theta,
            kappa,
            amplitude: c64::new(1.0, 0.0),
        }
    }

    pub fn direction(&self) -> Point {
        [self.theta.cos(), self.theta.sin()]
    }
}

impl Field for PlaneWave {
    fn value(&self, x: Point) -> c64 {
        let d = self.direction();
        self.amplitude * c64::from_polar(1.0, self.kappa * (d[0] * x[0] + d[1] * x[1]))
    }

    fn gradient(&self, x: Point) -> [c64; 2] {
        let d = self.direction();
        let v = self.value(x) * c64::new(0.0, self.kappa);
        [v * d[0], v * d[1]]
    }
}

/// Circular wave `amplitude * H_0^(1)(kappa |x - source|)`, without the
/// usual `i/4` Green's-function factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSource {
    pub source: Point,
    pub kappa: f64,
    pub amplitude: c64,
}

impl PointSource {
    pub fn new(source: Point, kappa: f64) -> Self {
        Self {
            source,
            kappa,
            amplitude: c64::new(1.0, 0.0),
        }
    }
}

impl Field for PointSource {
    fn value(&self, x: Point) -> c64 {
        let r = (x[0] - self.source[0]).hypot(x[1] - self.source[1]);
        if r == 0.0 {
            return c64::new(f64::NAN, f64::NAN);
        }
        self.amplitude * hankel1_array(0, self.kappa * r)[0]
    }

    fn gradient(&self, x: Point) -> [c64; 2] {
        let rel = [x[0] - self.source[0], x[1] - self.source[1]];
        let r = rel[0].hypot(rel[1]);
        if r == 0.0 {
            return [c64::new(f64::NAN, f64::NAN); 2];
        }
        // d/dr H_0(kappa r) = -kappa H_1(kappa r)
        let dr = -hankel1_array(1, self.kappa * r)[1] * self.kappa * self.amplitude;
        [dr * (rel[0] / r), dr * (rel[1] / r)]
    }
}

/// Jacobi–Anger coefficients `a_l = i^l e^{-i l theta_inc}` of a unit plane
/// wave travelling in direction `theta_inc`, about the origin.
pub fn plane_wave_coeffs(theta_inc: f64, kappa: f64, order: usize) -> Expansion {
    let coeffs = (-(order as i64)..=order as i64)
        .map(|l| i_pow(l) * c64::from_polar(1.0, -(l as f64) * theta_inc))
        .collect();
    Expansion {
        kind: ExpansionKind::Regular,
        kappa,
        origin: [0.0, 0.0],
        coeffs,
    }
}

/// `i^l` for integer `l`, exact.
pub fn i_pow(l: i64) -> c64 {
    match l.rem_euclid(4) {
        0 => c64::new(1.0, 0.0),
        1 => c64::new(0.0, 1.0),
        2 => c64::new(-1.0, 0.0),
        _ => c64::new(0.0, -1.0),
    }
}

/// Regular expansion about the origin of `H_0^(1)(kappa |x - source|)`,
/// valid for `|x| < |source|`: `a_l = H_l^(1)(kappa |s|) e^{-i l theta_s}`.
pub fn point_source_coeffs(source: Point, kappa: f64, order: usize) -> Result<Expansion> {
    let (r, theta) = polar(source);
    if !(r > 0.0) {
        return Err(Error::Domain(
            "point source at the expansion origin has no regular expansion".into(),
        ));
    }
    let h = signed_orders(&hankel1_array(order, kappa * r), order);
    let coeffs = (-(order as i64)..=order as i64)
        .zip(h)
        .map(|(l, h)| h * c64::from_polar(1.0, -(l as f64) * theta))
        .collect();
    Ok(Expansion {
        kind: ExpansionKind::Regular,
        kappa,
        origin: [0.0, 0.0],
        coeffs,
    })
}

/// Diagonal `e^{i l alpha}`, `l = -order..=order`, of the rotation operator.
pub fn rotation_diag(alpha: f64, order: usize) -> Vec<c64> {
    angular_phases(order, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationKind {
    RegularToRegular,
    RadiatingToRegular,
}

/// Graf addition-theorem matrix re-expanding wavefunctions about an origin
/// shifted by `offset` (new origin minus old origin).
///
/// Row `l` (regular, about the new origin, `|l| <= order_out`), column `m`
/// (about the old origin, `|m| <= order_in`):
/// `S_lm = C_{m-l}(kappa |b|) e^{i (m-l) theta_b}`, so that
/// `C_m(x_old) e^{i m theta_old} = sum_l S_lm psi_l(x_new)`. For
/// radiating-to-regular the identity holds only for `|x_new| < |b|`.
pub fn translation_matrix(
    kind: TranslationKind,
    offset: Point,
    kappa: f64,
    order_out: usize,
    order_in: usize,
) -> Result<Mat<c64>> {
    let (dist, theta) = polar(offset);
    let rows = 2 * order_out + 1;
    let cols = 2 * order_in + 1;
    if dist == 0.0 {
        return match kind {
            TranslationKind::RegularToRegular => Ok(Mat::from_fn(rows, cols, |i, j| {
                let l = i as i64 - order_out as i64;
                let m = j as i64 - order_in as i64;
                if l == m {
                    c64::new(1.0, 0.0)
                } else {
                    c64::new(0.0, 0.0)
                }
            })),
            TranslationKind::RadiatingToRegular => Err(Error::Domain(
                "radiating-to-regular translation needs a nonzero offset".into(),
            )),
        };
    }
    let span = order_out + order_in;
    let table: Vec<c64> = match kind {
        TranslationKind::RegularToRegular => bessel_j_array(span, kappa * dist)
            .into_iter()
            .map(|v| c64::new(v, 0.0))
            .collect(),
        TranslationKind::RadiatingToRegular => hankel1_array(span, kappa * dist),
    };
    let kernel: Vec<c64> = signed_orders(&table, span)
        .into_iter()
        .zip(angular_phases(span, theta))
        .map(|(c, e)| c * e)
        .collect();
    Ok(Mat::from_fn(rows, cols, |i, j| {
        let l = i as i64 - order_out as i64;
        let m = j as i64 - order_in as i64;
        kernel[index(m - l, span)]
    }))
}
