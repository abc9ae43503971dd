//! Reference scatterers: discs, whose T-matrices follow from separation of
//! variables. Used as ground truth in tests and accepted by the CLI.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomesh::{hex_digest, ScattererKind};
use crate::specfun::{
    bessel_j_array, bessel_j_complex_array, bessel_j_complex_prime_array, hankel1_array, hankel1_prime_array,
};
use crate::tmatrix::{Shape, TMatrix};
use crate::wavefield::{index, radiating_values};
use crate::{c64, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleScatterer {
    pub label: String,
    pub radius: f64,
    pub kind: ScattererKind,
}

impl CircleScatterer {
    pub fn new(label: impl Into<String>, radius: f64, kind: ScattererKind) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Geometry(format!("circle radius must be positive, got {radius}")));
        }
        Ok(Self {
            label: label.into(),
            radius,
            kind,
        })
    }

    pub fn descriptor_hash(&self) -> String {
        let s = match self.kind {
            ScattererKind::SoundSoft => format!("circle;{:?};dir", self.radius),
            ScattererKind::Penetrable { n_interior } => {
                format!("circle;{:?};trans,{:?},{:?}", self.radius, n_interior.re, n_interior.im)
            }
        };
        hex_digest(s.as_bytes())
    }

    pub fn tmatrix(&self, kappa: f64, order: usize) -> Result<TMatrix> {
        match self.kind {
            ScattererKind::SoundSoft => circle_tmatrix_soundsoft(kappa, self.radius, order).map(|t| self.attach(t)),
            ScattererKind::Penetrable { n_interior } => {
                circle_tmatrix_penetrable(kappa, kappa * n_interior.sqrt(), self.radius, order).map(|t| self.attach(t))
            }
        }
    }

    fn attach(&self, mut t: TMatrix) -> TMatrix {
        t.scatterer_hash = self.descriptor_hash();
        t.shape = Some(Shape::Circle(self.clone()));
        t
    }
}

fn diagonal_tmatrix(kappa: f64, radius: f64, diag: Vec<c64>) -> TMatrix {
    let n = diag.len();
    let entries = Mat::from_fn(n, n, |i, j| if i == j { diag[i] } else { c64::new(0.0, 0.0) });
    TMatrix::from_entries(entries, kappa, radius)
}

/// `T_mm = -J_m(kappa a) / H_m(kappa a)`.
pub fn circle_tmatrix_soundsoft(kappa: f64, a: f64, order: usize) -> Result<TMatrix> {
    if !(kappa * a > 0.0) {
        return Err(Error::Argument(format!("need kappa a > 0, got {}", kappa * a)));
    }
    let j = bessel_j_array(order, kappa * a);
    let h = hankel1_array(order, kappa * a);
    let diag = (0..=2 * order)
        .map(|i| {
            let m = i.abs_diff(order);
            -j[m] / h[m]
        })
        .collect();
    Ok(diagonal_tmatrix(kappa, a, diag))
}

/// Transmission disc: total field and its radial derivative continuous at `r = a`.
pub fn circle_tmatrix_penetrable(kappa_o: f64, kappa_i: c64, a: f64, order: usize) -> Result<TMatrix> {
    if !(kappa_o * a > 0.0) || !(kappa_i.re > 0.0) {
        return Err(Error::Argument("need kappa_o a > 0 and Re kappa_i > 0".into()));
    }
    let x = kappa_o * a;
    let z = kappa_i * a;
    let jo = bessel_j_array(order + 1, x);
    let ho = hankel1_array(order + 1, x);
    let hop = hankel1_prime_array(order, x);
    let ji = bessel_j_complex_array(order + 1, z);
    let jip = bessel_j_complex_prime_array(order, z);
    let mut diag_half = Vec::with_capacity(order + 1);
    for m in 0..=order {
        let jop = if m == 0 { -jo[1] } else { 0.5 * (jo[m - 1] - jo[m + 1]) };
        let num = kappa_i * jip[m] * jo[m] - kappa_o * jop * ji[m];
        let den = kappa_o * hop[m] * ji[m] - kappa_i * jip[m] * ho[m];
        if den.norm() < 1e-300 || !den.re.is_finite() {
            return Err(Error::Conditioning {
                pivot_ratio: den.norm(),
                residual: f64::NAN,
            });
        }
        diag_half.push(num / den);
    }
    let diag = (0..=2 * order).map(|i| diag_half[i.abs_diff(order)]).collect();
    Ok(diagonal_tmatrix(kappa_o, a, diag))
}

/// `sum_m (T a)_m phi_m(x - center)` for a disc at `center`.
pub fn circle_scattered_field(
    circle: &CircleScatterer,
    center: Point,
    kappa: f64,
    incident: &[c64],
    points: &[Point],
) -> Result<Vec<c64>> {
    if incident.len() % 2 != 1 {
        return Err(Error::Argument("coefficient vector must have odd length".into()));
    }
    let order = incident.len() / 2;
    let t = circle.tmatrix(kappa, order)?;
    let b: Vec<c64> = (0..incident.len()).map(|i| t.entries[(i, i)] * incident[i]).collect();
    points
        .iter()
        .map(|x| {
            let y = [x[0] - center[0], x[1] - center[1]];
            if y[0].hypot(y[1]) < circle.radius * (1.0 - 1e-12) {
                return Err(Error::Domain(format!("point ({}, {}) is inside the disc", x[0], x[1])));
            }
            let phi = radiating_values(order, kappa, y)?;
            Ok((-(order as i64)..=order as i64).map(|m| b[index(m, order)] * phi[index(m, order)]).sum())
        })
        .collect()
}

/// Total field inside a disc centred at the origin, for incident
/// coefficients `incident`: zero for a sound-soft disc,
/// `sum_m c_m J_m(kappa_i r) e^{i m theta}` for a penetrable one.
pub fn circle_interior_field(circle: &CircleScatterer, kappa: f64, incident: &[c64], x: Point) -> Result<c64> {
    let n_interior = match circle.kind {
        ScattererKind::SoundSoft => return Ok(c64::new(0.0, 0.0)),
        ScattererKind::Penetrable { n_interior } => n_interior,
    };
    let order = incident.len() / 2;
    let a = circle.radius;
    let ki = kappa * n_interior.sqrt();
    let t = circle.tmatrix(kappa, order)?;
    let jo = bessel_j_array(order, kappa * a);
    let ho = hankel1_array(order, kappa * a);
    let ji_a = bessel_j_complex_array(order, ki * a);
    let (r, theta) = crate::wavefield::polar(x);
    if r > a * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("point ({}, {}) is outside the disc", x[0], x[1])));
    }
    let ji_r = bessel_j_complex_array(order, ki * r);
    Ok((-(order as i64)..=order as i64)
        .map(|m| {
            let i = index(m, order);
            let k = m.unsigned_abs() as usize;
            // J_{-m} = (-1)^m J_m for every argument, so the ratio is even in m.
            let c = (jo[k] + t.entries[(i, i)] * ho[k]) / ji_a[k];
            let sign = if m < 0 && k % 2 == 1 { -1.0 } else { 1.0 };
            c * incident[i] * ji_r[k] * sign * c64::from_polar(1.0, m as f64 * theta)
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tmatrix::{symmetry_residual, truncation_order};
    use crate::wavefield::{plane_wave_coeffs, Field, PlaneWave};

    #[test]
    fn soundsoft_circle_is_unitary_and_decays() {
        let t = circle_tmatrix_soundsoft(1.0, 1.0, 12).unwrap();
        assert!(symmetry_residual(&t) < 1e-13);
        for ka in [0.3, 1.0, 4.0, 10.0] {
            let t = circle_tmatrix_soundsoft(ka, 1.0, 20).unwrap();
            for i in 0..41 {
                assert!(t.entries[(i, i)].norm() <= 1.0 + 1e-14);
            }
        }
        let n = truncation_order(1.0, 1.0) + 5;
        let t = circle_tmatrix_soundsoft(1.0, 1.0, n).unwrap();
        assert!(t.entries[(2 * n, 2 * n)].norm() < 1e-10);
    }

    #[test]
    fn penetrable_circle_cases() {
        let t = circle_tmatrix_penetrable(2.0, c64::new(2.0, 0.0), 1.0, 10).unwrap();
        assert!(t.frobenius_norm() < 1e-14);
        let t = circle_tmatrix_penetrable(2.0, c64::new(2.0 * 3f64.sqrt(), 0.0), 1.0, 10).unwrap();
        assert!(symmetry_residual(&t) < 1e-12);
        let lossy = circle_tmatrix_penetrable(2.0, 2.0 * c64::new(3.0, 1.0).sqrt(), 1.0, 10).unwrap();
        assert!(symmetry_residual(&lossy) > 1e-3);
    }

    #[test]
    fn soundsoft_boundary_condition() {
        let kappa = 3.0;
        let a = 1.0;
        let c = CircleScatterer::new("c", a, ScattererKind::SoundSoft).unwrap();
        let n = truncation_order(kappa, a) + 10;
        let inc = plane_wave_coeffs(0.7, kappa, n);
        let pw = PlaneWave::new(0.7, kappa);
        let pts: Vec<Point> = (0..17).map(|i| {
            let t = i as f64 * 0.37;
            [a * t.cos(), a * t.sin()]
        }).collect();
        let us = circle_scattered_field(&c, [0.0, 0.0], kappa, &inc.coeffs, &pts).unwrap();
        for (x, u) in pts.iter().zip(&us) {
            assert!((u + pw.value(*x)).norm() < 1e-10);
        }
        assert!(circle_scattered_field(&c, [0.0, 0.0], kappa, &inc.coeffs, &[[0.1, 0.0]]).is_err());
        let zero = vec![c64::new(0.0, 0.0); 2 * n + 1];
        assert_eq!(circle_scattered_field(&c, [0.0, 0.0], kappa, &zero, &pts[..2]).unwrap()[0], c64::new(0.0, 0.0));
    }

    #[test]
    fn interior_field_matches_exterior_on_boundary() {
        let kappa = 2.0;
        let c = CircleScatterer::new("c", 0.9, ScattererKind::Penetrable { n_interior: c64::new(2.5, 0.3) }).unwrap();
        let n = truncation_order(kappa, 0.9) + 10;
        let inc = plane_wave_coeffs(-0.4, kappa, n);
        let pw = PlaneWave::new(-0.4, kappa);
        for t in [0.0, 1.3, 4.0] {
            let x = [0.9 * f64::cos(t), 0.9 * f64::sin(t)];
            let outside = circle_scattered_field(&c, [0.0, 0.0], kappa, &inc.coeffs, &[x]).unwrap()[0] + pw.value(x);
            let inside = circle_interior_field(&c, kappa, &inc.coeffs, x).unwrap();
            assert!((outside - inside).norm() < 1e-10);
        }
        let ss = CircleScatterer::new("s", 1.0, ScattererKind::SoundSoft).unwrap();
        assert_eq!(circle_interior_field(&ss, kappa, &inc.coeffs, [0.1, 0.0]).unwrap(), c64::new(0.0, 0.0));
    }

    #[test]
    fn penetrable_interface_conditions() {
        // Interior J_m(kappa_i r) c_m must match the exterior value and slope.
        let (ko, ki, a) = (2.0, c64::new(3.0, 0.5), 0.8);
        let t = circle_tmatrix_penetrable(ko, ki, a, 4).unwrap();
        for m in 0..=4usize {
            let tm = t.entries[(m + 4, m + 4)];
            let eps = 1e-6;
            let ext = |r: f64| crate::specfun::bessel_j(m as i32, ko * r).unwrap() + tm * crate::specfun::hankel1(m as i32, ko * r).unwrap();
            let int = |r: f64| bessel_j_complex_array(m, ki * r)[m];
            let c = ext(a) / int(a);
            let d_ext = (ext(a + eps) - ext(a - eps)) / (2.0 * eps);
            let d_int = c * (int(a + eps) - int(a - eps)) / (2.0 * eps);
            assert!((d_ext - d_int).norm() < 1e-7 * d_ext.norm().max(1.0));
        }
    }
}
