//! Polygon ensembles: consistency of placement, rotation and near-field evaluation.

use std::f64::consts::PI;

use helmscatter::geomesh::{rotate_point, PolygonScatterer, ScattererKind};
use helmscatter::multiscatt::{Ensemble, Incident, MultiProblem, Placement, SolveOptions};
use helmscatter::tmatrix::{Shape, TmatConfig};
use helmscatter::{c64, Point};

fn triangle() -> Shape {
    Shape::Polygon(
        PolygonScatterer::new(
            "tri",
            vec![[0.0, 0.8], [-0.7, -0.4], [0.7, -0.4]],
            ScattererKind::Penetrable {
                n_interior: c64::new(2.0, 0.1),
            },
        )
        .unwrap(),
    )
}

fn kite() -> Shape {
    Shape::Polygon(
        PolygonScatterer::new("kite", vec![[0.0, -0.5], [0.6, 0.0], [0.0, 1.0], [-0.6, 0.0]], ScattererKind::SoundSoft).unwrap(),
    )
}

fn problem() -> MultiProblem {
    let ens = Ensemble::new(
        2.5,
        vec![triangle(), kite()],
        vec![
            Placement { shape: 0, position: [-2.0, 0.5], rotation: 0.4 },
            Placement { shape: 1, position: [2.5, -0.5], rotation: -1.1 },
        ],
    )
    .unwrap();
    MultiProblem::compute(ens, &TmatConfig::new(0.4, 11)).unwrap()
}

#[test]
fn rotating_everything_rotates_the_field() {
    let pb = problem();
    let beta = 0.9;
    let turned = pb
        .rearranged(
            pb.ensemble
                .placements
                .iter()
                .map(|p| Placement {
                    shape: p.shape,
                    position: rotate_point(p.position, beta),
                    rotation: p.rotation + beta,
                })
                .collect(),
        )
        .unwrap();
    let s1 = pb.solve(&Incident::plane(0.3), &SolveOptions::default()).unwrap();
    let s2 = turned.solve(&Incident::plane(0.3 + beta), &SolveOptions::default()).unwrap();
    let pts: Vec<Point> = (0..12).map(|k| [6.0 * (k as f64 * 0.5).cos(), 6.0 * (k as f64 * 0.5).sin()]).collect();
    let turned_pts: Vec<Point> = pts.iter().map(|&x| rotate_point(x, beta)).collect();
    let u1 = pb.total_field(&s1, &pts, false).unwrap();
    let u2 = turned.total_field(&s2, &turned_pts, false).unwrap();
    for (a, b) in u1.iter().zip(&u2) {
        assert!((a - b).norm() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn near_field_continues_the_expansion() {
    let pb = problem();
    assert!(pb.validate().is_empty());
    let sol = pb.solve(&Incident::point([0.0, 3.0]), &SolveOptions::default()).unwrap();
    for (j, place) in pb.ensemble.placements.iter().enumerate() {
        let r = pb.solvers[place.shape].near_radius();
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for k in 0..40 {
            let t = 2.0 * PI * k as f64 / 40.0;
            let x = [place.position[0] + r * t.cos(), place.position[1] + r * t.sin()];
            let outer = pb.total_field(&sol, &[x], false).unwrap()[0];
            let near = pb.near_value(&sol, j, x).unwrap();
            diff = diff.max((outer - near).norm());
            scale = scale.max(outer.norm());
        }
        assert!(diff / scale < 1e-3, "obstacle {j}: {:e}", diff / scale);
    }
    // Inside the sound-soft kite the field vanishes; inside the triangle it does not.
    let u = pb.total_field(&sol, &[[2.5, -0.3], [-2.0, 0.5]], true).unwrap();
    assert_eq!(u[0], c64::new(0.0, 0.0));
    assert!(u[1].norm() > 1e-3);
}
