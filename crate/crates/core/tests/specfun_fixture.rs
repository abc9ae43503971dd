//! Accuracy of the cylinder functions against the committed high-precision table.

use helmscatter::c64;
use helmscatter::specfun::{bessel_j, hankel1};

struct Record {
    kind: char,
    order: i32,
    x: f64,
    value: c64,
}

fn load() -> Vec<Record> {
    let text = include_str!("fixtures/bessel_fixture.txt");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            Record {
                kind: f[0].chars().next().unwrap(),
                order: f[1].parse().unwrap(),
                x: f[2].parse().unwrap(),
                value: c64::new(f[3].parse().unwrap(), f[4].parse().unwrap()),
            }
        })
        .collect()
}

#[test]
fn fixture_table_is_reproduced() {
    let records = load();
    assert!(records.len() > 900);
    let (mut worst_j, mut worst_h) = (0.0f64, 0.0f64);
    for r in &records {
        match r.kind {
            'J' => {
                let v = bessel_j(r.order, r.x).unwrap();
                let rel = (v - r.value.re).abs() / r.value.re.abs();
                worst_j = worst_j.max(rel);
                assert!(rel <= 1e-12, "J_{}({}) = {v:e}, expected {:e}, rel {rel:e}", r.order, r.x, r.value.re);
            }
            'H' => {
                let v = hankel1(r.order, r.x).unwrap();
                let rel = (v - r.value).norm() / r.value.norm();
                worst_h = worst_h.max(rel);
                assert!(rel <= 1e-11, "H_{}({}) = {v}, expected {}, rel {rel:e}", r.order, r.x, r.value);
            }
            k => panic!("unknown kind {k}"),
        }
    }
    println!("worst relative error: J {worst_j:e}, H {worst_h:e}");
}
