//! Lasso containment.

use crate::error::{Error, Result};
use crate::projection::ProjectedPoint;

pub type Point = [f64; 2];

/// Points closer than this to an edge count as on the boundary.
pub const BOUNDARY_EPS: f64 = 1e-9;

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return (p[0] - a[0]).hypot(p[1] - a[1]) <= BOUNDARY_EPS;
    }
    let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
    if cross.abs() > BOUNDARY_EPS * len {
        return false;
    }
    let t = (dx * (p[0] - a[0]) + dy * (p[1] - a[1])) / (len * len);
    (-BOUNDARY_EPS / len..=1.0 + BOUNDARY_EPS / len).contains(&t)
}

fn edges(polygon: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    polygon
        .iter()
        .zip(polygon.iter().cycle().skip(1))
        .map(|(&a, &b)| (a, b))
}

/// Even-odd (ray casting) rule; points on an edge are inside. Self-crossing
/// polygons are allowed.
pub fn contains(polygon: &[Point], p: Point) -> bool {
    if edges(polygon).any(|(a, b)| on_segment(p, a, b)) {
        return true;
    }
    let mut inside = false;
    for (a, b) in edges(polygon) {
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn validate_polygon(polygon: &[Point]) -> Result<()> {
    if polygon.len() < 3 {
        return Err(Error::Config(format!(
            "polygon needs at least 3 vertices, got {}",
            polygon.len()
        )));
    }
    if polygon.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("polygon vertices must be finite".into()));
    }
    Ok(())
}

/// Report ids of the points inside `polygon`, in input order.
pub fn points_in_polygon(points: &[ProjectedPoint], polygon: &[Point]) -> Result<Vec<String>> {
    validate_polygon(polygon)?;
    Ok(points
        .iter()
        .filter(|pt| contains(polygon, [pt.x, pt.y]))
        .map(|pt| pt.report_id.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQUARE: [Point; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

    /// Winding number by signed crossings of the upward/downward edges.
    fn winding(polygon: &[Point], p: Point) -> i32 {
        let mut wn = 0;
        for i in 0..polygon.len() {
            let a = polygon[i];
            let b = polygon[(i + 1) % polygon.len()];
            let side = (b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1]);
            if a[1] <= p[1] {
                if b[1] > p[1] && side > 0.0 {
                    wn += 1;
                }
            } else if b[1] <= p[1] && side < 0.0 {
                wn -= 1;
            }
        }
        wn
    }

    fn pt(id: &str, x: f64, y: f64) -> ProjectedPoint {
        ProjectedPoint {
            report_id: id.into(),
            x,
            y,
            label: None,
            predicted_prob: None,
        }
    }

    #[test]
    fn unit_square() {
        assert!(contains(&SQUARE, [0.5, 0.5]));
        assert!(!contains(&SQUARE, [2.0, 2.0]));
        assert!(contains(&SQUARE, [1.0, 0.5]));
        assert!(contains(&SQUARE, [0.0, 0.0]));
        assert!(contains(&SQUARE, [0.5, 1.0]));
        assert!(!contains(&SQUARE, [1.0 + 1e-6, 0.5]));
    }

    #[test]
    fn degenerate_polygon_selects_boundary_only() {
        let line = [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]];
        let pts = [pt("on", 0.5, 0.5), pt("off", 0.5, 0.6), pt("far", 3.0, 3.0)];
        assert_eq!(points_in_polygon(&pts, &line).unwrap(), vec!["on"]);
        assert!(points_in_polygon(&pts, &line[..2]).is_err());
    }

    #[test]
    fn self_crossing_bowtie_uses_even_odd() {
        // pentagram: the centre has winding number 2, so even-odd says outside
        let star: Vec<Point> = (0..5)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 + k as f64 * 4.0 * std::f64::consts::PI / 5.0;
                [a.cos(), a.sin()]
            })
            .collect();
        assert_eq!(winding(&star, [0.0, 0.0]).abs(), 2);
        assert!(!contains(&star, [0.0, 0.0]));
        assert!(contains(&star, [0.0, 0.8]));
    }

    #[test]
    fn random_twelve_gon_matches_winding_parity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let poly: Vec<Point> = (0..12)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        for _ in 0..500 {
            let p = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            if edges(&poly).any(|(a, b)| on_segment(p, a, b)) {
                continue;
            }
            assert_eq!(contains(&poly, p), winding(&poly, p) % 2 != 0);
        }
    }

    proptest! {
        #[test]
        fn translation_invariant(dx in -50.0f64..50.0, dy in -50.0f64..50.0, x in -0.5f64..1.5, y in -0.5f64..1.5) {
            let moved: Vec<Point> = SQUARE.iter().map(|v| [v[0] + dx, v[1] + dy]).collect();
            prop_assert_eq!(contains(&SQUARE, [x, y]), contains(&moved, [x + dx, y + dy]));
        }
    }
}
