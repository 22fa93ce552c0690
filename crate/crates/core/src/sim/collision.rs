//! Oriented-rectangle overlap by the separating-axis test.

use crate::error::{Error, Result};

/// Oriented box: center, heading (rad), full length along the heading, full width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obb {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Obb {
    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    fn half(&self) -> [f64; 2] {
        [self.length / 2.0, self.width / 2.0]
    }

    fn check(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(Error::contract(format!(
                "box extent must be positive, got {} × {}",
                self.length, self.width
            )));
        }
        Ok(())
    }

    /// Whether a world point lies inside or on the boundary.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let [u, v] = self.axes();
        let [hl, hw] = self.half();
        (dx * u[0] + dy * u[1]).abs() <= hl && (dx * v[0] + dy * v[1]).abs() <= hw
    }

    fn radius_on(&self, axis: [f64; 2]) -> f64 {
        let [u, v] = self.axes();
        let [hl, hw] = self.half();
        hl * (u[0] * axis[0] + u[1] * axis[1]).abs() + hw * (v[0] * axis[0] + v[1] * axis[1]).abs()
    }
}

/// Signed SAT margin: the smallest gap between projections over the four
/// candidate axes. Positive means separated, zero or negative means touching
/// or overlapping (then its magnitude is the penetration depth).
pub fn separation(a: &Obb, b: &Obb) -> Result<f64> {
    a.check()?;
    b.check()?;
    let d = [b.cx - a.cx, b.cy - a.cy];
    let mut gap = f64::NEG_INFINITY;
    for axis in a.axes().into_iter().chain(b.axes()) {
        let dist = (d[0] * axis[0] + d[1] * axis[1]).abs();
        gap = gap.max(dist - a.radius_on(axis) - b.radius_on(axis));
    }
    Ok(gap)
}

/// Exact overlap test for two oriented rectangles; touching counts as overlap.
pub fn boxes_overlap(a: &Obb, b: &Obb) -> Result<bool> {
    Ok(separation(a, b)? <= 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(cx: f64, cy: f64, heading: f64, length: f64, width: f64) -> Obb {
        Obb {
            cx,
            cy,
            heading,
            length,
            width,
        }
    }

    #[test]
    fn identical_boxes_overlap() {
        let a = b(1.0, 2.0, 0.3, 4.0, 2.0);
        assert!(boxes_overlap(&a, &a).unwrap());
    }

    #[test]
    fn distant_boxes_do_not() {
        let a = b(0.0, 0.0, 0.0, 2.0, 2.0);
        let c = b(100.0, 0.0, 1.0, 2.0, 2.0);
        assert!(!boxes_overlap(&a, &c).unwrap());
    }

    #[test]
    fn rotated_corner_case() {
        // A diamond whose tip pokes just past the square's edge.
        let sq = b(0.0, 0.0, 0.0, 2.0, 2.0);
        let diamond = b(2.3, 0.0, std::f64::consts::FRAC_PI_4, 2.0, 2.0);
        assert!(boxes_overlap(&sq, &diamond).unwrap());
        let far = b(2.5, 0.0, std::f64::consts::FRAC_PI_4, 2.0, 2.0);
        assert!(!boxes_overlap(&sq, &far).unwrap());
    }

    #[test]
    fn non_positive_extent_is_rejected() {
        let a = b(0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(boxes_overlap(&a, &a), Err(Error::Contract(_))));
    }

    /// Samples box `a` on a 0.01 m grid in its own frame and checks membership in `b`.
    fn grid_oracle(a: &Obb, b: &Obb) -> bool {
        let step = 0.01;
        let (s, c) = a.heading.sin_cos();
        let nl = (a.length / step).round() as i64;
        let nw = (a.width / step).round() as i64;
        for i in 0..=nl {
            let u = -a.length / 2.0 + i as f64 * a.length / nl as f64;
            for j in 0..=nw {
                let v = -a.width / 2.0 + j as f64 * a.width / nw as f64;
                if b.contains(a.cx + u * c - v * s, a.cy + u * s + v * c) {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn agrees_with_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 1000 {
            let a = b(0.0, 0.0, rng.gen_range(-3.2..3.2), rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.5));
            let c = b(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.2..3.2),
                rng.gen_range(0.5..5.0),
                rng.gen_range(0.5..2.5),
            );
            // Grid resolution cannot resolve contacts thinner than a cell.
            if separation(&a, &c).unwrap().abs() < 0.03 {
                continue;
            }
            assert_eq!(boxes_overlap(&a, &c).unwrap(), grid_oracle(&a, &c), "{a:?} {c:?}");
            checked += 1;
        }
    }
}
