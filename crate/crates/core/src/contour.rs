//! Outer-boundary tracing (Suzuki-Abe border following) and arc-length
//! navigation along the traced chain.

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::raster::{largest_component, Mask};

/// 8-neighbour offsets, clockwise on screen (y grows downward), starting east.
const DIRS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

const DIAG: f64 = std::f64::consts::SQRT_2;

/// Closed, ordered contour with positive shoelace area. Index 0 is the
/// topmost-then-leftmost pixel of the component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryChain {
    pub points: Vec<[i64; 2]>,
}

fn dir_index(from: [i64; 2], to: [i64; 2]) -> usize {
    let d = (to[0] - from[0], to[1] - from[1]);
    DIRS.iter().position(|&o| o == d).expect("chain points must be 8-neighbours")
}

/// Trace the outer border of the largest 8-connected tissue component.
pub fn trace_boundary(mask: &Mask) -> Result<BoundaryChain> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let comp = largest_component(mask);
    let start = (0..comp.height)
        .flat_map(|y| (0..comp.width).map(move |x| (x, y)))
        .find(|&(x, y)| comp.get(x, y))
        .map(|(x, y)| [x as i64, y as i64])
        .ok_or(Error::EmptyMask)?;
    let on = |p: [i64; 2]| comp.get_i(p[0], p[1]);
    let step = |p: [i64; 2], d: usize| [p[0] + DIRS[d].0, p[1] + DIRS[d].1];

    // first neighbour: clockwise search starting west of the start pixel
    let first = (0..8).map(|k| (4 + k) % 8).map(|d| step(start, d)).find(|&q| on(q));
    let Some(p1) = first else {
        return Ok(BoundaryChain { points: vec![start] });
    };

    let mut points = Vec::new();
    let (mut p2, mut p3) = (p1, start);
    loop {
        let d2 = dir_index(p3, p2);
        // counter-clockwise search beginning just after p2
        let p4 = (1..=8)
            .map(|k| (d2 + 8 - k) % 8)
            .map(|d| step(p3, d))
            .find(|&q| on(q))
            .expect("p3 has at least one tissue neighbour");
        points.push(p3);
        if p4 == start && p3 == p1 {
            break;
        }
        p2 = p3;
        p3 = p4;
    }

    let mut chain = BoundaryChain { points };
    if chain.signed_area() < 0.0 {
        chain.points[1..].reverse();
    }
    Ok(chain)
}

impl BoundaryChain {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Point {
        let p = self.points[i % self.points.len()];
        [p[0] as f64, p[1] as f64]
    }

    /// Length of the step from `i` to its successor (1 or √2).
    #[inline]
    pub fn step_length(&self, i: usize) -> f64 {
        let n = self.points.len();
        let a = self.points[i % n];
        let b = self.points[(i + 1) % n];
        if a == b {
            0.0
        } else if a[0] != b[0] && a[1] != b[1] {
            DIAG
        } else {
            1.0
        }
    }

    pub fn perimeter(&self) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        (0..self.points.len()).map(|i| self.step_length(i)).sum()
    }

    /// Shoelace area in raw pixel coordinates.
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        let mut acc = 0i64;
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            acc += a[0] * b[1] - b[0] * a[1];
        }
        acc as f64 / 2.0
    }

    /// Walk forward from `start` until the accumulated arc length reaches
    /// `distance`, wrapping around the closed chain. Returns the point and
    /// its index.
    pub fn point_at_arclength(&self, start: usize, distance: f64) -> (Point, usize) {
        let n = self.points.len();
        let start = start % n;
        let perimeter = self.perimeter();
        if n < 2 || perimeter == 0.0 || distance <= 0.0 {
            return (self.point(start), start);
        }
        let eps = 1e-9 * perimeter.max(1.0);
        let mut remaining = distance.rem_euclid(perimeter);
        if remaining < eps || perimeter - remaining < eps {
            remaining = 0.0;
        }
        let mut idx = start;
        let mut acc = 0.0;
        while acc + eps < remaining {
            acc += self.step_length(idx);
            idx = (idx + 1) % n;
        }
        (self.point(idx), idx)
    }

    /// Like [`point_at_arclength`](Self::point_at_arclength) but
    /// interpolated linearly inside the final step, so the result moves
    /// continuously with `distance`.
    pub fn interpolate_at_arclength(&self, start: usize, distance: f64) -> Point {
        let n = self.points.len();
        let start = start % n;
        let perimeter = self.perimeter();
        if n < 2 || perimeter == 0.0 {
            return self.point(start);
        }
        let mut remaining = distance.rem_euclid(perimeter);
        let mut idx = start;
        loop {
            let step = self.step_length(idx);
            if remaining <= step {
                let t = remaining / step;
                return crate::geometry::lerp(self.point(idx), self.point((idx + 1) % n), t);
            }
            remaining -= step;
            idx = (idx + 1) % n;
        }
    }

    /// Forward arc length from index `a` to index `b`.
    pub fn arc_between(&self, a: usize, b: usize) -> f64 {
        let n = self.points.len();
        let (a, b) = (a % n, b % n);
        let mut acc = 0.0;
        let mut i = a;
        while i != b {
            acc += self.step_length(i);
            i = (i + 1) % n;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Mask {
        let mut m = Mask::new(w, h);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn square_perimeter_pixels() {
        let chain = trace_boundary(&square_mask(20, 20, 5, 5, 10)).unwrap();
        assert_eq!(chain.len(), 36);
        assert_eq!(chain.points[0], [5, 5]);
        let mut expected: Vec<[i64; 2]> = Vec::new();
        for y in 5..15i64 {
            for x in 5..15i64 {
                if x == 5 || x == 14 || y == 5 || y == 14 {
                    expected.push([x, y]);
                }
            }
        }
        let mut got = chain.points.clone();
        got.sort();
        expected.sort();
        assert_eq!(got, expected);
        assert!(chain.signed_area() > 0.0);
        assert_eq!(chain.perimeter(), 36.0);
    }

    #[test]
    fn single_pixel_chain() {
        let chain = trace_boundary(&square_mask(5, 5, 2, 2, 1)).unwrap();
        assert_eq!(chain.points, vec![[2, 2]]);
        assert_eq!(chain.point_at_arclength(0, 10.0).1, 0);
    }

    #[test]
    fn largest_component_only() {
        let mut m = square_mask(40, 40, 20, 20, 10);
        for y in 2..5 {
            for x in 2..5 {
                m.set(x, y, true);
            }
        }
        let chain = trace_boundary(&m).unwrap();
        assert!(chain.points.iter().all(|p| p[0] >= 20 && p[1] >= 20));
    }

    #[test]
    fn empty_mask_is_error() {
        assert!(trace_boundary(&Mask::new(4, 4)).is_err());
    }

    #[test]
    fn interpolated_walk_is_continuous() {
        let chain = trace_boundary(&square_mask(20, 20, 5, 5, 10)).unwrap();
        assert_eq!(chain.interpolate_at_arclength(0, 0.0), [5.0, 5.0]);
        assert_eq!(chain.interpolate_at_arclength(0, 2.5), [7.5, 5.0]);
        let p = chain.perimeter();
        let q = chain.interpolate_at_arclength(0, p - 0.25);
        assert!((q[0] - 5.0).abs() < 1e-9 && (q[1] - 5.25).abs() < 1e-9, "{q:?}");
    }

    #[test]
    fn arclength_walk() {
        let chain = trace_boundary(&square_mask(20, 20, 5, 5, 10)).unwrap();
        assert_eq!(chain.point_at_arclength(3, 0.0), (chain.point(3), 3));
        // from the top-left corner, 5 px along the first edge
        let (p, i) = chain.point_at_arclength(0, 5.0);
        assert_eq!(i, 5);
        let first_dir = [chain.points[1][0] - chain.points[0][0], chain.points[1][1] - chain.points[0][1]];
        assert_eq!(p, [5.0 + 5.0 * first_dir[0] as f64, 5.0 + 5.0 * first_dir[1] as f64]);
        // wrapping
        assert_eq!(chain.point_at_arclength(0, 36.0 + 5.0).1, 5);
        assert_eq!(chain.point_at_arclength(7, 36.0).1, 7);
    }

    #[test]
    fn diagonal_steps_count_sqrt2() {
        // diamond: all steps diagonal
        let mut m = Mask::new(11, 11);
        for y in 0..11i64 {
            for x in 0..11i64 {
                if (x - 5).abs() + (y - 5).abs() <= 4 {
                    m.set(x as usize, y as usize, true);
                }
            }
        }
        let chain = trace_boundary(&m).unwrap();
        assert_eq!(chain.len(), 16);
        assert!((chain.perimeter() - 16.0 * DIAG).abs() < 1e-9);
    }
}
