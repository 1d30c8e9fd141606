//! Cubic Bézier chains in normalized canvas coordinates.
//!
//! A chain of `n` cubic segments is stored as `3n + 1` control points; segment
//! `s` uses points `3s..=3s+3`, so neighbouring segments share an endpoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// True when the point lies on the unit canvas. Optimization may push
    /// points outside temporarily; this is only a validity report.
    pub fn in_canvas(self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// A validated chain of cubic segments (`4 + 3n` control points).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct BezierChain {
    points: Vec<Point2>,
}

impl BezierChain {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < 4 || points.len() % 3 != 1 {
            return Err(Error::contract(format!(
                "a Bézier chain needs 4 + 3n control points, got {}",
                points.len()
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    /// Mutable access to coordinates. The point count cannot change through
    /// this slice, so the chain invariant holds.
    pub fn points_mut(&mut self) -> &mut [Point2] {
        &mut self.points
    }

    pub fn segment_count(&self) -> usize {
        (self.points.len() - 1) / 3
    }

    pub fn segment(&self, s: usize) -> [Point2; 4] {
        let p = &self.points[3 * s..3 * s + 4];
        [p[0], p[1], p[2], p[3]]
    }

    pub fn first(&self) -> Point2 {
        self.points[0]
    }

    pub fn last(&self) -> Point2 {
        self.points[self.points.len() - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }

    pub fn in_canvas(&self) -> bool {
        self.points.iter().all(|p| p.in_canvas())
    }
}

impl TryFrom<Vec<Point2>> for BezierChain {
    type Error = Error;
    fn try_from(points: Vec<Point2>) -> Result<Self> {
        BezierChain::new(points)
    }
}

impl From<BezierChain> for Vec<Point2> {
    fn from(chain: BezierChain) -> Self {
        chain.points
    }
}

/// Cubic Bernstein basis at `t`.
#[inline]
pub fn bernstein(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t]
}

pub fn eval_segment(ctrl: &[Point2; 4], t: f64) -> Result<Point2> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("segment parameter t={t} outside [0, 1]")));
    }
    Ok(eval_unchecked(ctrl, t))
}

#[inline]
fn eval_unchecked(ctrl: &[Point2; 4], t: f64) -> Point2 {
    // Exact endpoints regardless of rounding in the basis.
    if t == 0.0 {
        return ctrl[0];
    }
    if t == 1.0 {
        return ctrl[3];
    }
    let b = bernstein(t);
    let mut out = Point2::default();
    for (w, p) in b.iter().zip(ctrl) {
        out.x += w * p.x;
        out.y += w * p.y;
    }
    out
}

/// Parameter of polyline vertex `j` within its segment, for `S` samples.
#[inline]
pub(crate) fn sample_t(j: usize, samples_per_segment: usize) -> f64 {
    j as f64 / (samples_per_segment - 1) as f64
}

/// Samples every segment on a uniform `t` grid of `S` points; shared segment
/// endpoints appear once, giving `n·S − (n − 1)` points.
pub fn polyline(chain: &BezierChain, samples_per_segment: usize) -> Result<Vec<Point2>> {
    if samples_per_segment < 2 {
        return Err(Error::Config(format!(
            "samples per segment must be at least 2, got {samples_per_segment}"
        )));
    }
    let n = chain.segment_count();
    let mut out = Vec::with_capacity(n * samples_per_segment - (n - 1));
    for s in 0..n {
        let ctrl = chain.segment(s);
        let start = if s == 0 { 0 } else { 1 };
        for j in start..samples_per_segment {
            out.push(eval_unchecked(&ctrl, sample_t(j, samples_per_segment)));
        }
    }
    Ok(out)
}

/// Minimum Euclidean distance between any control point of `a` and any
/// control point of `b`.
pub fn min_trace_distance(a: &BezierChain, b: &BezierChain) -> f64 {
    min_point_set_distance(a.points(), b.points())
}

pub(crate) fn min_point_set_distance(a: &[Point2], b: &[Point2]) -> f64 {
    a.iter()
        .flat_map(|p| b.iter().map(move |q| p.distance(*q)))
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    #[test]
    fn degenerate_segment_is_a_point() {
        let c = [pt(0.0, 0.0); 4];
        assert_eq!(eval_segment(&c, 0.5).unwrap(), pt(0.0, 0.0));
    }

    #[test]
    fn equispaced_collinear_controls_are_linear() {
        let c = [pt(0.0, 0.0), pt(1.0 / 3.0, 1.0 / 3.0), pt(2.0 / 3.0, 2.0 / 3.0), pt(1.0, 1.0)];
        let p = eval_segment(&c, 0.25).unwrap();
        assert!((p.x - 0.25).abs() < 1e-15 && (p.y - 0.25).abs() < 1e-15);
    }

    #[test]
    fn arch_midpoint_matches_bernstein_sum() {
        let c = [pt(0.0, 0.0), pt(0.0, 1.0), pt(1.0, 1.0), pt(1.0, 0.0)];
        // 1/8·P0 + 3/8·P1 + 3/8·P2 + 1/8·P3
        let expected = pt(3.0 / 8.0 + 1.0 / 8.0, 3.0 / 8.0 + 3.0 / 8.0);
        assert_eq!(expected, pt(0.5, 0.75));
        let p = eval_segment(&c, 0.5).unwrap();
        assert!((p.x - 0.5).abs() < 1e-15 && (p.y - 0.75).abs() < 1e-15);
    }

    #[test]
    fn t_outside_unit_interval_is_rejected() {
        let c = [pt(0.0, 0.0); 4];
        assert!(matches!(eval_segment(&c, 1.5), Err(Error::Domain(_))));
        assert!(matches!(eval_segment(&c, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn chain_length_is_validated() {
        assert!(BezierChain::new(vec![pt(0.0, 0.0); 3]).is_err());
        assert!(BezierChain::new(vec![pt(0.0, 0.0); 5]).is_err());
        assert!(BezierChain::new(vec![pt(0.0, 0.0); 7]).is_ok());
    }

    fn line(a: Point2, b: Point2) -> BezierChain {
        BezierChain::new(vec![a, a + (b - a) * (1.0 / 3.0), a + (b - a) * (2.0 / 3.0), b]).unwrap()
    }

    #[test]
    fn polyline_with_two_samples_is_the_endpoints() {
        let c = line(pt(0.1, 0.2), pt(0.7, 0.9));
        assert_eq!(polyline(&c, 2).unwrap(), vec![pt(0.1, 0.2), pt(0.7, 0.9)]);
    }

    #[test]
    fn polyline_of_straight_segment_is_uniform() {
        let c = line(pt(0.0, 0.0), pt(1.0, 0.0));
        let xs: Vec<f64> = polyline(&c, 5).unwrap().iter().map(|p| p.x).collect();
        for (x, e) in xs.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((x - e).abs() < 1e-15, "{xs:?}");
        }
    }

    #[test]
    fn two_segment_polyline_shares_middle_point() {
        let c = BezierChain::new(vec![
            pt(0.0, 0.0),
            pt(0.1, 0.1),
            pt(0.2, 0.1),
            pt(0.3, 0.0),
            pt(0.4, 0.2),
            pt(0.5, 0.3),
            pt(0.6, 0.0),
        ])
        .unwrap();
        let p = polyline(&c, 3).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p[2], pt(0.3, 0.0));
    }

    #[test]
    fn polyline_rejects_fewer_than_two_samples() {
        let c = line(pt(0.0, 0.0), pt(1.0, 0.0));
        assert!(matches!(polyline(&c, 1), Err(Error::Config(_))));
    }

    #[test]
    fn distance_to_self_is_zero() {
        let c = line(pt(0.1, 0.2), pt(0.7, 0.9));
        assert_eq!(min_trace_distance(&c, &c), 0.0);
    }

    #[test]
    fn distance_between_parallel_rows() {
        let xs = [0.0, 0.2, 0.4, 0.6];
        let a = BezierChain::new(xs.iter().map(|&x| pt(x, 0.0)).collect()).unwrap();
        let b = BezierChain::new(xs.iter().map(|&x| pt(x, 0.3)).collect()).unwrap();
        assert!((min_trace_distance(&a, &b) - 0.3).abs() < 1e-15);
    }

    fn arb_chain() -> impl Strategy<Value = BezierChain> {
        (0usize..3)
            .prop_flat_map(|n| prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 4 + 3 * n))
            .prop_map(|v| BezierChain::new(v.into_iter().map(|(x, y)| pt(x, y)).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn endpoints_are_exact(c in arb_chain()) {
            let seg = c.segment(0);
            prop_assert_eq!(eval_segment(&seg, 0.0).unwrap(), seg[0]);
            prop_assert_eq!(eval_segment(&seg, 1.0).unwrap(), seg[3]);
        }

        #[test]
        fn polyline_length_formula(c in arb_chain(), s in 2usize..20) {
            let n = c.segment_count();
            let p = polyline(&c, s).unwrap();
            prop_assert_eq!(p.len(), n * s - (n - 1));
            prop_assert_eq!(p[0], c.first());
            prop_assert_eq!(*p.last().unwrap(), c.last());
        }

        #[test]
        fn distance_matches_exhaustive_pairs(a in arb_chain(), b in arb_chain()) {
            let mut best = f64::INFINITY;
            for i in 0..a.points().len() {
                for j in 0..b.points().len() {
                    let dx = a.points()[i].x - b.points()[j].x;
                    let dy = a.points()[i].y - b.points()[j].y;
                    best = best.min((dx * dx + dy * dy).sqrt());
                }
            }
            let d = min_trace_distance(&a, &b);
            prop_assert!((d - best).abs() < 1e-15);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, min_trace_distance(&b, &a));
        }
    }
}
