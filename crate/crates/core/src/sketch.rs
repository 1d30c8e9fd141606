//! Sketch domain types: traces, the ordered trace set and the drawing region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TraceId};
use crate::geometry::{BezierChain, Point2};

pub type Rgb = [f64; 3];
pub type Rgba = [f64; 4];

pub const WHITE: Rgb = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    User,
    Agent,
}

/// One stroke: a Bézier chain with an RGBA color and a width in canvas units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: TraceId,
    pub chain: BezierChain,
    pub color: Rgba,
    pub width: f64,
    pub origin: Origin,
    #[serde(default)]
    pub frozen: bool,
}

impl Trace {
    /// Number of scalar parameters: two per control point, four color
    /// channels and the width.
    pub fn param_len(&self) -> usize {
        2 * self.chain.points().len() + 5
    }

    /// Flattened parameters `[x0, y0, x1, y1, …, r, g, b, a, width]`.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_len());
        for p in self.chain.points() {
            v.push(p.x);
            v.push(p.y);
        }
        v.extend_from_slice(&self.color);
        v.push(self.width);
        v
    }

    pub fn set_params(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_len(), "parameter vector length");
        let n = self.chain.points().len();
        for (i, p) in self.chain.points_mut().iter_mut().enumerate() {
            p.x = v[2 * i];
            p.y = v[2 * i + 1];
        }
        self.color.copy_from_slice(&v[2 * n..2 * n + 4]);
        self.width = v[2 * n + 4];
    }

    pub fn is_finite(&self) -> bool {
        self.chain.is_finite() && self.color.iter().all(|c| c.is_finite()) && self.width.is_finite()
    }

    /// Same number of control points as `other`, so the two can be compared
    /// parameter by parameter.
    pub fn congruent(&self, other: &Trace) -> bool {
        self.chain.points().len() == other.chain.points().len()
    }
}

/// Ordered trace set. User traces (`K₀` of them) always precede agent traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    traces: Vec<Trace>,
    pub background: Rgb,
    /// Width over height of the drawing. Canvas units span the longer side.
    pub aspect: f64,
    next_id: u64,
}

impl Default for Sketch {
    fn default() -> Self {
        Self::new(WHITE)
    }
}

/// Parameters for a trace that has not been assigned an id yet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewTrace {
    pub points: Vec<Point2>,
    pub color: Rgba,
    pub width: f64,
    pub origin: Origin,
    #[serde(default)]
    pub frozen: bool,
}

impl Sketch {
    pub fn new(background: Rgb) -> Self {
        Self { traces: Vec::new(), background, aspect: 1.0, next_id: 0 }
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn traces_mut(&mut self) -> &mut [Trace] {
        &mut self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn user_count(&self) -> usize {
        self.traces.iter().take_while(|t| t.origin == Origin::User).count()
    }

    pub fn agent_count(&self) -> usize {
        self.traces.len() - self.user_count()
    }

    pub fn user_traces(&self) -> &[Trace] {
        &self.traces[..self.user_count()]
    }

    pub fn agent_traces(&self) -> &[Trace] {
        &self.traces[self.user_count()..]
    }

    pub fn index_of(&self, id: TraceId) -> Option<usize> {
        self.traces.iter().position(|t| t.id == id)
    }

    pub fn get(&self, id: TraceId) -> Option<&Trace> {
        self.traces.iter().find(|t| t.id == id)
    }

    pub fn get_mut(&mut self, id: TraceId) -> Option<&mut Trace> {
        self.traces.iter_mut().find(|t| t.id == id)
    }

    /// Adds a trace, placing user traces at the end of the user block and
    /// agent traces at the end of the sketch. Returns its index.
    pub fn add(&mut self, spec: NewTrace) -> Result<usize> {
        let chain = BezierChain::new(spec.points)?;
        if !(spec.width > 0.0) {
            return Err(Error::Input(format!("stroke width must be positive, got {}", spec.width)));
        }
        let id = TraceId(self.next_id);
        self.next_id += 1;
        let trace = Trace { id, chain, color: spec.color, width: spec.width, origin: spec.origin, frozen: spec.frozen };
        let at = match spec.origin {
            Origin::User => self.user_count(),
            Origin::Agent => self.traces.len(),
        };
        self.traces.insert(at, trace);
        Ok(at)
    }

    pub fn remove(&mut self, id: TraceId) -> Option<(usize, Trace)> {
        let i = self.index_of(id)?;
        Some((i, self.traces.remove(i)))
    }

    /// Keeps only the traces for which `keep` is true, preserving order.
    pub fn retain(&mut self, mut keep: impl FnMut(&Trace) -> bool) {
        self.traces.retain(|t| keep(t));
    }

    /// A copy containing only the user traces.
    pub fn user_only(&self) -> Sketch {
        let mut s = self.clone();
        s.traces.truncate(self.user_count());
        s
    }

    /// Replaces the trace list wholesale, e.g. with a stored reference.
    /// Ordering (user before agent) is validated.
    pub fn with_traces(&self, traces: Vec<Trace>) -> Result<Sketch> {
        let k0 = traces.iter().take_while(|t| t.origin == Origin::User).count();
        if traces[k0..].iter().any(|t| t.origin == Origin::User) {
            return Err(Error::contract("user traces must precede agent traces"));
        }
        let next_id = traces.iter().map(|t| t.id.0 + 1).max().unwrap_or(0).max(self.next_id);
        Ok(Sketch { traces, background: self.background, aspect: self.aspect, next_id })
    }
}

/// Axis-aligned drawing region in canvas units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if !ok(x0, x1) || !ok(y0, y1) {
            return Err(Error::Input(format!(
                "region ({x0}, {y0}, {x1}, {y1}) must satisfy 0 ≤ x0 < x1 ≤ 1 and 0 ≤ y0 < y1 ≤ 1"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    /// Half-open containment so adjacent regions tile the canvas.
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> Point2 {
        Point2::new(
            self.x0 + (self.x1 - self.x0) * rng.random::<f64>(),
            self.y0 + (self.y1 - self.y0) * rng.random::<f64>(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn new_trace(origin: Origin) -> NewTrace {
        NewTrace {
            points: vec![Point2::new(0.1, 0.1), Point2::new(0.2, 0.2), Point2::new(0.3, 0.3), Point2::new(0.4, 0.4)],
            color: [0.0, 0.0, 0.0, 1.0],
            width: 0.01,
            origin,
            frozen: false,
        }
    }

    #[test]
    fn user_traces_stay_in_front() {
        let mut s = Sketch::default();
        s.add(new_trace(Origin::Agent)).unwrap();
        s.add(new_trace(Origin::User)).unwrap();
        s.add(new_trace(Origin::Agent)).unwrap();
        s.add(new_trace(Origin::User)).unwrap();
        let origins: Vec<_> = s.traces().iter().map(|t| t.origin).collect();
        assert_eq!(origins, [Origin::User, Origin::User, Origin::Agent, Origin::Agent]);
        assert_eq!((s.user_count(), s.agent_count()), (2, 2));
    }

    #[test]
    fn params_round_trip() {
        let mut s = Sketch::default();
        s.add(new_trace(Origin::User)).unwrap();
        let t = &mut s.traces_mut()[0];
        let mut p = t.params();
        assert_eq!(p.len(), 13);
        p[0] = 0.9;
        p[12] = 0.5;
        t.set_params(&p);
        assert_eq!(t.chain.first().x, 0.9);
        assert_eq!(t.width, 0.5);
    }

    #[test]
    fn region_bounds_are_checked() {
        assert!(Region::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(Region::new(0.0, 0.0, 1.0, 1.1).is_err());
        let r = Region::new(0.0, 0.0, 0.5, 1.0).unwrap();
        assert!(r.contains(Point2::new(0.25, 0.5)));
        assert!(!r.contains(Point2::new(0.5, 0.5)));
    }

    #[test]
    fn non_positive_width_is_rejected() {
        let mut s = Sketch::default();
        let mut t = new_trace(Origin::User);
        t.width = 0.0;
        assert!(s.add(t).is_err());
    }
}
