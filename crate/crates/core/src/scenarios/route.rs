use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutePoint {
    pub x: f64,
    pub y: f64,
    pub tangent: f64,
    pub speed_limit: f64,
}

/// Reference path sampled at roughly 1 m of arc length. Arc length is
/// measured from the first sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Vec<RoutePoint>", into = "Vec<RoutePoint>")]
pub struct Route {
    points: Vec<RoutePoint>,
    arc: Vec<f64>,
}

impl PartialEq for Route {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
    }
}

impl From<Vec<RoutePoint>> for Route {
    fn from(points: Vec<RoutePoint>) -> Self {
        let mut arc = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                let q = &points[i - 1];
                acc += (p.x - q.x).hypot(p.y - q.y);
            }
            arc.push(acc);
        }
        Route { points, arc }
    }
}

impl From<Route> for Vec<RoutePoint> {
    fn from(r: Route) -> Self {
        r.points
    }
}

/// Projection of a point onto the route polyline.
#[derive(Clone, Copy, Debug)]
pub struct Projection<S> {
    pub segment: usize,
    /// Arc length of the foot point.
    pub s: S,
    /// Signed offset, positive to the left of the direction of travel.
    pub lateral: S,
    /// Route heading, interpolated between the segment's end samples.
    pub tangent: S,
    pub speed_limit: f64,
    /// Gradients of `s`, `lateral` and `tangent` with respect to `(x, y)`;
    /// constant within a segment.
    pub d_s: [f64; 2],
    pub d_lateral: [f64; 2],
    pub d_tangent: [f64; 2],
}

impl Route {
    pub fn new(points: Vec<RoutePoint>) -> Self {
        points.into()
    }

    pub fn points(&self) -> &[RoutePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.arc.last().copied().unwrap_or(0.0)
    }

    pub fn arc_lengths(&self) -> &[f64] {
        &self.arc
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::invalid("route needs at least two samples"));
        }
        for w in self.arc.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("route arc length is not strictly increasing"));
            }
        }
        if self
            .points
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.tangent.is_finite() && p.speed_limit.is_finite()))
        {
            return Err(Error::invalid("route contains non-finite samples"));
        }
        Ok(())
    }

    fn nearest_segment(&self, x: f64, y: f64) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.points.len() - 1 {
            let (p, q) = (&self.points[i], &self.points[i + 1]);
            let (dx, dy) = (q.x - p.x, q.y - p.y);
            let len2 = dx * dx + dy * dy;
            let t = (((x - p.x) * dx + (y - p.y) * dy) / len2).clamp(0.0, 1.0);
            let (ex, ey) = (p.x + t * dx - x, p.y + t * dy - y);
            let d2 = ex * ex + ey * ey;
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        best.1
    }

    /// Projects `(x, y)` onto the nearest segment. Offsets and arc length
    /// are measured against that segment's line, so points beyond either
    /// end extrapolate linearly.
    pub fn project<S: Scalar>(&self, x: S, y: S) -> Projection<S> {
        let i = self.nearest_segment(x.re(), y.re());
        let (p, q) = (&self.points[i], &self.points[i + 1]);
        let (dx, dy) = (q.x - p.x, q.y - p.y);
        let len = dx.hypot(dy);
        let (ux, uy) = (dx / len, dy / len);
        let (rx, ry) = (x - p.x, y - p.y);
        let along = rx * ux + ry * uy;
        let lateral = ry * ux - rx * uy;
        let frac = along / len;
        let turn = wrap_angle(q.tangent - p.tangent);
        let (tangent, d_tangent) = if frac.re() <= 0.0 {
            (S::cst(p.tangent), [0.0, 0.0])
        } else if frac.re() >= 1.0 {
            (S::cst(q.tangent), [0.0, 0.0])
        } else {
            (frac * turn + p.tangent, [ux * turn / len, uy * turn / len])
        };
        Projection {
            segment: i,
            s: along + self.arc[i],
            lateral,
            tangent,
            speed_limit: p.speed_limit,
            d_s: [ux, uy],
            d_lateral: [-uy, ux],
            d_tangent,
        }
    }

    /// Interpolated sample at arc length `s`, clamped to the route ends.
    pub fn sample_at(&self, s: f64) -> RoutePoint {
        let n = self.points.len();
        if s <= 0.0 {
            return self.points[0];
        }
        if s >= self.arc[n - 1] {
            return self.points[n - 1];
        }
        let i = match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => return self.points[i],
            Err(i) => i - 1,
        };
        let (p, q) = (&self.points[i], &self.points[i + 1]);
        let t = (s - self.arc[i]) / (self.arc[i + 1] - self.arc[i]);
        RoutePoint {
            x: p.x + t * (q.x - p.x),
            y: p.y + t * (q.y - p.y),
            tangent: wrap_angle(p.tangent + t * wrap_angle(q.tangent - p.tangent)),
            speed_limit: p.speed_limit,
        }
    }

    /// Sub-route covering arc lengths `[from, to]`, re-based to start at 0.
    pub fn crop(&self, from: f64, to: f64) -> Route {
        let lo = self.arc.partition_point(|&a| a < from).saturating_sub(1);
        let hi = (self.arc.partition_point(|&a| a <= to) + 1).min(self.points.len());
        let hi = hi.max(lo + 2).min(self.points.len());
        Route::new(self.points[lo..hi].to_vec())
    }

    /// Arc length of the first sample of a route produced by [`Route::crop`].
    pub fn crop_offset(&self, from: f64) -> f64 {
        let lo = self.arc.partition_point(|&a| a < from).saturating_sub(1);
        self.arc[lo]
    }
}

/// Piecewise route built from straight and circular pieces, sampled every
/// metre of arc length.
#[derive(Clone, Debug)]
pub struct RouteBuilder {
    x: f64,
    y: f64,
    heading: f64,
    speed_limit: f64,
    points: Vec<RoutePoint>,
}

impl RouteBuilder {
    pub fn new(x: f64, y: f64, heading: f64, speed_limit: f64) -> Self {
        Self {
            x,
            y,
            heading,
            speed_limit,
            points: vec![RoutePoint {
                x,
                y,
                tangent: heading,
                speed_limit,
            }],
        }
    }

    pub fn speed_limit(mut self, v: f64) -> Self {
        self.speed_limit = v;
        self
    }

    pub fn straight(mut self, length: f64) -> Self {
        let n = length.round().max(1.0) as usize;
        let step = length / n as f64;
        for _ in 0..n {
            self.x += step * self.heading.cos();
            self.y += step * self.heading.sin();
            self.push();
        }
        self
    }

    /// Circular arc; positive `angle` turns left.
    pub fn arc(mut self, radius: f64, angle: f64) -> Self {
        let length = radius * angle.abs();
        let n = length.round().max(1.0) as usize;
        let dphi = angle / n as f64;
        let sign = angle.signum();
        for _ in 0..n {
            let cx = self.x - sign * radius * self.heading.sin();
            let cy = self.y + sign * radius * self.heading.cos();
            self.heading += dphi;
            self.x = cx + sign * radius * self.heading.sin();
            self.y = cy - sign * radius * self.heading.cos();
            self.push();
        }
        self
    }

    fn push(&mut self) {
        self.points.push(RoutePoint {
            x: self.x,
            y: self.y,
            tangent: wrap_angle(self.heading),
            speed_limit: self.speed_limit,
        });
    }

    pub fn build(self) -> Route {
        Route::new(self.points)
    }
}
