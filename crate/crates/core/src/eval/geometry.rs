//! Oriented rectangles and the separating-axis overlap test.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: [f64; 2], heading: f64, half_length: f64, half_width: f64) -> Self {
        Self {
            center,
            heading,
            half_length,
            half_width,
        }
    }

    /// Unit vectors along the length and the width.
    pub fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [u, v] = self.axes();
        let (l, w) = (self.half_length, self.half_width);
        let at = |a: f64, b: f64| [self.center[0] + a * u[0] + b * v[0], self.center[1] + a * u[1] + b * v[1]];
        [at(l, w), at(-l, w), at(-l, -w), at(l, -w)]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [u, v] = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        (d[0] * u[0] + d[1] * u[1]).abs() <= self.half_length && (d[0] * v[0] + d[1] * v[1]).abs() <= self.half_width
    }

    /// Half extent of the box's projection onto unit axis `n`.
    fn radius_along(&self, n: [f64; 2]) -> f64 {
        let [u, v] = self.axes();
        self.half_length * (u[0] * n[0] + u[1] * n[1]).abs() + self.half_width * (v[0] * n[0] + v[1] * n[1]).abs()
    }

    /// True when the closed rectangles intersect. Touching counts.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let d = [other.center[0] - self.center[0], other.center[1] - self.center[1]];
        self.axes().into_iter().chain(other.axes()).all(|n| {
            let gap = (d[0] * n[0] + d[1] * n[1]).abs();
            gap <= self.radius_along(n) + other.radius_along(n)
        })
    }
}
