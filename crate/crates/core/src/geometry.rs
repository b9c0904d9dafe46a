//! Minimal planar geometry for marker analysis.

use serde::{Deserialize, Serialize};

/// A point in the camera plane, millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translate(self, dx: f64, dy: f64) -> Point {
        Point::new(self.x + dx, self.y + dy)
    }
}

/// Infinite line through two distinct points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: Point,
    pub to: Point,
}

impl Line {
    /// Signed perpendicular distance of `p`; positive on the left of `from -> to`.
    pub fn signed_distance(&self, p: Point) -> f64 {
        let dx = self.to.x - self.from.x;
        let dy = self.to.y - self.from.y;
        let cross = dx * (p.y - self.from.y) - dy * (p.x - self.from.x);
        cross / dx.hypot(dy)
    }

    pub fn distance(&self, p: Point) -> f64 {
        self.signed_distance(p).abs()
    }
}
