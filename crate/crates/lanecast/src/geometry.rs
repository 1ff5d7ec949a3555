//! Planar geometry primitives shared across the pipeline.
//!
//! All coordinates are meters in a global 2-D frame unless a function says
//! otherwise. Angles are degrees; everything goes through `atan2`-style
//! two-argument trigonometry, never small-angle shortcuts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Displacements below this (per frame, meters) are annotation jitter, not
/// motion, for heading purposes.
pub const EPS_STILL: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    /// No frame pair of the trajectory moves at least `EPS_STILL`.
    #[error("agent {0} has no usable heading (stationary)")]
    StationaryAgent(String),
    #[error("zero-norm direction")]
    DegenerateDirection,
}

/// A position in the global frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Displacement `self - other`.
    pub fn sub(&self, other: &Point2) -> Direction2 {
        Direction2::new(self.x - other.x, self.y - other.y)
    }

    pub fn offset(&self, d: &Direction2) -> Point2 {
        Point2::new(self.x + d.dx, self.y + d.dy)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A displacement / direction vector, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction2 {
    pub dx: f64,
    pub dy: f64,
}

impl Direction2 {
    pub fn new(dx: f64, dy: f64) -> Self {
        Direction2 { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn normalized(&self) -> Result<Direction2, GeometryError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(GeometryError::DegenerateDirection);
        }
        Ok(Direction2::new(self.dx / n, self.dy / n))
    }

    pub fn dot(&self, other: &Direction2) -> f64 {
        self.dx * other.dx + self.dy * other.dy
    }

    /// z-component of the 2-D cross product `self x other`.
    pub fn cross(&self, other: &Direction2) -> f64 {
        self.dx * other.dy - self.dy * other.dx
    }

    pub fn scaled(&self, s: f64) -> Direction2 {
        Direction2::new(self.dx * s, self.dy * s)
    }
}

/// Unsigned smallest angle between two directions, degrees in `[0, 180]`.
pub fn angle_between(a: &Direction2, b: &Direction2) -> Result<f64, GeometryError> {
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(GeometryError::DegenerateDirection);
    }
    Ok(a.cross(b).abs().atan2(a.dot(b)).to_degrees())
}

/// Signed angle from `a` to `b`, degrees in `(-180, 180]`; positive is
/// counter-clockwise.
pub fn signed_angle(a: &Direction2, b: &Direction2) -> Result<f64, GeometryError> {
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(GeometryError::DegenerateDirection);
    }
    Ok(a.cross(b).atan2(a.dot(b)).to_degrees())
}

/// Rotate `p` about `center` by `theta_deg` degrees (counter-clockwise).
pub fn rotate_about(p: &Point2, center: &Point2, theta_deg: f64) -> Point2 {
    let (s, c) = theta_deg.to_radians().sin_cos();
    let dx = p.x - center.x;
    let dy = p.y - center.y;
    Point2::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy)
}

/// Rotate a direction vector by `theta_deg` degrees.
pub fn rotate_dir(d: &Direction2, theta_deg: f64) -> Direction2 {
    let (s, c) = theta_deg.to_radians().sin_cos();
    Direction2::new(c * d.dx - s * d.dy, s * d.dx + c * d.dy)
}
