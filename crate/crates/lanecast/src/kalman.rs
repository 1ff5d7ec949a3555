//! Constant-velocity Kalman smoothing of labeled trajectories.
//!
//! Forward filter over state [x, y, vx, vy] followed by an RTS backward
//! pass. Process noise follows the white-acceleration model so the smoother
//! is exactly rotation- and translation-equivariant.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::geometry::Point2;
use crate::scene::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    /// White-acceleration process noise, m/s^2.
    pub process_noise_sigma: f64,
    /// Position measurement noise, m.
    pub measurement_noise_sigma: f64,
    /// Scale of the (isotropic) initial state covariance.
    pub initial_covariance_scale: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            process_noise_sigma: 0.8,
            measurement_noise_sigma: 0.3,
            initial_covariance_scale: 10.0,
        }
    }
}

impl KalmanConfig {
    pub fn is_valid(&self) -> bool {
        self.process_noise_sigma > 0.0
            && self.measurement_noise_sigma > 0.0
            && self.initial_covariance_scale > 0.0
    }
}

/// Smooth a trajectory in place of its measured positions.
///
/// Frame indices are preserved; only positions change. A length-2 input
/// passes through with finite output.
pub fn smooth(traj: &Trajectory, cfg: &KalmanConfig) -> Trajectory {
    assert!(traj.len() >= 2, "smooth requires length >= 2");
    assert!(cfg.is_valid(), "invalid KalmanConfig");
    let dt = 1.0 / traj.frame_rate_hz;
    let n = traj.len();

    let f = Matrix4::new(
        1.0, 0.0, dt, 0.0, //
        0.0, 1.0, 0.0, dt, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    );
    let q2 = cfg.process_noise_sigma * cfg.process_noise_sigma;
    // White-acceleration discretization, isotropic in x/y.
    let q11 = q2 * dt.powi(4) / 4.0;
    let q13 = q2 * dt.powi(3) / 2.0;
    let q33 = q2 * dt.powi(2);
    let q = Matrix4::new(
        q11, 0.0, q13, 0.0, //
        0.0, q11, 0.0, q13, //
        q13, 0.0, q33, 0.0, //
        0.0, q13, 0.0, q33,
    );
    let h = Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0,
    );
    let r = Matrix2::identity() * cfg.measurement_noise_sigma.powi(2);

    let z: Vec<Vector2<f64>> = traj.positions().map(|p| Vector2::new(p.x, p.y)).collect();

    // Initial state: first measurement + first finite-difference velocity.
    let v0 = (z[1] - z[0]) / dt;
    let mut x = Vector4::new(z[0].x, z[0].y, v0.x, v0.y);
    let mut p = Matrix4::identity() * cfg.initial_covariance_scale;

    let mut filtered_x = Vec::with_capacity(n);
    let mut filtered_p = Vec::with_capacity(n);
    let mut predicted_x = Vec::with_capacity(n);
    let mut predicted_p = Vec::with_capacity(n);

    for (k, meas) in z.iter().enumerate() {
        let (xp, pp) = if k == 0 {
            (x, p)
        } else {
            (f * x, f * p * f.transpose() + q)
        };
        predicted_x.push(xp);
        predicted_p.push(pp);

        let innov = meas - h * xp;
        let s = h * pp * h.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance invertible");
        let gain: Matrix4x2<f64> = pp * h.transpose() * s_inv;
        x = xp + gain * innov;
        p = (Matrix4::identity() - gain * h) * pp;
        filtered_x.push(x);
        filtered_p.push(p);
    }

    // RTS backward pass.
    let mut smoothed = vec![Vector4::zeros(); n];
    let mut smoothed_p = vec![Matrix4::zeros(); n];
    smoothed[n - 1] = filtered_x[n - 1];
    smoothed_p[n - 1] = filtered_p[n - 1];
    for k in (0..n - 1).rev() {
        let pp_next = predicted_p[k + 1];
        let c = filtered_p[k]
            * f.transpose()
            * pp_next.try_inverse().expect("predicted covariance invertible");
        smoothed[k] = filtered_x[k] + c * (smoothed[k + 1] - predicted_x[k + 1]);
        smoothed_p[k] = filtered_p[k] + c * (smoothed_p[k + 1] - pp_next) * c.transpose();
    }

    Trajectory {
        agent_id: traj.agent_id.clone(),
        frames: traj
            .frames
            .iter()
            .zip(&smoothed)
            .map(|((t, _), s)| (*t, Point2::new(s.x, s.y)))
            .collect(),
        frame_rate_hz: traj.frame_rate_hz,
    }
}
