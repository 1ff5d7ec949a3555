//! Agent and scene domain types plus frame-time conventions.

use serde::{Deserialize, Serialize};

use crate::geometry::{signed_angle, Direction2, GeometryError, Point2, EPS_STILL};

/// Annotation frame rate, Hz. All frame indices tick at this rate.
pub const FRAME_RATE_HZ: f64 = 2.0;

/// Frame-window conventions for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub frame_rate_hz: f64,
    /// History frames fed to the motion encoder, current frame included.
    pub history_frames: usize,
    /// Prediction horizon in frames (12 frames = 6 s at 2 Hz).
    pub horizon_frames: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            frame_rate_hz: FRAME_RATE_HZ,
            history_frames: 4,
            horizon_frames: 12,
        }
    }
}

impl FrameConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }
}

/// Timestamped 2-D positions of one agent at a fixed frame rate.
///
/// Frame indices are strictly increasing and contiguous; length >= 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: String,
    pub frames: Vec<(i64, Point2)>,
    pub frame_rate_hz: f64,
}

impl Trajectory {
    pub fn new(agent_id: impl Into<String>, frames: Vec<(i64, Point2)>) -> Self {
        let traj = Trajectory {
            agent_id: agent_id.into(),
            frames,
            frame_rate_hz: FRAME_RATE_HZ,
        };
        debug_assert!(traj.is_valid(), "invalid trajectory for {}", traj.agent_id);
        traj
    }

    pub fn is_valid(&self) -> bool {
        self.frames.len() >= 2
            && self.frames.windows(2).all(|w| w[1].0 == w[0].0 + 1)
            && self.frames.iter().all(|(_, p)| p.is_finite())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first_frame(&self) -> i64 {
        self.frames[0].0
    }

    pub fn last_frame(&self) -> i64 {
        self.frames[self.frames.len() - 1].0
    }

    pub fn position_at(&self, frame: i64) -> Option<Point2> {
        let off = frame.checked_sub(self.first_frame())?;
        if off < 0 || off as usize >= self.frames.len() {
            return None;
        }
        Some(self.frames[off as usize].1)
    }

    pub fn positions(&self) -> impl Iterator<Item = Point2> + '_ {
        self.frames.iter().map(|(_, p)| *p)
    }

    pub fn last_position(&self) -> Point2 {
        self.frames[self.frames.len() - 1].1
    }

    /// Heading at frame `t`: the displacement from frame `t-1` to `t`.
    ///
    /// If that displacement is below `EPS_STILL` (noise-level), the most
    /// recent earlier frame pair with a real displacement is used instead.
    pub fn heading_of(&self, t: i64) -> Result<Direction2, GeometryError> {
        let first = self.first_frame();
        if t <= first || t > self.last_frame() {
            return Err(GeometryError::StationaryAgent(self.agent_id.clone()));
        }
        let mut frame = t;
        while frame > first {
            let cur = self.position_at(frame).unwrap();
            let prev = self.position_at(frame - 1).unwrap();
            let d = cur.sub(&prev);
            if d.norm() >= EPS_STILL {
                return Ok(d);
            }
            frame -= 1;
        }
        Err(GeometryError::StationaryAgent(self.agent_id.clone()))
    }

    pub fn map_positions(&self, mut f: impl FnMut(&Point2) -> Point2) -> Trajectory {
        Trajectory {
            agent_id: self.agent_id.clone(),
            frames: self.frames.iter().map(|(t, p)| (*t, f(p))).collect(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentClass {
    Vehicle,
}

/// One target agent: observed history ending at the current frame, plus the
/// ground-truth future. History and future are temporally adjacent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: String,
    pub history: Trajectory,
    pub future: Trajectory,
    pub class_label: AgentClass,
}

impl AgentRecord {
    pub fn new(agent_id: impl Into<String>, history: Trajectory, future: Trajectory) -> Self {
        let rec = AgentRecord {
            agent_id: agent_id.into(),
            history,
            future,
            class_label: AgentClass::Vehicle,
        };
        debug_assert_eq!(rec.future.first_frame(), rec.history.last_frame() + 1);
        rec
    }

    /// Current position: last observed history frame.
    pub fn current_position(&self) -> Point2 {
        self.history.last_position()
    }

    pub fn current_frame(&self) -> i64 {
        self.history.last_frame()
    }

    /// Heading at the current frame, with the noise fallback of `heading_of`.
    pub fn current_heading(&self) -> Result<Direction2, GeometryError> {
        self.history.heading_of(self.history.last_frame())
    }

    /// Cumulative signed heading change over the future, degrees.
    ///
    /// Walks the displacements of [current, future...], ignoring noise-level
    /// steps, and sums signed turn angles between consecutive displacements.
    pub fn cumulative_future_turn(&self) -> Result<f64, GeometryError> {
        let mut pts = vec![self.current_position()];
        pts.extend(self.future.positions());
        let segs: Vec<Direction2> = pts
            .windows(2)
            .map(|w| w[1].sub(&w[0]))
            .filter(|d| d.norm() >= EPS_STILL)
            .collect();
        if segs.len() < 2 {
            if segs.is_empty() {
                return Err(GeometryError::StationaryAgent(self.agent_id.clone()));
            }
            return Ok(0.0);
        }
        let mut total = 0.0;
        for w in segs.windows(2) {
            total += signed_angle(&w[0], &w[1])?;
        }
        Ok(total)
    }
}

/// Top-down boolean drivable-area mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRaster {
    /// Global position of the cell (0, 0) corner.
    pub origin: Point2,
    /// Meters per cell, > 0.
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major drivable mask, `width * height` entries.
    pub grid: Vec<bool>,
}

impl OccupancyRaster {
    pub fn is_valid(&self) -> bool {
        self.cell_size > 0.0 && self.grid.len() == self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// The unit of storage, augmentation, and batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub agents: Vec<AgentRecord>,
    pub lane_chunks: Vec<crate::lane::LaneChunk>,
    pub occupancy: Option<OccupancyRaster>,
    pub split_tag: Option<Split>,
}
