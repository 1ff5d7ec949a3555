//! Scene-to-sample conversion: Kalman smoothing, agent-frame transforms,
//! lane inputs, ground-truth lane labels, occupancy patches, and the sample
//! cache file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::generate::DRIVABLE_HALF_WIDTH_M;
use crate::data::DataError;
use crate::geometry::{Direction2, Point2};
use crate::kalman::{smooth, KalmanConfig};
use crate::lane::{
    build_lane_input, point_to_polyline_distance, to_agent_frame, LaneError, LaneInput,
};
use crate::scene::{AgentRecord, Scene, Split};

pub const SAMPLES_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Kalman-smooth the observed history before everything else.
    pub smooth_history: bool,
    pub kalman: KalmanConfig,
    /// Rasterize a per-agent drivable-area patch (needed only for the
    /// occupancy-map model variant).
    pub with_raster: bool,
    /// Patch side length, cells.
    pub raster_cells: usize,
    /// Meters per cell.
    pub raster_cell_m: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            smooth_history: true,
            kalman: KalmanConfig::default(),
            with_raster: true,
            raster_cells: 64,
            raster_cell_m: 1.0,
        }
    }
}

/// Square boolean grid, serialized as strings of `0` / `1`, one per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    pub size: usize,
    pub cells: Vec<bool>,
}

impl BitGrid {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.size + col]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl Serialize for BitGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<String> = (0..self.size)
            .map(|r| {
                (0..self.size)
                    .map(|c| if self.get(r, c) { '1' } else { '0' })
                    .collect()
            })
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BitGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        let size = rows.len();
        let mut cells = Vec::with_capacity(size * size);
        for row in &rows {
            if row.len() != size || row.chars().any(|c| c != '0' && c != '1') {
                return Err(serde::de::Error::custom("malformed bit grid row"));
            }
            cells.extend(row.chars().map(|c| c == '1'));
        }
        Ok(BitGrid { size, cells })
    }
}

/// One model-ready agent, everything in the agent frame (current position at
/// the origin, heading along +x). `origin` and `heading` map predictions
/// back to the global frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSample {
    pub scene_id: String,
    pub agent_id: String,
    pub split: Option<Split>,
    /// Observed (smoothed) history, oldest first; the last entry is (0, 0).
    pub history_rel: Vec<Point2>,
    /// Ground-truth future, 12 frames.
    pub future_rel: Vec<Point2>,
    pub lane_input: LaneInput,
    /// Candidate lane slot (0 left, 1 middle, 2 right) closest to the
    /// ground-truth future; always an unmasked slot.
    pub gt_lane: usize,
    pub raster: Option<BitGrid>,
    pub origin: Point2,
    /// Unit vector.
    pub heading: Direction2,
}

/// Why agents were dropped during sample building.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub stationary: usize,
    pub no_lane: usize,
    pub wrong_direction: usize,
    pub extension_failed: usize,
}

pub fn build_samples(scenes: &[Scene], cfg: &DatasetConfig) -> (Vec<ModelSample>, FilterStats) {
    let mut samples = Vec::new();
    let mut stats = FilterStats::default();
    for scene in scenes {
        for agent in &scene.agents {
            stats.total += 1;
            match build_sample(scene, agent, cfg) {
                Ok(s) => {
                    stats.kept += 1;
                    samples.push(s);
                }
                Err(LaneError::Stationary) => stats.stationary += 1,
                Err(LaneError::NoLane) => stats.no_lane += 1,
                Err(LaneError::WrongDirectionOnly) => stats.wrong_direction += 1,
                Err(LaneError::ExtensionFailed) => stats.extension_failed += 1,
            }
        }
    }
    (samples, stats)
}

fn build_sample(
    scene: &Scene,
    agent: &AgentRecord,
    cfg: &DatasetConfig,
) -> Result<ModelSample, LaneError> {
    let agent = if cfg.smooth_history {
        AgentRecord {
            agent_id: agent.agent_id.clone(),
            history: smooth(&agent.history, &cfg.kalman),
            future: agent.future.clone(),
            class_label: agent.class_label,
        }
    } else {
        agent.clone()
    };

    let heading = agent.current_heading()?.normalized()?;
    let origin = agent.current_position();
    let lane_input = build_lane_input(&agent, &scene.lane_chunks)?;

    let rel = |p: &Point2| to_agent_frame(p, &origin, &heading);
    let history_rel: Vec<Point2> = agent.history.positions().map(|p| rel(&p)).collect();
    let future_rel: Vec<Point2> = agent.future.positions().map(|p| rel(&p)).collect();

    let gt_lane = label_gt_lane(&lane_input, &future_rel);
    let raster = cfg.with_raster.then(|| {
        rasterize_agent_patch(scene, &origin, &heading, cfg.raster_cells, cfg.raster_cell_m)
    });

    Ok(ModelSample {
        scene_id: scene.scene_id.clone(),
        agent_id: agent.agent_id.clone(),
        split: scene.split_tag,
        history_rel,
        future_rel,
        lane_input,
        gt_lane,
        raster,
        origin,
        heading,
    })
}

/// Unmasked slot whose polyline is closest (mean point-to-polyline distance)
/// to the future. Ties prefer the middle, then the left slot.
pub fn label_gt_lane(lane_input: &LaneInput, future_rel: &[Point2]) -> usize {
    let mut best = 1usize;
    let mut best_d = f64::INFINITY;
    for slot in [1usize, 0, 2] {
        if !lane_input.mask.slot(slot) {
            continue;
        }
        let lane = &lane_input.lanes[slot];
        let d: f64 = future_rel
            .iter()
            .map(|p| point_to_polyline_distance(p, lane))
            .sum::<f64>()
            / future_rel.len().max(1) as f64;
        if d < best_d {
            best_d = d;
            best = slot;
        }
    }
    best
}

/// Agent-centered drivable-area patch: cell centers live in the agent frame,
/// the agent at the patch center heading along +x. A cell is drivable when
/// its center is within the drivable half width of a lane centerline.
pub fn rasterize_agent_patch(
    scene: &Scene,
    origin: &Point2,
    heading: &Direction2,
    cells_per_side: usize,
    cell_m: f64,
) -> BitGrid {
    let n = cells_per_side;
    let half = n as f64 * cell_m / 2.0;
    let mut cells = vec![false; n * n];

    for chunk in &scene.lane_chunks {
        let pts: Vec<Point2> = chunk
            .centers
            .iter()
            .map(|p| to_agent_frame(p, origin, heading))
            .collect();
        for w in pts.windows(2) {
            let x0 = w[0].x.min(w[1].x) - DRIVABLE_HALF_WIDTH_M;
            let x1 = w[0].x.max(w[1].x) + DRIVABLE_HALF_WIDTH_M;
            let y0 = w[0].y.min(w[1].y) - DRIVABLE_HALF_WIDTH_M;
            let y1 = w[0].y.max(w[1].y) + DRIVABLE_HALF_WIDTH_M;
            if x1 < -half || x0 > half || y1 < -half || y0 > half {
                continue;
            }
            let col_lo = (((x0 + half) / cell_m).floor().max(0.0)) as usize;
            let col_hi = (((x1 + half) / cell_m).ceil() as usize).min(n);
            let row_lo = (((y0 + half) / cell_m).floor().max(0.0)) as usize;
            let row_hi = (((y1 + half) / cell_m).ceil() as usize).min(n);
            for row in row_lo..row_hi {
                for col in col_lo..col_hi {
                    if cells[row * n + col] {
                        continue;
                    }
                    let p = Point2::new(
                        (col as f64 + 0.5) * cell_m - half,
                        (row as f64 + 0.5) * cell_m - half,
                    );
                    if point_to_polyline_distance(&p, w) <= DRIVABLE_HALF_WIDTH_M {
                        cells[row * n + col] = true;
                    }
                }
            }
        }
    }
    BitGrid { size: n, cells }
}

// ---------------------------------------------------------------------------
// Sample cache

#[derive(Serialize, Deserialize)]
struct SamplesFile {
    schema_version: u32,
    samples: Vec<ModelSample>,
}

pub fn save_samples(samples: &[ModelSample], path: &Path) -> Result<(), DataError> {
    let file = SamplesFile {
        schema_version: SAMPLES_SCHEMA_VERSION,
        samples: samples.to_vec(),
    };
    fs::write(path, serde_json::to_string(&file).expect("sample serialization"))?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<ModelSample>, DataError> {
    let text = fs::read_to_string(path)?;
    let file: SamplesFile = serde_json::from_str(&text).map_err(|source| DataError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    if file.schema_version != SAMPLES_SCHEMA_VERSION {
        return Err(DataError::SchemaVersion {
            found: file.schema_version,
            expected: SAMPLES_SCHEMA_VERSION,
        });
    }
    Ok(file.samples)
}
