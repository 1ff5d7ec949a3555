//! Dataset augmentation: rotation fan-out of whole scenes and upsampling of
//! turning agents to fight the straight/turning imbalance.

use serde::{Deserialize, Serialize};

use crate::geometry::{rotate_about, GeometryError, Point2};
use crate::lane::{rasterize_drivable, LaneChunk};
use crate::scene::{AgentRecord, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Degrees between consecutive rotated copies.
    pub rotation_step_deg: f64,
    /// Number of rotated copies; step x count must cover 360 degrees.
    pub rotation_count: usize,
    /// Copies of each turning agent inside every rotated scene.
    pub turn_upsample_factor: usize,
    /// Cumulative future heading change that counts as a turn, degrees.
    pub turn_threshold_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_step_deg: 15.0,
            rotation_count: 24,
            turn_upsample_factor: 6,
            turn_threshold_deg: 30.0,
        }
    }
}

impl AugmentConfig {
    pub fn is_valid(&self) -> bool {
        (self.rotation_step_deg * self.rotation_count as f64 - 360.0).abs() < 1e-9
            && self.rotation_count >= 1
            && self.turn_upsample_factor >= 1
    }
}

/// True when the agent's cumulative signed heading change over its future
/// reaches the threshold.
pub fn classify_turning(agent: &AgentRecord, threshold_deg: f64) -> Result<bool, GeometryError> {
    Ok(agent.cumulative_future_turn()?.abs() >= threshold_deg)
}

/// Centroid of all scene geometry (lane centers and agent positions); the
/// rotation pivot for augmentation.
fn scene_centroid(scene: &Scene) -> Point2 {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0usize;
    for c in &scene.lane_chunks {
        for p in &c.centers {
            sx += p.x;
            sy += p.y;
            n += 1;
        }
    }
    for a in &scene.agents {
        for p in a.history.positions().chain(a.future.positions()) {
            sx += p.x;
            sy += p.y;
            n += 1;
        }
    }
    if n == 0 {
        Point2::new(0.0, 0.0)
    } else {
        Point2::new(sx / n as f64, sy / n as f64)
    }
}

fn rotate_agent(agent: &AgentRecord, center: &Point2, theta: f64) -> AgentRecord {
    AgentRecord {
        agent_id: agent.agent_id.clone(),
        history: agent.history.map_positions(|p| rotate_about(p, center, theta)),
        future: agent.future.map_positions(|p| rotate_about(p, center, theta)),
        class_label: agent.class_label,
    }
}

fn rotate_chunk(chunk: &LaneChunk, center: &Point2, theta: f64) -> LaneChunk {
    LaneChunk {
        chunk_id: chunk.chunk_id,
        centers: chunk
            .centers
            .iter()
            .map(|p| rotate_about(p, center, theta))
            .collect(),
        successor_ids: chunk.successor_ids.clone(),
    }
}

/// Emit `rotation_count` rotated copies of the scene about its centroid;
/// within each copy, turning agents are duplicated `turn_upsample_factor`
/// times under fresh agent ids. Stationary agents never classify as turning.
///
/// An occupancy raster, when present, is re-rasterized from the rotated
/// chunks (a boolean grid cannot be rotated by arbitrary angles in place).
pub fn augment_scene(scene: &Scene, cfg: &AugmentConfig) -> Vec<Scene> {
    assert!(cfg.is_valid(), "invalid AugmentConfig");
    assert!(!scene.agents.is_empty(), "augment requires >= 1 agent");
    let center = scene_centroid(scene);

    let turning: Vec<bool> = scene
        .agents
        .iter()
        .map(|a| classify_turning(a, cfg.turn_threshold_deg).unwrap_or(false))
        .collect();

    let mut out = Vec::with_capacity(cfg.rotation_count);
    for r in 0..cfg.rotation_count {
        let theta = cfg.rotation_step_deg * r as f64;
        let chunks: Vec<LaneChunk> = scene
            .lane_chunks
            .iter()
            .map(|c| rotate_chunk(c, &center, theta))
            .collect();

        let mut agents = Vec::new();
        for (a, &is_turn) in scene.agents.iter().zip(&turning) {
            let rotated = rotate_agent(a, &center, theta);
            let copies = if is_turn { cfg.turn_upsample_factor } else { 1 };
            for j in 0..copies {
                let mut copy = rotated.clone();
                if j > 0 {
                    copy.agent_id = format!("{}#up{j}", a.agent_id);
                    copy.history.agent_id = copy.agent_id.clone();
                    copy.future.agent_id = copy.agent_id.clone();
                }
                agents.push(copy);
            }
        }

        let occupancy = scene.occupancy.as_ref().map(|raster| {
            rasterize_drivable(
                &chunks,
                raster.origin,
                raster.cell_size,
                raster.width,
                raster.height,
                crate::data::generate::DRIVABLE_HALF_WIDTH_M,
            )
        });

        out.push(Scene {
            scene_id: format!("{}#rot{:03}", scene.scene_id, (theta.round() as i64) % 360),
            agents,
            lane_chunks: chunks,
            occupancy,
            split_tag: scene.split_tag,
        });
    }
    out
}
