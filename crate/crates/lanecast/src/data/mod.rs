//! Scene storage: a versioned JSON file per scene, plus the dataset split.

pub mod generate;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::lane::LaneChunk;
use crate::scene::{AgentRecord, OccupancyRaster, Scene, Split, Trajectory, FRAME_RATE_HZ};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("scene {scene}: invalid chunk {chunk}")]
    InvalidChunk { scene: String, chunk: u64 },
    #[error("scene {scene}: invalid trajectory for agent {agent}")]
    InvalidTrajectory { scene: String, agent: String },
    #[error("scene {scene}: duplicate chunk id {chunk}")]
    DuplicateChunk { scene: String, chunk: u64 },
    #[error("scene {scene}: invalid occupancy raster")]
    InvalidOccupancy { scene: String },
    #[error("need at least {min} scenes to split, got {got}")]
    TooFewScenes { got: usize, min: usize },
}

// ---------------------------------------------------------------------------
// On-disk schema

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    schema_version: u32,
    scene_id: String,
    frame_rate_hz: f64,
    agents: Vec<AgentFile>,
    lane_chunks: Vec<ChunkFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    occupancy: Option<RasterFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    agent_id: String,
    /// Frames as `[frame_index, x, y]`.
    history: Vec<(i64, f64, f64)>,
    future: Vec<(i64, f64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChunkFile {
    id: u64,
    centers: Vec<(f64, f64)>,
    #[serde(default)]
    successors: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RasterFile {
    origin: (f64, f64),
    cell_size: f64,
    width: usize,
    height: usize,
    /// One string of `0` / `1` per row, bottom row first.
    rows: Vec<String>,
}

fn to_file(scene: &Scene) -> SceneFile {
    SceneFile {
        schema_version: SCHEMA_VERSION,
        scene_id: scene.scene_id.clone(),
        frame_rate_hz: FRAME_RATE_HZ,
        agents: scene
            .agents
            .iter()
            .map(|a| AgentFile {
                agent_id: a.agent_id.clone(),
                history: a.history.frames.iter().map(|(t, p)| (*t, p.x, p.y)).collect(),
                future: a.future.frames.iter().map(|(t, p)| (*t, p.x, p.y)).collect(),
            })
            .collect(),
        lane_chunks: scene
            .lane_chunks
            .iter()
            .map(|c| ChunkFile {
                id: c.chunk_id,
                centers: c.centers.iter().map(|p| (p.x, p.y)).collect(),
                successors: c.successor_ids.clone(),
            })
            .collect(),
        occupancy: scene.occupancy.as_ref().map(|r| RasterFile {
            origin: (r.origin.x, r.origin.y),
            cell_size: r.cell_size,
            width: r.width,
            height: r.height,
            rows: (0..r.height)
                .map(|row| {
                    (0..r.width)
                        .map(|col| if r.grid[row * r.width + col] { '1' } else { '0' })
                        .collect()
                })
                .collect(),
        }),
        split: scene.split_tag,
    }
}

fn from_file(file: SceneFile) -> Result<Scene, DataError> {
    if file.schema_version != SCHEMA_VERSION {
        return Err(DataError::SchemaVersion {
            found: file.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let scene_id = file.scene_id;

    let mut agents = Vec::with_capacity(file.agents.len());
    for a in file.agents {
        let traj = |frames: &[(i64, f64, f64)]| Trajectory {
            agent_id: a.agent_id.clone(),
            frames: frames.iter().map(|&(t, x, y)| (t, Point2::new(x, y))).collect(),
            frame_rate_hz: file.frame_rate_hz,
        };
        let history = traj(&a.history);
        let future = traj(&a.future);
        let adjacent = history.is_valid()
            && future.is_valid()
            && future.first_frame() == history.last_frame() + 1;
        if !adjacent {
            return Err(DataError::InvalidTrajectory {
                scene: scene_id,
                agent: a.agent_id,
            });
        }
        agents.push(AgentRecord {
            agent_id: a.agent_id,
            history,
            future,
            class_label: crate::scene::AgentClass::Vehicle,
        });
    }

    let mut seen = HashSet::new();
    let mut lane_chunks = Vec::with_capacity(file.lane_chunks.len());
    for c in file.lane_chunks {
        let chunk = LaneChunk {
            chunk_id: c.id,
            centers: c.centers.iter().map(|&(x, y)| Point2::new(x, y)).collect(),
            successor_ids: c.successors,
        };
        if !chunk.is_valid() {
            return Err(DataError::InvalidChunk {
                scene: scene_id,
                chunk: chunk.chunk_id,
            });
        }
        if !seen.insert(chunk.chunk_id) {
            return Err(DataError::DuplicateChunk {
                scene: scene_id,
                chunk: chunk.chunk_id,
            });
        }
        lane_chunks.push(chunk);
    }

    let occupancy = match file.occupancy {
        None => None,
        Some(r) => {
            let mut grid = Vec::with_capacity(r.width * r.height);
            let rows_ok = r.rows.len() == r.height
                && r.rows.iter().all(|row| {
                    row.len() == r.width && row.chars().all(|c| c == '0' || c == '1')
                });
            if !rows_ok {
                return Err(DataError::InvalidOccupancy { scene: scene_id });
            }
            for row in &r.rows {
                grid.extend(row.chars().map(|c| c == '1'));
            }
            let raster = OccupancyRaster {
                origin: Point2::new(r.origin.0, r.origin.1),
                cell_size: r.cell_size,
                width: r.width,
                height: r.height,
                grid,
            };
            if !raster.is_valid() {
                return Err(DataError::InvalidOccupancy { scene: scene_id });
            }
            Some(raster)
        }
    };

    Ok(Scene {
        scene_id,
        agents,
        lane_chunks,
        occupancy,
        split_tag: file.split,
    })
}

// ---------------------------------------------------------------------------
// IO

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(&to_file(scene)).expect("scene serialization");
    fs::write(path, json)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene, DataError> {
    let text = fs::read_to_string(path)?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|source| DataError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    from_file(file)
}

/// One `<scene_id>.json` per scene.
pub fn save_scenes(scenes: &[Scene], dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for scene in scenes {
        save_scene(scene, &dir.join(format!("{}.json", scene.scene_id)))?;
    }
    Ok(())
}

/// Load every `*.json` in the directory, ordered by file name.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>, DataError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p)).collect()
}

// ---------------------------------------------------------------------------
// Split

/// Assign train / val / test tags 8:1:1 by scene. The assignment depends
/// only on the seed and the set of scene ids, not on input order.
pub fn assign_split(scenes: &mut [Scene], seed: u64) -> Result<(), DataError> {
    let n = scenes.len();
    if n < 10 {
        return Err(DataError::TooFewScenes { got: n, min: 10 });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scenes[a].scene_id.cmp(&scenes[b].scene_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_val = (n / 10).max(1);
    let n_test = (n / 10).max(1);
    for (rank, &idx) in order.iter().enumerate() {
        scenes[idx].split_tag = Some(if rank < n - n_val - n_test {
            Split::Train
        } else if rank < n - n_test {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(())
}
