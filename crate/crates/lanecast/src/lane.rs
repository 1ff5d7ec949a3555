//! Lane-chunk processing: direction filtering, nearest-three-lane
//! identification, and lane extension into the fixed masked model input.
//!
//! Real map databases deliver lane centerlines as short chunks of 5 m-spaced
//! points. This module turns the chunk soup around an agent into exactly
//! three candidate polylines (left / middle / right, 18 points each) plus a
//! mask for the slots that do not exist.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_between, Direction2, GeometryError, Point2};
use crate::scene::{AgentRecord, OccupancyRaster};

/// Points per candidate lane: the start point plus 17 ahead (17 x 5 m = 85 m,
/// covering the 80 m travel bound of a 6 s horizon).
pub const LANE_POINTS: usize = 18;
/// Nominal spacing of lane center points, meters.
pub const LANE_SPACING_M: f64 = 5.0;
/// Lanes deviating more than this from the agent heading are wrong-direction.
pub const DIRECTION_FILTER_DEG: f64 = 30.0;
/// Search radius around the virtual point when looking for the next chunk.
pub const EXTENSION_SEARCH_RADIUS_M: f64 = 15.0;
/// An agent farther than this from every centerline is not in the lane region.
pub const LANE_REGION_RADIUS_M: f64 = 3.0;
/// A chunk closer than this to the middle lane's dividing line belongs to the
/// middle lane itself (half a nominal 3.5 m lane width).
pub const SIDE_LANE_MIN_OFFSET_M: f64 = 1.75;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LaneError {
    /// Agent has no usable heading; cannot orient lane processing.
    #[error("agent is stationary")]
    Stationary,
    /// Agent is not located in any lane region, or no chunks exist.
    #[error("no lane for agent")]
    NoLane,
    /// Every nearby lane points the wrong way.
    #[error("all lanes filtered by direction")]
    WrongDirectionOnly,
    /// Lane extension ran out of acceptable next-chunk candidates.
    #[error("lane extension failed")]
    ExtensionFailed,
}

impl From<GeometryError> for LaneError {
    fn from(_: GeometryError) -> Self {
        LaneError::Stationary
    }
}

/// A short segment of lane centerline: ordered center points at nominal 5 m
/// spacing plus optional successor hints (may be empty — labels go missing).
///
/// Successor ids are carried through serialization for generators and
/// debugging, but lane extension never reads them: stitching is purely
/// geometric, as real chunk connectivity cannot be trusted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneChunk {
    pub chunk_id: u64,
    pub centers: Vec<Point2>,
    pub successor_ids: Vec<u64>,
}

impl LaneChunk {
    pub fn new(chunk_id: u64, centers: Vec<Point2>) -> Self {
        LaneChunk {
            chunk_id,
            centers,
            successor_ids: Vec::new(),
        }
    }

    /// Length >= 2 and consecutive spacing within tolerance of 5 m.
    pub fn is_valid(&self) -> bool {
        self.centers.len() >= 2
            && self.centers.windows(2).all(|w| {
                let d = w[0].distance(&w[1]);
                (4.0..=6.0).contains(&d)
            })
    }

    /// Index and distance of the center point nearest to `p`.
    /// Ties break toward the lower point index.
    pub fn nearest_center(&self, p: &Point2) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, c) in self.centers.iter().enumerate() {
            let d = c.distance(p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Lane direction at center point `i` (0-based): the difference from the
    /// predecessor; the first point copies the direction of the second.
    pub fn direction(&self, i: usize) -> Direction2 {
        assert!(i < self.centers.len());
        if i == 0 {
            self.centers[1].sub(&self.centers[0])
        } else {
            self.centers[i].sub(&self.centers[i - 1])
        }
    }

    pub fn arc_length(&self) -> f64 {
        self.centers.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }
}

/// Existence mask over the (left, middle, right) candidate lane slots.
/// The middle slot is always real.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneMask {
    pub m_l: bool,
    pub m_m: bool,
    pub m_r: bool,
}

impl LaneMask {
    pub fn new(m_l: bool, m_r: bool) -> Self {
        LaneMask { m_l, m_m: true, m_r }
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.m_l, self.m_m, self.m_r]
    }

    pub fn slot(&self, i: usize) -> bool {
        self.as_array()[i]
    }
}

pub const LANE_SENTINEL: Point2 = Point2 { x: 0.0, y: 0.0 };

/// The fixed model input: three 18-point candidate polylines in the
/// agent-relative frame (agent at origin, heading along +x), padded slots
/// all-sentinel, plus the lane mask. Slot order is left, middle, right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneInput {
    pub lanes: [[Point2; LANE_POINTS]; 3],
    pub mask: LaneMask,
}

impl LaneInput {
    pub fn lane(&self, slot: usize) -> &[Point2; LANE_POINTS] {
        &self.lanes[slot]
    }
}

/// Result of nearest-three-lane identification: indices into the filtered
/// chunk slice, each paired with the index of its center point nearest the
/// agent (the extension start).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneSelection {
    pub middle: (usize, usize),
    pub left: Option<(usize, usize)>,
    pub right: Option<(usize, usize)>,
}

/// Keep only chunks whose local direction (at the center point nearest the
/// agent) is within 30 degrees of the agent heading. The boundary is
/// inclusive: exactly 30 degrees survives.
pub fn filter_by_direction(
    agent_heading: &Direction2,
    agent_pos: &Point2,
    chunks: &[LaneChunk],
) -> Vec<LaneChunk> {
    chunks
        .iter()
        .filter(|c| {
            let (j, _) = c.nearest_center(agent_pos);
            match angle_between(agent_heading, &c.direction(j)) {
                Ok(a) => a <= DIRECTION_FILTER_DEG + 1e-9,
                Err(_) => false,
            }
        })
        .cloned()
        .collect()
}

/// Pick the middle lane (globally nearest chunk) and at most one lane per
/// side of the dividing line through the middle lane's nearest point, along
/// its direction there.
///
/// Side lanes are the ones whose own nearest point lies closest to the
/// dividing line; a point exactly on the line counts as left. All ties break
/// toward the lower chunk id.
pub fn select_three_lanes(
    agent_pos: &Point2,
    chunks: &[LaneChunk],
) -> Result<LaneSelection, LaneError> {
    if chunks.is_empty() {
        return Err(LaneError::NoLane);
    }
    let nearest: Vec<(usize, f64)> = chunks.iter().map(|c| c.nearest_center(agent_pos)).collect();

    let mut mid = 0usize;
    for i in 1..chunks.len() {
        let better = nearest[i].1 < nearest[mid].1
            || (nearest[i].1 == nearest[mid].1 && chunks[i].chunk_id < chunks[mid].chunk_id);
        if better {
            mid = i;
        }
    }
    let anchor = chunks[mid].centers[nearest[mid].0];
    let axis = chunks[mid].direction(nearest[mid].0);
    let axis_norm = axis.norm();

    // Signed perpendicular offset of each remaining chunk's own nearest
    // point; positive (or zero) is the left region. Chunks closer to the
    // dividing line than half a lane width are the middle lane's own
    // continuation, not side lanes. Offsets within a numerical hair of each
    // other (consecutive chunks of one parallel lane) count as tied and
    // resolve toward the chunk nearest the agent.
    const OFFSET_TIE_EPS: f64 = 1e-6;
    let mut best_left: Option<(f64, usize)> = None;
    let mut best_right: Option<(f64, usize)> = None;
    for i in 0..chunks.len() {
        if i == mid {
            continue;
        }
        let la = chunks[i].centers[nearest[i].0];
        let s = axis.cross(&la.sub(&anchor)) / axis_norm;
        let d = s.abs();
        if d < SIDE_LANE_MIN_OFFSET_M {
            continue;
        }
        let slot = if s >= 0.0 { &mut best_left } else { &mut best_right };
        let better = match slot {
            None => true,
            Some((bd, bi)) => {
                d < *bd - OFFSET_TIE_EPS
                    || (d <= *bd + OFFSET_TIE_EPS
                        && (nearest[i].1, chunks[i].chunk_id) < (nearest[*bi].1, chunks[*bi].chunk_id))
            }
        };
        if better {
            *slot = Some((d, i));
        }
    }

    Ok(LaneSelection {
        middle: (mid, nearest[mid].0),
        left: best_left.map(|(_, i)| (i, nearest[i].0)),
        right: best_right.map(|(_, i)| (i, nearest[i].0)),
    })
}

/// Extend a candidate lane to 18 points starting at `start_index`, stitching
/// further chunks geometrically when the starting chunk is too short.
///
/// When points run out, a virtual point 5 m past the tail along the lane
/// direction selects the next chunk: candidates within the search radius are
/// tried in order of their nearest-center distance to the virtual point, and
/// a candidate with more than two center points behind the orthogonal line
/// through the virtual point is discarded.
pub fn extend_lane(
    start: &LaneChunk,
    start_index: usize,
    all_chunks: &[LaneChunk],
) -> Result<Vec<Point2>, LaneError> {
    assert!(start_index < start.centers.len());
    let mut points: Vec<Point2> = start.centers[start_index..]
        .iter()
        .take(LANE_POINTS)
        .copied()
        .collect();
    let mut used: HashSet<u64> = HashSet::new();
    used.insert(start.chunk_id);
    let mut tail_chunk = start.clone();

    while points.len() < LANE_POINTS {
        let tail_index = tail_chunk.centers.len() - 1;
        let unit = tail_chunk
            .direction(tail_index)
            .normalized()
            .map_err(|_| LaneError::ExtensionFailed)?;
        let virtual_pt = tail_chunk.centers[tail_index].offset(&unit.scaled(LANE_SPACING_M));

        let mut candidates: Vec<(f64, u64, usize)> = all_chunks
            .iter()
            .enumerate()
            .filter(|(_, c)| !used.contains(&c.chunk_id))
            .filter_map(|(i, c)| {
                let (_, d) = c.nearest_center(&virtual_pt);
                (d <= EXTENSION_SEARCH_RADIUS_M).then_some((d, c.chunk_id, i))
            })
            .collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let mut chosen = None;
        for (_, _, i) in candidates {
            let rear = all_chunks[i]
                .centers
                .iter()
                .filter(|p| p.sub(&virtual_pt).dot(&unit) < 0.0)
                .count();
            if rear <= 2 {
                chosen = Some(i);
                break;
            }
        }
        let Some(i) = chosen else {
            return Err(LaneError::ExtensionFailed);
        };
        let next = &all_chunks[i];
        used.insert(next.chunk_id);
        for p in &next.centers {
            points.push(*p);
            if points.len() == LANE_POINTS {
                break;
            }
        }
        tail_chunk = next.clone();
    }
    Ok(points)
}

/// Map a global point into the agent frame: agent current position at the
/// origin, heading along +x.
pub fn to_agent_frame(p: &Point2, origin: &Point2, heading_unit: &Direction2) -> Point2 {
    let d = p.sub(origin);
    Point2::new(heading_unit.dot(&d), heading_unit.cross(&d))
}

/// Inverse of `to_agent_frame`.
pub fn from_agent_frame(p: &Point2, origin: &Point2, heading_unit: &Direction2) -> Point2 {
    Point2::new(
        origin.x + heading_unit.dx * p.x - heading_unit.dy * p.y,
        origin.y + heading_unit.dy * p.x + heading_unit.dx * p.y,
    )
}

/// Full lane-input construction for one agent: direction filtering, three-lane
/// selection, per-lane extension, and conversion into the agent frame.
pub fn build_lane_input(
    agent: &AgentRecord,
    chunks: &[LaneChunk],
) -> Result<LaneInput, LaneError> {
    let heading = agent.current_heading()?.normalized()?;
    let pos = agent.current_position();

    if chunks.is_empty() {
        return Err(LaneError::NoLane);
    }
    let on_lane = chunks
        .iter()
        .any(|c| point_to_polyline_distance(&pos, &c.centers) <= LANE_REGION_RADIUS_M);
    if !on_lane {
        return Err(LaneError::NoLane);
    }

    let kept = filter_by_direction(&heading, &pos, chunks);
    if kept.is_empty() {
        return Err(LaneError::WrongDirectionOnly);
    }

    let sel = select_three_lanes(&pos, &kept)?;
    // Extension stitches over the unfiltered chunk list: the direction filter
    // identifies candidate lanes near the agent, but a legitimate lane
    // continuation (a turn, an arc) may leave the agent's heading cone, and
    // its chunks would fail the filter at their point nearest the agent.
    let extend = |slot: Option<(usize, usize)>| -> Result<Option<Vec<Point2>>, LaneError> {
        match slot {
            None => Ok(None),
            Some((ci, pi)) => Ok(Some(extend_lane(&kept[ci], pi, chunks)?)),
        }
    };
    let middle = extend(Some(sel.middle))?.unwrap();
    let left = extend(sel.left)?;
    let right = extend(sel.right)?;

    let mut lanes = [[LANE_SENTINEL; LANE_POINTS]; 3];
    let mut fill = |slot: usize, pts: &Option<Vec<Point2>>| {
        if let Some(pts) = pts {
            for (dst, p) in lanes[slot].iter_mut().zip(pts) {
                *dst = to_agent_frame(p, &pos, &heading);
            }
        }
    };
    fill(0, &left);
    fill(1, &Some(middle));
    fill(2, &right);

    Ok(LaneInput {
        lanes,
        mask: LaneMask::new(left.is_some(), right.is_some()),
    })
}

/// Distance from `p` to the closest point on the polyline through `pts`.
pub fn point_to_polyline_distance(p: &Point2, pts: &[Point2]) -> f64 {
    if pts.len() == 1 {
        return p.distance(&pts[0]);
    }
    pts.windows(2)
        .map(|w| point_to_segment_distance(p, &w[0], &w[1]))
        .fold(f64::INFINITY, f64::min)
}

fn point_to_segment_distance(p: &Point2, a: &Point2, b: &Point2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(&ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (p.sub(a).dot(&ab) / len2).clamp(0.0, 1.0);
    p.distance(&Point2::new(a.x + t * ab.dx, a.y + t * ab.dy))
}

/// Rasterize a drivable-area mask: a cell is drivable when its center lies
/// within `half_width` of any chunk centerline.
pub fn rasterize_drivable(
    chunks: &[LaneChunk],
    origin: Point2,
    cell_size: f64,
    width: usize,
    height: usize,
    half_width: f64,
) -> OccupancyRaster {
    let mut grid = vec![false; width * height];
    for row in 0..height {
        for col in 0..width {
            let p = Point2::new(
                origin.x + (col as f64 + 0.5) * cell_size,
                origin.y + (row as f64 + 0.5) * cell_size,
            );
            grid[row * width + col] = chunks
                .iter()
                .any(|c| point_to_polyline_distance(&p, &c.centers) <= half_width);
        }
    }
    OccupancyRaster {
        origin,
        cell_size,
        width,
        height,
        grid,
    }
}
