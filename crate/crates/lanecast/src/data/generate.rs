//! Synthetic scene generator.
//!
//! Builds road layouts from a few templates (straight road, curve, T
//! intersection, crossroads), cuts the lane centerlines into 5 m-spaced
//! chunks, and drives agents along the lanes at constant speed. Every scene
//! comes with a `SceneTruth` describing the exact route polylines, so tests
//! can check lane processing against an independent ground truth.
//!
//! All randomness flows from a single seeded stream; the same config always
//! produces bit-identical scenes.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotate_about, Direction2, Point2};
use crate::lane::{LaneChunk, LANE_SPACING_M};
use crate::scene::{AgentRecord, Scene, Trajectory};

/// Half width of the drivable corridor around a lane centerline, meters.
pub const DRIVABLE_HALF_WIDTH_M: f64 = 2.0;
/// Lateral distance between adjacent lane centerlines, meters.
pub const LANE_WIDTH_M: f64 = 3.5;

const DT_S: f64 = 0.5;
const HISTORY_FRAMES: usize = 4;
const HORIZON_FRAMES: usize = 12;
/// Arc-length headroom kept ahead of an agent so an 18-point candidate lane
/// (85 m) fits inside its route even when the candidate's start point sits a
/// couple of chunks downstream of the agent.
const ROUTE_HEADROOM_M: f64 = 115.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoadTemplate {
    Straight,
    Curve,
    TIntersection,
    Crossroads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_scenes: usize,
    /// Cycled over scenes in order.
    pub templates: Vec<RoadTemplate>,
    /// Same-direction lanes on straight and curve roads. Intersection
    /// approaches are single-lane.
    pub lanes_per_road: usize,
    pub agents_per_scene: usize,
    /// Constant per-agent speed, m/s, sampled uniformly.
    pub speed_range: (f64, f64),
    /// Std dev of Gaussian position noise on observed history, meters.
    pub noise_sigma: f64,
    /// Probability that an intersection agent takes a turning branch.
    pub turn_fraction: f64,
    /// Probability of a lane change on straight / curve roads.
    pub lane_change_fraction: f64,
    pub include_opposite_lanes: bool,
    /// Probability that a successor hint is dropped from a chunk.
    pub successor_drop_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 7,
            n_scenes: 100,
            templates: vec![
                RoadTemplate::Straight,
                RoadTemplate::Curve,
                RoadTemplate::TIntersection,
                RoadTemplate::Crossroads,
            ],
            lanes_per_road: 2,
            agents_per_scene: 2,
            speed_range: (4.0, 12.0),
            noise_sigma: 0.1,
            turn_fraction: 0.5,
            lane_change_fraction: 0.2,
            include_opposite_lanes: true,
            successor_drop_fraction: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn is_valid(&self) -> bool {
        self.n_scenes >= 1
            && !self.templates.is_empty()
            && self.lanes_per_road >= 1
            && self.agents_per_scene >= 1
            && self.speed_range.0 > 0.0
            && self.speed_range.0 <= self.speed_range.1
            && self.noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.turn_fraction)
            && (0.0..=1.0).contains(&self.lane_change_fraction)
            && (0.0..=1.0).contains(&self.successor_drop_fraction)
    }
}

/// What an agent actually does over its future.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Behavior {
    KeepLane,
    LaneChangeLeft,
    LaneChangeRight,
    TurnLeft,
    TurnRight,
}

/// One ridable route: its full 5 m-spaced sample polyline (global frame,
/// after the scene transform) and the chunk ids covering it in order.
/// Concatenating the centers of those chunks reproduces `samples` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTruth {
    pub samples: Vec<Point2>,
    pub chunk_ids: Vec<u64>,
    /// True when the route shares its approach with sibling branches.
    pub branching: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentTruth {
    pub route: usize,
    pub behavior: Behavior,
    pub speed_mps: f64,
}

/// Generator-side ground truth for one scene, keyed by agent id.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub routes: Vec<RouteTruth>,
    pub agents: HashMap<String, AgentTruth>,
}

pub fn generate(cfg: &GeneratorConfig) -> Vec<Scene> {
    generate_detailed(cfg).into_iter().map(|(s, _)| s).collect()
}

pub fn generate_detailed(cfg: &GeneratorConfig) -> Vec<(Scene, SceneTruth)> {
    assert!(cfg.is_valid(), "invalid GeneratorConfig");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_scenes)
        .map(|i| {
            let template = cfg.templates[i % cfg.templates.len()];
            build_scene(format!("scene{i:05}"), template, cfg, &mut rng)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Road layout primitives

#[derive(Clone, Copy)]
enum Piece {
    Line { a: Point2, b: Point2 },
    /// Circular arc: center, radius, start angle (radians) and signed sweep
    /// (radians, positive counter-clockwise).
    Arc { c: Point2, r: f64, a0: f64, sweep: f64 },
}

impl Piece {
    fn len(&self) -> f64 {
        match self {
            Piece::Line { a, b } => a.distance(b),
            Piece::Arc { r, sweep, .. } => r * sweep.abs(),
        }
    }

    fn point_at(&self, s: f64) -> Point2 {
        match self {
            Piece::Line { a, b } => {
                let t = s / a.distance(b);
                Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
            }
            Piece::Arc { c, r, a0, sweep } => {
                let ang = a0 + sweep.signum() * s / r;
                Point2::new(c.x + r * ang.cos(), c.y + r * ang.sin())
            }
        }
    }
}

/// Sample a composite path at uniform 5 m arc length, from 0 to the last
/// multiple of 5 m that fits.
fn sample_path(pieces: &[Piece]) -> Vec<Point2> {
    let total: f64 = pieces.iter().map(Piece::len).sum();
    let n = (total / LANE_SPACING_M).floor() as usize;
    (0..=n)
        .map(|k| {
            let mut s = k as f64 * LANE_SPACING_M;
            for p in pieces {
                if s <= p.len() + 1e-9 {
                    return p.point_at(s.min(p.len()));
                }
                s -= p.len();
            }
            pieces.last().unwrap().point_at(pieces.last().unwrap().len())
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RouteKind {
    Through,
    Left,
    Right,
}

struct RouteGeom {
    samples: Vec<Point2>,
    prefix_samples: usize,
    kind: RouteKind,
}

struct Layout {
    routes: Vec<RouteGeom>,
    /// Approach samples shared by every route (intersections only).
    shared_prefix: Option<Vec<Point2>>,
    /// Opposite-direction and cross-road lanes: sample lists ordered along
    /// their own travel direction.
    clutter: Vec<Vec<Point2>>,
}

fn line(ax: f64, ay: f64, bx: f64, by: f64) -> Piece {
    Piece::Line {
        a: Point2::new(ax, ay),
        b: Point2::new(bx, by),
    }
}

fn layout_straight(cfg: &GeneratorConfig) -> Layout {
    let routes = (0..cfg.lanes_per_road)
        .map(|j| {
            let y = j as f64 * LANE_WIDTH_M;
            RouteGeom {
                samples: sample_path(&[line(0.0, y, 300.0, y)]),
                prefix_samples: 0,
                kind: RouteKind::Through,
            }
        })
        .collect();
    let clutter = if cfg.include_opposite_lanes {
        (0..cfg.lanes_per_road)
            .map(|j| {
                let y = -LANE_WIDTH_M * (j + 1) as f64;
                let mut pts = sample_path(&[line(0.0, y, 300.0, y)]);
                pts.reverse();
                pts
            })
            .collect()
    } else {
        Vec::new()
    };
    Layout {
        routes,
        shared_prefix: None,
        clutter,
    }
}

/// 100 m lead-in, left 90-degree arc of radius 50 (lane 0), 100 m lead-out
/// northbound. Lane `j` sits 3.5 j meters to the left (smaller radius).
fn curve_pieces(offset_left: f64) -> Vec<Piece> {
    let r = 50.0 - offset_left;
    vec![
        line(0.0, offset_left, 100.0, offset_left),
        Piece::Arc {
            c: Point2::new(100.0, 50.0),
            r,
            a0: -std::f64::consts::FRAC_PI_2,
            sweep: std::f64::consts::FRAC_PI_2,
        },
        line(100.0 + r, 50.0, 100.0 + r, 150.0),
    ]
}

fn layout_curve(cfg: &GeneratorConfig) -> Layout {
    let routes = (0..cfg.lanes_per_road)
        .map(|j| RouteGeom {
            samples: sample_path(&curve_pieces(LANE_WIDTH_M * j as f64)),
            prefix_samples: 0,
            kind: RouteKind::Through,
        })
        .collect();
    let clutter = if cfg.include_opposite_lanes {
        (0..cfg.lanes_per_road)
            .map(|j| {
                let mut pts = sample_path(&curve_pieces(-LANE_WIDTH_M * (j + 1) as f64));
                pts.reverse();
                pts
            })
            .collect()
    } else {
        Vec::new()
    };
    Layout {
        routes,
        shared_prefix: None,
        clutter,
    }
}

const APPROACH_LEN_M: f64 = 120.0;
const TURN_RADIUS_M: f64 = 15.0;

/// Single-lane eastbound approach plus branches. The turn arcs leave the
/// approach end at (120, 0) and join north / south exit lanes at x = 135.
fn intersection_routes(with_right: bool) -> (Vec<Point2>, Vec<RouteGeom>) {
    let approach = line(0.0, 0.0, APPROACH_LEN_M, 0.0);
    let prefix = sample_path(&[approach]);
    let prefix_n = prefix.len();

    let mut routes = vec![RouteGeom {
        samples: sample_path(&[approach, line(APPROACH_LEN_M, 0.0, 250.0, 0.0)]),
        prefix_samples: prefix_n,
        kind: RouteKind::Through,
    }];
    routes.push(RouteGeom {
        samples: sample_path(&[
            approach,
            Piece::Arc {
                c: Point2::new(APPROACH_LEN_M, TURN_RADIUS_M),
                r: TURN_RADIUS_M,
                a0: -std::f64::consts::FRAC_PI_2,
                sweep: std::f64::consts::FRAC_PI_2,
            },
            line(135.0, 15.0, 135.0, 115.0),
        ]),
        prefix_samples: prefix_n,
        kind: RouteKind::Left,
    });
    if with_right {
        routes.push(RouteGeom {
            samples: sample_path(&[
                approach,
                Piece::Arc {
                    c: Point2::new(APPROACH_LEN_M, -TURN_RADIUS_M),
                    r: TURN_RADIUS_M,
                    a0: std::f64::consts::FRAC_PI_2,
                    sweep: -std::f64::consts::FRAC_PI_2,
                },
                line(135.0, -15.0, 135.0, -115.0),
            ]),
            prefix_samples: prefix_n,
            kind: RouteKind::Right,
        });
    }
    (prefix, routes)
}

fn layout_intersection(cfg: &GeneratorConfig, with_right: bool) -> Layout {
    let (prefix, routes) = intersection_routes(with_right);
    let mut clutter = Vec::new();
    if cfg.include_opposite_lanes {
        // Westbound lane of the main road.
        let mut west = sample_path(&[line(0.0, LANE_WIDTH_M, 250.0, LANE_WIDTH_M)]);
        west.reverse();
        clutter.push(west);
        // Southbound lane of the side road.
        let mut south = sample_path(&[line(131.5, 20.0, 131.5, 100.0)]);
        south.reverse();
        clutter.push(south);
        if with_right {
            // Northbound feed south of the intersection.
            clutter.push(sample_path(&[line(138.5, -100.0, 138.5, -20.0)]));
        }
    }
    Layout {
        routes,
        shared_prefix: Some(prefix),
        clutter,
    }
}

// ---------------------------------------------------------------------------
// Chunking

/// Cut a 5 m sample list into chunks of 5 points; a trailing single point is
/// absorbed into the previous chunk. Consecutive chunks are chained via
/// successor ids. Returns the chunk ids in order.
fn chunkify(samples: &[Point2], next_id: &mut u64, out: &mut Vec<LaneChunk>) -> Vec<u64> {
    assert!(samples.len() >= 2);
    let mut groups: Vec<Vec<Point2>> = samples.chunks(5).map(|g| g.to_vec()).collect();
    if groups.last().map(|g| g.len()) == Some(1) {
        let last = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(last);
    }
    let ids: Vec<u64> = groups
        .iter()
        .map(|g| {
            let id = *next_id;
            *next_id += 1;
            out.push(LaneChunk::new(id, g.clone()));
            id
        })
        .collect();
    for w in ids.windows(2) {
        let idx = out.iter().position(|c| c.chunk_id == w[0]).unwrap();
        out[idx].successor_ids.push(w[1]);
    }
    ids
}

// ---------------------------------------------------------------------------
// Polyline interpolation

fn cum_lengths(pts: &[Point2]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(pts.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for w in pts.windows(2) {
        acc += w[0].distance(&w[1]);
        cum.push(acc);
    }
    cum
}

fn pos_along(pts: &[Point2], cum: &[f64], s: f64) -> Point2 {
    let total = *cum.last().unwrap();
    let s = s.clamp(0.0, total);
    let i = match cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
        Ok(i) => i.min(pts.len() - 2),
        Err(i) => i - 1,
    };
    let seg = cum[i + 1] - cum[i];
    let t = if seg > 0.0 { (s - cum[i]) / seg } else { 0.0 };
    Point2::new(
        pts[i].x + t * (pts[i + 1].x - pts[i].x),
        pts[i].y + t * (pts[i + 1].y - pts[i].y),
    )
}

fn dir_along(pts: &[Point2], cum: &[f64], s: f64) -> Direction2 {
    let a = pos_along(pts, cum, s - 0.5);
    let b = pos_along(pts, cum, s + 0.5);
    b.sub(&a)
}

// ---------------------------------------------------------------------------
// Scene assembly

fn build_scene(
    scene_id: String,
    template: RoadTemplate,
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> (Scene, SceneTruth) {
    let mut layout = match template {
        RoadTemplate::Straight => layout_straight(cfg),
        RoadTemplate::Curve => layout_curve(cfg),
        RoadTemplate::TIntersection => layout_intersection(cfg, false),
        RoadTemplate::Crossroads => layout_intersection(cfg, true),
    };

    // Rigid scene transform: rotation about the origin plus translation.
    let theta = rng.gen_range(0.0..360.0);
    let tx = rng.gen_range(-200.0..200.0);
    let ty = rng.gen_range(-200.0..200.0);
    let origin = Point2::new(0.0, 0.0);
    let xform = |p: &Point2| {
        let r = rotate_about(p, &origin, theta);
        Point2::new(r.x + tx, r.y + ty)
    };
    for r in &mut layout.routes {
        for p in &mut r.samples {
            *p = xform(p);
        }
    }
    if let Some(prefix) = &mut layout.shared_prefix {
        for p in prefix {
            *p = xform(p);
        }
    }
    for c in &mut layout.clutter {
        for p in c {
            *p = xform(p);
        }
    }

    // Chunks: shared approach once, then each branch, then clutter.
    let mut chunks = Vec::new();
    let mut next_id = 0u64;
    let prefix_ids = layout
        .shared_prefix
        .as_ref()
        .map(|p| chunkify(p, &mut next_id, &mut chunks))
        .unwrap_or_default();

    let mut routes = Vec::new();
    for r in &layout.routes {
        let branch_ids = chunkify(&r.samples[r.prefix_samples..], &mut next_id, &mut chunks);
        if let Some(&last) = prefix_ids.last() {
            let idx = chunks.iter().position(|c| c.chunk_id == last).unwrap();
            chunks[idx].successor_ids.push(branch_ids[0]);
        }
        let mut chunk_ids = prefix_ids.clone();
        chunk_ids.extend(&branch_ids);
        routes.push(RouteTruth {
            samples: r.samples.clone(),
            chunk_ids,
            branching: layout.shared_prefix.is_some(),
        });
    }
    for c in &layout.clutter {
        chunkify(c, &mut next_id, &mut chunks);
    }
    for c in &mut chunks {
        c.successor_ids
            .retain(|_| rng.gen::<f64>() >= cfg.successor_drop_fraction);
    }

    // Agents.
    let mut agents = Vec::new();
    let mut truth_agents = HashMap::new();
    for a in 0..cfg.agents_per_scene {
        let agent_id = format!("a{a}");
        let (agent, truth) = place_agent(&agent_id, &layout, &routes, cfg, rng);
        truth_agents.insert(agent_id, truth);
        agents.push(agent);
    }

    (
        Scene {
            scene_id,
            agents,
            lane_chunks: chunks,
            occupancy: None,
            split_tag: None,
        },
        SceneTruth {
            routes,
            agents: truth_agents,
        },
    )
}

fn place_agent(
    agent_id: &str,
    layout: &Layout,
    routes: &[RouteTruth],
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> (AgentRecord, AgentTruth) {
    let v = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
    let ds = v * DT_S;

    let (route_idx, behavior, s_cur) = if let Some(prefix) = &layout.shared_prefix {
        let turning = rng.gen::<f64>() < cfg.turn_fraction;
        let candidates: Vec<usize> = layout
            .routes
            .iter()
            .enumerate()
            .filter(|(_, r)| (r.kind != RouteKind::Through) == turning)
            .map(|(i, _)| i)
            .collect();
        let route_idx = candidates[rng.gen_range(0..candidates.len())];
        let behavior = match layout.routes[route_idx].kind {
            RouteKind::Through => Behavior::KeepLane,
            RouteKind::Left => Behavior::TurnLeft,
            RouteKind::Right => Behavior::TurnRight,
        };
        // Just past the branch point: the maneuver is partially observable.
        let prefix_len = cum_lengths(prefix).last().copied().unwrap();
        (route_idx, behavior, prefix_len + rng.gen_range(2.0..12.0))
    } else {
        let route_idx = rng.gen_range(0..layout.routes.len());
        let total = *cum_lengths(&routes[route_idx].samples).last().unwrap();
        let lo = HISTORY_FRAMES as f64 * ds + 1.0;
        let hi = (total - (HORIZON_FRAMES as f64 * ds).max(ROUTE_HEADROOM_M) - 1.0).max(lo + 1.0);
        let s_cur = rng.gen_range(lo..hi);
        let behavior = if layout.routes.len() >= 2 && rng.gen::<f64>() < cfg.lane_change_fraction {
            let can_left = route_idx + 1 < layout.routes.len();
            let can_right = route_idx > 0;
            match (can_left, can_right) {
                (true, true) if rng.gen::<bool>() => Behavior::LaneChangeLeft,
                (true, false) => Behavior::LaneChangeLeft,
                (true, true) => Behavior::LaneChangeRight,
                _ => Behavior::LaneChangeRight,
            }
        } else {
            Behavior::KeepLane
        };
        (route_idx, behavior, s_cur)
    };

    let pts = &routes[route_idx].samples;
    let cum = cum_lengths(pts);
    let lateral_target = match behavior {
        Behavior::LaneChangeLeft => LANE_WIDTH_M,
        Behavior::LaneChangeRight => -LANE_WIDTH_M,
        _ => 0.0,
    };
    // Lateral offset ramps over 40 m of travel with a smoothstep profile.
    let pos_at = |s: f64| -> Point2 {
        let base = pos_along(pts, &cum, s);
        if lateral_target == 0.0 || s <= s_cur {
            return base;
        }
        let t = ((s - s_cur) / 40.0).clamp(0.0, 1.0);
        let w = t * t * (3.0 - 2.0 * t);
        let d = dir_along(pts, &cum, s);
        let n = d.normalized().map(|u| Direction2::new(-u.dy, u.dx)).unwrap_or(Direction2::new(0.0, 0.0));
        base.offset(&n.scaled(lateral_target * w))
    };

    let history: Vec<(i64, Point2)> = (0..HISTORY_FRAMES)
        .map(|i| {
            let s = s_cur - (HISTORY_FRAMES - 1 - i) as f64 * ds;
            let mut p = pos_at(s);
            if cfg.noise_sigma > 0.0 {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                p = Point2::new(p.x + cfg.noise_sigma * nx, p.y + cfg.noise_sigma * ny);
            }
            (i as i64, p)
        })
        .collect();
    let future: Vec<(i64, Point2)> = (1..=HORIZON_FRAMES)
        .map(|k| ((HISTORY_FRAMES - 1 + k) as i64, pos_at(s_cur + k as f64 * ds)))
        .collect();

    let record = AgentRecord::new(
        agent_id,
        Trajectory::new(agent_id, history),
        Trajectory::new(agent_id, future),
    );
    (
        record,
        AgentTruth {
            route: route_idx,
            behavior,
            speed_mps: v,
        },
    )
}
