//! Procedural street graph shared by the ground and aerial renderers.
//!
//! Each region is an independent jittered grid of streets laid out side by
//! side along the x axis with a gap between bounding boxes. A fraction of
//! street segments is removed as long as every region stays connected.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Straight-line distance between two positions.
pub fn bird_flight_distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Bearing from `a` to `b` in degrees clockwise from North (+y), in `[0, 360)`.
pub fn bearing(a: Position, b: Position) -> f64 {
    normalize_degrees((b.x - a.x).atan2(b.y - a.y).to_degrees())
}

pub fn normalize_degrees(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Smallest absolute angle between two bearings, in `[0, 180]`.
pub fn angular_difference(a: f64, b: f64) -> f64 {
    let d = normalize_degrees(a - b);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn contains(&self, p: Position) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn overlaps(&self, other: &Bounds) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }

    pub fn center(&self) -> Position {
        Position::new(
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    pub fn diagonal(&self) -> f64 {
        (self.max_x - self.min_x).hypot(self.max_y - self.min_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionRole {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub bounds: Bounds,
    pub node_ids: BTreeSet<NodeId>,
    pub role: RegionRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityGenConfig {
    /// Street spacing in units.
    pub pitch: f64,
    /// Node displacement radius as a fraction of pitch, in `[0, 0.5)`.
    pub jitter: f64,
    /// Fraction of street segments removed.
    pub edge_removal: f64,
    pub train_regions: usize,
    /// Grid cells per region side.
    pub region_cells: usize,
    pub landmark_density: f64,
    pub landmark_categories: u8,
    /// Gap between region bounding boxes, in pitches.
    pub region_gap: f64,
    pub max_attempts: u32,
}

impl Default for CityGenConfig {
    fn default() -> Self {
        Self {
            pitch: 10.0,
            jitter: 0.2,
            edge_removal: 0.1,
            train_regions: 2,
            region_cells: 24,
            landmark_density: 0.15,
            landmark_categories: 8,
            region_gap: 4.0,
            max_attempts: 64,
        }
    }
}

impl CityGenConfig {
    /// Plain grid: no jitter, no removed streets.
    pub fn unjittered() -> Self {
        Self {
            jitter: 0.0,
            edge_removal: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CityError> {
        let bad = |m: &str| Err(CityError::InvalidConfig(m.to_string()));
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return bad("pitch must be positive");
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad("jitter must be in [0, 0.5)");
        }
        if !(0.0..1.0).contains(&self.edge_removal) {
            return bad("edge_removal must be in [0, 1)");
        }
        if self.train_regions < 1 {
            return bad("need at least one training region");
        }
        if self.region_cells < 8 {
            return bad("regions must be at least 8x8 cells");
        }
        if !(0.0..=1.0).contains(&self.landmark_density) {
            return bad("landmark_density must be in [0, 1]");
        }
        if self.landmark_categories == 0 {
            return bad("need at least one landmark category");
        }
        if self.region_gap < 1.0 {
            return bad("region_gap must be at least one pitch");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CityError {
    #[error("invalid city config: {0}")]
    InvalidConfig(String),
    #[error("region {region} stayed disconnected after {attempts} edge-removal attempts")]
    Disconnected { region: String, attempts: u32 },
    #[error("unknown region {0:?}")]
    UnknownRegion(String),
    #[error("node {0} is not in region {1:?}")]
    NodeNotInRegion(NodeId, String),
    #[error("graph format version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Immutable street graph with landmarks and named regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityGraph {
    pub version: u32,
    pub seed: u64,
    pub config: CityGenConfig,
    pub nodes: Vec<Position>,
    /// Undirected edges, each stored once with the smaller id first, sorted.
    pub edges: Vec<(NodeId, NodeId)>,
    pub landmarks: BTreeMap<NodeId, u8>,
    pub regions: BTreeMap<String, RegionSpec>,
    #[serde(skip)]
    adjacency: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub node: NodeId,
    pub bearing: f64,
    pub distance: f64,
}

pub fn region_name(index: usize, role: RegionRole) -> String {
    match role {
        RegionRole::Train => format!("train{index}"),
        RegionRole::Heldout => "heldout".to_string(),
    }
}

/// Deterministic generation from `(seed, config)`.
pub fn generate_city(seed: u64, config: &CityGenConfig) -> Result<CityGraph, CityError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.region_cells + 1;
    let pitch = config.pitch;
    let margin = config.jitter * pitch;
    let side = config.region_cells as f64 * pitch;
    let stride = side + 2.0 * margin + config.region_gap * pitch;

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut regions = BTreeMap::new();
    let total = config.train_regions + 1;
    for r in 0..total {
        let (name, role) = if r < config.train_regions {
            (region_name(r, RegionRole::Train), RegionRole::Train)
        } else {
            (region_name(r, RegionRole::Heldout), RegionRole::Heldout)
        };
        let origin_x = r as f64 * stride + margin;
        let origin_y = margin;
        let base = nodes.len() as NodeId;
        for j in 0..n {
            for i in 0..n {
                let (dx, dy) = if margin > 0.0 {
                    // uniform in a disk of radius `margin`
                    let rad = margin * rng.gen::<f64>().sqrt();
                    let theta = rng.gen::<f64>() * std::f64::consts::TAU;
                    (rad * theta.cos(), rad * theta.sin())
                } else {
                    (0.0, 0.0)
                };
                nodes.push(Position::new(
                    origin_x + i as f64 * pitch + dx,
                    origin_y + j as f64 * pitch + dy,
                ));
            }
        }
        let id = |i: usize, j: usize| base + (j * n + i) as NodeId;
        let mut region_edges = Vec::new();
        for j in 0..n {
            for i in 0..n {
                if i + 1 < n {
                    region_edges.push((id(i, j), id(i + 1, j)));
                }
                if j + 1 < n {
                    region_edges.push((id(i, j), id(i, j + 1)));
                }
            }
        }
        let node_ids: BTreeSet<NodeId> = (base..base + (n * n) as NodeId).collect();
        let kept = remove_edges(&region_edges, &node_ids, config, &mut rng)
            .ok_or_else(|| CityError::Disconnected {
                region: name.clone(),
                attempts: config.max_attempts,
            })?;
        edges.extend(kept);
        let bounds = Bounds {
            min_x: origin_x - margin,
            min_y: origin_y - margin,
            max_x: origin_x + side + margin,
            max_y: origin_y + side + margin,
        };
        regions.insert(
            name.clone(),
            RegionSpec {
                name,
                bounds,
                node_ids,
                role,
            },
        );
    }
    let mut landmarks = BTreeMap::new();
    for id in 0..nodes.len() as NodeId {
        if rng.gen::<f64>() < config.landmark_density {
            landmarks.insert(id, rng.gen_range(0..config.landmark_categories));
        }
    }
    edges.sort_unstable();
    let mut graph = CityGraph {
        version: GRAPH_FORMAT_VERSION,
        seed,
        config: config.clone(),
        nodes,
        edges,
        landmarks,
        regions,
        adjacency: Vec::new(),
    };
    graph.rebuild_adjacency();
    Ok(graph)
}

fn remove_edges<R: Rng>(
    edges: &[(NodeId, NodeId)],
    members: &BTreeSet<NodeId>,
    config: &CityGenConfig,
    rng: &mut R,
) -> Option<Vec<(NodeId, NodeId)>> {
    let remove = (edges.len() as f64 * config.edge_removal).round() as usize;
    if remove == 0 {
        return Some(edges.to_vec());
    }
    for _ in 0..config.max_attempts {
        let mut shuffled = edges.to_vec();
        shuffled.shuffle(rng);
        let kept = &shuffled[remove..];
        if is_connected(kept, members) {
            let mut out = kept.to_vec();
            out.sort_unstable();
            return Some(out);
        }
    }
    None
}

fn is_connected(edges: &[(NodeId, NodeId)], members: &BTreeSet<NodeId>) -> bool {
    let Some(&start) = members.iter().next() else {
        return true;
    };
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &(a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &w in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            if members.contains(&w) && seen.insert(w) {
                queue.push_back(w);
            }
        }
    }
    seen.len() == members.len()
}

impl CityGraph {
    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        self.adjacency = adj;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CityError> {
        let mut g: CityGraph = serde_json::from_str(s)?;
        if g.version != GRAPH_FORMAT_VERSION {
            return Err(CityError::Version {
                found: g.version,
                expected: GRAPH_FORMAT_VERSION,
            });
        }
        g.rebuild_adjacency();
        Ok(g)
    }

    pub fn position(&self, node: NodeId) -> Position {
        self.nodes[node as usize]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.adjacency[node as usize].len()
    }

    pub fn region(&self, name: &str) -> Result<&RegionSpec, CityError> {
        self.regions
            .get(name)
            .ok_or_else(|| CityError::UnknownRegion(name.to_string()))
    }

    pub fn region_names(&self, role: RegionRole) -> Vec<String> {
        self.regions
            .values()
            .filter(|r| r.role == role)
            .map(|r| r.name.clone())
            .collect()
    }

    pub fn landmark(&self, node: NodeId) -> Option<u8> {
        self.landmarks.get(&node).copied()
    }

    /// Neighbors sorted by bearing (clockwise from North).
    ///
    /// Panics on an unknown node id.
    pub fn neighbors(&self, node: NodeId) -> Vec<Neighbor> {
        assert!(
            (node as usize) < self.nodes.len(),
            "unknown node id {node}"
        );
        let p = self.position(node);
        let mut out: Vec<Neighbor> = self.adjacency[node as usize]
            .iter()
            .map(|&w| {
                let q = self.position(w);
                Neighbor {
                    node: w,
                    bearing: bearing(p, q),
                    distance: bird_flight_distance(p, q),
                }
            })
            .collect();
        out.sort_by(|a, b| a.bearing.total_cmp(&b.bearing).then(a.node.cmp(&b.node)));
        out
    }

    pub fn edge_lengths(&self) -> impl Iterator<Item = f64> + '_ {
        self.edges
            .iter()
            .map(|&(a, b)| bird_flight_distance(self.position(a), self.position(b)))
    }

    /// True if every member of the region is reachable from any other using region edges.
    pub fn region_connected(&self, name: &str) -> Result<bool, CityError> {
        let region = self.region(name)?;
        Ok(is_connected(&self.edges, &region.node_ids))
    }

    /// Samples a goal uniformly among region nodes whose bird-flight distance
    /// from `from` lies in `(tolerance, max_distance]`.
    ///
    /// When nothing is eligible, returns the farthest node in the region and
    /// `fallback = true`.
    pub fn sample_goal<R: Rng + ?Sized>(
        &self,
        region: &str,
        from: NodeId,
        tolerance: f64,
        max_distance: f64,
        rng: &mut R,
    ) -> Result<GoalSample, CityError> {
        let spec = self.region(region)?;
        if !spec.node_ids.contains(&from) {
            return Err(CityError::NodeNotInRegion(from, region.to_string()));
        }
        let origin = self.position(from);
        let eligible: Vec<NodeId> = spec
            .node_ids
            .iter()
            .copied()
            .filter(|&n| {
                let d = bird_flight_distance(origin, self.position(n));
                d > tolerance && d <= max_distance
            })
            .collect();
        if let Some(&node) = eligible.choose(rng) {
            return Ok(GoalSample {
                node,
                fallback: false,
            });
        }
        let node = spec
            .node_ids
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let da = bird_flight_distance(origin, self.position(a));
                let db = bird_flight_distance(origin, self.position(b));
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("regions are non-empty");
        Ok(GoalSample {
            node,
            fallback: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoalSample {
    pub node: NodeId,
    /// No node was eligible and the farthest node was returned instead.
    pub fallback: bool,
}
