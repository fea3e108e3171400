//! Ground ray-strip and heading-up aerial rasters over a precomputed street map.

use serde::{Deserialize, Serialize};

use crate::citygraph::{CityGraph, Position};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub rays: usize,
    pub field_of_view: f64,
    pub max_range: f64,
    pub ray_step: f64,
    /// Street half-width as a fraction of pitch; everything else is building.
    pub street_half_width: f64,
    /// Landmark marker radius as a fraction of pitch.
    pub landmark_radius: f64,
    /// Rays that travel this many pitches without a hit count as a street opening.
    pub opening_pitches: f64,
    pub aerial_extent: f64,
    pub aerial_size: usize,
    /// Map cells per unit.
    pub map_resolution: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            rays: 32,
            field_of_view: 120.0,
            max_range: 60.0,
            ray_step: 0.5,
            street_half_width: 0.25,
            landmark_radius: 0.3,
            opening_pitches: 1.0,
            aerial_extent: 105.0,
            aerial_size: 21,
            map_resolution: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn ground_channels(&self, categories: usize) -> usize {
        2 + categories
    }

    pub fn aerial_channels(&self, categories: usize) -> usize {
        2 + categories
    }
}

const NO_LANDMARK: u8 = u8::MAX;

/// Rasterized street occupancy and landmark footprints for the whole city.
#[derive(Debug, Clone)]
pub struct StreetMap {
    origin: Position,
    resolution: f64,
    width: usize,
    height: usize,
    street: Vec<bool>,
    landmark: Vec<u8>,
    pub categories: usize,
    pub pitch: f64,
}

impl StreetMap {
    pub fn build(graph: &CityGraph, cfg: &RenderConfig) -> Self {
        let pitch = graph.config.pitch;
        let pad = cfg.max_range.max(cfg.aerial_extent) + pitch;
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &graph.nodes {
            min_x = min_x.min(p.x);
            min_y = min_y.min(p.y);
            max_x = max_x.max(p.x);
            max_y = max_y.max(p.y);
        }
        let origin = Position::new(min_x - pad, min_y - pad);
        let res = cfg.map_resolution;
        let width = ((max_x - min_x + 2.0 * pad) * res).ceil() as usize + 1;
        let height = ((max_y - min_y + 2.0 * pad) * res).ceil() as usize + 1;
        let mut map = Self {
            origin,
            resolution: res,
            width,
            height,
            street: vec![false; width * height],
            landmark: vec![NO_LANDMARK; width * height],
            categories: graph.config.landmark_categories as usize,
            pitch,
        };
        let half = cfg.street_half_width * pitch;
        for &(a, b) in &graph.edges {
            map.paint_segment(graph.position(a), graph.position(b), half);
        }
        // intersections stay open even where every incident street was removed
        for p in &graph.nodes {
            map.paint_segment(*p, *p, half);
        }
        let radius = cfg.landmark_radius * pitch;
        for (&node, &cat) in &graph.landmarks {
            map.paint_landmark(graph.position(node), radius, cat);
        }
        map
    }

    fn cell_bounds(&self, lo: f64, hi: f64, origin: f64, limit: usize) -> (usize, usize) {
        let a = ((lo - origin) * self.resolution).floor().max(0.0) as usize;
        let b = (((hi - origin) * self.resolution).ceil() as usize).min(limit - 1);
        (a, b)
    }

    fn cell_center(&self, ix: usize, iy: usize) -> Position {
        Position::new(
            self.origin.x + (ix as f64 + 0.5) / self.resolution,
            self.origin.y + (iy as f64 + 0.5) / self.resolution,
        )
    }

    fn paint_segment(&mut self, a: Position, b: Position, half: f64) {
        let (x0, x1) = self.cell_bounds(a.x.min(b.x) - half, a.x.max(b.x) + half, self.origin.x, self.width);
        let (y0, y1) = self.cell_bounds(a.y.min(b.y) - half, a.y.max(b.y) + half, self.origin.y, self.height);
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let c = self.cell_center(ix, iy);
                if point_segment_distance(c, a, b) <= half {
                    self.street[iy * self.width + ix] = true;
                }
            }
        }
    }

    fn paint_landmark(&mut self, p: Position, radius: f64, cat: u8) {
        let (x0, x1) = self.cell_bounds(p.x - radius, p.x + radius, self.origin.x, self.width);
        let (y0, y1) = self.cell_bounds(p.y - radius, p.y + radius, self.origin.y, self.height);
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let c = self.cell_center(ix, iy);
                if (c.x - p.x).hypot(c.y - p.y) <= radius {
                    self.landmark[iy * self.width + ix] = cat;
                }
            }
        }
    }

    fn index(&self, x: f64, y: f64) -> Option<usize> {
        let fx = ((x - self.origin.x) * self.resolution).floor();
        let fy = ((y - self.origin.y) * self.resolution).floor();
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.width || iy >= self.height {
            return None;
        }
        Some(iy * self.width + ix)
    }

    /// Street occupancy; anything off the map is building.
    pub fn is_street(&self, x: f64, y: f64) -> bool {
        self.index(x, y).is_some_and(|i| self.street[i])
    }

    pub fn landmark_at(&self, x: f64, y: f64) -> Option<u8> {
        self.index(x, y)
            .map(|i| self.landmark[i])
            .filter(|&c| c != NO_LANDMARK)
    }
}

fn point_segment_distance(p: Position, a: Position, b: Position) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.x - (a.x + t * dx)).hypot(p.y - (a.y + t * dy))
}

/// Unit vector for a compass bearing (degrees clockwise from North).
fn direction(bearing_deg: f64) -> (f64, f64) {
    let r = bearing_deg.to_radians();
    (r.sin(), r.cos())
}

/// Egocentric ray strip, rays ordered left to right across the field of view.
///
/// Per ray: `[inverse distance, street opening, landmark one-hot...]`, flattened row-major.
pub fn render_ground(map: &StreetMap, cfg: &RenderConfig, origin: Position, heading: f64) -> Vec<f32> {
    let channels = cfg.ground_channels(map.categories);
    let mut out = vec![0.0f32; cfg.rays * channels];
    let near = cfg.street_half_width * map.pitch;
    let opening = cfg.opening_pitches * map.pitch;
    for r in 0..cfg.rays {
        let angle = heading - 0.5 * cfg.field_of_view + cfg.field_of_view * (r as f64 + 0.5) / cfg.rays as f64;
        let (dx, dy) = direction(angle);
        let mut dist = cfg.max_range;
        let mut seen_landmark = None;
        let mut t = cfg.ray_step;
        while t <= cfg.max_range {
            let (x, y) = (origin.x + dx * t, origin.y + dy * t);
            if seen_landmark.is_none() {
                seen_landmark = map.landmark_at(x, y);
            }
            if !map.is_street(x, y) {
                dist = t;
                break;
            }
            t += cfg.ray_step;
        }
        let row = &mut out[r * channels..(r + 1) * channels];
        row[0] = (near / dist.max(near)) as f32;
        row[1] = if dist >= opening { 1.0 } else { 0.0 };
        if let Some(cat) = seen_landmark {
            row[2 + cat as usize] = 1.0;
        }
    }
    out
}

/// Heading-up top-down crop, `size x size x channels` row-major with row 0 ahead.
///
/// Channels: `[street occupancy, landmark one-hot..., agent marker]`.
pub fn render_aerial(map: &StreetMap, cfg: &RenderConfig, origin: Position, heading: f64) -> Vec<f32> {
    let w = cfg.aerial_size;
    let channels = cfg.aerial_channels(map.categories);
    let mut out = vec![0.0f32; w * w * channels];
    let cell = cfg.aerial_extent / w as f64;
    let center = (w as f64 - 1.0) / 2.0;
    let (fx, fy) = direction(heading);
    let (rx, ry) = (fy, -fx);
    const SUB: [(f64, f64); 4] = [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)];
    for row in 0..w {
        for col in 0..w {
            let base = (row * w + col) * channels;
            let mut street = 0.0;
            for &(su, sv) in &SUB {
                let u = (col as f64 - center + su) * cell;
                let v = (center - row as f64 + sv) * cell;
                let (x, y) = (origin.x + v * fx + u * rx, origin.y + v * fy + u * ry);
                if map.is_street(x, y) {
                    street += 0.25;
                }
                if let Some(cat) = map.landmark_at(x, y) {
                    out[base + 1 + cat as usize] = 1.0;
                }
            }
            out[base] = street as f32;
        }
    }
    let mid = w / 2;
    out[(mid * w + mid) * channels + channels - 1] = 1.0;
    out
}
