//! Planar geometry for spatial blocks.
//!
//! Coordinates are treated as planar; any geographic projection happens before
//! data reaches this crate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance (domain units) for on-edge tests.
pub const EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Point2,
    pub max: Point2,
}

impl BoundingBox {
    pub fn new(min: Point2, max: Point2) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y) {
            return Err(Error::InvalidGeometry(format!(
                "bounding box min {min:?} must be below max {max:?} componentwise"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn unit() -> Self {
        Self { min: Point2::new(0.0, 0.0), max: Point2::new(1.0, 1.0) }
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon {
            vertices: vec![
                self.min,
                Point2::new(self.max.x, self.min.y),
                self.max,
                Point2::new(self.min.x, self.max.y),
            ],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2 {
        Point2::new(rng.random_range(self.min.x..self.max.x), rng.random_range(self.min.y..self.max.y))
    }
}

/// A simple polygon stored as an open, counter-clockwise ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    vertices: Vec<Point2>,
}

fn signed_area(v: &[Point2]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (p, q) = (v[i], v[(i + 1) % n]);
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Point2, a: Point2, b: Point2) -> bool {
    let len = a.dist(&b);
    if len == 0.0 {
        return p.dist(&a) <= EDGE_TOL;
    }
    cross(a, b, p).abs() / len <= EDGE_TOL
        && p.x >= a.x.min(b.x) - EDGE_TOL
        && p.x <= a.x.max(b.x) + EDGE_TOL
        && p.y >= a.y.min(b.y) - EDGE_TOL
        && p.y <= a.y.max(b.y) + EDGE_TOL
}

fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

impl Polygon {
    /// Validates and normalizes a ring. A repeated closing vertex is dropped.
    pub fn new(mut vertices: Vec<Point2>) -> Result<Self> {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::InvalidGeometry(format!("polygon needs at least 3 vertices, got {}", vertices.len())));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite vertex".into()));
        }
        let area = signed_area(&vertices);
        let scale = vertices.iter().map(|p| p.x.abs().max(p.y.abs())).fold(1.0_f64, f64::max);
        if area.abs() <= 1e-14 * scale * scale {
            return Err(Error::InvalidGeometry("degenerate polygon (zero area)".into()));
        }
        let n = vertices.len();
        // Non-adjacent edges must not touch.
        for i in 0..n {
            for j in (i + 2)..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                let (c, d) = (vertices[j], vertices[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return Err(Error::InvalidGeometry(format!("self-intersecting ring (edges {i} and {j})")));
                }
            }
        }
        if area < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn bbox(&self) -> BoundingBox {
        let mut min = self.vertices[0];
        let mut max = self.vertices[0];
        for p in &self.vertices[1..] {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        BoundingBox { min, max }
    }

    pub fn centroid(&self) -> Point2 {
        let v = &self.vertices;
        let n = v.len();
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..n {
            let (p, q) = (v[i], v[(i + 1) % n]);
            let w = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
        }
        let a6 = 6.0 * self.area();
        Point2::new(cx / a6, cy / a6)
    }

    /// Ray casting; points on an edge count as inside.
    pub fn contains(&self, p: &Point2) -> bool {
        let v = &self.vertices;
        let n = v.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (v[i], v[j]);
            if on_segment(*p, a, b) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

/// Shoelace area of a validated polygon.
pub fn polygon_area(poly: &Polygon) -> f64 {
    poly.area()
}

/// Uniform draws inside `poly` by rejection from its bounding box.
pub fn sample_in_polygon<R: Rng + ?Sized>(poly: &Polygon, n: usize, rng: &mut R) -> Result<Vec<Point2>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let bbox = poly.bbox();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = bbox.sample(rng);
        if poly.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Keeps the part of a convex ring on the side of `n·p <= c`.
fn clip_half_plane(ring: &[Point2], nx: f64, ny: f64, c: f64) -> Vec<Point2> {
    let mut out = Vec::with_capacity(ring.len() + 1);
    let m = ring.len();
    for i in 0..m {
        let cur = ring[i];
        let nxt = ring[(i + 1) % m];
        let fc = nx * cur.x + ny * cur.y - c;
        let fn_ = nx * nxt.x + ny * nxt.y - c;
        if fc <= 0.0 {
            out.push(cur);
        }
        if (fc < 0.0 && fn_ > 0.0) || (fc > 0.0 && fn_ < 0.0) {
            let t = fc / (fc - fn_);
            out.push(Point2::new(cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)));
        }
    }
    out
}

/// One convex cell per seed, clipped to `bbox`.
///
/// Each cell starts as the box and is cut by the perpendicular-bisector
/// half-plane of every other seed, which is quadratic in the seed count.
pub fn voronoi_blocks(seeds: &[Point2], bbox: &BoundingBox) -> Result<Vec<Polygon>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    for (i, s) in seeds.iter().enumerate() {
        if !bbox.contains(s) {
            return Err(Error::InvalidArgument(format!("seed {i} lies outside the box")));
        }
        for (j, t) in seeds.iter().enumerate().take(i) {
            if s == t {
                return Err(Error::InvalidArgument(format!("seeds {j} and {i} coincide")));
            }
        }
    }
    let base = bbox.to_polygon();
    seeds
        .iter()
        .enumerate()
        .map(|(i, si)| {
            let mut ring = base.vertices.clone();
            for (j, sj) in seeds.iter().enumerate() {
                if i == j {
                    continue;
                }
                // |p - si|^2 <= |p - sj|^2  <=>  2(sj - si)·p <= |sj|^2 - |si|^2
                let nx = 2.0 * (sj.x - si.x);
                let ny = 2.0 * (sj.y - si.y);
                let c = sj.x * sj.x + sj.y * sj.y - si.x * si.x - si.y * si.y;
                ring = clip_half_plane(&ring, nx, ny, c);
                if ring.len() < 3 {
                    break;
                }
            }
            dedup_ring(&mut ring);
            Polygon::new(ring)
        })
        .collect()
}

fn dedup_ring(ring: &mut Vec<Point2>) {
    ring.dedup_by(|a, b| a.dist(b) <= EDGE_TOL);
    while ring.len() > 1 && ring[0].dist(ring.last().unwrap()) <= EDGE_TOL {
        ring.pop();
    }
}
