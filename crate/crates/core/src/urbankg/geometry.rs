//! Planar/geodesic helpers for region polygons and point features.

use crate::error::{Error, Result};

/// `(x, y)`: longitude/latitude in degrees, or kilometres on a planar city.
pub type Point = (f64, f64);

const EARTH_RADIUS_KM: f64 = 6371.0088;
const EPS: f64 = 1e-9;

/// Distance in kilometres.
pub fn distance_km(a: Point, b: Point, planar: bool) -> f64 {
    if planar {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    } else {
        haversine_km(a, b)
    }
}

pub fn haversine_km(a: Point, b: Point) -> f64 {
    let (lon1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lon2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Simple polygon given by its outer ring (closing vertex optional).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    ring: Vec<Point>,
}

impl Polygon {
    pub fn new(mut ring: Vec<Point>) -> Result<Self> {
        if ring.len() > 1 && ring.first() == ring.last() {
            ring.pop();
        }
        if ring.len() < 3 {
            return Err(Error::Format("polygon needs at least three distinct vertices".into()));
        }
        Ok(Self { ring })
    }

    pub fn ring(&self) -> &[Point] {
        &self.ring
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.ring.len();
        (0..n).map(move |i| (self.ring[i], self.ring[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        self.edges().map(|(a, b)| a.0 * b.1 - b.0 * a.1).sum::<f64>() / 2.0
    }

    /// Area centroid; falls back to the vertex mean for degenerate rings.
    pub fn centroid(&self) -> Point {
        let a = self.signed_area();
        if a.abs() < 1e-15 {
            let n = self.ring.len() as f64;
            let (sx, sy) = self.ring.iter().fold((0.0, 0.0), |s, p| (s.0 + p.0, s.1 + p.1));
            return (sx / n, sy / n);
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for (p, q) in self.edges() {
            let cross = p.0 * q.1 - q.0 * p.1;
            cx += (p.0 + q.0) * cross;
            cy += (p.1 + q.1) * cross;
        }
        (cx / (6.0 * a), cy / (6.0 * a))
    }

    pub fn bbox(&self) -> (Point, Point) {
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.ring {
            lo = (lo.0.min(p.0), lo.1.min(p.1));
            hi = (hi.0.max(p.0), hi.1.max(p.1));
        }
        (lo, hi)
    }

    /// Even-odd ray casting; boundary points count as inside.
    pub fn contains(&self, p: Point) -> bool {
        if self.edges().any(|(a, b)| on_segment(p, a, b)) {
            return true;
        }
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.1 > p.1) != (b.1 > p.1) {
                let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
                if p.0 < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// True when the boundaries share a segment of positive length.
    pub fn shares_border(&self, other: &Polygon) -> bool {
        let (alo, ahi) = self.bbox();
        let (blo, bhi) = other.bbox();
        if alo.0 > bhi.0 + EPS || blo.0 > ahi.0 + EPS || alo.1 > bhi.1 + EPS || blo.1 > ahi.1 + EPS {
            return false;
        }
        self.edges().any(|(a, b)| other.edges().any(|(c, d)| collinear_overlap(a, b, c, d) > EPS.sqrt() * 1e-2))
    }

    pub fn to_wkt(&self) -> String {
        let mut pts: Vec<String> = self.ring.iter().map(|p| format!("{} {}", fmt_coord(p.0), fmt_coord(p.1))).collect();
        pts.push(pts[0].clone());
        format!("POLYGON(({}))", pts.join(", "))
    }
}

/// Coordinates printed with enough digits to round-trip exactly.
pub fn fmt_coord(v: f64) -> String {
    format!("{v}")
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    if cross.abs() > EPS * len.max(1.0) {
        return false;
    }
    p.0 >= a.0.min(b.0) - EPS && p.0 <= a.0.max(b.0) + EPS && p.1 >= a.1.min(b.1) - EPS && p.1 <= a.1.max(b.1) + EPS
}

/// Length of the overlap of two segments when collinear, else zero.
fn collinear_overlap(a: Point, b: Point, c: Point, d: Point) -> f64 {
    let dir = (b.0 - a.0, b.1 - a.1);
    let len = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
    if len < EPS {
        return 0.0;
    }
    let tol = 1e-7 * len.max(1.0);
    let dist = |p: Point| ((dir.0 * (p.1 - a.1) - dir.1 * (p.0 - a.0)) / len).abs();
    if dist(c) > tol || dist(d) > tol {
        return 0.0;
    }
    let proj = |p: Point| ((p.0 - a.0) * dir.0 + (p.1 - a.1) * dir.1) / len;
    let (t0, t1) = (proj(c).min(proj(d)), proj(c).max(proj(d)));
    (t1.min(len) - t0.max(0.0)).max(0.0)
}

/// Parses `POLYGON((x y, x y, ...))`; holes are ignored.
pub fn parse_wkt_polygon(s: &str) -> Result<Polygon> {
    let t = s.trim();
    let upper = t.to_ascii_uppercase();
    let rest = upper
        .strip_prefix("POLYGON")
        .ok_or_else(|| Error::Format(format!("not a WKT polygon: {s}")))?;
    let offset = t.len() - rest.len();
    let body = t[offset..].trim();
    let open = body.find("((").ok_or_else(|| Error::Format("missing '(('".into()))?;
    let close = body[open..].find(')').ok_or_else(|| Error::Format("missing ')'".into()))? + open;
    let ring = &body[open + 2..close];
    let mut pts = Vec::new();
    for pair in ring.split(',') {
        let mut it = pair.split_whitespace();
        let x = it.next().and_then(|v| v.parse::<f64>().ok());
        let y = it.next().and_then(|v| v.parse::<f64>().ok());
        match (x, y, it.next()) {
            (Some(x), Some(y), None) => pts.push((x, y)),
            _ => return Err(Error::Format(format!("bad coordinate pair '{}'", pair.trim()))),
        }
    }
    Polygon::new(pts)
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64) -> Polygon {
        Polygon::new(vec![(x, y), (x + 1.0, y), (x + 1.0, y + 1.0), (x, y + 1.0)]).unwrap()
    }

    #[test]
    fn wkt_round_trip() {
        let p = square(0.5, -2.0);
        let q = parse_wkt_polygon(&p.to_wkt()).unwrap();
        assert_eq!(p, q);
        assert!(parse_wkt_polygon("POINT(1 2)").is_err());
        assert!(parse_wkt_polygon("POLYGON((0 0, 1 x, 1 1))").is_err());
    }

    #[test]
    fn centroid_and_contains() {
        let p = square(2.0, 3.0);
        assert_eq!(p.centroid(), (2.5, 3.5));
        assert!(p.contains((2.5, 3.5)));
        assert!(p.contains((2.0, 3.2)));
        assert!(!p.contains((3.5, 3.5)));
    }

    #[test]
    fn border_requires_shared_segment() {
        let a = square(0.0, 0.0);
        assert!(a.shares_border(&square(1.0, 0.0)));
        assert!(a.shares_border(&square(0.0, -1.0)));
        assert!(!a.shares_border(&square(1.0, 1.0)));
        assert!(!a.shares_border(&square(2.0, 0.0)));
        let tall = Polygon::new(vec![(1.0, -0.5), (2.0, -0.5), (2.0, 0.5), (1.0, 0.5)]).unwrap();
        assert!(a.shares_border(&tall));
    }

    #[test]
    fn haversine_one_degree_latitude() {
        let d = haversine_km((116.0, 39.0), (116.0, 40.0));
        assert!((d - 111.195).abs() < 0.01, "{d}");
    }
}
