//! Deterministic synthetic cities with planted site-selection regularities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::urbankg::geometry::{cosine, Point, Polygon};
use crate::urbankg::sources::{
    BaRow, BrandRow, CheckinRow, ClickRow, FlowRow, PoiRow, RegionRow, SiteRow, TaxonomyRow,
};
use crate::urbankg::{write_sources, RawSources};

const ORIGIN: Point = (116.0, 39.5);
const KM_PER_DEG_LAT: f64 = 111.195;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CityConfig {
    /// `(rows, cols)` of square regions; mutually exclusive with Voronoi cells.
    pub grid: Option<(usize, usize)>,
    pub voronoi_seed_count: Option<usize>,
    /// Side of one grid cell (or the mean Voronoi cell) in km.
    pub region_km: f64,
    pub n_brands: usize,
    /// Unbranded background POIs.
    pub n_pois: usize,
    pub n_ba: usize,
    /// `(n_cate1, n_cate2, n_cate3)`.
    pub category_tree: (usize, usize, usize),
    pub seed: u64,
    /// Emit kilometre coordinates instead of lon/lat.
    pub planar: bool,
    pub zipf_exponent: f64,
    pub max_stores: usize,
    pub min_stores: usize,
    /// Trips per region distributed by the gravity model.
    pub trips_per_region: u64,
    pub n_users: usize,
    pub checkins_per_user: usize,
    /// Random RelatedBrand pairs added on top of planted colocation pairs.
    pub related_noise_pairs: usize,
    /// Probability that a background POI takes its region's dominant Cate1.
    pub function_purity: f64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            grid: Some((6, 6)),
            voronoi_seed_count: None,
            region_km: 1.0,
            n_brands: 8,
            n_pois: 300,
            n_ba: 4,
            category_tree: (8, 16, 32),
            seed: 0,
            planar: false,
            zipf_exponent: 1.1,
            max_stores: 60,
            min_stores: 5,
            trips_per_region: 300,
            n_users: 200,
            checkins_per_user: 5,
            related_noise_pairs: 2,
            function_purity: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternKind {
    RelatedBrandColocation,
    FlowFollowing,
    FunctionMatching,
}

/// `brand_ids[0]` is the anchor; the remaining brands follow it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedPattern {
    pub kind: PatternKind,
    pub brand_ids: Vec<usize>,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSite {
    pub brand_id: String,
    pub region_id: String,
    /// Whether the site was placed by the pattern (else uniformly).
    pub obeyed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTruth {
    pub kind: PatternKind,
    pub anchor: String,
    pub followers: Vec<String>,
    pub strength: f64,
    pub sites: Vec<PlantedSite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub seed: u64,
    pub patterns: Vec<PatternTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCity {
    pub sources: RawSources,
    pub truth: PlantedTruth,
}

impl SynthCity {
    /// Writes the source TSV suite and `planted_truth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_sources(dir, &self.sources)?;
        let json = serde_json::to_string_pretty(&self.truth)?;
        fs::write(dir.join("planted_truth.json"), json + "\n")?;
        Ok(())
    }
}

pub fn brand_id(i: usize) -> String {
    format!("b{i}")
}

pub fn brand_name(i: usize) -> String {
    format!("Brand{i}")
}

/// One store record before POI materialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Store {
    pub brand: usize,
    pub region: usize,
    pub obeyed: bool,
}

/// Region-level context needed by the pattern placers.
pub struct PlacementContext {
    /// Top outgoing flow destination per region.
    pub top_flow: Vec<Option<usize>>,
    /// Most functionally similar other region per region.
    pub most_similar: Vec<Option<usize>>,
}

fn validate(cfg: &CityConfig, patterns: &[PlantedPattern]) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    match (cfg.grid, cfg.voronoi_seed_count) {
        (Some((r, c)), None) if r >= 1 && c >= 1 => {}
        (None, Some(n)) if n >= 1 => {}
        _ => return bad("exactly one of grid (rows, cols ≥ 1) or voronoi_seed_count ≥ 1 is required".into()),
    }
    let (c1, c2, c3) = cfg.category_tree;
    if cfg.n_brands == 0 || c1 == 0 || c2 == 0 || c3 == 0 || cfg.region_km <= 0.0 {
        return bad("counts must be at least 1".into());
    }
    if cfg.min_stores == 0 || cfg.min_stores > cfg.max_stores {
        return bad("need 1 <= min_stores <= max_stores".into());
    }
    let mut follower_of = vec![false; cfg.n_brands];
    for p in patterns {
        if !(0.0..=1.0).contains(&p.strength) {
            return bad(format!("pattern strength {} outside [0, 1]", p.strength));
        }
        if p.brand_ids.len() < 2 {
            return bad(format!("{:?} needs an anchor and at least one follower brand", p.kind));
        }
        if let Some(b) = p.brand_ids.iter().find(|&&b| b >= cfg.n_brands) {
            return bad(format!("pattern brand {b} out of range"));
        }
        let anchor = p.brand_ids[0];
        for &f in &p.brand_ids[1..] {
            if f == anchor {
                return bad(format!("brand {f} cannot follow itself"));
            }
            if follower_of[f] {
                return bad(format!("brand {f} follows two patterns"));
            }
            follower_of[f] = true;
        }
    }
    Ok(())
}

/// Uniform base placement: every store of every brand lands on a uniformly
/// drawn region.
pub fn base_sites(n_regions: usize, store_counts: &[usize], rng: &mut impl Rng) -> Vec<Store> {
    let mut out = Vec::new();
    for (brand, &n) in store_counts.iter().enumerate() {
        for _ in 0..n {
            out.push(Store { brand, region: rng.gen_range(0..n_regions), obeyed: false });
        }
    }
    out
}

/// Re-places follower stores: with probability `strength` by the pattern,
/// otherwise the store keeps its uniform base region.
pub fn plant_site_patterns(
    base: &[Store],
    patterns: &[PlantedPattern],
    ctx: &PlacementContext,
    rng: &mut impl Rng,
) -> Result<Vec<Store>> {
    let mut sites = base.to_vec();
    for p in patterns {
        let anchor = p.brand_ids[0];
        let anchor_regions: Vec<usize> = sites.iter().filter(|s| s.brand == anchor).map(|s| s.region).collect();
        if anchor_regions.is_empty() {
            return Err(Error::Config(format!("anchor brand {anchor} has no sites")));
        }
        for s in sites.iter_mut().filter(|s| p.brand_ids[1..].contains(&s.brand)) {
            if !rng.gen_bool(p.strength) {
                continue;
            }
            let a = *anchor_regions.choose(rng).unwrap();
            let target = match p.kind {
                PatternKind::RelatedBrandColocation => Some(a),
                PatternKind::FlowFollowing => ctx.top_flow[a],
                PatternKind::FunctionMatching => ctx.most_similar[a],
            };
            if let Some(t) = target {
                s.region = t;
                s.obeyed = true;
            }
        }
    }
    Ok(sites)
}

/// Generates the complete table suite.
pub fn generate_city(cfg: &CityConfig, patterns: &[PlantedPattern]) -> Result<SynthCity> {
    validate(cfg, patterns)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells = match (cfg.grid, cfg.voronoi_seed_count) {
        (Some((rows, cols)), _) => grid_cells(rows, cols, cfg.region_km),
        (None, Some(n)) => voronoi_cells(n, cfg.region_km, &mut rng),
        _ => unreachable!("validated"),
    };
    let n_regions = cells.len();
    let centroids: Vec<Point> = cells.iter().map(|c| c.centroid()).collect();
    let to_out = |p: Point| -> Point {
        if cfg.planar {
            p
        } else {
            let lat = ORIGIN.1 + p.1 / KM_PER_DEG_LAT;
            (ORIGIN.0 + p.0 / (KM_PER_DEG_LAT * ORIGIN.1.to_radians().cos()), lat)
        }
    };

    // taxonomy forest
    let (n1, n2, n3) = cfg.category_tree;
    let cate1 = |i: usize| format!("C1_{i}");
    let cate2 = |j: usize| format!("C2_{j}");
    let cate3 = |k: usize| format!("C3_{k}");
    let parent2 = |j: usize| j % n1;
    let parent3 = |k: usize| k % n2;
    let taxonomy: Vec<TaxonomyRow> = (0..n3)
        .map(|k| TaxonomyRow { cate3: cate3(k), cate2: cate2(parent3(k)), cate1: cate1(parent2(parent3(k))) })
        .collect();
    let mut leaves_of: Vec<Vec<usize>> = vec![Vec::new(); n1];
    for k in 0..n3 {
        leaves_of[parent2(parent3(k))].push(k);
    }
    let pick_leaf = |c1: usize, rng: &mut ChaCha8Rng| -> usize {
        match leaves_of[c1].choose(rng) {
            Some(&k) => k,
            None => rng.gen_range(0..n3),
        }
    };

    // background POIs with a dominant function per region
    let dominant: Vec<usize> = (0..n_regions).map(|_| rng.gen_range(0..n1)).collect();
    let mut pois: Vec<PoiRow> = Vec::new();
    let mut poi_region: Vec<usize> = Vec::new();
    let mut hist = vec![vec![0.0; n1]; n_regions];
    for i in 0..cfg.n_pois {
        let r = rng.gen_range(0..n_regions);
        let c1 = if rng.gen_bool(cfg.function_purity) { dominant[r] } else { rng.gen_range(0..n1) };
        let k = pick_leaf(c1, &mut rng);
        let pt = to_out(sample_inside(&cells[r], &mut rng));
        hist[r][parent2(parent3(k))] += 1.0;
        pois.push(PoiRow {
            pid: format!("p{i}"),
            name: format!("Shop {i}"),
            lon: pt.0,
            lat: pt.1,
            cate1: cate1(parent2(parent3(k))),
            cate2: cate2(parent3(k)),
            cate3: cate3(k),
            brand_name: None,
        });
        poi_region.push(r);
    }

    // gravity-model flows
    let mass: Vec<f64> = hist.iter().map(|h| h.iter().sum::<f64>() + 1.0).collect();
    let mut weights = Vec::with_capacity(n_regions * n_regions);
    for i in 0..n_regions {
        for j in 0..n_regions {
            if i != j {
                let d = dist(centroids[i], centroids[j]);
                weights.push((i, j, mass[i] * mass[j] / (d + cfg.region_km).powi(2)));
            }
        }
    }
    let total_w: f64 = weights.iter().map(|w| w.2).sum();
    let mut flows = Vec::new();
    let mut flow_mat: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for &(i, j, w) in &weights {
        let expect = (cfg.trips_per_region * n_regions as u64) as f64 * w / total_w.max(f64::MIN_POSITIVE);
        let count = (expect + rng.gen::<f64>()).floor() as u64;
        if count > 0 {
            flows.push(FlowRow { from: i.to_string(), to: j.to_string(), count });
            flow_mat.insert((i, j), count);
        }
    }
    let mut top_flow: Vec<Option<(u64, usize)>> = vec![None; n_regions];
    for (&(i, j), &c) in &flow_mat {
        // strictly greater keeps the smallest destination id on ties
        if top_flow[i].map_or(true, |(best, _)| c > best) {
            top_flow[i] = Some((c, j));
        }
    }
    let most_similar: Vec<Option<usize>> = (0..n_regions)
        .map(|i| {
            let mut best: Option<(f64, usize)> = None;
            for j in (0..n_regions).filter(|&j| j != i) {
                let s = cosine(&hist[i], &hist[j]);
                if best.map_or(true, |(b, _)| s > b) {
                    best = Some((s, j));
                }
            }
            best.map(|b| b.1)
        })
        .collect();
    let ctx = PlacementContext { top_flow: top_flow.iter().map(|t| t.map(|x| x.1)).collect(), most_similar };

    // brands, Zipf store counts, sites
    let brand_leaf: Vec<usize> = (0..cfg.n_brands).map(|_| rng.gen_range(0..n3)).collect();
    let store_counts: Vec<usize> = (0..cfg.n_brands)
        .map(|i| {
            let z = cfg.max_stores as f64 / ((i + 1) as f64).powf(cfg.zipf_exponent);
            (z.round() as usize).clamp(cfg.min_stores, cfg.max_stores)
        })
        .collect();
    let base = base_sites(n_regions, &store_counts, &mut rng);
    let stores = plant_site_patterns(&base, patterns, &ctx, &mut rng)?;
    let brands: Vec<BrandRow> = (0..cfg.n_brands).map(|i| BrandRow { id: brand_id(i), name: brand_name(i) }).collect();
    let mut sites = Vec::with_capacity(stores.len());
    for (n, s) in stores.iter().enumerate() {
        let k = brand_leaf[s.brand];
        let pt = to_out(sample_inside(&cells[s.region], &mut rng));
        pois.push(PoiRow {
            pid: format!("s{n}"),
            name: format!("{} #{n}", brand_name(s.brand)),
            lon: pt.0,
            lat: pt.1,
            cate1: cate1(parent2(parent3(k))),
            cate2: cate2(parent3(k)),
            cate3: cate3(k),
            brand_name: Some(brand_name(s.brand)),
        });
        poi_region.push(s.region);
        sites.push(SiteRow { brand_id: brand_id(s.brand), region_id: s.region.to_string(), split: None });
    }

    // brand relations: planted colocation pairs plus noise
    let mut rel_pairs: Vec<(usize, usize)> = Vec::new();
    for p in patterns.iter().filter(|p| p.kind == PatternKind::RelatedBrandColocation) {
        for &f in &p.brand_ids[1..] {
            rel_pairs.push((p.brand_ids[0], f));
        }
    }
    if cfg.n_brands >= 2 {
        for _ in 0..cfg.related_noise_pairs {
            let a = rng.gen_range(0..cfg.n_brands);
            let mut b = rng.gen_range(0..cfg.n_brands - 1);
            if b >= a {
                b += 1;
            }
            rel_pairs.push((a.min(b), a.max(b)));
        }
    }
    rel_pairs.sort_unstable();
    rel_pairs.dedup();
    let brand_relations = rel_pairs.iter().map(|&(a, b)| (brand_id(a), brand_id(b))).collect();

    // business areas
    let ba: Vec<BaRow> = (0..cfg.n_ba)
        .map(|i| {
            let r = rng.gen_range(0..n_regions);
            let pt = to_out(sample_inside(&cells[r], &mut rng));
            BaRow { id: format!("ba{i}"), name: format!("Area {i}"), lon: pt.0, lat: pt.1 }
        })
        .collect();

    // check-ins around a home region
    let mut by_region: Vec<Vec<usize>> = vec![Vec::new(); n_regions];
    for (k, &r) in poi_region.iter().enumerate() {
        by_region[r].push(k);
    }
    let mut checkins = Vec::new();
    for u in 0..cfg.n_users {
        let home = rng.gen_range(0..n_regions);
        let near: Vec<usize> = (0..n_regions)
            .filter(|&j| dist(centroids[home], centroids[j]) <= 1.5 * cfg.region_km)
            .flat_map(|j| by_region[j].iter().copied())
            .collect();
        let mut chosen: Vec<usize> = near.choose_multiple(&mut rng, cfg.checkins_per_user.min(near.len())).copied().collect();
        chosen.sort_unstable();
        for k in chosen {
            checkins.push(CheckinRow { uid: format!("u{u}"), pid: pois[k].pid.clone(), count: rng.gen_range(1..4) });
        }
    }

    let clicks = pois
        .iter()
        .map(|p| ClickRow { pid: p.pid.clone(), count: 1 + (-rng.gen::<f64>().max(1e-12).ln() * 20.0) as u64 })
        .collect();

    let regions = cells
        .iter()
        .enumerate()
        .map(|(i, c)| RegionRow {
            id: i.to_string(),
            polygon: Polygon::new(c.ring().iter().map(|&p| to_out(p)).collect()).expect("cell has 3+ vertices"),
        })
        .collect();

    let truth = PlantedTruth {
        seed: cfg.seed,
        patterns: patterns
            .iter()
            .map(|p| PatternTruth {
                kind: p.kind,
                anchor: brand_id(p.brand_ids[0]),
                followers: p.brand_ids[1..].iter().map(|&b| brand_id(b)).collect(),
                strength: p.strength,
                sites: stores
                    .iter()
                    .filter(|s| p.brand_ids[1..].contains(&s.brand))
                    .map(|s| PlantedSite { brand_id: brand_id(s.brand), region_id: s.region.to_string(), obeyed: s.obeyed })
                    .collect(),
            })
            .collect(),
    };

    let sources = RawSources {
        regions,
        ba,
        pois,
        brands,
        brand_relations,
        sites,
        flows,
        checkins,
        clicks,
        taxonomy,
    };
    Ok(SynthCity { sources, truth })
}

fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn grid_cells(rows: usize, cols: usize, s: f64) -> Vec<Polygon> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c as f64 * s, r as f64 * s);
            out.push(Polygon::new(vec![(x, y), (x + s, y), (x + s, y + s), (x, y + s)]).unwrap());
        }
    }
    out
}

/// Voronoi cells of uniform seeds in a square, by half-plane clipping.
fn voronoi_cells(n: usize, s: f64, rng: &mut impl Rng) -> Vec<Polygon> {
    let side = (n as f64).sqrt() * s;
    let seeds: Vec<Point> = (0..n).map(|_| (rng.gen::<f64>() * side, rng.gen::<f64>() * side)).collect();
    let frame = vec![(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)];
    seeds
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut ring = frame.clone();
            for (j, &q) in seeds.iter().enumerate() {
                if i == j || ring.len() < 3 {
                    continue;
                }
                // the bisector is computed from the ordered pair so both cells share it exactly
                let (a, b, sign) = if i < j { (p, q, 1.0) } else { (q, p, -1.0) };
                let n = (b.0 - a.0, b.1 - a.1);
                let c = (n.0 * (a.0 + b.0) + n.1 * (a.1 + b.1)) / 2.0;
                ring = clip(&ring, |x: Point| sign * (c - (n.0 * x.0 + n.1 * x.1)));
            }
            Polygon::new(ring).expect("Voronoi cell degenerated")
        })
        .collect()
}

/// Keeps the part of a convex ring where `f >= 0`.
fn clip(ring: &[Point], f: impl Fn(Point) -> f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(ring.len() + 1);
    for k in 0..ring.len() {
        let (a, b) = (ring[k], ring[(k + 1) % ring.len()]);
        let (fa, fb) = (f(a), f(b));
        if fa >= 0.0 {
            out.push(a);
        }
        if (fa >= 0.0) != (fb >= 0.0) {
            let t = fa / (fa - fb);
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    out
}

/// Uniform point strictly inside a convex cell (shrunk towards its centroid).
fn sample_inside(cell: &Polygon, rng: &mut impl Rng) -> Point {
    let c = cell.centroid();
    let (lo, hi) = cell.bbox();
    loop {
        let p = (lo.0 + rng.gen::<f64>() * (hi.0 - lo.0), lo.1 + rng.gen::<f64>() * (hi.1 - lo.1));
        if cell.contains(p) {
            return (c.0 + 0.9 * (p.0 - c.0), c.1 + 0.9 * (p.1 - c.1));
        }
    }
}
