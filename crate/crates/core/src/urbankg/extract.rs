//! Source tables to entities and facts.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::geometry::{cosine, distance_km, Point};
use super::graph::{augment_inverses, Entity, Fact, KnowledgeGraph};
use super::schema::{base_vocabulary, BaseRelation, Ontology, RelationDef, SchemaOptions};
use super::sources::RawSources;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub near_km: f64,
    pub sim_threshold: f64,
    pub flow_min: u64,
    pub cochk_min: u64,
    pub comp_km: f64,
    pub ba_radius_km: f64,
    /// Coordinates are kilometres on a plane instead of lon/lat degrees.
    pub planar: bool,
    pub schema: SchemaOptions,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            near_km: 2.0,
            sim_threshold: 0.8,
            flow_min: 20,
            cochk_min: 3,
            comp_km: 1.0,
            ba_radius_km: 1.5,
            planar: false,
            schema: SchemaOptions::default(),
        }
    }
}

/// Counted, non-fatal problems met during extraction.
pub type Warnings = BTreeMap<String, usize>;

fn warn(w: &mut Warnings, key: &str) {
    *w.entry(key.to_string()).or_default() += 1;
}

/// Entities derived from the sources, in the fixed ontology order
/// Region, Ba, Brand, Cate1, Cate2, Cate3, POI.
#[derive(Debug, Clone)]
pub struct EntityTable {
    pub entities: Vec<Entity>,
    pub regions: Vec<usize>,
    pub ba: Vec<usize>,
    pub brands: Vec<usize>,
    pub pois: Vec<usize>,
    by_name: HashMap<String, usize>,
    /// Region list index of the region containing each POI.
    pub poi_region: Vec<Option<usize>>,
}

impl EntityTable {
    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }
}

pub fn entity_name(ont: Ontology, key: &str) -> String {
    format!("{}:{}", ont.prefix(), key)
}

/// Builds every entity; POIs outside all regions are kept but flagged.
pub fn build_entities(src: &RawSources, warnings: &mut Warnings) -> Result<EntityTable> {
    let mut entities = Vec::new();
    let mut push = |e: Entity, list: &mut Vec<usize>| {
        list.push(entities.len());
        entities.push(e);
    };
    let (mut regions, mut ba, mut brands, mut pois, mut cats) = (vec![], vec![], vec![], vec![], vec![]);
    for r in &src.regions {
        let mut e = Entity::new(Ontology::Region, entity_name(Ontology::Region, &r.id));
        e.polygon = Some(r.polygon.clone());
        push(e, &mut regions);
    }
    for b in &src.ba {
        let mut e = Entity::new(Ontology::Ba, entity_name(Ontology::Ba, &b.id));
        e.geo = Some((b.lon, b.lat));
        push(e, &mut ba);
    }
    for b in &src.brands {
        push(Entity::new(Ontology::Brand, entity_name(Ontology::Brand, &b.id)), &mut brands);
    }
    let mut levels: [BTreeSet<&str>; 3] = Default::default();
    for t in &src.taxonomy {
        levels[0].insert(&t.cate1);
        levels[1].insert(&t.cate2);
        levels[2].insert(&t.cate3);
    }
    for p in &src.pois {
        levels[0].insert(&p.cate1);
        levels[1].insert(&p.cate2);
        levels[2].insert(&p.cate3);
    }
    for (l, names) in levels.iter().enumerate() {
        let ont = Ontology::cate(l as u8 + 1);
        for n in names {
            push(Entity::new(ont, entity_name(ont, n)), &mut cats);
        }
    }
    for p in &src.pois {
        let mut e = Entity::new(Ontology::Poi, entity_name(Ontology::Poi, &p.pid));
        e.geo = Some((p.lon, p.lat));
        push(e, &mut pois);
    }
    let mut by_name = HashMap::with_capacity(entities.len());
    for (i, e) in entities.iter_mut().enumerate() {
        e.id = i;
        if by_name.insert(e.name.clone(), i).is_some() {
            return Err(Error::Config(format!("duplicate entity {}", e.name)));
        }
    }
    for (k, p) in src.pois.iter().enumerate() {
        let ids = [
            by_name[&entity_name(Ontology::Cate1, &p.cate1)],
            by_name[&entity_name(Ontology::Cate2, &p.cate2)],
            by_name[&entity_name(Ontology::Cate3, &p.cate3)],
        ];
        entities[pois[k]].category_ids = Some(ids);
    }

    // Brand categories: majority over the brand's POIs, ties to the smaller id.
    let name_to_brand: HashMap<&str, usize> = src.brands.iter().enumerate().map(|(i, b)| (b.name.as_str(), i)).collect();
    let mut votes: Vec<[BTreeMap<usize, usize>; 3]> = vec![Default::default(); src.brands.len()];
    for (k, p) in src.pois.iter().enumerate() {
        if let Some(b) = p.brand_name.as_deref().and_then(|n| name_to_brand.get(n)) {
            let c = entities[pois[k]].category_ids.unwrap();
            for l in 0..3 {
                *votes[*b][l].entry(c[l]).or_default() += 1;
            }
        }
    }
    for (b, v) in votes.iter().enumerate() {
        if v[0].is_empty() {
            continue;
        }
        let pick = |m: &BTreeMap<usize, usize>| {
            m.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| *k).unwrap()
        };
        entities[brands[b]].category_ids = Some([pick(&v[0]), pick(&v[1]), pick(&v[2])]);
    }

    let poi_region = locate_pois(src, warnings);
    Ok(EntityTable { entities, regions, ba, brands, pois, by_name, poi_region })
}

/// Region index for each POI (first containing polygon in region order).
fn locate_pois(src: &RawSources, warnings: &mut Warnings) -> Vec<Option<usize>> {
    let boxes: Vec<_> = src.regions.iter().map(|r| r.polygon.bbox()).collect();
    src.pois
        .iter()
        .map(|p| {
            let pt = (p.lon, p.lat);
            let hit = (0..src.regions.len()).find(|&i| {
                let (lo, hi) = boxes[i];
                pt.0 >= lo.0 && pt.0 <= hi.0 && pt.1 >= lo.1 && pt.1 <= hi.1 && src.regions[i].polygon.contains(pt)
            });
            if hit.is_none() {
                warn(warnings, "poi_outside_regions");
            }
            hit
        })
        .collect()
}

struct RelIds(HashMap<String, usize>);

impl RelIds {
    fn new(rels: &[RelationDef]) -> Self {
        Self(rels.iter().map(|r| (r.name.clone(), r.id)).collect())
    }

    fn get(&self, b: BaseRelation) -> Option<usize> {
        self.0.get(&b.name()).copied()
    }
}

fn both_ways(out: &mut Vec<Fact>, a: usize, r: usize, b: usize) {
    out.push(Fact::new(a, r, b));
    out.push(Fact::new(b, r, a));
}

/// BorderBy, NearBy, LocateAt, BelongTo and BaServe.
pub fn extract_spatial_relations(
    src: &RawSources,
    ents: &EntityTable,
    rels: &[RelationDef],
    cfg: &ExtractConfig,
) -> Vec<Fact> {
    let ids = RelIds::new(rels);
    let mut out = Vec::new();
    let polys: Vec<_> = src.regions.iter().map(|r| &r.polygon).collect();
    let cents: Vec<Point> = polys.iter().map(|p| p.centroid()).collect();
    let (bb, nb) = (ids.get(BaseRelation::BorderBy), ids.get(BaseRelation::NearBy));
    for i in 0..polys.len() {
        for j in i + 1..polys.len() {
            let (a, b) = (ents.regions[i], ents.regions[j]);
            if polys[i].shares_border(polys[j]) {
                if let Some(r) = bb {
                    both_ways(&mut out, a, r, b);
                }
            } else if distance_km(cents[i], cents[j], cfg.planar) <= cfg.near_km {
                if let Some(r) = nb {
                    both_ways(&mut out, a, r, b);
                }
            }
        }
    }
    if let Some(la) = ids.get(BaseRelation::LocateAt) {
        for (k, reg) in ents.poi_region.iter().enumerate() {
            if let Some(i) = reg {
                out.push(Fact::new(ents.pois[k], la, ents.regions[*i]));
            }
        }
    }
    if let Some(bt) = ids.get(BaseRelation::BelongTo) {
        for (k, p) in src.pois.iter().enumerate() {
            for (j, b) in src.ba.iter().enumerate() {
                if distance_km((p.lon, p.lat), (b.lon, b.lat), cfg.planar) <= cfg.ba_radius_km {
                    out.push(Fact::new(ents.pois[k], bt, ents.ba[j]));
                }
            }
        }
    }
    if let Some(bs) = ids.get(BaseRelation::BaServe) {
        for (j, b) in src.ba.iter().enumerate() {
            for (i, c) in cents.iter().enumerate() {
                if distance_km((b.lon, b.lat), *c, cfg.planar) <= cfg.ba_radius_km {
                    out.push(Fact::new(ents.ba[j], bs, ents.regions[i]));
                }
            }
        }
    }
    out
}

/// Every non-spatial relation of the schema.
pub fn extract_semantic_relations(
    src: &RawSources,
    ents: &EntityTable,
    rels: &[RelationDef],
    cfg: &ExtractConfig,
    warnings: &mut Warnings,
) -> Vec<Fact> {
    let ids = RelIds::new(rels);
    let mut out = Vec::new();
    let region_idx: HashMap<&str, usize> = src.regions.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let poi_idx: HashMap<&str, usize> = src.pois.iter().enumerate().map(|(i, p)| (p.pid.as_str(), i)).collect();
    let brand_idx: HashMap<&str, usize> = src.brands.iter().enumerate().map(|(i, b)| (b.id.as_str(), i)).collect();

    if let Some(ft) = ids.get(BaseRelation::FlowTransition) {
        let mut agg: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for f in &src.flows {
            match (region_idx.get(f.from.as_str()), region_idx.get(f.to.as_str())) {
                (Some(&a), Some(&b)) if a != b => *agg.entry((a, b)).or_default() += f.count,
                (Some(_), Some(_)) => {}
                _ => warn(warnings, "flow_unknown_region"),
            }
        }
        for ((a, b), c) in agg {
            if c >= cfg.flow_min {
                out.push(Fact::new(ents.regions[a], ft, ents.regions[b]));
            }
        }
    }

    if let Some(sf) = ids.get(BaseRelation::SimilarFunction) {
        let cate1: Vec<usize> = ents.entities.iter().filter(|e| e.ontology == Ontology::Cate1).map(|e| e.id).collect();
        let col: HashMap<usize, usize> = cate1.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut hist = vec![vec![0.0; cate1.len()]; src.regions.len()];
        for (k, reg) in ents.poi_region.iter().enumerate() {
            if let Some(i) = reg {
                let c = ents.entities[ents.pois[k]].category_ids.unwrap()[0];
                hist[*i][col[&c]] += 1.0;
            }
        }
        for i in 0..hist.len() {
            for j in i + 1..hist.len() {
                if cosine(&hist[i], &hist[j]) >= cfg.sim_threshold {
                    both_ways(&mut out, ents.regions[i], sf, ents.regions[j]);
                }
            }
        }
    }

    if let Some(cc) = ids.get(BaseRelation::CoCheckin) {
        let mut by_user: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for c in &src.checkins {
            match poi_idx.get(c.pid.as_str()) {
                Some(&p) if c.count > 0 => {
                    by_user.entry(c.uid.as_str()).or_default().insert(p);
                }
                Some(_) => {}
                None => warn(warnings, "checkin_unknown_poi"),
            }
        }
        let mut pair_users: HashMap<(usize, usize), u64> = HashMap::new();
        for set in by_user.values() {
            let v: Vec<usize> = set.iter().copied().collect();
            for a in 0..v.len() {
                for b in a + 1..v.len() {
                    *pair_users.entry((v[a], v[b])).or_default() += 1;
                }
            }
        }
        let mut pairs: Vec<_> = pair_users.into_iter().filter(|(_, n)| *n >= cfg.cochk_min).map(|(k, _)| k).collect();
        pairs.sort_unstable();
        for (a, b) in pairs {
            both_ways(&mut out, ents.pois[a], cc, ents.pois[b]);
        }
    }

    if let Some(comp) = ids.get(BaseRelation::Competitive) {
        let mut by_cate3: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (k, p) in src.pois.iter().enumerate() {
            by_cate3.entry(p.cate3.as_str()).or_default().push(k);
        }
        for group in by_cate3.values() {
            for (x, &a) in group.iter().enumerate() {
                for &b in &group[x + 1..] {
                    let (pa, pb) = (&src.pois[a], &src.pois[b]);
                    let same = pa.brand_name.is_some() && pa.brand_name == pb.brand_name;
                    if !same && distance_km((pa.lon, pa.lat), (pb.lon, pb.lat), cfg.planar) <= cfg.comp_km {
                        both_ways(&mut out, ents.pois[a], comp, ents.pois[b]);
                    }
                }
            }
        }
    }

    if let Some(rb) = ids.get(BaseRelation::RelatedBrand) {
        for (a, b) in &src.brand_relations {
            match (brand_idx.get(a.as_str()), brand_idx.get(b.as_str())) {
                (Some(&x), Some(&y)) if x != y => both_ways(&mut out, ents.brands[x], rb, ents.brands[y]),
                (Some(_), Some(_)) => {}
                _ => warn(warnings, "brand_relation_unknown_brand"),
            }
        }
    }

    for t in &src.taxonomy {
        let c1 = ents.id(&entity_name(Ontology::Cate1, &t.cate1)).unwrap();
        let c2 = ents.id(&entity_name(Ontology::Cate2, &t.cate2)).unwrap();
        let c3 = ents.id(&entity_name(Ontology::Cate3, &t.cate3)).unwrap();
        for (rel, s, o) in [
            (BaseRelation::SubCateOf(3, 2), c3, c2),
            (BaseRelation::SubCateOf(2, 1), c2, c1),
            (BaseRelation::SubCateOf(3, 1), c3, c1),
        ] {
            if let Some(r) = ids.get(rel) {
                out.push(Fact::new(s, r, o));
            }
        }
    }

    for &p in &ents.pois {
        let c = ents.entities[p].category_ids.unwrap();
        for l in 0..3 {
            if let Some(r) = ids.get(BaseRelation::PoiToCate(l as u8 + 1)) {
                out.push(Fact::new(p, r, c[l]));
            }
        }
    }
    for &b in &ents.brands {
        if let Some(c) = ents.entities[b].category_ids {
            for l in 0..3 {
                if let Some(r) = ids.get(BaseRelation::BrandToCate(l as u8 + 1)) {
                    out.push(Fact::new(b, r, c[l]));
                }
            }
        }
    }

    if let Some(bo) = ids.get(BaseRelation::BrandOf) {
        let name_to_brand: HashMap<&str, usize> =
            src.brands.iter().enumerate().map(|(i, b)| (b.name.as_str(), i)).collect();
        let mut has_poi = vec![false; src.brands.len()];
        for (k, p) in src.pois.iter().enumerate() {
            if let Some(&b) = p.brand_name.as_deref().and_then(|n| name_to_brand.get(n)) {
                has_poi[b] = true;
                out.push(Fact::new(ents.brands[b], bo, ents.pois[k]));
            }
        }
        for h in has_poi {
            if !h {
                warn(warnings, "brand_without_pois");
            }
        }
    }

    if let Some(osa) = ids.get(BaseRelation::OpenStoreAt) {
        for s in &src.sites {
            match (brand_idx.get(s.brand_id.as_str()), region_idx.get(s.region_id.as_str())) {
                (Some(&b), Some(&a)) => out.push(Fact::new(ents.brands[b], osa, ents.regions[a])),
                _ => warn(warnings, "site_unknown_id"),
            }
        }
    }
    out
}

/// Result of building the graph from raw sources.
#[derive(Debug, Clone)]
pub struct BuiltGraph {
    pub kg: KnowledgeGraph,
    pub warnings: Warnings,
    /// Click popularity of every region entity, keyed by entity id.
    pub region_popularity: BTreeMap<usize, u64>,
}

/// Full extraction: entities, base facts, inverse augmentation.
pub fn build_graph(src: &RawSources, cfg: &ExtractConfig) -> Result<BuiltGraph> {
    let mut warnings = Warnings::new();
    let ents = build_entities(src, &mut warnings)?;
    let base = base_vocabulary(cfg.schema);
    let mut facts = extract_spatial_relations(src, &ents, &base, cfg);
    facts.extend(extract_semantic_relations(src, &ents, &base, cfg, &mut warnings));
    let (facts, rels) = augment_inverses(facts, base);

    let poi_idx: HashMap<&str, usize> = src.pois.iter().enumerate().map(|(i, p)| (p.pid.as_str(), i)).collect();
    let mut region_popularity: BTreeMap<usize, u64> = ents.regions.iter().map(|&r| (r, 0)).collect();
    for c in &src.clicks {
        match poi_idx.get(c.pid.as_str()) {
            Some(&k) => {
                if let Some(i) = ents.poi_region[k] {
                    *region_popularity.get_mut(&ents.regions[i]).unwrap() += c.count;
                }
            }
            None => warn(&mut warnings, "click_unknown_poi"),
        }
    }
    let kg = KnowledgeGraph::new(ents.entities, rels, facts)?;
    Ok(BuiltGraph { kg, warnings, region_popularity })
}
