//! The knowledge graph container: entities, vocabulary, facts and the
//! incoming-neighbor index.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::geometry::{fmt_coord, parse_wkt_polygon, Point, Polygon};
use super::schema::{with_inverses, Ontology, RelationDef};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: usize,
    pub ontology: Ontology,
    pub name: String,
    pub geo: Option<Point>,
    pub polygon: Option<Polygon>,
    /// Entity ids of the (cate1, cate2, cate3) categories.
    pub category_ids: Option<[usize; 3]>,
}

impl Entity {
    pub fn new(ontology: Ontology, name: impl Into<String>) -> Self {
        Self { id: 0, ontology, name: name.into(), geo: None, polygon: None, category_ids: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fact {
    pub s: usize,
    pub r: usize,
    pub o: usize,
}

impl Fact {
    pub fn new(s: usize, r: usize, o: usize) -> Self {
        Self { s, r, o }
    }
}

/// `G = (E, R, F)` plus the `(v, r) -> N_v^r` index.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<RelationDef>,
    facts: Vec<Fact>,
    by_name: HashMap<String, usize>,
    adjacency: HashMap<(usize, usize), Vec<usize>>,
}

impl KnowledgeGraph {
    /// Assigns contiguous ids in list order, sorts and deduplicates facts,
    /// and builds the neighbor index.
    pub fn new(mut entities: Vec<Entity>, relations: Vec<RelationDef>, facts: Vec<Fact>) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter_mut().enumerate() {
            e.id = i;
            if by_name.insert(e.name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate entity name {}", e.name)));
            }
        }
        for (i, r) in relations.iter().enumerate() {
            if r.id != i {
                return Err(Error::Contract(format!("relation {} has id {} at position {i}", r.name, r.id)));
            }
        }
        let n = entities.len();
        for f in &facts {
            if f.s >= n || f.o >= n || f.r >= relations.len() {
                return Err(Error::Contract(format!("fact {f:?} references an unknown id")));
            }
        }
        let facts: Vec<Fact> = facts.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let adjacency = build_adjacency(&facts);
        Ok(Self { entities, relations, facts, by_name, adjacency })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: usize) -> &Entity {
        &self.entities[id]
    }

    pub fn relations(&self) -> &[RelationDef] {
        &self.relations
    }

    pub fn relation(&self, id: usize) -> &RelationDef {
        &self.relations[id]
    }

    /// Facts in `(s, r, o)` order without duplicates.
    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn relation_id(&self, key: &str) -> Option<usize> {
        super::schema::find_relation(&self.relations, key).map(|r| r.id)
    }

    pub fn contains(&self, f: &Fact) -> bool {
        self.facts.binary_search(f).is_ok()
    }

    /// Ids of all entities of one ontology, ascending.
    pub fn entities_of(&self, ont: Ontology) -> Vec<usize> {
        self.entities.iter().filter(|e| e.ontology == ont).map(|e| e.id).collect()
    }

    /// `N_v^r`: sorted subjects `u` with `(u, r, v)` in F.
    pub fn neighbors(&self, v: usize, r: usize) -> Result<&[usize]> {
        if v >= self.entities.len() || r >= self.relations.len() {
            return Err(Error::Contract(format!("neighbors({v}, {r}) out of range")));
        }
        Ok(self.adjacency.get(&(v, r)).map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Fact count per relation id.
    pub fn relation_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.relations.len()];
        for f in &self.facts {
            c[f.r] += 1;
        }
        c
    }

    /// Same graph with only the facts accepted by `keep`.
    pub fn filter_facts(&self, keep: impl Fn(&Fact) -> bool) -> KnowledgeGraph {
        let facts: Vec<Fact> = self.facts.iter().copied().filter(|f| keep(f)).collect();
        let adjacency = build_adjacency(&facts);
        KnowledgeGraph {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            facts,
            by_name: self.by_name.clone(),
            adjacency,
        }
    }

    /// Drops entities (and every fact touching them), renumbering the rest
    /// in their original order.
    pub fn remove_entities(&self, drop: &BTreeSet<usize>) -> Result<KnowledgeGraph> {
        if drop.is_empty() {
            return Ok(self.clone());
        }
        let mut remap = vec![usize::MAX; self.entities.len()];
        let mut kept = Vec::with_capacity(self.entities.len() - drop.len());
        for e in &self.entities {
            if !drop.contains(&e.id) {
                remap[e.id] = kept.len();
                kept.push(e.clone());
            }
        }
        for e in kept.iter_mut() {
            if let Some(c) = e.category_ids {
                if c.iter().any(|&x| remap[x] == usize::MAX) {
                    return Err(Error::Contract(format!("category of {} removed", e.name)));
                }
                e.category_ids = Some(c.map(|x| remap[x]));
            }
        }
        let facts = self
            .facts
            .iter()
            .filter(|f| remap[f.s] != usize::MAX && remap[f.o] != usize::MAX)
            .map(|f| Fact::new(remap[f.s], f.r, remap[f.o]))
            .collect();
        KnowledgeGraph::new(kept, self.relations.clone(), facts)
    }

    /// Writes `entities.tsv`, `relations.tsv` and `triples.tsv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut b = String::from("id\tname\tontology\tgeometry\tcate1\tcate2\tcate3\n");
        for e in &self.entities {
            let geom = match (&e.polygon, e.geo) {
                (Some(p), _) => p.to_wkt(),
                (None, Some((x, y))) => format!("{} {}", fmt_coord(x), fmt_coord(y)),
                _ => String::new(),
            };
            let cats = match e.category_ids {
                Some(c) => c.map(|i| self.entities[i].name.as_str()).join("\t"),
                None => "\t\t".into(),
            };
            writeln!(b, "{}\t{}\t{}\t{}\t{}", e.id, e.name, e.ontology, geom, cats).unwrap();
        }
        fs::write(dir.join("entities.tsv"), b)?;

        let mut b = String::from("id\tname\tabbrev\tsubject\tobject\tsymmetric\tinverse_id\tis_inverse\n");
        for r in &self.relations {
            let inv = r.inverse_id.map(|i| i.to_string()).unwrap_or_default();
            writeln!(
                b,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id, r.name, r.abbrev, r.subject, r.object, r.symmetric as u8, inv, r.is_inverse as u8
            )
            .unwrap();
        }
        fs::write(dir.join("relations.tsv"), b)?;

        let mut b = String::new();
        for f in &self.facts {
            writeln!(b, "{}\t{}\t{}", self.entities[f.s].name, self.relations[f.r].name, self.entities[f.o].name)
                .unwrap();
        }
        fs::write(dir.join("triples.tsv"), b)?;
        Ok(())
    }

    /// Reads a directory written by [`KnowledgeGraph::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<KnowledgeGraph> {
        let read = |name: &str| {
            let file = dir.join(name);
            fs::read_to_string(&file).map_err(|_| Error::Source { file })
        };
        let perr = |name: &str, line: usize, msg: String| Error::Parse { file: dir.join(name), line, msg };

        let text = read("entities.tsv")?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 7 {
                return Err(perr("entities.tsv", i + 1, format!("expected 7 columns, found {}", c.len())));
            }
            rows.push((i + 1, c));
        }
        let mut entities = Vec::with_capacity(rows.len());
        let mut names = HashMap::new();
        for (ln, c) in &rows {
            let ont: Ontology = c[2].parse().map_err(|e: Error| perr("entities.tsv", *ln, e.to_string()))?;
            let mut e = Entity::new(ont, c[1]);
            if c[3].starts_with("POLYGON") {
                e.polygon = Some(parse_wkt_polygon(c[3]).map_err(|x| perr("entities.tsv", *ln, x.to_string()))?);
            } else if !c[3].is_empty() {
                let mut it = c[3].split(' ').map(str::parse::<f64>);
                match (it.next(), it.next()) {
                    (Some(Ok(x)), Some(Ok(y))) => e.geo = Some((x, y)),
                    _ => return Err(perr("entities.tsv", *ln, format!("bad point '{}'", c[3]))),
                }
            }
            names.insert(c[1].to_string(), entities.len());
            entities.push(e);
        }
        for (k, (ln, c)) in rows.iter().enumerate() {
            if c[4].is_empty() {
                continue;
            }
            let mut ids = [0; 3];
            for l in 0..3 {
                ids[l] = *names
                    .get(c[4 + l])
                    .ok_or_else(|| perr("entities.tsv", *ln, format!("unknown category {}", c[4 + l])))?;
            }
            entities[k].category_ids = Some(ids);
        }

        let text = read("relations.tsv")?;
        let mut relations = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let c: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| perr("relations.tsv", i + 1, m.to_string());
            if c.len() != 8 {
                return Err(bad("expected 8 columns"));
            }
            relations.push(RelationDef {
                id: c[0].parse().map_err(|_| bad("bad id"))?,
                name: c[1].to_string(),
                abbrev: c[2].to_string(),
                subject: c[3].parse().map_err(|_| bad("bad subject ontology"))?,
                object: c[4].parse().map_err(|_| bad("bad object ontology"))?,
                symmetric: c[5] == "1",
                inverse_id: if c[6].is_empty() { None } else { Some(c[6].parse().map_err(|_| bad("bad inverse id"))?) },
                is_inverse: c[7] == "1",
            });
        }
        let rel_ids: HashMap<&str, usize> = relations.iter().map(|r| (r.name.as_str(), r.id)).collect();

        let text = read("triples.tsv")?;
        let mut facts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let c: Vec<&str> = line.split('\t').collect();
            let lookup = |m: &HashMap<String, usize>, k: &str| m.get(k).copied();
            match (c.as_slice(), c.len()) {
                ([s, r, o], 3) => {
                    let s = lookup(&names, s).ok_or_else(|| perr("triples.tsv", i + 1, format!("unknown entity {s}")))?;
                    let o = lookup(&names, o).ok_or_else(|| perr("triples.tsv", i + 1, format!("unknown entity {o}")))?;
                    let r = *rel_ids.get(r).ok_or_else(|| perr("triples.tsv", i + 1, format!("unknown relation {r}")))?;
                    facts.push(Fact::new(s, r, o));
                }
                _ => return Err(perr("triples.tsv", i + 1, "expected 3 columns".into())),
            }
        }
        KnowledgeGraph::new(entities, relations, facts)
    }
}

fn build_adjacency(facts: &[Fact]) -> HashMap<(usize, usize), Vec<usize>> {
    let mut adj: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for f in facts {
        adj.entry((f.o, f.r)).or_default().push(f.s);
    }
    for v in adj.values_mut() {
        v.sort_unstable();
    }
    adj
}

/// Adds `(o, r', s)` for every fact of an asymmetric relation; the vocabulary
/// gains one inverse per asymmetric relation. Already augmented input is
/// returned unchanged.
pub fn augment_inverses(facts: Vec<Fact>, relations: Vec<RelationDef>) -> (Vec<Fact>, Vec<RelationDef>) {
    if relations.iter().any(|r| r.is_inverse) {
        return (facts, relations);
    }
    let relations = with_inverses(relations);
    let mut out = facts.clone();
    for f in &facts {
        if let Some(inv) = relations[f.r].inverse_id {
            out.push(Fact::new(f.o, inv, f.s));
        }
    }
    (out, relations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::urbankg::schema::{base_vocabulary, find_relation, SchemaOptions};

    fn tiny() -> (Vec<Entity>, Vec<RelationDef>) {
        let ents = vec![
            Entity::new(Ontology::Region, "region:0"),
            Entity::new(Ontology::Region, "region:1"),
            Entity::new(Ontology::Poi, "poi:0"),
        ];
        (ents, base_vocabulary(SchemaOptions::default()))
    }

    #[test]
    fn single_fact_neighbors() {
        let (ents, rels) = tiny();
        let la = find_relation(&rels, "LA").unwrap().id;
        let kg = KnowledgeGraph::new(ents, rels, vec![Fact::new(2, la, 1)]).unwrap();
        assert_eq!(kg.neighbors(1, la).unwrap(), &[2]);
        assert!(kg.neighbors(0, la).unwrap().is_empty());
        assert!(kg.neighbors(9, la).is_err());
    }

    #[test]
    fn locate_at_gains_inverse() {
        let (_, rels) = tiny();
        let la = find_relation(&rels, "LA").unwrap().id;
        let bb = find_relation(&rels, "BB").unwrap().id;
        let n_base = rels.len();
        let (facts, rels) = augment_inverses(vec![Fact::new(2, la, 1), Fact::new(0, bb, 1)], rels);
        let inv = rels[la].inverse_id.unwrap();
        assert!(facts.contains(&Fact::new(1, inv, 2)));
        assert_eq!(facts.len(), 3);
        assert!(rels[bb].inverse_id.is_none());
        assert_eq!(rels.len(), n_base + 15);
    }

    #[test]
    fn remove_entities_renumbers() {
        let (ents, rels) = tiny();
        let la = find_relation(&rels, "LA").unwrap().id;
        let kg = KnowledgeGraph::new(ents, rels, vec![Fact::new(2, la, 1)]).unwrap();
        let kg2 = kg.remove_entities(&[0].into_iter().collect()).unwrap();
        assert_eq!(kg2.num_entities(), 2);
        assert_eq!(kg2.facts(), &[Fact::new(1, la, 0)]);
        assert_eq!(kg2.entity_id("poi:0"), Some(1));
    }

    #[test]
    fn dir_round_trip() {
        let (mut ents, rels) = tiny();
        ents[0].polygon = Some(Polygon::new(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]).unwrap());
        ents[2].geo = Some((0.25, 0.5));
        let la = find_relation(&rels, "LA").unwrap().id;
        let (facts, rels) = augment_inverses(vec![Fact::new(2, la, 0)], rels);
        let kg = KnowledgeGraph::new(ents, rels, facts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        kg.write_dir(dir.path()).unwrap();
        let back = KnowledgeGraph::read_dir(dir.path()).unwrap();
        assert_eq!(back.entities(), kg.entities());
        assert_eq!(back.relations(), kg.relations());
        assert_eq!(back.facts(), kg.facts());
    }
}
