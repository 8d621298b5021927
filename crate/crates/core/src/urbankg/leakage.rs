//! Stripping held-out site records (and the stores that reveal them).

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::graph::KnowledgeGraph;
use super::schema::BaseRelation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageStats {
    pub osa_removed: usize,
    pub pois_removed: usize,
    /// Held-out pairs without an OpenStoreAt fact in the graph.
    pub missing_pairs: usize,
}

fn rel(kg: &KnowledgeGraph, b: BaseRelation) -> Result<usize> {
    kg.relation_id(&b.name()).ok_or_else(|| Error::Config(format!("vocabulary lacks {}", b.name())))
}

/// Removes every held-out `(brand, region)` OpenStoreAt fact with its
/// inverse, and every POI of the brand located in that region.
///
/// POIs are renumbered; other entities keep their ids when all POIs come
/// after them (as built by `build_graph`).
pub fn remove_leakage(kg: &KnowledgeGraph, holdout: &[(usize, usize)]) -> Result<(KnowledgeGraph, LeakageStats)> {
    let mut stats = LeakageStats::default();
    if holdout.is_empty() {
        return Ok((kg.clone(), stats));
    }
    let osa = rel(kg, BaseRelation::OpenStoreAt)?;
    let osa_inv = kg.relation(osa).inverse_id;
    let bo = rel(kg, BaseRelation::BrandOf)?;
    let la = rel(kg, BaseRelation::LocateAt)?;
    let pairs: HashSet<(usize, usize)> = holdout.iter().copied().collect();

    let mut drop_pois = BTreeSet::new();
    for &(b, a) in &pairs {
        if !kg.contains(&super::graph::Fact::new(b, osa, a)) {
            stats.missing_pairs += 1;
        }
        let in_region: HashSet<usize> = kg.neighbors(a, la)?.iter().copied().collect();
        let start = kg.facts().partition_point(|f| f.s < b);
        for f in kg.facts()[start..].iter().take_while(|f| f.s == b) {
            if f.r == bo && in_region.contains(&f.o) {
                drop_pois.insert(f.o);
            }
        }
    }
    let stripped = kg.filter_facts(|f| {
        let held = (f.r == osa && pairs.contains(&(f.s, f.o))) || (Some(f.r) == osa_inv && pairs.contains(&(f.o, f.s)));
        !held
    });
    stats.osa_removed = kg.facts().len() - stripped.facts().len();
    stats.pois_removed = drop_pois.len();
    let out = stripped.remove_entities(&drop_pois)?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::urbankg::graph::{augment_inverses, Entity, Fact};
    use crate::urbankg::schema::{base_vocabulary, find_relation, Ontology, SchemaOptions};

    fn kg() -> KnowledgeGraph {
        let ents = vec![
            Entity::new(Ontology::Region, "region:0"),
            Entity::new(Ontology::Region, "region:1"),
            Entity::new(Ontology::Brand, "brand:0"),
            Entity::new(Ontology::Poi, "poi:0"),
            Entity::new(Ontology::Poi, "poi:1"),
        ];
        let rels = base_vocabulary(SchemaOptions::default());
        let id = |k: &str| find_relation(&rels, k).unwrap().id;
        let facts = vec![
            Fact::new(2, id("OSA"), 0),
            Fact::new(2, id("OSA"), 1),
            Fact::new(2, id("BO"), 3),
            Fact::new(2, id("BO"), 4),
            Fact::new(3, id("LA"), 0),
            Fact::new(4, id("LA"), 1),
        ];
        let (facts, rels) = augment_inverses(facts, rels);
        KnowledgeGraph::new(ents, rels, facts).unwrap()
    }

    #[test]
    fn held_out_fact_and_store_removed() {
        let g = kg();
        let (out, stats) = remove_leakage(&g, &[(2, 0)]).unwrap();
        let osa = out.relation_id("OSA").unwrap();
        let inv = out.relation(osa).inverse_id.unwrap();
        assert!(!out.contains(&Fact::new(2, osa, 0)));
        assert!(!out.contains(&Fact::new(0, inv, 2)));
        assert!(out.contains(&Fact::new(2, osa, 1)));
        assert_eq!(out.entity_id("poi:0"), None);
        assert_eq!(stats, LeakageStats { osa_removed: 2, pois_removed: 1, missing_pairs: 0 });
    }

    #[test]
    fn empty_holdout_is_identity() {
        let g = kg();
        let (out, _) = remove_leakage(&g, &[]).unwrap();
        assert_eq!(out.facts(), g.facts());
    }

    #[test]
    fn idempotent() {
        let g = kg();
        let (once, _) = remove_leakage(&g, &[(2, 0)]).unwrap();
        let (twice, stats) = remove_leakage(&once, &[(2, 0)]).unwrap();
        assert_eq!(once.facts(), twice.facts());
        assert_eq!(stats.missing_pairs, 1);
    }
}
