//! Schema checks over a fact set.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::graph::{Entity, Fact, KnowledgeGraph};
use super::schema::RelationDef;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCount {
    pub name: String,
    pub abbrev: String,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_facts: usize,
    pub entities_per_ontology: BTreeMap<String, usize>,
    pub relation_counts: Vec<RelationCount>,
    pub signature_violations: usize,
    pub duplicate_facts: usize,
    pub dangling_ids: usize,
    pub symmetric_closure_violations: usize,
    pub inverse_closure_violations: usize,
    /// Human-readable description of each violation (capped).
    pub violations: Vec<String>,
}

const MAX_LISTED: usize = 50;

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.signature_violations
            + self.duplicate_facts
            + self.dangling_ids
            + self.symmetric_closure_violations
            + self.inverse_closure_violations
            == 0
    }

    fn note(&mut self, msg: String) {
        if self.violations.len() < MAX_LISTED {
            self.violations.push(msg);
        }
    }
}

pub fn validate_schema(kg: &KnowledgeGraph) -> ValidationReport {
    validate_facts(kg.entities(), kg.relations(), kg.facts())
}

/// Checks raw lists, so duplicates and dangling ids are visible too.
pub fn validate_facts(entities: &[Entity], relations: &[RelationDef], facts: &[Fact]) -> ValidationReport {
    let mut rep = ValidationReport {
        num_entities: entities.len(),
        num_relations: relations.len(),
        num_facts: facts.len(),
        ..Default::default()
    };
    for e in entities {
        *rep.entities_per_ontology.entry(e.ontology.to_string()).or_default() += 1;
    }
    let mut counts = vec![0usize; relations.len()];
    let mut seen = HashSet::with_capacity(facts.len());
    let mut valid = Vec::with_capacity(facts.len());
    for f in facts {
        if f.s >= entities.len() || f.o >= entities.len() || f.r >= relations.len() {
            rep.dangling_ids += 1;
            rep.note(format!("dangling id in {f:?}"));
            continue;
        }
        if !seen.insert(*f) {
            rep.duplicate_facts += 1;
            rep.note(format!("duplicate fact {f:?}"));
            continue;
        }
        counts[f.r] += 1;
        valid.push(*f);
        let r = &relations[f.r];
        let (so, oo) = (entities[f.s].ontology, entities[f.o].ontology);
        if so != r.subject || oo != r.object {
            rep.signature_violations += 1;
            rep.note(format!(
                "({}, {}, {}) has signature {so}->{oo}, expected {}->{}",
                entities[f.s].name, r.name, entities[f.o].name, r.subject, r.object
            ));
        }
    }
    for f in &valid {
        let r = &relations[f.r];
        if r.symmetric && !seen.contains(&Fact::new(f.o, f.r, f.s)) {
            rep.symmetric_closure_violations += 1;
            rep.note(format!("symmetric {} lacks reverse of {f:?}", r.name));
        }
        if let Some(inv) = r.inverse_id {
            if !seen.contains(&Fact::new(f.o, inv, f.s)) {
                rep.inverse_closure_violations += 1;
                rep.note(format!("{} lacks inverse of {f:?}", r.name));
            }
        }
    }
    rep.relation_counts = relations
        .iter()
        .map(|r| RelationCount { name: r.name.clone(), abbrev: r.abbrev.clone(), count: counts[r.id] })
        .collect();
    rep
}
