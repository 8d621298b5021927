//! Ontologies and the relation vocabulary of the urban knowledge graph.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ontology {
    Region,
    Ba,
    #[serde(rename = "POI")]
    Poi,
    Brand,
    Cate1,
    Cate2,
    Cate3,
}

impl Ontology {
    pub const ALL: [Ontology; 7] = [
        Ontology::Region,
        Ontology::Ba,
        Ontology::Poi,
        Ontology::Brand,
        Ontology::Cate1,
        Ontology::Cate2,
        Ontology::Cate3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ontology::Region => "Region",
            Ontology::Ba => "Ba",
            Ontology::Poi => "POI",
            Ontology::Brand => "Brand",
            Ontology::Cate1 => "Cate1",
            Ontology::Cate2 => "Cate2",
            Ontology::Cate3 => "Cate3",
        }
    }

    /// Prefix used for entity names, e.g. `region:17`.
    pub fn prefix(self) -> &'static str {
        match self {
            Ontology::Region => "region",
            Ontology::Ba => "ba",
            Ontology::Poi => "poi",
            Ontology::Brand => "brand",
            Ontology::Cate1 => "cate1",
            Ontology::Cate2 => "cate2",
            Ontology::Cate3 => "cate3",
        }
    }

    pub fn cate(level: u8) -> Ontology {
        match level {
            1 => Ontology::Cate1,
            2 => Ontology::Cate2,
            _ => Ontology::Cate3,
        }
    }
}

impl fmt::Display for Ontology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ontology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ontology::ALL
            .into_iter()
            .find(|o| o.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Lookup(format!("unknown ontology {s}")))
    }
}

/// One base relation of the schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseRelation {
    BorderBy,
    NearBy,
    FlowTransition,
    SimilarFunction,
    CoCheckin,
    Competitive,
    RelatedBrand,
    /// `SubCateOf_ij`: a level-`i` category is a child of a level-`j` one.
    SubCateOf(u8, u8),
    BaServe,
    BelongTo,
    LocateAt,
    PoiToCate(u8),
    BrandToCate(u8),
    BrandOf,
    OpenStoreAt,
}

impl BaseRelation {
    pub fn name(self) -> String {
        match self {
            BaseRelation::BorderBy => "BorderBy".into(),
            BaseRelation::NearBy => "NearBy".into(),
            BaseRelation::FlowTransition => "FlowTransition".into(),
            BaseRelation::SimilarFunction => "SimilarFunction".into(),
            BaseRelation::CoCheckin => "CoCheckin".into(),
            BaseRelation::Competitive => "Competitive".into(),
            BaseRelation::RelatedBrand => "RelatedBrand".into(),
            BaseRelation::SubCateOf(i, j) => format!("SubCateOf_{i}{j}"),
            BaseRelation::BaServe => "BaServe".into(),
            BaseRelation::BelongTo => "BelongTo".into(),
            BaseRelation::LocateAt => "LocateAt".into(),
            BaseRelation::PoiToCate(i) => format!("POIToCate_{i}"),
            BaseRelation::BrandToCate(i) => format!("BrandToCate_{i}"),
            BaseRelation::BrandOf => "BrandOf".into(),
            BaseRelation::OpenStoreAt => "OpenStoreAt".into(),
        }
    }

    pub fn abbrev(self) -> String {
        match self {
            BaseRelation::BorderBy => "BB".into(),
            BaseRelation::NearBy => "NB".into(),
            BaseRelation::FlowTransition => "FT".into(),
            BaseRelation::SimilarFunction => "SF".into(),
            BaseRelation::CoCheckin => "CC".into(),
            BaseRelation::Competitive => "Comp".into(),
            BaseRelation::RelatedBrand => "RB".into(),
            BaseRelation::SubCateOf(i, j) => format!("SCO{i}{j}"),
            BaseRelation::BaServe => "BS".into(),
            BaseRelation::BelongTo => "BT".into(),
            BaseRelation::LocateAt => "LA".into(),
            BaseRelation::PoiToCate(i) => format!("P2C_{i}"),
            BaseRelation::BrandToCate(i) => format!("B2C_{i}"),
            BaseRelation::BrandOf => "BO".into(),
            BaseRelation::OpenStoreAt => "OSA".into(),
        }
    }

    pub fn signature(self) -> (Ontology, Ontology) {
        use Ontology::*;
        match self {
            BaseRelation::BorderBy
            | BaseRelation::NearBy
            | BaseRelation::FlowTransition
            | BaseRelation::SimilarFunction => (Region, Region),
            BaseRelation::CoCheckin | BaseRelation::Competitive => (Poi, Poi),
            BaseRelation::RelatedBrand => (Brand, Brand),
            BaseRelation::SubCateOf(i, j) => (Ontology::cate(i), Ontology::cate(j)),
            BaseRelation::BaServe => (Ba, Region),
            BaseRelation::BelongTo => (Poi, Ba),
            BaseRelation::LocateAt => (Poi, Region),
            BaseRelation::PoiToCate(i) => (Poi, Ontology::cate(i)),
            BaseRelation::BrandToCate(i) => (Brand, Ontology::cate(i)),
            BaseRelation::BrandOf => (Brand, Poi),
            BaseRelation::OpenStoreAt => (Brand, Region),
        }
    }

    pub fn symmetric(self) -> bool {
        matches!(
            self,
            BaseRelation::BorderBy
                | BaseRelation::NearBy
                | BaseRelation::SimilarFunction
                | BaseRelation::CoCheckin
                | BaseRelation::Competitive
                | BaseRelation::RelatedBrand
        )
    }
}

/// Relation entry of the vocabulary (base or inverse).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDef {
    pub id: usize,
    pub name: String,
    pub abbrev: String,
    pub subject: Ontology,
    pub object: Ontology,
    pub symmetric: bool,
    pub inverse_id: Option<usize>,
    /// True for relations added by inverse augmentation.
    pub is_inverse: bool,
}

pub const INVERSE_SUFFIX: &str = "_inv";

/// Which optional relations enter the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemaOptions {
    pub cocheckin: bool,
    /// Three `SubCateOf` relations (3→2, 2→1, 3→1) or only the first two.
    pub subcate_three: bool,
}

impl Default for SchemaOptions {
    fn default() -> Self {
        Self { cocheckin: true, subcate_three: true }
    }
}

/// Base relations in table order.
pub fn base_relations(opts: SchemaOptions) -> Vec<BaseRelation> {
    use BaseRelation::*;
    let mut v = vec![BorderBy, NearBy, FlowTransition, SimilarFunction];
    if opts.cocheckin {
        v.push(CoCheckin);
    }
    v.extend([Competitive, RelatedBrand, SubCateOf(3, 2), SubCateOf(2, 1)]);
    if opts.subcate_three {
        v.push(SubCateOf(3, 1));
    }
    v.extend([
        BaServe,
        BelongTo,
        LocateAt,
        PoiToCate(1),
        PoiToCate(2),
        PoiToCate(3),
        BrandToCate(1),
        BrandToCate(2),
        BrandToCate(3),
        BrandOf,
        OpenStoreAt,
    ]);
    v
}

/// Base vocabulary without inverses; ids follow table order.
pub fn base_vocabulary(opts: SchemaOptions) -> Vec<RelationDef> {
    base_relations(opts)
        .into_iter()
        .enumerate()
        .map(|(id, b)| {
            let (subject, object) = b.signature();
            RelationDef {
                id,
                name: b.name(),
                abbrev: b.abbrev(),
                subject,
                object,
                symmetric: b.symmetric(),
                inverse_id: None,
                is_inverse: false,
            }
        })
        .collect()
}

/// Appends one inverse per asymmetric relation and links the pairs.
pub fn with_inverses(mut rels: Vec<RelationDef>) -> Vec<RelationDef> {
    if rels.iter().any(|r| r.is_inverse) {
        return rels;
    }
    let base_len = rels.len();
    for i in 0..base_len {
        if rels[i].symmetric {
            continue;
        }
        let id = rels.len();
        let r = rels[i].clone();
        rels.push(RelationDef {
            id,
            name: format!("{}{}", r.name, INVERSE_SUFFIX),
            abbrev: format!("{}'", r.abbrev),
            subject: r.object,
            object: r.subject,
            symmetric: false,
            inverse_id: Some(i),
            is_inverse: true,
        });
        rels[i].inverse_id = Some(id);
    }
    rels
}

/// Full vocabulary (base plus inverses).
pub fn vocabulary(opts: SchemaOptions) -> Vec<RelationDef> {
    with_inverses(base_vocabulary(opts))
}

/// Finds a relation by name or abbreviation (`r'` and `name_inv` select inverses).
pub fn find_relation<'a>(rels: &'a [RelationDef], key: &str) -> Option<&'a RelationDef> {
    let key = key.trim();
    rels.iter()
        .find(|r| r.name == key || r.abbrev == key)
        .or_else(|| {
            let k = key.replace('′', "'");
            rels.iter().find(|r| r.abbrev == k || r.name.eq_ignore_ascii_case(&k))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_xor_inverse() {
        let v = vocabulary(SchemaOptions::default());
        for r in &v {
            assert!(r.symmetric ^ r.inverse_id.is_some(), "{}", r.name);
            if let Some(inv) = r.inverse_id {
                assert_eq!(v[inv].inverse_id, Some(r.id));
                assert_eq!((v[inv].subject, v[inv].object), (r.object, r.subject));
            }
        }
    }

    #[test]
    fn vocabulary_sizes() {
        let full = SchemaOptions::default();
        assert_eq!(base_vocabulary(full).len(), 21);
        assert_eq!(vocabulary(full).len(), 36);
        let no_cc = SchemaOptions { cocheckin: false, subcate_three: true };
        assert_eq!(base_vocabulary(no_cc).len(), 20);
        assert_eq!(vocabulary(no_cc).len(), 35);
        let two_sco = SchemaOptions { cocheckin: true, subcate_three: false };
        assert_eq!(vocabulary(two_sco).len(), 34);
    }

    #[test]
    fn lookup_by_abbrev_and_inverse() {
        let v = vocabulary(SchemaOptions::default());
        assert_eq!(find_relation(&v, "OSA").unwrap().name, "OpenStoreAt");
        assert_eq!(find_relation(&v, "BS'").unwrap().name, "BaServe_inv");
        assert_eq!(find_relation(&v, "B2C_1′").unwrap().name, "BrandToCate_1_inv");
        assert!(find_relation(&v, "Nope").is_none());
    }

    #[test]
    fn brandof_signature() {
        assert_eq!(BaseRelation::BrandOf.signature(), (Ontology::Brand, Ontology::Poi));
    }
}
