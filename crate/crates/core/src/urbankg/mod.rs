//! UrbanKG construction: source tables, relation extraction, inverse
//! augmentation, validation and leakage removal.

pub mod extract;
pub mod geometry;
pub mod graph;
pub mod leakage;
pub mod schema;
pub mod sources;
pub mod validate;

pub use extract::{build_graph, BuiltGraph, ExtractConfig, Warnings};
pub use graph::{augment_inverses, Entity, Fact, KnowledgeGraph};
pub use leakage::{remove_leakage, LeakageStats};
pub use schema::{find_relation, vocabulary, BaseRelation, Ontology, RelationDef, SchemaOptions};
pub use sources::{load_sources, write_sources, RawSources};
pub use validate::{validate_schema, ValidationReport};
