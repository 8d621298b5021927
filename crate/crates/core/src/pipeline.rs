//! Source tables to a leakage-free training graph plus its site dataset,
//! and the on-disk layout shared by the command line stages.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataset::{SiteDataset, SplitConfig};
use crate::error::{Error, Result};
use crate::urbankg::{
    build_graph, remove_leakage, validate_schema, ExtractConfig, KnowledgeGraph, LeakageStats, RawSources,
    ValidationReport, Warnings,
};

pub const DATASET_FILE: &str = "dataset.tsv";
pub const POPULARITY_FILE: &str = "popularity.tsv";
pub const REPORT_FILE: &str = "validation_report.json";

#[derive(Debug, Clone)]
pub struct Prepared {
    /// Graph with every site, before leakage removal.
    pub full: KnowledgeGraph,
    pub kg: KnowledgeGraph,
    pub data: SiteDataset,
    /// Region entity id in `kg` to aggregate POI clicks.
    pub popularity: BTreeMap<usize, u64>,
    pub leakage: LeakageStats,
    pub warnings: Warnings,
    pub report: ValidationReport,
}

pub fn prepare(src: &RawSources, ext: &ExtractConfig, split: &SplitConfig) -> Result<Prepared> {
    let built = build_graph(src, ext)?;
    let full = built.kg;
    let data_full = SiteDataset::from_sources(src, &full, split)?;
    let (kg, leakage) = remove_leakage(&full, &data_full.holdout())?;
    let data = data_full.rebind(&full, &kg)?;
    let mut popularity = BTreeMap::new();
    for (r, c) in built.region_popularity {
        let id = kg
            .entity_id(&full.entity(r).name)
            .ok_or_else(|| Error::Contract(format!("region {} lost during leakage removal", full.entity(r).name)))?;
        popularity.insert(id, c);
    }
    let report = validate_schema(&kg);
    Ok(Prepared { full, kg, data, popularity, leakage, warnings: built.warnings, report })
}

impl Prepared {
    /// Graph files, dataset, popularity and validation report under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.kg.write_dir(dir)?;
        self.data.write_tsv(&dir.join(DATASET_FILE), &self.kg)?;
        write_popularity(&dir.join(POPULARITY_FILE), &self.popularity, &self.kg)?;
        let report = serde_json::json!({
            "validation": self.report,
            "leakage": self.leakage,
            "warnings": self.warnings,
        });
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(())
    }
}

pub fn write_popularity(path: &Path, pop: &BTreeMap<usize, u64>, kg: &KnowledgeGraph) -> Result<()> {
    let mut s = String::from("region\tclicks\n");
    for (r, c) in pop {
        s.push_str(&format!("{}\t{c}\n", kg.entity(*r).name));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_popularity(path: &Path, kg: &KnowledgeGraph) -> Result<BTreeMap<usize, u64>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::Source { file: path.to_path_buf() })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { file: path.to_path_buf(), line: i + 1, msg };
        let (name, clicks) = line.split_once('\t').ok_or_else(|| parse_err("expected region<TAB>clicks".into()))?;
        let id = kg.entity_id(name).ok_or_else(|| parse_err(format!("unknown region {name}")))?;
        let c = clicks.trim().parse().map_err(|e| parse_err(format!("bad click count: {e}")))?;
        out.insert(id, c);
    }
    Ok(out)
}

/// Reads what [`Prepared::write`] produced: graph, dataset and popularity.
pub fn load_prepared(dir: &Path) -> Result<(KnowledgeGraph, SiteDataset, BTreeMap<usize, u64>)> {
    let kg = KnowledgeGraph::read_dir(dir)?;
    let data = SiteDataset::read_tsv(&dir.join(DATASET_FILE), &kg)?;
    let pop = read_popularity(&dir.join(POPULARITY_FILE), &kg)?;
    Ok((kg, data, pop))
}
