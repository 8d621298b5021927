//! Brand-to-region site samples and their train/valid/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::urbankg::extract::entity_name;
use crate::urbankg::{KnowledgeGraph, Ontology, RawSources};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SitePair {
    pub brand: usize,
    pub region: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Brands need strictly more store records than this to enter the dataset.
    pub brand_stores_over: usize,
    /// Split each brand's pairs 6:2:2 instead of the global pair list.
    pub per_brand: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { brand_stores_over: 20, per_brand: false, seed: 0 }
    }
}

/// Distinct (brand, region) pairs with a split label each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteDataset {
    pairs: Vec<SitePair>,
}

impl SiteDataset {
    /// Rejects a pair listed twice.
    pub fn new(mut pairs: Vec<SitePair>) -> Result<Self> {
        pairs.sort();
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if !seen.insert((p.brand, p.region)) {
                return Err(Error::Contract(format!("pair ({}, {}) listed twice", p.brand, p.region)));
            }
        }
        Ok(Self { pairs })
    }

    /// Builds the dataset from site records, ids resolved against `kg`.
    ///
    /// Site records that all carry a split keep it; otherwise pairs are
    /// shuffled and cut 6:2:2.
    pub fn from_sources(src: &RawSources, kg: &KnowledgeGraph, cfg: &SplitConfig) -> Result<Self> {
        let mut stores: HashMap<&str, usize> = HashMap::new();
        for s in &src.sites {
            *stores.entry(s.brand_id.as_str()).or_default() += 1;
        }
        let resolve = |b: &str, r: &str| -> Option<(usize, usize)> {
            Some((
                kg.entity_id(&entity_name(Ontology::Brand, b))?,
                kg.entity_id(&entity_name(Ontology::Region, r))?,
            ))
        };
        let given = !src.sites.is_empty() && src.sites.iter().all(|s| s.split.is_some());
        let mut labelled: BTreeMap<(usize, usize), Option<Split>> = BTreeMap::new();
        for s in &src.sites {
            if stores[s.brand_id.as_str()] <= cfg.brand_stores_over {
                continue;
            }
            let Some(key) = resolve(&s.brand_id, &s.region_id) else { continue };
            let split = if given { s.split } else { None };
            match labelled.get(&key) {
                Some(prev) if *prev != split => {
                    return Err(Error::Config(format!(
                        "site ({}, {}) carries two different splits",
                        s.brand_id, s.region_id
                    )))
                }
                Some(_) => {}
                None => {
                    labelled.insert(key, split);
                }
            }
        }
        if given {
            let pairs = labelled
                .into_iter()
                .map(|((brand, region), s)| SitePair { brand, region, split: s.unwrap() })
                .collect();
            return Self::new(pairs);
        }
        let keys: Vec<(usize, usize)> = labelled.into_keys().collect();
        Ok(Self::auto_split(&keys, cfg.per_brand, cfg.seed))
    }

    /// Deterministic 6:2:2 split of distinct pairs.
    pub fn auto_split(keys: &[(usize, usize)], per_brand: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniq: Vec<(usize, usize)> = keys.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let groups: Vec<Vec<(usize, usize)>> = if per_brand {
            let mut by: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
            for k in uniq {
                by.entry(k.0).or_default().push(k);
            }
            by.into_values().collect()
        } else {
            uniq.sort_unstable();
            vec![uniq]
        };
        let mut pairs = Vec::new();
        for mut g in groups {
            g.shuffle(&mut rng);
            let n = g.len();
            let n_train = (n as f64 * 0.6).round() as usize;
            let n_valid = ((n as f64 * 0.2).round() as usize).min(n - n_train);
            for (i, (brand, region)) in g.into_iter().enumerate() {
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_valid {
                    Split::Valid
                } else {
                    Split::Test
                };
                pairs.push(SitePair { brand, region, split });
            }
        }
        pairs.sort();
        Self { pairs }
    }

    pub fn pairs(&self) -> &[SitePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split(&self, s: Split) -> Vec<(usize, usize)> {
        self.pairs.iter().filter(|p| p.split == s).map(|p| (p.brand, p.region)).collect()
    }

    /// Valid and test pairs together.
    pub fn holdout(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().filter(|p| p.split != Split::Train).map(|p| (p.brand, p.region)).collect()
    }

    /// Brand -> sorted true regions within one split.
    pub fn truth(&self, s: Split) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for p in self.pairs.iter().filter(|p| p.split == s) {
            m.entry(p.brand).or_default().push(p.region);
        }
        m
    }

    /// Every brand appearing in the dataset, ascending.
    pub fn brands(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.brand).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Re-resolves ids from one graph to another by entity name.
    pub fn rebind(&self, from: &KnowledgeGraph, to: &KnowledgeGraph) -> Result<Self> {
        let map = |id: usize| {
            let name = &from.entity(id).name;
            to.entity_id(name).ok_or_else(|| Error::Lookup(format!("entity {name} missing from target graph")))
        };
        let mut pairs = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            pairs.push(SitePair { brand: map(p.brand)?, region: map(p.region)?, split: p.split });
        }
        Self::new(pairs)
    }

    pub fn write_tsv(&self, path: &Path, kg: &KnowledgeGraph) -> Result<()> {
        let mut b = String::from("brand\tregion\tsplit\n");
        for p in &self.pairs {
            writeln!(b, "{}\t{}\t{}", kg.entity(p.brand).name, kg.entity(p.region).name, p.split).unwrap();
        }
        fs::write(path, b)?;
        Ok(())
    }

    pub fn read_tsv(path: &Path, kg: &KnowledgeGraph) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::Source { file: path.to_path_buf() })?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { file: path.to_path_buf(), line: i + 1, msg };
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 3 {
                return Err(perr(format!("expected 3 columns, found {}", c.len())));
            }
            let id = |n: &str| kg.entity_id(n).ok_or_else(|| perr(format!("unknown entity {n}")));
            let split = c[2].parse().map_err(|e: Error| perr(e.to_string()))?;
            pairs.push(SitePair { brand: id(c[0])?, region: id(c[1])?, split });
        }
        Self::new(pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_split_proportions_and_disjointness() {
        let keys: Vec<_> = (0..10).flat_map(|b| (0..10).map(move |r| (b, r))).collect();
        let ds = SiteDataset::auto_split(&keys, false, 7);
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.split(Split::Train).len(), 60);
        assert_eq!(ds.split(Split::Valid).len(), 20);
        assert_eq!(ds.split(Split::Test).len(), 20);
        assert_eq!(ds, SiteDataset::auto_split(&keys, false, 7));
        let per = SiteDataset::auto_split(&keys, true, 7);
        for b in 0..10 {
            assert_eq!(per.pairs().iter().filter(|p| p.brand == b && p.split == Split::Train).count(), 6);
        }
    }

    #[test]
    fn duplicates_collapse_in_auto_split() {
        let ds = SiteDataset::auto_split(&[(0, 1), (0, 1), (0, 2)], false, 0);
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn duplicate_pair_rejected() {
        let p = SitePair { brand: 0, region: 1, split: Split::Train };
        assert!(SiteDataset::new(vec![p, SitePair { split: Split::Test, ..p }]).is_err());
    }
}
