//! One structured run configuration covering every stage.

use serde::{Deserialize, Serialize};

use crate::dataset::SplitConfig;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::synthcity::{CityConfig, PlantedPattern};
use crate::trainer::TrainConfig;
use crate::urbankg::ExtractConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Brand entity names for the attention and cosine reports; empty means
    /// every brand in the dataset.
    pub brands: Vec<String>,
    pub render_heatmaps: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { brands: Vec::new(), render_heatmaps: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every stage.
    pub seed: Option<u64>,
    pub city: CityConfig,
    pub patterns: Vec<PlantedPattern>,
    pub extract: ExtractConfig,
    pub split: SplitConfig,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    /// Copy with the global seed pushed into each stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.city.seed = s;
            c.split.seed = s;
            c.pretrain.seed = s;
            c.train.seed = s;
        }
        c
    }
}
