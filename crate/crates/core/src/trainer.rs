//! Mini-batch training with early stopping on validation NDCG@10, repeated
//! runs and the ablation variants.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{SiteDataset, Split};
use crate::decoder::{PathGroup, RelationPath};
use crate::encoder::TrainCtx;
use crate::error::{Error, Result};
use crate::eval::{AggregateReport, EvalTarget, MetricsReport, RankingResult, DEFAULT_KS};
use crate::model::{KnowSite, Layer0, ModelConfig};
use crate::numcore::{Adam, Scalar, Tape, Tensor};
use crate::urbankg::KnowledgeGraph;

pub const LR_GRID: [f64; 4] = [0.0005, 0.001, 0.003, 0.005];
pub const DROPOUT_GRID: [f64; 3] = [0.1, 0.3, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub runs: usize,
    /// Worker threads for independent runs.
    pub jobs: usize,
    /// Drop a brand's regions from other splits when ranking.
    pub filtered: bool,
    /// Restrict lr and dropout to `LR_GRID` and `DROPOUT_GRID`.
    pub grid_search: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 0.001,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            runs: 10,
            jobs: 1,
            filtered: true,
            grid_search: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.runs == 0 || self.jobs == 0 {
            return Err(Error::Config("batch_size, runs and jobs must be positive".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} is not a non-negative number", self.lr)));
        }
        if self.grid_search {
            if !LR_GRID.contains(&self.lr) {
                return Err(Error::Config(format!("lr {} outside the grid {LR_GRID:?}", self.lr)));
            }
            if !DROPOUT_GRID.contains(&model.encoder.dropout) {
                return Err(Error::Config(format!(
                    "dropout {} outside the grid {DROPOUT_GRID:?}",
                    model.encoder.dropout
                )));
            }
        }
        Ok(())
    }
}

/// Inputs shared by every run.
#[derive(Debug, Clone)]
pub struct Experiment<'a, T> {
    /// Leakage-stripped graph.
    pub kg: &'a KnowledgeGraph,
    pub data: &'a SiteDataset,
    pub popularity: &'a BTreeMap<usize, u64>,
    pub pretrained: Option<(Tensor<T>, Tensor<T>)>,
    pub paths: Vec<RelationPath>,
}

/// Ranking target for `split`. With `filtered`, each brand's regions from
/// other splits are removed from its candidate list.
pub fn eval_target(data: &SiteDataset, split: Split, popularity: &BTreeMap<usize, u64>, regions: &[usize], filtered: bool) -> EvalTarget {
    let truth = data.truth(split);
    let mut known: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    if filtered {
        for p in data.pairs().iter().filter(|p| p.split != split && truth.contains_key(&p.brand)) {
            known.entry(p.brand).or_default().insert(p.region);
        }
    }
    EvalTarget { regions: regions.to_vec(), truth, known, popularity: popularity.clone() }
}

pub fn evaluate_model<T: Scalar>(
    model: &KnowSite<T>,
    kg: &KnowledgeGraph,
    target: &EvalTarget,
    ks: &[usize],
) -> Result<(MetricsReport, Vec<RankingResult>)> {
    let brands = target.brands();
    if brands.is_empty() {
        return Ok((MetricsReport::from_results(&[], ks, &|_| String::new())?, Vec::new()));
    }
    let scores = model.scores(&brands)?;
    let results = target.rank(&scores)?;
    let names = |b: usize| kg.entity(b).name.clone();
    Ok((MetricsReport::from_results(&results, ks, &names)?, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg10: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,valid_ndcg10\n");
    for h in history {
        s.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.valid_ndcg10));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T: Scalar> {
    pub model: KnowSite<T>,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_valid: f64,
    /// Training loss of the initial parameters over all train pairs.
    pub initial_loss: f64,
}

fn layer0<T: Scalar>(exp: &Experiment<'_, T>) -> Layer0<T> {
    match &exp.pretrained {
        Some((e, r)) => Layer0::Pretrained { entities: e.clone(), relations: r.clone() },
        None => Layer0::Random,
    }
}

/// Dropout-free loss over `pairs`, weighted by batch size.
pub fn full_loss<T: Scalar>(model: &KnowSite<T>, pairs: &[(usize, usize)], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch) {
        let tape = Tape::new();
        let (l, _) = model.loss::<ChaCha8Rng>(&tape, chunk, None)?;
        total += l.item().as_f64() * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

pub fn train<T: Scalar>(
    exp: &Experiment<'_, T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput<T>> {
    cfg.validate(model_cfg)?;
    let mut train_pairs = exp.data.split(Split::Train);
    if train_pairs.is_empty() {
        return Err(Error::Contract("no training pairs".into()));
    }
    let mut model = KnowSite::new(exp.kg, *model_cfg, exp.paths.clone(), layer0(exp), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let valid = eval_target(exp.data, Split::Valid, exp.popularity, &model.regions, cfg.filtered);
    let has_valid = !valid.truth.is_empty();
    let initial_loss = full_loss(&model, &train_pairs, cfg.batch_size)?;
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::new();
    let mut best_valid = if has_valid { valid_ndcg(&model, exp.kg, &valid)? } else { f64::NEG_INFINITY };
    let mut best = model.snapshot();
    let mut best_epoch = 0;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        train_pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_pairs.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let mut ctx = TrainCtx { rng: &mut rng };
            let (loss, stats) = model.loss(&tape, chunk, Some(&mut ctx))?;
            total += loss.item().as_f64() * chunk.len() as f64;
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            model.encoder.update_running(&stats);
        }
        let train_loss = total / train_pairs.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Contract(format!("training loss diverged at epoch {epoch}")));
        }
        let v = if has_valid { valid_ndcg(&model, exp.kg, &valid)? } else { f64::NAN };
        history.push(EpochRecord { epoch, train_loss, valid_ndcg10: v });
        if !has_valid || v > best_valid {
            best_valid = v;
            best = model.snapshot();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.restore(&best)?;
    Ok(TrainOutput { model, history, best_epoch, best_valid, initial_loss })
}

fn valid_ndcg<T: Scalar>(model: &KnowSite<T>, kg: &KnowledgeGraph, target: &EvalTarget) -> Result<f64> {
    let (rep, _) = evaluate_model(model, kg, target, &[10])?;
    Ok(rep.at[0].ndcg)
}

/// Attention rows of one run, in path-table column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub brands: Vec<String>,
    pub paths: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    pub fn of<T: Scalar>(model: &KnowSite<T>, kg: &KnowledgeGraph, brands: &[usize]) -> Result<Option<Self>> {
        let Some(a) = model.attention(brands)? else {
            return Ok(None);
        };
        Ok(Some(Self {
            brands: brands.iter().map(|&b| kg.entity(b).name.clone()).collect(),
            paths: model.decoder.paths.iter().map(|p| p.criterion.clone()).collect(),
            rows: (0..a.rows()).map(|i| a.row(i).iter().map(|v| v.as_f64()).collect()).collect(),
        }))
    }

    pub fn row(&self, brand: &str) -> Option<&[f64]> {
        self.brands.iter().position(|b| b == brand).map(|i| self.rows[i].as_slice())
    }

    pub fn column(&self, criterion: &str) -> Option<usize> {
        self.paths.iter().position(|p| p == criterion)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("brand,{}\n", self.paths.join(","));
        for (b, row) in self.brands.iter().zip(&self.rows) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{b},{}\n", vals.join(",")));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    pub test: MetricsReport,
    pub attention: Option<AttentionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunRecord>,
    pub aggregate: AggregateReport,
}

impl ExperimentReport {
    pub fn mean_hit(&self, k: usize) -> f64 {
        self.aggregate.mean_at(k).map_or(f64::NAN, |m| m.hit)
    }

    pub fn mean_ndcg(&self, k: usize) -> f64 {
        self.aggregate.mean_at(k).map_or(f64::NAN, |m| m.ndcg)
    }
}

/// Trains and tests one seed.
pub fn run_once<T: Scalar>(
    exp: &Experiment<'_, T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunRecord> {
    let out = train(exp, model_cfg, cfg, seed)?;
    let test = eval_target(exp.data, Split::Test, exp.popularity, &out.model.regions, cfg.filtered);
    let (report, _) = evaluate_model(&out.model, exp.kg, &test, &DEFAULT_KS)?;
    let attention = AttentionMatrix::of(&out.model, exp.kg, &exp.data.brands())?;
    Ok(RunRecord {
        seed,
        best_epoch: out.best_epoch,
        epochs_run: out.history.len(),
        initial_loss: out.initial_loss,
        final_train_loss: out.history.last().map_or(out.initial_loss, |h| h.train_loss),
        test: report,
        attention,
    })
}

/// Runs seeds `seed .. seed + runs` and aggregates the test metrics.
pub fn run_experiment<T: Scalar>(
    exp: &Experiment<'_, T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<ExperimentReport> {
    cfg.validate(model_cfg)?;
    let seeds: Vec<u64> = (0..cfg.runs as u64).map(|i| cfg.seed + i).collect();
    let mut runs: Vec<Option<Result<RunRecord>>> = (0..seeds.len()).map(|_| None).collect();
    if cfg.jobs <= 1 {
        for (slot, &s) in runs.iter_mut().zip(&seeds) {
            *slot = Some(run_once(exp, model_cfg, cfg, s));
        }
    } else {
        let chunk = seeds.len().div_ceil(cfg.jobs);
        std::thread::scope(|scope| {
            for (slots, ss) in runs.chunks_mut(chunk).zip(seeds.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, &s) in slots.iter_mut().zip(ss) {
                        *slot = Some(run_once(exp, model_cfg, cfg, s));
                    }
                });
            }
        });
    }
    let runs = runs.into_iter().map(|r| r.expect("every seed ran")).collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.test.clone()).collect();
    Ok(ExperimentReport { aggregate: AggregateReport::from_reports(&reports)?, runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoPretrain,
    NoEncoder,
    NoDecoder,
    NoRegionPaths,
    NoBrandPaths,
    NoStorePaths,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPretrain,
        Variant::NoEncoder,
        Variant::NoDecoder,
        Variant::NoRegionPaths,
        Variant::NoBrandPaths,
        Variant::NoStorePaths,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPretrain => "w/o Pretrain",
            Variant::NoEncoder => "w/o Encoder",
            Variant::NoDecoder => "w/o Decoder",
            Variant::NoRegionPaths => "w/o RegionBased",
            Variant::NoBrandPaths => "w/o BrandBased",
            Variant::NoStorePaths => "w/o StoreBased",
        }
    }

    pub fn dropped_group(self) -> Option<PathGroup> {
        match self {
            Variant::NoRegionPaths => Some(PathGroup::RegionBased),
            Variant::NoBrandPaths => Some(PathGroup::BrandBased),
            Variant::NoStorePaths => Some(PathGroup::StoreBased),
            _ => None,
        }
    }

    /// The experiment and model config for this variant of `base`.
    pub fn apply<'a, T: Scalar>(
        self,
        exp: &Experiment<'a, T>,
        model: &ModelConfig,
    ) -> (Experiment<'a, T>, ModelConfig) {
        let mut e = exp.clone();
        let mut m = *model;
        match self {
            Variant::Full => {}
            Variant::NoPretrain => e.pretrained = None,
            Variant::NoEncoder => m.encoder.layers = 0,
            Variant::NoDecoder => m.decoder.alpha = 1.0,
            _ => {
                let g = self.dropped_group().expect("group variant");
                e.paths.retain(|p| p.group != g);
            }
        }
        (e, m)
    }
}

pub fn ablation_suite<T: Scalar>(
    exp: &Experiment<'_, T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<(Variant, ExperimentReport)>> {
    variants
        .iter()
        .map(|&v| {
            let (e, m) = v.apply(exp, model_cfg);
            Ok((v, run_experiment(&e, &m, cfg)?))
        })
        .collect()
}
