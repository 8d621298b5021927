//! The full site-selection model: layer-0 tables, encoder and decoder over
//! one parameter store, plus the training objective and checkpoints.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{parse_path_table, write_path_table, Decoder, DecoderConfig, RelationPath};
use crate::encoder::{BnStats, Encoder, EncoderConfig, TrainCtx};
use crate::error::{Error, Result};
use crate::numcore::{embio, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::urbankg::{KnowledgeGraph, Ontology};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub freeze_pretrained: bool,
    pub lambda_reg: f64,
    /// Use `lambda * ||theta||^2` instead of `lambda * ||theta||`.
    pub reg_squared: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            freeze_pretrained: false,
            lambda_reg: 1e-5,
            reg_squared: false,
        }
    }
}

/// Where the layer-0 entity and relation tables come from.
#[derive(Debug, Clone)]
pub enum Layer0<T> {
    Pretrained { entities: Tensor<T>, relations: Tensor<T> },
    /// `uniform(-0.1, 0.1)`.
    Random,
}

#[derive(Debug, Clone)]
enum Tables<T> {
    Trainable(ParamId, ParamId),
    Frozen(Tensor<T>, Tensor<T>),
}

pub struct Forward<'t, T: Scalar> {
    pub scores: Var<'t, T>,
    pub attention: Option<Var<'t, T>>,
    pub bn_stats: Vec<BnStats<T>>,
}

#[derive(Debug, Clone)]
pub struct KnowSite<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    tables: Tables<T>,
    pub encoder: Encoder<T>,
    pub decoder: Decoder,
    /// Candidate region entity ids, ascending.
    pub regions: Rc<Vec<usize>>,
    region_col: HashMap<usize, usize>,
}

impl<T: Scalar> KnowSite<T> {
    pub fn new(
        kg: &KnowledgeGraph,
        cfg: ModelConfig,
        paths: Vec<RelationPath>,
        init: Layer0<T>,
        seed: u64,
    ) -> Result<Self> {
        let d = cfg.d;
        if d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if cfg.lambda_reg < 0.0 {
            return Err(Error::Config("lambda_reg must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ne, nr) = (kg.num_entities(), kg.num_relations());
        let (ent, rel) = match init {
            Layer0::Pretrained { entities, relations } => {
                if entities.shape() != [ne, d] || relations.shape() != [nr, d] {
                    return Err(Error::Config(format!(
                        "pre-trained tables {:?} / {:?} do not match {ne} entities, {nr} relations, d = {d}",
                        entities.shape(),
                        relations.shape()
                    )));
                }
                (entities, relations)
            }
            Layer0::Random => (
                Tensor::uniform(&[ne, d], -0.1, 0.1, &mut rng),
                Tensor::uniform(&[nr, d], -0.1, 0.1, &mut rng),
            ),
        };
        let mut store = ParamStore::new();
        let tables = if cfg.freeze_pretrained {
            Tables::Frozen(ent, rel)
        } else {
            Tables::Trainable(store.register("emb.entities", ent)?, store.register("emb.relations", rel)?)
        };
        let encoder = Encoder::new(kg, cfg.encoder, d, &mut store, &mut rng)?;
        let decoder = Decoder::new(cfg.decoder, d, paths, kg.relations(), &mut store, &mut rng)?;
        let regions = kg.entities_of(Ontology::Region);
        if regions.is_empty() {
            return Err(Error::Contract("graph has no region entities".into()));
        }
        let region_col = regions.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        Ok(Self { cfg, store, tables, encoder, decoder, regions: Rc::new(regions), region_col })
    }

    pub fn layer0<'t>(&self, tape: &'t Tape<T>) -> (Var<'t, T>, Var<'t, T>) {
        match &self.tables {
            Tables::Trainable(e, r) => (tape.param(&self.store, *e), tape.param(&self.store, *r)),
            Tables::Frozen(e, r) => (tape.constant(e.clone()), tape.constant(r.clone())),
        }
    }

    pub fn layer0_tables(&self) -> (Tensor<T>, Tensor<T>) {
        match &self.tables {
            Tables::Trainable(e, r) => (self.store.get(*e).tensor.clone(), self.store.get(*r).tensor.clone()),
            Tables::Frozen(e, r) => (e.clone(), r.clone()),
        }
    }

    /// `(h^K, r^K)` after the encoder, or the layer-0 tables when `K = 0`.
    pub fn encode<'t, R: Rng>(
        &self,
        tape: &'t Tape<T>,
        train: Option<&mut TrainCtx<'_, R>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Vec<BnStats<T>>)> {
        let (h0, r0) = self.layer0(tape);
        self.encoder.encode(tape, &self.store, h0, r0, train)
    }

    /// Scores for each listed brand against every candidate region.
    pub fn forward<'t, R: Rng>(
        &self,
        tape: &'t Tape<T>,
        brands: &[usize],
        train: Option<&mut TrainCtx<'_, R>>,
    ) -> Result<Forward<'t, T>> {
        let (hk, rk, bn_stats) = self.encode(tape, train)?;
        let out = self.decoder.forward(tape, &self.store, hk, rk, brands, self.regions.clone())?;
        Ok(Forward { scores: out.scores, attention: out.attention, bn_stats })
    }

    pub fn region_column(&self, region: usize) -> Result<usize> {
        self.region_col
            .get(&region)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("entity {region} is not a candidate region")))
    }

    /// `lambda * ||theta||` over every trainable parameter.
    pub fn regularizer<'t>(&self, tape: &'t Tape<T>) -> Option<Var<'t, T>> {
        if self.cfg.lambda_reg == 0.0 || self.store.is_empty() {
            return None;
        }
        let mut acc: Option<Var<'t, T>> = None;
        for id in self.store.ids() {
            let sq = tape.param(&self.store, id).sum_sq();
            acc = Some(match acc {
                Some(a) => a.add(sq).expect("scalar add"),
                None => sq,
            });
        }
        let sq = acc?;
        let norm = if self.cfg.reg_squared { sq } else { sq.powf(T::from_f64_lossy(0.5)) };
        Some(norm.scale(T::from_f64_lossy(self.cfg.lambda_reg)))
    }

    /// Mean cross-entropy over `pairs` against all candidate regions plus
    /// the regularizer.
    pub fn loss<'t, R: Rng>(
        &self,
        tape: &'t Tape<T>,
        pairs: &[(usize, usize)],
        train: Option<&mut TrainCtx<'_, R>>,
    ) -> Result<(Var<'t, T>, Vec<BnStats<T>>)> {
        if pairs.is_empty() {
            return Err(Error::Contract("loss over an empty batch".into()));
        }
        let brands: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let targets = pairs.iter().map(|p| self.region_column(p.1)).collect::<Result<Vec<_>>>()?;
        let fwd = self.forward(tape, &brands, train)?;
        let mut loss = fwd.scores.cross_entropy(Rc::new(targets))?;
        if let Some(reg) = self.regularizer(tape) {
            loss = loss.add(reg)?;
        }
        Ok((loss, fwd.bn_stats))
    }

    /// Evaluation-mode score matrix `[brands x regions]`.
    pub fn scores(&self, brands: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok(self.forward::<ChaCha8Rng>(&tape, brands, None)?.scores.to_tensor())
    }

    /// Evaluation-mode attention `[brands x paths]`; `None` without a path
    /// decoder.
    pub fn attention(&self, brands: &[usize]) -> Result<Option<Tensor<T>>> {
        let tape = Tape::new();
        Ok(self.forward::<ChaCha8Rng>(&tape, brands, None)?.attention.map(|a| a.to_tensor()))
    }

    pub fn encoded_tables(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let (h, r, _) = self.encode::<ChaCha8Rng>(&tape, None)?;
        Ok((h.to_tensor(), r.to_tensor()))
    }

    pub fn snapshot(&self) -> (Vec<Vec<T>>, Vec<BnStats<T>>) {
        (self.store.snapshot(), self.encoder.running.clone())
    }

    pub fn restore(&mut self, snap: &(Vec<Vec<T>>, Vec<BnStats<T>>)) -> Result<()> {
        self.store.restore(&snap.0)?;
        self.encoder.running = snap.1.clone();
        Ok(())
    }

    /// Writes the checkpoint: config, path table, parameters, batch-norm
    /// statistics, and layer-0 plus encoded tables in KSEMB001 format.
    pub fn save(&self, dir: &Path, kg: &KnowledgeGraph) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("model_config.json"), serde_json::to_string_pretty(&self.cfg)? + "\n")?;
        std::fs::write(dir.join("paths.tsv"), write_path_table(&self.decoder.paths, kg.relations()))?;
        let params: Vec<SavedParam> = self
            .store
            .iter()
            .map(|p| SavedParam {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        std::fs::write(dir.join("params.json"), serde_json::to_string(&params)? + "\n")?;
        let running: Vec<(Vec<f64>, Vec<f64>)> = self
            .encoder
            .running
            .iter()
            .map(|(m, v)| (m.iter().map(|x| x.as_f64()).collect(), v.iter().map(|x| x.as_f64()).collect()))
            .collect();
        std::fs::write(dir.join("bn_running.json"), serde_json::to_string(&running)? + "\n")?;
        let enames: Vec<String> = kg.entities().iter().map(|e| e.name.clone()).collect();
        let rnames: Vec<String> = kg.relations().iter().map(|r| r.name.clone()).collect();
        let (e0, r0) = self.layer0_tables();
        embio::save_embeddings(&dir.join("entities.ksemb"), &e0, &enames)?;
        embio::save_embeddings(&dir.join("relations.ksemb"), &r0, &rnames)?;
        let (ek, rk) = self.encoded_tables()?;
        embio::save_embeddings(&dir.join("encoded_entities.ksemb"), &ek, &enames)?;
        embio::save_embeddings(&dir.join("encoded_relations.ksemb"), &rk, &rnames)?;
        Ok(())
    }

    pub fn load(dir: &Path, kg: &KnowledgeGraph) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&read(dir, "model_config.json")?)?;
        let paths = parse_path_table(&read(dir, "paths.tsv")?, kg.relations())?;
        let (e0, enames) = embio::load_embeddings::<T>(&dir.join("entities.ksemb"))?;
        let (r0, rnames) = embio::load_embeddings::<T>(&dir.join("relations.ksemb"))?;
        let kg_enames: Vec<&str> = kg.entities().iter().map(|e| e.name.as_str()).collect();
        let kg_rnames: Vec<&str> = kg.relations().iter().map(|r| r.name.as_str()).collect();
        if enames != kg_enames || rnames != kg_rnames {
            return Err(Error::Config("checkpoint tables do not match the graph's entities and relations".into()));
        }
        let mut model = Self::new(kg, cfg, paths, Layer0::Pretrained { entities: e0, relations: r0 }, 0)?;
        let params: Vec<SavedParam> = serde_json::from_str(&read(dir, "params.json")?)?;
        if params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                model.store.len()
            )));
        }
        for p in params {
            let id = model
                .store
                .id_of(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {} unknown to the model", p.name)))?;
            let t = Tensor::new(&p.shape, p.data.iter().map(|&v| T::from_f64_lossy(v)).collect())?;
            if t.shape() != model.store.get(id).tensor.shape() {
                return Err(Error::Format(format!("checkpoint parameter {} has shape {:?}", p.name, p.shape)));
            }
            model.store.get_mut(id).tensor = t.with_grad();
        }
        let running: Vec<(Vec<f64>, Vec<f64>)> = serde_json::from_str(&read(dir, "bn_running.json")?)?;
        if running.len() != model.encoder.running.len() {
            return Err(Error::Format("batch-norm statistics do not match the layer count".into()));
        }
        model.encoder.running = running
            .into_iter()
            .map(|(m, v)| {
                (m.into_iter().map(T::from_f64_lossy).collect(), v.into_iter().map(T::from_f64_lossy).collect())
            })
            .collect();
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read(dir: &Path, name: &str) -> Result<String> {
    std::fs::read_to_string(dir.join(name)).map_err(|_| Error::Source { file: dir.join(name) })
}
