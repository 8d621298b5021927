//! Task-agnostic TuckER pre-training of entity and relation tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::embio::{load_embeddings, save_embeddings};
use crate::numcore::{Adam, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::urbankg::{KnowledgeGraph, Ontology};

/// Rows of vectors addressed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    rows: Tensor<T>,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(rows: Tensor<T>, names: Vec<String>) -> Result<Self> {
        if rows.shape().len() != 2 || rows.rows() != names.len() {
            return Err(Error::Dimension(format!("{} names for table {:?}", names.len(), rows.shape())));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate embedding name {n}")));
            }
        }
        Ok(Self { rows: Tensor::new(rows.shape(), rows.data().to_vec())?, names, index })
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.index_of(name).map(|i| self.rows.row(i))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_embeddings(path, &self.rows, &self.names)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (rows, names) = load_embeddings(path)?;
        Self::new(rows, names)
    }

    /// Rows re-ordered to follow `names`; every name must be present.
    pub fn aligned(&self, names: &[String]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(names.len() * d);
        for n in names {
            let row = self.get(n).ok_or_else(|| Error::Lookup(format!("no embedding for {n}")))?;
            out.extend_from_slice(row);
        }
        Tensor::matrix(names.len(), d, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub d: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Dropout on subject entity rows.
    pub dropout: f64,
    pub patience: usize,
    /// Improvements of the training loss below this count as stalls.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            d: 64,
            max_epochs: 100,
            lr: 0.003,
            batch_size: 128,
            label_smoothing: 0.1,
            dropout: 0.3,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

/// TuckER parameters: `core` is stored as `[d_r x d_e*d_e]` with
/// `core[j, i*d + k]` the weight of `e_s[i] * w_r[j] * e_o[k]`.
#[derive(Debug, Clone)]
pub struct TuckerModel<T: Scalar> {
    pub store: ParamStore<T>,
    pub entities: ParamId,
    pub relations: ParamId,
    pub core: ParamId,
    pub d: usize,
}

impl<T: Scalar> TuckerModel<T> {
    pub fn new(n_entities: usize, n_relations: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let mut store = ParamStore::new();
        let entities = store.register("tucker.entities", Tensor::normal(&[n_entities, d], std, rng))?;
        let relations = store.register("tucker.relations", Tensor::normal(&[n_relations, d], std, rng))?;
        let core = store.register("tucker.core", Tensor::uniform(&[d, d * d], -1.0, 1.0, rng))?;
        Ok(Self { store, entities, relations, core, d })
    }

    /// Builds a model from explicit tables; `core` is `[d x d*d]`.
    pub fn from_parts(entities: Tensor<T>, relations: Tensor<T>, core: Tensor<T>) -> Result<Self> {
        let d = entities.cols();
        if relations.cols() != d || core.shape() != [d, d * d] {
            return Err(Error::Dimension("TuckER parts disagree on d".into()));
        }
        let mut store = ParamStore::new();
        let entities = store.register("tucker.entities", entities)?;
        let relations = store.register("tucker.relations", relations)?;
        let core = store.register("tucker.core", core)?;
        Ok(Self { store, entities, relations, core, d })
    }

    /// Raw logits `[B x |E|]` for a batch of `(s, r)` queries.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        subjects: &[usize],
        rels: &[usize],
        mask: Option<Rc<Vec<T>>>,
    ) -> Result<Var<'t, T>> {
        let e = tape.param(&self.store, self.entities);
        let r = tape.param(&self.store, self.relations);
        let w = tape.param(&self.store, self.core);
        let mut es = e.gather_rows(Rc::new(subjects.to_vec()))?;
        if let Some(m) = mask {
            es = es.mul_const(m)?;
        }
        let wr = r.gather_rows(Rc::new(rels.to_vec()))?;
        let m = wr.matmul(w)?;
        let x = es.batch_vec_mat(m)?;
        x.matmul_t(e)
    }
}

/// Raw score of every candidate object for `(s, r)`; apply a sigmoid for
/// probabilities.
pub fn tucker_score<T: Scalar>(m: &TuckerModel<T>, s: usize, r: usize) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = m.forward(&tape, &[s], &[r], None)?;
    let v = out.to_tensor();
    Tensor::vector(v.into_data()).reshaped(&[m.store.get(m.entities).tensor.rows()])
}

/// One `(s, r)` query with its true objects.
#[derive(Debug, Clone)]
struct Query {
    s: usize,
    r: usize,
    objects: Vec<usize>,
}

fn queries(kg: &KnowledgeGraph) -> Vec<Query> {
    let mut m: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for f in kg.facts() {
        m.entry((f.s, f.r)).or_default().push(f.o);
    }
    m.into_iter().map(|((s, r), objects)| Query { s, r, objects }).collect()
}

fn batch_loss<'t, T: Scalar>(
    model: &TuckerModel<T>,
    tape: &'t Tape<T>,
    batch: &[&Query],
    n: usize,
    smoothing: f64,
    mask: Option<Rc<Vec<T>>>,
) -> Result<Var<'t, T>> {
    let s: Vec<usize> = batch.iter().map(|q| q.s).collect();
    let r: Vec<usize> = batch.iter().map(|q| q.r).collect();
    let logits = model.forward(tape, &s, &r, mask)?;
    let base = smoothing / n as f64;
    let mut targets = vec![T::from_f64_lossy(base); batch.len() * n];
    let hit = T::from_f64_lossy(1.0 - smoothing + base);
    for (b, q) in batch.iter().enumerate() {
        for &o in &q.objects {
            targets[b * n + o] = hit;
        }
    }
    logits.bce_with_logits(Rc::new(targets))
}

/// Deterministic (dropout-free) mean training loss over all queries.
fn full_loss<T: Scalar>(model: &TuckerModel<T>, qs: &[Query], cfg: &PretrainConfig, n: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in qs.chunks(cfg.batch_size.max(1)) {
        let tape = Tape::new();
        let refs: Vec<&Query> = chunk.iter().collect();
        let l = batch_loss(model, &tape, &refs, n, cfg.label_smoothing, None)?;
        total += l.item().as_f64() * chunk.len() as f64;
    }
    Ok(total / qs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<T: Scalar> {
    pub entities: EmbeddingTable<T>,
    pub relations: EmbeddingTable<T>,
    pub model: TuckerModel<T>,
    /// Accepted full-pass training loss after each epoch (index 0 is the
    /// initial loss).
    pub history: Vec<f64>,
}

/// 1-vs-all TuckER training with label smoothing.
///
/// An epoch whose full-pass loss regresses is rolled back and the learning
/// rate halved, so the recorded loss curve never increases.
pub fn pretrain<T: Scalar>(kg: &KnowledgeGraph, cfg: &PretrainConfig) -> Result<PretrainOutput<T>> {
    if kg.facts().is_empty() {
        return Err(Error::Contract("pre-training needs at least one fact".into()));
    }
    if cfg.d == 0 || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::Config("pre-training needs d >= 1, batch_size >= 1 and dropout in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = kg.num_entities();
    let mut model = TuckerModel::new(n, kg.num_relations(), cfg.d, &mut rng)?;
    let mut qs = queries(kg);
    let mut adam = Adam::new(cfg.lr);
    let mut lr = cfg.lr;
    let mut best = full_loss(&model, &qs, cfg, n)?;
    let mut history = vec![best];
    let mut stale = 0;
    let keep = 1.0 - cfg.dropout;
    for _ in 0..cfg.max_epochs {
        let before = (model.store.clone(), adam.clone());
        qs.shuffle(&mut rng);
        for chunk in qs.chunks(cfg.batch_size) {
            let refs: Vec<&Query> = chunk.iter().collect();
            let mask = (cfg.dropout > 0.0).then(|| {
                let inv = T::from_f64_lossy(1.0 / keep);
                Rc::new((0..chunk.len() * cfg.d).map(|_| if rng.gen_bool(keep) { inv } else { T::zero() }).collect())
            });
            let tape = Tape::new();
            let loss = batch_loss(&model, &tape, &refs, n, cfg.label_smoothing, mask)?;
            tape.backward(loss, &mut model.store)?;
            adam.lr = lr;
            adam.step(&mut model.store)?;
        }
        let loss = full_loss(&model, &qs, cfg, n)?;
        if loss > best {
            (model.store, adam) = before;
            lr /= 2.0;
            stale += 1;
        } else {
            stale = if best - loss < cfg.min_delta { stale + 1 } else { 0 };
            best = loss;
        }
        history.push(best);
        if stale >= cfg.patience {
            break;
        }
    }
    let names: Vec<String> = kg.entities().iter().map(|e| e.name.clone()).collect();
    let rnames: Vec<String> = kg.relations().iter().map(|r| r.name.clone()).collect();
    let et = model.store.get(model.entities).tensor.clone();
    let rt = model.store.get(model.relations).tensor.clone();
    Ok(PretrainOutput {
        entities: EmbeddingTable::new(et, names)?,
        relations: EmbeddingTable::new(rt, rnames)?,
        model,
        history,
    })
}

/// Rows for external 2-D projection: `sample` random POIs plus every
/// non-POI entity, each labelled with its ontology and Cate1.
///
/// Returns the TSV text and whether `sample` had to be clamped.
pub fn export_for_projection<T: Scalar>(
    table: &EmbeddingTable<T>,
    kg: &KnowledgeGraph,
    sample: usize,
    seed: u64,
) -> Result<(String, bool)> {
    let mut pois = kg.entities_of(Ontology::Poi);
    let clamped = sample > pois.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pois.shuffle(&mut rng);
    pois.truncate(sample);
    pois.sort_unstable();
    let mut rows: Vec<usize> = kg.entities().iter().filter(|e| e.ontology != Ontology::Poi).map(|e| e.id).collect();
    rows.extend(pois);
    rows.sort_unstable();
    let mut out = String::from("name\tontology\tcate1");
    for k in 0..table.dim() {
        write!(out, "\tx{k}").unwrap();
    }
    out.push('\n');
    for id in rows {
        let e = kg.entity(id);
        let row = table.get(&e.name).ok_or_else(|| Error::Lookup(format!("no embedding for {}", e.name)))?;
        let cate1 = e.category_ids.map(|c| kg.entity(c[0]).name.as_str()).unwrap_or("");
        write!(out, "{}\t{}\t{}", e.name, e.ontology, cate1).unwrap();
        for v in row {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    Ok((out, clamped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_product_scalar_model() {
        let m = TuckerModel::<f64>::from_parts(
            Tensor::matrix(2, 1, vec![3.0, 7.0]).unwrap(),
            Tensor::matrix(1, 1, vec![5.0]).unwrap(),
            Tensor::matrix(1, 1, vec![2.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(tucker_score(&m, 0, 0).unwrap().data(), &[90.0, 210.0]);
    }

    #[test]
    fn zero_core_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Tensor::normal(&[4, 3], 1.0, &mut rng);
        let r = Tensor::normal(&[2, 3], 1.0, &mut rng);
        let m = TuckerModel::<f64>::from_parts(e, r, Tensor::zeros(&[3, 9])).unwrap();
        let s = tucker_score(&m, 1, 1).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.0));
        assert!(s.data().iter().all(|&x| 1.0 / (1.0 + (-x).exp()) == 0.5));
    }
}
