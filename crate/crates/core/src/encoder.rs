//! Multi-relational message passing over the knowledge graph.
//!
//! Layer `k` computes, for every entity `v`,
//! `h_v' = f(BN(sum_r mean_{u in N_v^r} W_r phi(h_u, h_r) [+ W_self h_v]))`
//! and projects relation rows with `h_r' = W_rel h_r`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::urbankg::KnowledgeGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Composition {
    #[serde(rename = "sub")]
    Subtract,
    #[serde(rename = "mult")]
    Multiply,
    #[serde(rename = "rotate")]
    Rotate,
}

impl std::str::FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sub" | "subtract" => Ok(Composition::Subtract),
            "mult" | "multiply" => Ok(Composition::Multiply),
            "rotate" => Ok(Composition::Rotate),
            _ => Err(Error::Config(format!("unknown encoder op {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `K`; zero skips the encoder and hands the layer-0 tables through.
    pub layers: usize,
    pub op: Composition,
    pub dropout: f64,
    pub self_loop: bool,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            op: Composition::Rotate,
            dropout: 0.3,
            self_loop: true,
            batch_norm: true,
            activation: Activation::Tanh,
        }
    }
}

/// `phi(h_u, h_r)` on row-stacked inputs.
pub fn compose<'t, T: Scalar>(hu: Var<'t, T>, hr: Var<'t, T>, op: Composition) -> Result<Var<'t, T>> {
    match op {
        Composition::Subtract => hu.sub(hr),
        Composition::Multiply => hu.mul(hr),
        Composition::Rotate => hu.rotate(hr),
    }
}

/// Fact layout reused by every forward pass: facts sorted by
/// `(relation, object, subject)`, grouped into `(r, v)` message groups.
#[derive(Debug, Clone)]
pub struct MessagePlan<T> {
    pub n_nodes: usize,
    pub n_relations: usize,
    src: Rc<Vec<usize>>,
    rel: Rc<Vec<usize>>,
    group: Rc<Vec<usize>>,
    /// `1 / |N_v^r|` for each fact.
    weight: Rc<Vec<T>>,
    group_node: Rc<Vec<usize>>,
    n_groups: usize,
    /// Group ranges per relation, parallel to `seg_rel`.
    segs: Rc<Vec<(usize, usize)>>,
    pub seg_rel: Vec<usize>,
}

impl<T: Scalar> MessagePlan<T> {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut facts: Vec<(usize, usize, usize)> = kg.facts().iter().map(|f| (f.r, f.o, f.s)).collect();
        facts.sort_unstable();
        let mut src = Vec::with_capacity(facts.len());
        let mut rel = Vec::with_capacity(facts.len());
        let mut group = Vec::with_capacity(facts.len());
        let mut group_node = Vec::new();
        let mut group_size: Vec<usize> = Vec::new();
        let mut seg_map: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        let mut last: Option<(usize, usize)> = None;
        for &(r, v, u) in &facts {
            if last != Some((r, v)) {
                group_node.push(v);
                group_size.push(0);
                let g = group_node.len() - 1;
                seg_map.entry(r).and_modify(|s| s.1 = g + 1).or_insert((g, g + 1));
                last = Some((r, v));
            }
            let g = group_node.len() - 1;
            group_size[g] += 1;
            src.push(u);
            rel.push(r);
            group.push(g);
        }
        let weight = group.iter().map(|&g| T::one() / T::from_usize(group_size[g]).unwrap()).collect();
        let (seg_rel, segs): (Vec<usize>, Vec<(usize, usize)>) = seg_map.into_iter().unzip();
        Self {
            n_nodes: kg.num_entities(),
            n_relations: kg.num_relations(),
            src: Rc::new(src),
            rel: Rc::new(rel),
            group: Rc::new(group),
            weight: Rc::new(weight),
            n_groups: group_node.len(),
            group_node: Rc::new(group_node),
            segs: Rc::new(segs),
            seg_rel,
        }
    }

    pub fn num_facts(&self) -> usize {
        self.src.len()
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    /// One matrix per relation in `MessagePlan::seg_rel`.
    pub w_rel: Vec<ParamId>,
    pub w_self: Option<ParamId>,
    pub w_relproj: ParamId,
    pub bn: Option<(ParamId, ParamId)>,
}

/// Running batch-norm statistics (mean, variance) of one layer.
pub type BnStats<T> = (Vec<T>, Vec<T>);

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub cfg: EncoderConfig,
    pub d: usize,
    pub plan: MessagePlan<T>,
    pub layers: Vec<LayerParams>,
    pub running: Vec<BnStats<T>>,
}

/// Dropout and batch statistics are used only with a training context.
pub struct TrainCtx<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(
        kg: &KnowledgeGraph,
        cfg: EncoderConfig,
        d: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.layers > 3 {
            return Err(Error::Config(format!("encoder supports 0..=3 layers, got {}", cfg.layers)));
        }
        if cfg.op == Composition::Rotate && d % 2 != 0 {
            return Err(Error::Dimension(format!("rotate composition needs an even d, got {d}")));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", cfg.dropout)));
        }
        let plan = MessagePlan::new(kg);
        let bound = (6.0 / (2 * d) as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            let mut w_rel = Vec::with_capacity(plan.seg_rel.len());
            for &r in &plan.seg_rel {
                let name = format!("enc.{k}.w_rel.{}", kg.relation(r).name);
                w_rel.push(store.register(&name, Tensor::uniform(&[d, d], -bound, bound, rng))?);
            }
            let w_self = if cfg.self_loop {
                Some(store.register(&format!("enc.{k}.w_self"), Tensor::uniform(&[d, d], -bound, bound, rng))?)
            } else {
                None
            };
            let w_relproj =
                store.register(&format!("enc.{k}.w_relproj"), Tensor::uniform(&[d, d], -bound, bound, rng))?;
            let bn = if cfg.batch_norm {
                let g = store.register(&format!("enc.{k}.bn_gamma"), Tensor::filled(&[1, d], T::one()))?;
                let b = store.register(&format!("enc.{k}.bn_beta"), Tensor::zeros(&[1, d]))?;
                Some((g, b))
            } else {
                None
            };
            layers.push(LayerParams { w_rel, w_self, w_relproj, bn });
        }
        let running = (0..cfg.layers).map(|_| (vec![T::zero(); d], vec![T::one(); d])).collect();
        Ok(Self { cfg, d, plan, layers, running })
    }

    /// Runs all `K` layers. In training mode also returns the batch
    /// statistics each batch-norm layer saw.
    pub fn encode<'t, R: Rng>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        h0: Var<'t, T>,
        r0: Var<'t, T>,
        mut train: Option<&mut TrainCtx<'_, R>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Vec<BnStats<T>>)> {
        if h0.shape() != [self.plan.n_nodes, self.d] || r0.shape() != [self.plan.n_relations, self.d] {
            return Err(Error::Config(format!(
                "layer-0 tables {:?} / {:?} do not match graph and d = {}",
                h0.shape(),
                r0.shape(),
                self.d
            )));
        }
        let (mut h, mut r) = (h0, r0);
        let mut stats = Vec::new();
        for k in 0..self.layers.len() {
            let (h2, st) = self.layer_forward(tape, store, k, h, r, train.as_deref_mut())?;
            if let Some(s) = st {
                stats.push(s);
            }
            r = self.relation_forward(tape, store, k, r)?;
            h = h2;
        }
        Ok((h, r, stats))
    }

    /// `h_r^{k+1} = W_rel h_r^k` for every relation row.
    pub fn relation_forward<'t>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        k: usize,
        r: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        r.matmul_t(tape.param(store, self.layers[k].w_relproj))
    }

    pub fn layer_forward<'t, R: Rng>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        k: usize,
        h: Var<'t, T>,
        r: Var<'t, T>,
        mut train: Option<&mut TrainCtx<'_, R>>,
    ) -> Result<(Var<'t, T>, Option<BnStats<T>>)> {
        let lp = &self.layers[k];
        let p = &self.plan;
        let n = p.n_nodes;
        let mut total = if p.num_facts() == 0 {
            tape.constant(Tensor::zeros(&[n, self.d]))
        } else {
            let hu = h.gather_rows(p.src.clone())?;
            let hr = r.gather_rows(p.rel.clone())?;
            let msg = compose(hu, hr, self.cfg.op)?;
            let agg = msg.index_add(p.group.clone(), Some(p.weight.clone()), p.n_groups)?;
            let ws: Vec<Var<'t, T>> = lp.w_rel.iter().map(|&w| tape.param(store, w)).collect();
            let mut proj = tape.grouped_matmul(agg, &ws, p.segs.clone())?;
            if self.cfg.dropout > 0.0 {
                if let Some(ctx) = train.as_deref_mut() {
                    proj = proj.mul_const(dropout_mask(p.n_groups * self.d, self.cfg.dropout, ctx.rng))?;
                }
            }
            proj.index_add(p.group_node.clone(), None, n)?
        };
        if let Some(ws) = lp.w_self {
            total = total.add(h.matmul_t(tape.param(store, ws))?)?;
        }
        let mut batch_stats = None;
        if let Some((g, b)) = lp.bn {
            let (normed, st) = self.batch_norm(tape, total, k, train.is_some())?;
            batch_stats = st;
            total = normed.mul_row(tape.param(store, g))?.add_row(tape.param(store, b))?;
        }
        let out = match self.cfg.activation {
            Activation::Tanh => total.tanh(),
            Activation::Identity => total,
        };
        Ok((out, batch_stats))
    }

    fn batch_norm<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        k: usize,
        training: bool,
    ) -> Result<(Var<'t, T>, Option<BnStats<T>>)> {
        let n = T::from_usize(self.plan.n_nodes.max(1)).unwrap();
        let eps = T::from_f64_lossy(BN_EPS);
        if training {
            let mean = x.sum_cols().scale(T::one() / n);
            let centered = x.add_row(mean.scale(-T::one()))?;
            let var = centered.mul(centered)?.sum_cols().scale(T::one() / n);
            let inv = var.add_scalar(eps).powf(T::from_f64_lossy(-0.5));
            let stats = (mean.value().data().to_vec(), var.value().data().to_vec());
            Ok((centered.mul_row(inv)?, Some(stats)))
        } else {
            let (m, v) = &self.running[k];
            let neg_mean = tape.constant(Tensor::matrix(1, self.d, m.iter().map(|x| -*x).collect())?);
            let inv = v.iter().map(|x| T::one() / (*x + eps).sqrt()).collect();
            let inv = tape.constant(Tensor::matrix(1, self.d, inv)?);
            Ok((x.add_row(neg_mean)?.mul_row(inv)?, None))
        }
    }

    /// Folds batch statistics from a training pass into the running ones.
    pub fn update_running(&mut self, stats: &[BnStats<T>]) {
        let mo = T::from_f64_lossy(BN_MOMENTUM);
        for (run, (m, v)) in self.running.iter_mut().zip(stats) {
            for i in 0..m.len() {
                run.0[i] = (T::one() - mo) * run.0[i] + mo * m[i];
                run.1[i] = (T::one() - mo) * run.1[i] + mo * v[i];
            }
        }
    }
}

/// Inverted dropout mask with keep probability `1 - p`.
pub fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut impl Rng) -> Rc<Vec<T>> {
    let keep = 1.0 - p;
    let inv = T::from_f64_lossy(1.0 / keep);
    Rc::new((0..len).map(|_| if rng.gen_bool(keep) { inv } else { T::zero() }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::urbankg::schema::{base_vocabulary, find_relation, SchemaOptions};
    use crate::urbankg::{Entity, Fact, Ontology};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eq2_cfg(op: Composition) -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            op,
            dropout: 0.0,
            self_loop: false,
            batch_norm: false,
            activation: Activation::Identity,
        }
    }

    fn two_node_kg() -> KnowledgeGraph {
        let ents = vec![Entity::new(Ontology::Region, "region:0"), Entity::new(Ontology::Region, "region:1")];
        let rels = base_vocabulary(SchemaOptions::default());
        let ft = find_relation(&rels, "FT").unwrap().id;
        KnowledgeGraph::new(ents, rels, vec![Fact::new(0, ft, 1)]).unwrap()
    }

    #[test]
    fn subtract_and_rotate_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        assert_eq!(compose(a, b, Composition::Subtract).unwrap().value().data(), &[0.5, 1.5]);
        let u = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let r = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let out = compose(u, r, Composition::Rotate).unwrap().to_tensor();
        assert!((out.data()[0]).abs() < 1e-15 && (out.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_edge_identity_layer_is_difference() {
        let kg = two_node_kg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::<f64>::new(&kg, eq2_cfg(Composition::Subtract), 2, &mut store, &mut rng).unwrap();
        for id in enc.layers[0].w_rel.clone() {
            store.get_mut(id).tensor = Tensor::identity(2).with_grad();
        }
        let ft = kg.relation_id("FT").unwrap();
        let tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![9.0, 9.0]]).unwrap());
        let mut rows = vec![vec![0.0, 0.0]; kg.num_relations()];
        rows[ft] = vec![0.5, 0.5];
        let r = tape.constant(Tensor::from_rows(&rows).unwrap());
        let (out, _) = enc.layer_forward::<ChaCha8Rng>(&tape, &store, 0, h, r, None).unwrap();
        let out = out.to_tensor();
        assert_eq!(out.row(1), &[0.5, 1.5]);
        // node 0 has no incoming facts
        assert_eq!(out.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn odd_dimension_rotate_rejected() {
        let kg = two_node_kg();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Encoder::new(&kg, eq2_cfg(Composition::Rotate), 3, &mut store, &mut rng);
        assert!(matches!(e, Err(Error::Dimension(_))));
    }
}
