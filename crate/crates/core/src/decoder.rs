//! Relation-path decoder: composes brand embeddings along relation paths,
//! attends over the paths and fuses the result with a bilinear
//! `OpenStoreAt` score.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::urbankg::schema::{find_relation, RelationDef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathComposition {
    Add,
    Mult,
    Gru,
}

impl FromStr for PathComposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "mult" => Ok(Self::Mult),
            "gru" => Ok(Self::Gru),
            _ => Err(Error::Config(format!("unknown path composition {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PathGroup {
    RegionBased,
    BrandBased,
    StoreBased,
}

impl PathGroup {
    pub const ALL: [PathGroup; 3] = [PathGroup::RegionBased, PathGroup::BrandBased, PathGroup::StoreBased];

    pub fn as_str(self) -> &'static str {
        match self {
            PathGroup::RegionBased => "region",
            PathGroup::BrandBased => "brand",
            PathGroup::StoreBased => "store",
        }
    }
}

impl fmt::Display for PathGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PathGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "region" | "region-based" => Ok(Self::RegionBased),
            "brand" | "brand-based" => Ok(Self::BrandBased),
            "store" | "store-based" => Ok(Self::StoreBased),
            _ => Err(Error::Config(format!("unknown path group {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationPath {
    pub criterion: String,
    pub group: PathGroup,
    pub relations: Vec<usize>,
}

const DEFAULT_PATHS: [(&str, PathGroup, &[&str]); 8] = [
    ("RegionDistance", PathGroup::RegionBased, &["OpenStoreAt", "NearBy"]),
    ("RegionFunction", PathGroup::RegionBased, &["OpenStoreAt", "SimilarFunction"]),
    ("RegionFlow", PathGroup::RegionBased, &["OpenStoreAt", "FlowTransition"]),
    ("BusinessArea", PathGroup::RegionBased, &["OpenStoreAt", "BaServe_inv", "BaServe"]),
    ("RelatedBrand", PathGroup::BrandBased, &["RelatedBrand", "OpenStoreAt"]),
    ("BrandCategory", PathGroup::BrandBased, &["BrandToCate_1", "BrandToCate_1_inv", "OpenStoreAt"]),
    ("Competitiveness", PathGroup::StoreBased, &["BrandOf", "Competitive", "LocateAt"]),
    ("StoreCategory", PathGroup::StoreBased, &["BrandToCate_1", "POIToCate_1_inv", "LocateAt"]),
];

fn resolve(rels: &[RelationDef], criterion: &str, names: &[&str]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            find_relation(rels, n)
                .map(|r| r.id)
                .ok_or_else(|| Error::Config(format!("path {criterion} needs relation {n}, absent from the graph")))
        })
        .collect()
}

pub fn default_path_table(rels: &[RelationDef]) -> Result<Vec<RelationPath>> {
    DEFAULT_PATHS
        .iter()
        .map(|(c, g, names)| {
            Ok(RelationPath { criterion: c.to_string(), group: *g, relations: resolve(rels, c, names)? })
        })
        .collect()
}

/// Reads a path table: one `criterion<TAB>group<TAB>rel,rel,...` per line.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_path_table(text: &str, rels: &[RelationDef]) -> Result<Vec<RelationPath>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                file: "path table".into(),
                line: i + 1,
                msg: format!("expected 3 tab-separated columns, got {}", cols.len()),
            });
        }
        let names: Vec<&str> = cols[2].split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if names.is_empty() {
            return Err(Error::Parse { file: "path table".into(), line: i + 1, msg: "empty path".into() });
        }
        out.push(RelationPath {
            criterion: cols[0].to_string(),
            group: cols[1].parse()?,
            relations: resolve(rels, cols[0], &names)?,
        });
    }
    Ok(out)
}

pub fn write_path_table(paths: &[RelationPath], rels: &[RelationDef]) -> String {
    let mut s = String::new();
    for p in paths {
        let names: Vec<&str> = p.relations.iter().map(|&r| rels[r].name.as_str()).collect();
        s.push_str(&format!("{}\t{}\t{}\n", p.criterion, p.group, names.join(",")));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub composition: PathComposition,
    /// Weight of the bilinear `OpenStoreAt` term.
    pub alpha: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { composition: PathComposition::Gru, alpha: 0.5 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub d: usize,
    pub paths: Vec<RelationPath>,
    pub osa: usize,
    /// `None` when `alpha == 1`: the path branch is never evaluated.
    pub attention: Option<AttentionParams>,
    pub gru: Option<GruParams>,
}

pub struct DecoderOutput<'t, T: Scalar> {
    /// `[brands x regions]`
    pub scores: Var<'t, T>,
    /// `[brands x paths]`
    pub attention: Option<Var<'t, T>>,
}

impl Decoder {
    pub fn new<T: Scalar>(
        cfg: DecoderConfig,
        d: usize,
        paths: Vec<RelationPath>,
        rels: &[RelationDef],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.alpha) || cfg.alpha.is_nan() {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", cfg.alpha)));
        }
        let osa = find_relation(rels, "OpenStoreAt")
            .ok_or_else(|| Error::Config("decoder needs relation OpenStoreAt".into()))?
            .id;
        for p in &paths {
            if let Some(&r) = p.relations.iter().find(|&&r| r >= rels.len()) {
                return Err(Error::Config(format!("path {} uses unknown relation id {r}", p.criterion)));
            }
        }
        let uses_paths = cfg.alpha < 1.0;
        if uses_paths && paths.is_empty() {
            return Err(Error::Config("alpha < 1 needs at least one relation path".into()));
        }
        let bound = (6.0 / (2 * d) as f64).sqrt();
        let mut mat = |store: &mut ParamStore<T>, name: &str| {
            store.register(name, Tensor::uniform(&[d, d], -bound, bound, rng))
        };
        let (attention, gru) = if uses_paths {
            let att = AttentionParams { wq: mat(store, "dec.wq")?, wk: mat(store, "dec.wk")?, wv: mat(store, "dec.wv")? };
            let gru = if cfg.composition == PathComposition::Gru {
                let g = 1.0 / (d as f64).sqrt();
                let mut gate = |store: &mut ParamStore<T>, name: &str| {
                    store.register(name, Tensor::uniform(&[d, d], -g, g, rng))
                };
                let wz = gate(store, "dec.gru.wz")?;
                let uz = gate(store, "dec.gru.uz")?;
                let wr = gate(store, "dec.gru.wr")?;
                let ur = gate(store, "dec.gru.ur")?;
                let wh = gate(store, "dec.gru.wh")?;
                let uh = gate(store, "dec.gru.uh")?;
                let bz = store.register("dec.gru.bz", Tensor::zeros(&[1, d]))?;
                let br = store.register("dec.gru.br", Tensor::zeros(&[1, d]))?;
                let bh = store.register("dec.gru.bh", Tensor::zeros(&[1, d]))?;
                Some(GruParams { wz, uz, bz, wr, ur, br, wh, uh, bh })
            } else {
                None
            };
            (Some(att), gru)
        } else {
            (None, None)
        };
        Ok(Self { cfg, d, paths, osa, attention, gru })
    }

    /// Path representation for every row of `hb`, stepping through the
    /// rows of `rk` named by `path`.
    pub fn path_repr<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        hb: Var<'t, T>,
        rk: Var<'t, T>,
        path: &[usize],
    ) -> Result<Var<'t, T>> {
        let steps = rk.gather_rows(Rc::new(path.to_vec()))?;
        match self.cfg.composition {
            PathComposition::Add => hb.add_row(steps.sum_cols()),
            PathComposition::Mult => {
                let mut h = hb;
                for i in 0..path.len() {
                    h = h.mul_row(rk.gather_rows(Rc::new(vec![path[i]]))?)?;
                }
                Ok(h)
            }
            PathComposition::Gru => {
                let g = self.gru.ok_or_else(|| Error::Contract("GRU parameters missing".into()))?;
                let p = |id| tape.param(store, id);
                let mut h = hb;
                for &r in path {
                    let x = rk.gather_rows(Rc::new(vec![r]))?;
                    let z = h.matmul(p(g.uz))?.add_row(x.matmul(p(g.wz))?.add(p(g.bz))?)?.sigmoid();
                    let rg = h.matmul(p(g.ur))?.add_row(x.matmul(p(g.wr))?.add(p(g.br))?)?.sigmoid();
                    let cand = rg.mul(h)?.matmul(p(g.uh))?.add_row(x.matmul(p(g.wh))?.add(p(g.bh))?)?.tanh();
                    // (1 - z) h + z cand
                    h = h.add(z.mul(cand.sub(h)?)?)?;
                }
                Ok(h)
            }
        }
    }

    /// Scores `brands` (rows of `hk`) against `regions` (rows of `hk`).
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        hk: Var<'t, T>,
        rk: Var<'t, T>,
        brands: &[usize],
        regions: Rc<Vec<usize>>,
    ) -> Result<DecoderOutput<'t, T>> {
        let hb = hk.gather_rows(Rc::new(brands.to_vec()))?;
        let ha = hk.gather_rows(regions)?;
        let r_osa = rk.gather_rows(Rc::new(vec![self.osa]))?;
        let bilinear = hb.mul_row(r_osa)?.matmul_t(ha)?;
        let Some(att) = self.attention else {
            return Ok(DecoderOutput { scores: bilinear, attention: None });
        };
        let (z, a) = self.attend(tape, store, att, hb, rk)?;
        let path_scores = z.matmul_t(ha)?;
        let alpha = T::from_f64_lossy(self.cfg.alpha);
        let scores = path_scores.scale(T::one() - alpha).add(bilinear.scale(alpha))?;
        Ok(DecoderOutput { scores, attention: Some(a) })
    }

    fn attend<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        att: AttentionParams,
        hb: Var<'t, T>,
        rk: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let q = hb.matmul_t(tape.param(store, att.wq))?;
        let wk = tape.param(store, att.wk);
        let wv = tape.param(store, att.wv);
        let inv_sqrt_d = T::one() / T::from_usize(self.d).unwrap().sqrt();
        let mut logits = Vec::with_capacity(self.paths.len());
        let mut values = Vec::with_capacity(self.paths.len());
        for p in &self.paths {
            let repr = self.path_repr(tape, store, hb, rk, &p.relations)?;
            logits.push(q.mul(repr.matmul_t(wk)?)?.sum_rows().scale(inv_sqrt_d));
            values.push(repr.matmul_t(wv)?);
        }
        let a = tape.concat_cols(&logits)?.softmax_rows()?;
        let mut z: Option<Var<'t, T>> = None;
        for (i, v) in values.into_iter().enumerate() {
            let term = v.mul_col(a.slice_cols(i, i + 1)?)?;
            z = Some(match z {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        Ok((z.expect("non-empty path table"), a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::urbankg::schema::{vocabulary, SchemaOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rels() -> Vec<RelationDef> {
        vocabulary(SchemaOptions::default())
    }

    #[test]
    fn default_table_shape() {
        let t = default_path_table(&rels()).unwrap();
        let hops: Vec<usize> = t.iter().map(|p| p.relations.len()).collect();
        assert_eq!(hops, vec![2, 2, 2, 3, 2, 3, 3, 3]);
        let count = |g| t.iter().filter(|p| p.group == g).count();
        assert_eq!((count(PathGroup::RegionBased), count(PathGroup::BrandBased), count(PathGroup::StoreBased)), (4, 2, 2));
    }

    #[test]
    fn missing_relation_is_named() {
        let rels: Vec<RelationDef> = rels().into_iter().filter(|r| r.name != "FlowTransition").collect();
        let rels: Vec<RelationDef> = rels.into_iter().enumerate().map(|(i, mut r)| { r.id = i; r }).collect();
        let e = default_path_table(&rels).unwrap_err();
        assert!(e.to_string().contains("FlowTransition"), "{e}");
    }

    #[test]
    fn path_table_round_trip() {
        let rels = rels();
        let t = default_path_table(&rels).unwrap();
        assert_eq!(parse_path_table(&write_path_table(&t, &rels), &rels).unwrap(), t);
    }

    #[test]
    fn alpha_outside_unit_interval_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rels = rels();
        for alpha in [-0.1, 1.5, f64::NAN] {
            let cfg = DecoderConfig { alpha, ..Default::default() };
            let e = Decoder::new(cfg, 4, default_path_table(&rels).unwrap(), &rels, &mut store, &mut rng);
            assert!(matches!(e, Err(Error::Config(_))));
        }
    }

    #[test]
    fn add_and_mult_paths_by_hand() {
        let rels = rels();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let hb = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let rk = tape.constant(Tensor::from_rows(&[vec![0.5, 1.0], vec![2.0, -1.0], vec![3.0, 3.0]]).unwrap());
        for (comp, want) in [(PathComposition::Add, [3.5, 2.0]), (PathComposition::Mult, [1.0, -2.0])] {
            let cfg = DecoderConfig { composition: comp, alpha: 1.0 };
            let dec = Decoder::new(cfg, 2, vec![], &rels, &mut store, &mut rng).unwrap();
            let out = dec.path_repr(&tape, &store, hb, rk, &[0, 1]).unwrap();
            assert_eq!(out.value().data(), &want);
        }
    }

    #[test]
    fn zero_gru_halves_each_hop() {
        let rels = rels();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DecoderConfig { composition: PathComposition::Gru, alpha: 0.5 };
        let dec = Decoder::new(cfg, 2, default_path_table(&rels).unwrap(), &rels, &mut store, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).tensor.shape().to_vec();
            store.get_mut(id).tensor = Tensor::zeros(&shape).with_grad();
        }
        let tape = Tape::new();
        let hb = tape.constant(Tensor::matrix(1, 2, vec![4.0, -8.0]).unwrap());
        let rk = tape.constant(Tensor::filled(&[rels.len(), 2], 0.7));
        let out = dec.path_repr(&tape, &store, hb, rk, &[0, 1, 2]).unwrap();
        assert_eq!(out.value().data(), &[0.5, -1.0]);
    }
}
