//! Toy graphs and scalar loop oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use knowsite::decoder::{parse_path_table, Decoder, PathComposition, RelationPath};
use knowsite::encoder::{Activation, Composition, Encoder};
use knowsite::numcore::{ParamId, ParamStore, Tensor};
use knowsite::urbankg::{BaseRelation, Entity, Fact, KnowledgeGraph, Ontology, RelationDef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

fn def(id: usize, b: BaseRelation) -> RelationDef {
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
}

/// BorderBy, NearBy, RelatedBrand, OpenStoreAt and its inverse.
pub fn toy_vocab() -> Vec<RelationDef> {
    let mut v = vec![
        def(0, BaseRelation::BorderBy),
        def(1, BaseRelation::NearBy),
        def(2, BaseRelation::RelatedBrand),
        def(3, BaseRelation::OpenStoreAt),
    ];
    let mut inv = def(4, BaseRelation::OpenStoreAt);
    inv.name = "OpenStoreAt_inv".into();
    inv.abbrev = "OSA'".into();
    (inv.subject, inv.object) = (Ontology::Region, Ontology::Brand);
    inv.inverse_id = Some(3);
    inv.is_inverse = true;
    v[3].inverse_id = Some(4);
    v.push(inv);
    v
}

/// Brands first, then regions; random symmetric region links, one related
/// brand pair and two or three stores per brand with inverses.
pub fn toy_kg(n_brands: usize, n_regions: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ents: Vec<Entity> = (0..n_brands).map(|i| Entity::new(Ontology::Brand, format!("brand:b{i}"))).collect();
    ents.extend((0..n_regions).map(|i| Entity::new(Ontology::Region, format!("region:{i}"))));
    let region = |i: usize| n_brands + i;
    let mut facts = BTreeSet::new();
    for i in 0..n_regions {
        let j = (i + 1) % n_regions;
        facts.insert(Fact::new(region(i), 0, region(j)));
        facts.insert(Fact::new(region(j), 0, region(i)));
        let k = rng.gen_range(0..n_regions);
        if k != i {
            facts.insert(Fact::new(region(i), 1, region(k)));
            facts.insert(Fact::new(region(k), 1, region(i)));
        }
    }
    if n_brands >= 2 {
        facts.insert(Fact::new(0, 2, 1));
        facts.insert(Fact::new(1, 2, 0));
    }
    for b in 0..n_brands {
        for _ in 0..rng.gen_range(2..=3) {
            let a = region(rng.gen_range(0..n_regions));
            facts.insert(Fact::new(b, 3, a));
            facts.insert(Fact::new(a, 4, b));
        }
    }
    KnowledgeGraph::new(ents, toy_vocab(), facts.into_iter().collect()).unwrap()
}

pub fn toy_paths(rels: &[RelationDef]) -> Vec<RelationPath> {
    let text = "RegionDistance\tregion\tOpenStoreAt,NearBy\n\
                RegionBorder\tregion\tOpenStoreAt,BorderBy\n\
                RelatedBrand\tbrand\tRelatedBrand,OpenStoreAt\n";
    parse_path_table(text, rels).unwrap()
}

pub fn to_m(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn param(store: &ParamStore<f64>, id: ParamId) -> M {
    to_m(&store.get(id).tensor)
}

/// `W x` for a row-major `W`.
pub fn mat_vec(w: &M, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `x W` (row vector times matrix).
pub fn vec_mat(x: &[f64], w: &M) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (xi, row) in x.iter().zip(w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += xi * v;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_diff(a: &M, b: &M) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn compose_oracle(hu: &[f64], hr: &[f64], op: Composition) -> Vec<f64> {
    match op {
        Composition::Subtract => hu.iter().zip(hr).map(|(a, b)| a - b).collect(),
        Composition::Multiply => hu.iter().zip(hr).map(|(a, b)| a * b).collect(),
        Composition::Rotate => {
            let mut out = vec![0.0; hu.len()];
            for p in (0..hu.len()).step_by(2) {
                let n = (hr[p] * hr[p] + hr[p + 1] * hr[p + 1]).sqrt().max(1e-12);
                let (c, s) = (hr[p] / n, hr[p + 1] / n);
                out[p] = hu[p] * c - hu[p + 1] * s;
                out[p + 1] = hu[p] * s + hu[p + 1] * c;
            }
            out
        }
    }
}

/// One encoder layer computed node by node and relation by relation.
/// `training` selects batch statistics over all nodes for batch norm.
pub fn layer_oracle(kg: &KnowledgeGraph, enc: &Encoder<f64>, store: &ParamStore<f64>, k: usize, h: &M, r: &M, training: bool) -> M {
    let lp = &enc.layers[k];
    let d = enc.d;
    let n = kg.num_entities();
    let mut pre = vec![vec![0.0; d]; n];
    for (v, out) in pre.iter_mut().enumerate() {
        for rel in 0..kg.num_relations() {
            let neigh = kg.neighbors(v, rel).unwrap();
            if neigh.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for &u in neigh {
                for (m, x) in mean.iter_mut().zip(compose_oracle(&h[u], &r[rel], enc.cfg.op)) {
                    *m += x / neigh.len() as f64;
                }
            }
            let slot = enc.plan.seg_rel.iter().position(|&x| x == rel).unwrap();
            let w = param(store, lp.w_rel[slot]);
            for (o, x) in out.iter_mut().zip(mat_vec(&w, &mean)) {
                *o += x;
            }
        }
        if let Some(ws) = lp.w_self {
            for (o, x) in out.iter_mut().zip(mat_vec(&param(store, ws), &h[v])) {
                *o += x;
            }
        }
    }
    if let Some((g, b)) = lp.bn {
        let (gamma, beta) = (param(store, g)[0].clone(), param(store, b)[0].clone());
        for j in 0..d {
            let (mean, var) = if training {
                let mean = pre.iter().map(|row| row[j]).sum::<f64>() / n as f64;
                (mean, pre.iter().map(|row| (row[j] - mean).powi(2)).sum::<f64>() / n as f64)
            } else {
                (enc.running[k].0[j], enc.running[k].1[j])
            };
            for row in pre.iter_mut() {
                row[j] = (row[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j];
            }
        }
    }
    match enc.cfg.activation {
        Activation::Tanh => pre.iter().map(|row| row.iter().map(|x| x.tanh()).collect()).collect(),
        Activation::Identity => pre,
    }
}

pub fn relation_oracle(enc: &Encoder<f64>, store: &ParamStore<f64>, k: usize, r: &M) -> M {
    let w = param(store, enc.layers[k].w_relproj);
    r.iter().map(|row| mat_vec(&w, row)).collect()
}

/// Raw TuckER score of every object by the explicit triple sum.
pub fn tucker_oracle(e: &M, rel: &M, core: &M, s: usize, r: usize) -> Vec<f64> {
    let d = e[0].len();
    e.iter()
        .map(|eo| {
            let mut total = 0.0;
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        total += core[j][i * d + k] * e[s][i] * rel[r][j] * eo[k];
                    }
                }
            }
            total
        })
        .collect()
}

pub fn path_oracle(dec: &Decoder, store: &ParamStore<f64>, hb: &[f64], rk: &M, path: &[usize]) -> Vec<f64> {
    match dec.cfg.composition {
        PathComposition::Add => {
            let mut h = hb.to_vec();
            for &r in path {
                h.iter_mut().zip(&rk[r]).for_each(|(a, b)| *a += b);
            }
            h
        }
        PathComposition::Mult => {
            let mut h = hb.to_vec();
            for &r in path {
                h.iter_mut().zip(&rk[r]).for_each(|(a, b)| *a *= b);
            }
            h
        }
        PathComposition::Gru => {
            let g = dec.gru.unwrap();
            let p = |id| param(store, id);
            let (wz, uz, bz) = (p(g.wz), p(g.uz), p(g.bz));
            let (wr, ur, br) = (p(g.wr), p(g.ur), p(g.br));
            let (wh, uh, bh) = (p(g.wh), p(g.uh), p(g.bh));
            let mut h = hb.to_vec();
            for &r in path {
                let x = &rk[r];
                let (hz, xz) = (vec_mat(&h, &uz), vec_mat(x, &wz));
                let (hr, xr) = (vec_mat(&h, &ur), vec_mat(x, &wr));
                let z: Vec<f64> = (0..h.len()).map(|j| sigmoid(hz[j] + xz[j] + bz[0][j])).collect();
                let rg: Vec<f64> = (0..h.len()).map(|j| sigmoid(hr[j] + xr[j] + br[0][j])).collect();
                let gated: Vec<f64> = rg.iter().zip(&h).map(|(a, b)| a * b).collect();
                let (hc, xc) = (vec_mat(&gated, &uh), vec_mat(x, &wh));
                let cand: Vec<f64> = (0..h.len()).map(|j| (hc[j] + xc[j] + bh[0][j]).tanh()).collect();
                h = (0..h.len()).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect();
            }
            h
        }
    }
}

/// Attention weights and the site decision vector of one brand.
pub fn attention_oracle(dec: &Decoder, store: &ParamStore<f64>, hb: &[f64], rk: &M) -> (Vec<f64>, Vec<f64>) {
    let att = dec.attention.unwrap();
    let (wq, wk, wv) = (param(store, att.wq), param(store, att.wk), param(store, att.wv));
    let q = mat_vec(&wq, hb);
    let reprs: Vec<Vec<f64>> = dec.paths.iter().map(|p| path_oracle(dec, store, hb, rk, &p.relations)).collect();
    let logits: Vec<f64> = reprs.iter().map(|p| dot(&q, &mat_vec(&wk, p)) / (dec.d as f64).sqrt()).collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let sum: f64 = ex.iter().sum();
    let a: Vec<f64> = ex.iter().map(|e| e / sum).collect();
    let mut z = vec![0.0; dec.d];
    for (ap, p) in a.iter().zip(&reprs) {
        for (zi, v) in z.iter_mut().zip(mat_vec(&wv, p)) {
            *zi += ap * v;
        }
    }
    (a, z)
}

/// `(1 - alpha) z_b . h_a + alpha (h_b * r_OSA) . h_a` for every region.
pub fn score_oracle(dec: &Decoder, store: &ParamStore<f64>, hk: &M, rk: &M, brand: usize, regions: &[usize]) -> Vec<f64> {
    let hb = &hk[brand];
    let bil: Vec<f64> = hb.iter().zip(&rk[dec.osa]).map(|(a, b)| a * b).collect();
    let alpha = dec.cfg.alpha;
    let z = dec.attention.map(|_| attention_oracle(dec, store, hb, rk).1);
    regions
        .iter()
        .map(|&a| {
            let b = dot(&bil, &hk[a]);
            match &z {
                Some(z) => (1.0 - alpha) * dot(z, &hk[a]) + alpha * b,
                None => b,
            }
        })
        .collect()
}

/// A small synthetic city run through graph construction, splitting and
/// leakage removal.
pub fn small_city(seed: u64, patterns: &[knowsite::synthcity::PlantedPattern]) -> knowsite::pipeline::Prepared {
    use knowsite::synthcity::{generate_city, CityConfig};
    let city = CityConfig { grid: Some((6, 6)), n_brands: 10, n_pois: 150, max_stores: 14, min_stores: 4, seed, ..Default::default() };
    let src = generate_city(&city, patterns).unwrap().sources;
    let split = knowsite::dataset::SplitConfig { brand_stores_over: 2, seed, ..Default::default() };
    knowsite::pipeline::prepare(&src, &Default::default(), &split).unwrap()
}
