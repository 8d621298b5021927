//! Attention reports per brand and per category, brand cosine distances
//! and path-group influence tables.

use std::collections::BTreeMap;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KnowSite;
use crate::numcore::{Scalar, Tensor};
use crate::trainer::{AttentionMatrix, ExperimentReport, Variant};
use crate::urbankg::{KnowledgeGraph, Ontology};

/// Attention rows for the named brands, in path-table column order.
pub fn brand_attention<T: Scalar>(model: &KnowSite<T>, kg: &KnowledgeGraph, brands: &[String]) -> Result<AttentionMatrix> {
    let ids = brands
        .iter()
        .map(|b| {
            let id = kg.entity_id(b).ok_or_else(|| Error::Lookup(format!("unknown brand {b}")))?;
            if kg.entity(id).ontology != Ontology::Brand {
                return Err(Error::Lookup(format!("{b} is not a brand")));
            }
            Ok(id)
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionMatrix::of(model, kg, &ids)?.ok_or_else(|| Error::Config("model has no path decoder (alpha = 1)".into()))
}

/// Element-wise mean of several attention matrices over the same rows and
/// columns.
pub fn mean_attention(runs: &[AttentionMatrix]) -> Result<AttentionMatrix> {
    let first = runs.first().ok_or_else(|| Error::Contract("no attention matrices to average".into()))?;
    let mut rows = vec![vec![0.0; first.paths.len()]; first.brands.len()];
    for m in runs {
        if m.brands != first.brands || m.paths != first.paths {
            return Err(Error::Contract("attention matrices cover different brands or paths".into()));
        }
        for (acc, row) in rows.iter_mut().zip(&m.rows) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / runs.len() as f64;
            }
        }
    }
    Ok(AttentionMatrix { brands: first.brands.clone(), paths: first.paths.clone(), rows })
}

/// Cate1 of each brand from its `BrandToCate_1` fact.
pub fn brand_cate1(kg: &KnowledgeGraph) -> Result<BTreeMap<usize, usize>> {
    let r = kg.relation_id("BrandToCate_1").ok_or_else(|| Error::Lookup("graph lacks BrandToCate_1".into()))?;
    Ok(kg.facts().iter().filter(|f| f.r == r).map(|f| (f.s, f.o)).collect())
}

/// Mean brand row per Cate1. Brands without a category are skipped and
/// counted in the second return value.
pub fn category_attention(att: &AttentionMatrix, kg: &KnowledgeGraph) -> Result<(AttentionMatrix, usize)> {
    let cate = brand_cate1(kg)?;
    let mut groups: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    let mut skipped = 0;
    for (name, row) in att.brands.iter().zip(&att.rows) {
        match kg.entity_id(name).and_then(|b| cate.get(&b)) {
            Some(&c) => groups.entry(kg.entity(c).name.clone()).or_default().push(row),
            None => skipped += 1,
        }
    }
    let mut out = AttentionMatrix { brands: Vec::new(), paths: att.paths.clone(), rows: Vec::new() };
    for (c, rows) in groups {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; att.paths.len()];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        out.brands.push(c);
        out.rows.push(mean);
    }
    Ok((out, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableSource {
    Pretrained,
    Encoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub source: TableSource,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Pairs involving a zero vector, set to distance 1.
    pub zero_pairs: usize,
}

/// `1 - cos(u, v)` between the listed rows of `table`.
pub fn cosine_matrix<T: Scalar>(
    table: &Tensor<T>,
    rows: &[usize],
    labels: Vec<String>,
    source: TableSource,
) -> Result<CosineMatrix> {
    if labels.len() != rows.len() {
        return Err(Error::Contract("one label per row required".into()));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= table.rows()) {
        return Err(Error::Lookup(format!("row {r} outside a table of {} rows", table.rows())));
    }
    let vecs: Vec<Vec<f64>> = rows.iter().map(|&r| table.row(r).iter().map(|v| v.as_f64()).collect()).collect();
    let norms: Vec<f64> = vecs.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let n = rows.len();
    let mut values = vec![vec![0.0; n]; n];
    let mut zero_pairs = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = if norms[i] == 0.0 || norms[j] == 0.0 {
                zero_pairs += 1;
                1.0
            } else {
                let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0)
            };
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    Ok(CosineMatrix { source, labels, values, zero_pairs })
}

impl CosineMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = format!("brand,{}\n", self.labels.join(","));
        for (l, row) in self.labels.iter().zip(&self.values) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{l},{}\n", vals.join(",")));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub variant: String,
    pub hit10_delta: f64,
    pub ndcg10_delta: f64,
}

/// `full - variant` on mean Hit@10 and NDCG@10 for each path-group removal.
pub fn path_group_report(results: &[(Variant, ExperimentReport)]) -> Result<Vec<GroupDelta>> {
    let full = results
        .iter()
        .find(|(v, _)| *v == Variant::Full)
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Contract("ablation results lack the full model".into()))?;
    Ok(results
        .iter()
        .filter(|(v, _)| v.dropped_group().is_some())
        .map(|(v, r)| GroupDelta {
            variant: v.label().to_string(),
            hit10_delta: full.mean_hit(10) - r.mean_hit(10),
            ndcg10_delta: full.mean_ndcg(10) - r.mean_ndcg(10),
        })
        .collect())
}

pub fn group_deltas_csv(deltas: &[GroupDelta]) -> String {
    let mut s = String::from("variant,hit10_delta,ndcg10_delta\n");
    for d in deltas {
        s.push_str(&format!("{},{},{}\n", d.variant, d.hit10_delta, d.ndcg10_delta));
    }
    s
}

/// Grayscale heatmap, one `cell` x `cell` block per matrix entry, scaled
/// to the matrix range.
pub fn render_heatmap(rows: &[Vec<f64>], cell: u32, path: &Path) -> Result<()> {
    let h = rows.len() as u32;
    let w = rows.first().map_or(0, |r| r.len()) as u32;
    if h == 0 || w == 0 || cell == 0 {
        return Err(Error::Contract("empty heatmap".into()));
    }
    let (lo, hi) = rows.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = (w * cell, h * cell);
    let mut pixels = Vec::with_capacity((pw * ph) as usize);
    for y in 0..ph {
        for x in 0..pw {
            let v = rows[(y / cell) as usize][(x / cell) as usize];
            pixels.push((255.0 * (1.0 - (v - lo) / span)).round() as u8);
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), pw, ph);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(format!("png header: {e}")))?;
    writer.write_image_data(&pixels).map_err(|e| Error::Format(format!("png data: {e}")))?;
    Ok(())
}
