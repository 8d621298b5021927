//! Ranking metrics over brands: NDCG, Hit, Precision, Recall and MAP at k.
//!
//! Relevance of a predicted region is `(|A| - rank + 1) / |A|`, where
//! `rank` is its 1-based position in the brand's popularity-ordered true
//! list, and zero for regions outside that list.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingResult {
    pub brand: usize,
    /// True regions, most popular first.
    pub true_regions: Vec<usize>,
    /// Candidate regions, highest score first.
    pub predicted: Vec<usize>,
    /// `|A|`, the size of the full candidate set used by `rel`.
    pub n_candidates: usize,
}

impl RankingResult {
    pub fn n_true(&self) -> usize {
        self.true_regions.len()
    }

    pub fn rel(&self, region: usize) -> f64 {
        match self.true_regions.iter().position(|&r| r == region) {
            Some(pos) => {
                let a = self.n_candidates as f64;
                (a - (pos + 1) as f64 + 1.0) / a
            }
            None => 0.0,
        }
    }

    fn top(&self, k: usize) -> &[usize] {
        &self.predicted[..k.min(self.predicted.len())]
    }

    fn hits_in_top(&self, k: usize) -> usize {
        self.top(k).iter().filter(|r| self.true_regions.contains(r)).count()
    }
}

fn gain(rel: f64, j: usize) -> f64 {
    (2f64.powf(rel) - 1.0) / ((j + 1) as f64).log2()
}

pub fn dcg_at_k(res: &RankingResult, k: usize) -> f64 {
    res.top(k).iter().enumerate().map(|(i, &r)| gain(res.rel(r), i + 1)).sum()
}

pub fn idcg_at_k(res: &RankingResult, k: usize) -> f64 {
    res.true_regions.iter().take(k).enumerate().map(|(i, &r)| gain(res.rel(r), i + 1)).sum()
}

pub fn ndcg_at_k(res: &RankingResult, k: usize) -> f64 {
    let ideal = idcg_at_k(res, k);
    if ideal == 0.0 {
        0.0
    } else {
        dcg_at_k(res, k) / ideal
    }
}

/// 1 when the top-`k` true regions and top-`k` predictions overlap. With
/// fewer than `k` true regions the whole true set is used.
pub fn hit_at_k(res: &RankingResult, k: usize) -> f64 {
    let truth: BTreeSet<usize> = res.true_regions.iter().take(k).copied().collect();
    if res.top(k).iter().any(|r| truth.contains(r)) {
        1.0
    } else {
        0.0
    }
}

pub fn precision_at_k(res: &RankingResult, k: usize) -> f64 {
    res.hits_in_top(k) as f64 / k as f64
}

pub fn recall_at_k(res: &RankingResult, k: usize) -> f64 {
    let denom = res.n_true().min(k);
    if denom == 0 {
        0.0
    } else {
        res.hits_in_top(k) as f64 / denom as f64
    }
}

pub fn map_at_k(res: &RankingResult, k: usize) -> f64 {
    let denom = res.n_true().min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &r) in res.top(k).iter().enumerate() {
        if res.true_regions.contains(&r) {
            hits += 1;
        }
        total += hits as f64 / (i + 1) as f64 * res.rel(r);
    }
    total / denom as f64
}

/// Orders `regions` by descending score, ties by ascending region id.
pub fn rank_by_score<T: Scalar>(scores: &[T], regions: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..regions.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(regions[a].cmp(&regions[b]))
    });
    idx.into_iter().map(|i| regions[i]).collect()
}

/// Orders true regions by descending popularity, ties by region id.
pub fn popularity_order(truth: &[usize], popularity: &BTreeMap<usize, u64>) -> Vec<usize> {
    let mut t = truth.to_vec();
    t.sort_by_key(|r| (std::cmp::Reverse(popularity.get(r).copied().unwrap_or(0)), *r));
    t.dedup();
    t
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ndcg: f64,
    pub hit: f64,
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
}

impl MetricSet {
    pub fn of(res: &RankingResult, k: usize) -> Self {
        Self {
            ndcg: ndcg_at_k(res, k),
            hit: hit_at_k(res, k),
            precision: precision_at_k(res, k),
            recall: recall_at_k(res, k),
            map: map_at_k(res, k),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.ndcg, self.hit, self.precision, self.recall, self.map]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self { ndcg: v[0], hit: v[1], precision: v[2], recall: v[3], map: v[4] }
    }

    pub const NAMES: [&'static str; 5] = ["ndcg", "hit", "precision", "recall", "map"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrandMetrics {
    pub brand: String,
    pub n_true: usize,
    pub at: Vec<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    /// Mean over brands, parallel to `ks`.
    pub at: Vec<MetricSet>,
    pub n_brands: usize,
    /// Brands with no true regions in the evaluated split.
    pub excluded: usize,
    pub per_brand: Vec<BrandMetrics>,
}

impl MetricsReport {
    pub fn from_results(results: &[RankingResult], ks: &[usize], names: &dyn Fn(usize) -> String) -> Result<Self> {
        if ks.iter().any(|&k| k == 0) {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut per_brand = Vec::new();
        let mut excluded = 0;
        for r in results {
            if r.n_true() == 0 {
                excluded += 1;
                continue;
            }
            per_brand.push(BrandMetrics {
                brand: names(r.brand),
                n_true: r.n_true(),
                at: ks.iter().map(|&k| MetricSet::of(r, k)).collect(),
            });
        }
        let n = per_brand.len();
        let at = (0..ks.len())
            .map(|i| {
                let mut sum = [0.0; 5];
                for b in &per_brand {
                    for (s, v) in sum.iter_mut().zip(b.at[i].values()) {
                        *s += v;
                    }
                }
                MetricSet::from_values(sum.map(|s| if n == 0 { 0.0 } else { s / n as f64 }))
            })
            .collect();
        Ok(Self { ks: ks.to_vec(), at, n_brands: n, excluded, per_brand })
    }

    pub fn get(&self, k: usize) -> Option<&MetricSet> {
        self.ks.iter().position(|&x| x == k).map(|i| &self.at[i])
    }

    /// `N@5, N@10, H@5, H@10, P@10, R@10, M@10`, when those ks are present.
    pub fn headline(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let cols: [(&str, usize, fn(&MetricSet) -> f64); 7] = [
            ("N@5", 5, |m| m.ndcg),
            ("N@10", 10, |m| m.ndcg),
            ("H@5", 5, |m| m.hit),
            ("H@10", 10, |m| m.hit),
            ("P@10", 10, |m| m.precision),
            ("R@10", 10, |m| m.recall),
            ("M@10", 10, |m| m.map),
        ];
        for (name, k, f) in cols {
            if let Some(m) = self.get(k) {
                out.push((name.to_string(), f(m)));
            }
        }
        out
    }

    pub fn per_brand_csv(&self) -> String {
        let mut s = String::from("brand,n_true");
        for k in &self.ks {
            for n in MetricSet::NAMES {
                let _ = write!(s, ",{n}@{k}");
            }
        }
        s.push('\n');
        for b in &self.per_brand {
            let _ = write!(s, "{},{}", b.brand, b.n_true);
            for m in &b.at {
                for v in m.values() {
                    let _ = write!(s, ",{v}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics_report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join("metrics_per_brand.csv"), self.per_brand_csv())?;
        Ok(())
    }
}

/// Mean and population standard deviation of several reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub ks: Vec<usize>,
    pub mean: Vec<MetricSet>,
    pub std: Vec<MetricSet>,
    pub runs: usize,
}

impl AggregateReport {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Contract("no reports to aggregate".into()))?;
        let n = reports.len() as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for i in 0..first.ks.len() {
            let mut m = [0.0; 5];
            for r in reports {
                for (a, v) in m.iter_mut().zip(r.at[i].values()) {
                    *a += v / n;
                }
            }
            let mut var = [0.0; 5];
            for r in reports {
                for ((a, v), mu) in var.iter_mut().zip(r.at[i].values()).zip(m) {
                    *a += (v - mu) * (v - mu) / n;
                }
            }
            mean.push(MetricSet::from_values(m));
            std.push(MetricSet::from_values(var.map(f64::sqrt)));
        }
        Ok(Self { ks: first.ks.clone(), mean, std, runs: reports.len() })
    }

    pub fn mean_at(&self, k: usize) -> Option<&MetricSet> {
        self.ks.iter().position(|&x| x == k).map(|i| &self.mean[i])
    }
}

/// Everything needed to turn a score matrix into ranking results.
#[derive(Debug, Clone)]
pub struct EvalTarget {
    /// Candidate region entity ids, ascending.
    pub regions: Vec<usize>,
    pub truth: BTreeMap<usize, Vec<usize>>,
    /// Regions to drop from each brand's candidate list (known pairs from
    /// other splits).
    pub known: BTreeMap<usize, BTreeSet<usize>>,
    pub popularity: BTreeMap<usize, u64>,
}

impl EvalTarget {
    pub fn brands(&self) -> Vec<usize> {
        self.truth.keys().copied().collect()
    }

    /// `scores` rows follow `brands()`; columns follow `regions`.
    pub fn rank<T: Scalar>(&self, scores: &Tensor<T>) -> Result<Vec<RankingResult>> {
        let brands = self.brands();
        if scores.shape() != [brands.len(), self.regions.len()] {
            return Err(Error::Dimension(format!(
                "scores {:?} for {} brands x {} regions",
                scores.shape(),
                brands.len(),
                self.regions.len()
            )));
        }
        let empty = BTreeSet::new();
        Ok(brands
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let known = self.known.get(&b).unwrap_or(&empty);
                let ranked = rank_by_score(scores.row(i), &self.regions);
                RankingResult {
                    brand: b,
                    true_regions: popularity_order(&self.truth[&b], &self.popularity),
                    predicted: ranked.into_iter().filter(|r| !known.contains(r)).collect(),
                    n_candidates: self.regions.len(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> RankingResult {
        // regions a1..a5 are ids 1..5
        RankingResult { brand: 0, true_regions: vec![2, 4], predicted: vec![4, 1, 2, 5, 3], n_candidates: 5 }
    }

    #[test]
    fn hand_fixture() {
        let r = fixture();
        assert_eq!(r.rel(2), 1.0);
        assert!((r.rel(4) - 0.8).abs() < 1e-15);
        assert!((dcg_at_k(&r, 2) - 0.7411).abs() < 1e-4);
        assert!((idcg_at_k(&r, 2) - 1.4676).abs() < 1e-4);
        assert!((ndcg_at_k(&r, 2) - 0.505).abs() < 1e-3);
        assert_eq!(hit_at_k(&r, 2), 1.0);
        assert_eq!((precision_at_k(&r, 2), recall_at_k(&r, 2)), (0.5, 0.5));
        assert_eq!((precision_at_k(&r, 5), recall_at_k(&r, 5)), (0.4, 1.0));
        assert!((map_at_k(&r, 2) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ideal_order_is_one_and_misses_are_zero() {
        let mut r = fixture();
        r.predicted = vec![2, 4, 1, 3, 5];
        assert!((ndcg_at_k(&r, 2) - 1.0).abs() < 1e-12);
        r.predicted = vec![1, 3, 5, 2, 4];
        assert_eq!(ndcg_at_k(&r, 3), 0.0);
        assert_eq!(hit_at_k(&r, 2), 0.0);
        assert_eq!(map_at_k(&r, 2), 0.0);
    }

    #[test]
    fn ties_break_by_region_id() {
        assert_eq!(rank_by_score(&[1.0, 2.0, 1.0, 2.0], &[7, 9, 3, 8]), vec![8, 9, 3, 7]);
    }

    #[test]
    fn popularity_ties_by_id() {
        let pop = BTreeMap::from([(1, 5), (2, 9), (3, 5)]);
        assert_eq!(popularity_order(&[3, 1, 2, 4], &pop), vec![2, 1, 3, 4]);
    }

    #[test]
    fn empty_truth_brands_excluded() {
        let mut none = fixture();
        none.brand = 1;
        none.true_regions.clear();
        let rep = MetricsReport::from_results(&[fixture(), none], &[2], &|b| b.to_string()).unwrap();
        assert_eq!((rep.n_brands, rep.excluded), (1, 1));
        assert_eq!(rep.at[0].hit, 1.0);
    }

    #[test]
    fn aggregate_single_run_has_zero_std() {
        let rep = MetricsReport::from_results(&[fixture()], &[2, 5], &|b| b.to_string()).unwrap();
        let agg = AggregateReport::from_reports(&[rep.clone()]).unwrap();
        assert_eq!(agg.mean, rep.at);
        assert!(agg.std.iter().all(|s| s.values().iter().all(|v| *v == 0.0)));
    }
}
