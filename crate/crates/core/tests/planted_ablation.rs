//! Path-group ablation on a flow-following city. Slow (several minutes in
//! release mode), so it only runs with `cargo test -- --ignored`.

use knowsite::dataset::SplitConfig;
use knowsite::decoder::default_path_table;
use knowsite::model::ModelConfig;
use knowsite::pipeline::prepare;
use knowsite::pretrain::{pretrain, PretrainConfig};
use knowsite::synthcity::{generate_city, CityConfig, PatternKind, PlantedPattern};
use knowsite::trainer::{ablation_suite, Experiment, TrainConfig, Variant};
use knowsite::urbankg::ExtractConfig;

#[test]
#[ignore = "trains 40 models"]
fn flow_city_leans_on_region_paths() {
    let cfg = CityConfig { grid: Some((20, 25)), n_brands: 40, n_pois: 2000, min_stores: 25, max_stores: 80, seed: 2, ..Default::default() };
    let patterns: Vec<PlantedPattern> = (0..5)
        .map(|i| PlantedPattern { kind: PatternKind::FlowFollowing, brand_ids: vec![2 * i, 2 * i + 1], strength: 0.9 })
        .collect();
    let city = generate_city(&cfg, &patterns).unwrap();
    let prep = prepare(&city.sources, &ExtractConfig::default(), &SplitConfig::default()).unwrap();
    let pt = pretrain::<f64>(&prep.kg, &PretrainConfig { d: 32, max_epochs: 10, ..Default::default() }).unwrap();
    let exp = Experiment {
        kg: &prep.kg,
        data: &prep.data,
        popularity: &prep.popularity,
        pretrained: Some((pt.entities.rows().clone(), pt.relations.rows().clone())),
        paths: default_path_table(prep.kg.relations()).unwrap(),
    };
    let mut m = ModelConfig { d: 32, ..Default::default() };
    m.encoder.layers = 1;
    let t = TrainConfig { lr: 0.005, max_epochs: 20, patience: 10, runs: 10, ..Default::default() };
    let variants = [Variant::Full, Variant::NoRegionPaths, Variant::NoBrandPaths, Variant::NoStorePaths];
    let res = ablation_suite(&exp, &m, &t, &variants).unwrap();
    let hit = |v: usize, run: usize| res[v].1.runs[run].test.at[1].hit;
    let mut region_largest = 0;
    for run in 0..t.runs {
        let deltas: Vec<f64> = (1..4).map(|v| hit(0, run) - hit(v, run)).collect();
        println!("run {run}: deltas region {:.3} brand {:.3} store {:.3}", deltas[0], deltas[1], deltas[2]);
        if deltas[0] > deltas[1] && deltas[0] > deltas[2] {
            region_largest += 1;
        }
    }
    assert!(region_largest * 2 > t.runs, "RegionBased delta largest in {region_largest}/{} runs", t.runs);
}
