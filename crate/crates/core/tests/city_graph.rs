use std::collections::{BTreeMap, HashSet};

use knowsite::dataset::{SiteDataset, SplitConfig};
use knowsite::synthcity::{generate_city, CityConfig, PatternKind, PlantedPattern};
use knowsite::urbankg::{
    build_graph, load_sources, remove_leakage, validate_schema, ExtractConfig, Fact, KnowledgeGraph, Ontology,
};

fn small_city() -> CityConfig {
    CityConfig { grid: Some((5, 5)), n_brands: 6, n_pois: 250, seed: 11, max_stores: 40, ..Default::default() }
}

fn colocation(strength: f64) -> Vec<PlantedPattern> {
    vec![PlantedPattern { kind: PatternKind::RelatedBrandColocation, brand_ids: vec![0, 1], strength }]
}

#[test]
fn synthetic_city_round_trips_through_tsv() {
    let city = generate_city(&small_city(), &colocation(0.9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    city.write(dir.path()).unwrap();
    let back = load_sources(dir.path()).unwrap();
    assert_eq!(back, city.sources);
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_city(&small_city(), &colocation(0.9)).unwrap().write(a.path()).unwrap();
    generate_city(&small_city(), &colocation(0.9)).unwrap().write(b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn every_poi_in_exactly_one_region() {
    for cfg in [small_city(), CityConfig { grid: None, voronoi_seed_count: Some(40), ..small_city() }] {
        let city = generate_city(&cfg, &[]).unwrap();
        for p in &city.sources.pois {
            let n = city.sources.regions.iter().filter(|r| r.polygon.contains((p.lon, p.lat))).count();
            assert_eq!(n, 1, "{}", p.pid);
        }
    }
}

#[test]
fn taxonomy_is_a_forest() {
    let city = generate_city(&small_city(), &[]).unwrap();
    let mut parent3: BTreeMap<&str, &str> = BTreeMap::new();
    let mut parent2: BTreeMap<&str, &str> = BTreeMap::new();
    for t in &city.sources.taxonomy {
        assert!(parent3.insert(&t.cate3, &t.cate2).is_none());
        if let Some(p) = parent2.insert(&t.cate2, &t.cate1) {
            assert_eq!(p, t.cate1);
        }
    }
}

#[test]
fn full_colocation_puts_followers_on_anchor_regions() {
    let city = generate_city(&small_city(), &colocation(1.0)).unwrap();
    let anchor: HashSet<_> = city.sources.sites.iter().filter(|s| s.brand_id == "b0").map(|s| &s.region_id).collect();
    for s in city.sources.sites.iter().filter(|s| s.brand_id == "b1") {
        assert!(anchor.contains(&s.region_id));
    }
}

#[test]
fn strength_zero_is_uniform() {
    // 3x3 grid, two brands, 500 stores each: chi-square with 8 dof below the 1% critical value
    let cfg = CityConfig {
        grid: Some((3, 3)),
        n_brands: 2,
        min_stores: 500,
        max_stores: 500,
        n_pois: 20,
        seed: 5,
        ..Default::default()
    };
    let city = generate_city(&cfg, &colocation(0.0)).unwrap();
    let mut counts = [0f64; 9];
    for s in &city.sources.sites {
        counts[s.region_id.parse::<usize>().unwrap()] += 1.0;
    }
    let n: f64 = counts.iter().sum();
    assert_eq!(n, 1000.0);
    let e = n / 9.0;
    let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    assert!(chi2 < 20.090, "chi2 = {chi2}");
}

#[test]
fn half_strength_obeys_about_half() {
    let cfg = CityConfig { n_brands: 2, min_stores: 400, max_stores: 400, seed: 9, ..Default::default() };
    let city = generate_city(&cfg, &colocation(0.5)).unwrap();
    let sites = &city.truth.patterns[0].sites;
    assert_eq!(sites.len(), 400);
    let frac = sites.iter().filter(|s| s.obeyed).count() as f64 / 400.0;
    assert!((0.42..=0.58).contains(&frac), "{frac}");
}

fn built(cfg: &CityConfig) -> (KnowledgeGraph, knowsite::urbankg::RawSources) {
    let city = generate_city(cfg, &colocation(0.9)).unwrap();
    let ext = ExtractConfig { planar: cfg.planar, ..Default::default() };
    (build_graph(&city.sources, &ext).unwrap().kg, city.sources)
}

#[test]
fn grid_city_is_schema_clean() {
    let (kg, _) = built(&CityConfig { grid: Some((3, 3)), ..small_city() });
    let rep = validate_schema(&kg);
    assert!(rep.is_valid(), "{:?}", rep.violations);
    assert_eq!(kg.num_relations(), 36);
    // recount straight from the triples file
    let dir = tempfile::tempdir().unwrap();
    kg.write_dir(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("triples.tsv")).unwrap();
    let mut recount: BTreeMap<String, usize> = BTreeMap::new();
    for line in text.lines() {
        *recount.entry(line.split('\t').nth(1).unwrap().to_string()).or_default() += 1;
    }
    for c in &rep.relation_counts {
        assert_eq!(recount.get(&c.name).copied().unwrap_or(0), c.count, "{}", c.name);
    }
}

#[test]
fn neighbors_agree_with_linear_scan() {
    let (kg, _) = built(&small_city());
    let mut probe = 0usize;
    for v in (0..kg.num_entities()).step_by(7) {
        for r in 0..kg.num_relations() {
            let scan: Vec<usize> = {
                let mut s: Vec<usize> = kg.facts().iter().filter(|f| f.o == v && f.r == r).map(|f| f.s).collect();
                s.sort_unstable();
                s
            };
            assert_eq!(kg.neighbors(v, r).unwrap(), scan.as_slice());
            probe += 1;
        }
    }
    assert!(probe > 50);
}

#[test]
fn leakage_removal_leaves_no_held_out_support() {
    let (kg, src) = built(&small_city());
    let ds = SiteDataset::from_sources(&src, &kg, &SplitConfig { brand_stores_over: 0, ..Default::default() }).unwrap();
    let holdout = ds.holdout();
    assert!(!holdout.is_empty());
    let (clean, _) = remove_leakage(&kg, &holdout).unwrap();
    let ds2 = ds.rebind(&kg, &clean).unwrap();
    let osa = clean.relation_id("OSA").unwrap();
    let inv = clean.relation(osa).inverse_id.unwrap();
    let (bo, la) = (clean.relation_id("BO").unwrap(), clean.relation_id("LA").unwrap());
    let held: HashSet<(usize, usize)> = ds2.holdout().into_iter().collect();
    for f in clean.facts() {
        assert!(!(f.r == osa && held.contains(&(f.s, f.o))));
        assert!(!(f.r == inv && held.contains(&(f.o, f.s))));
    }
    // no brand -> POI -> region path for any held-out pair
    let brand_pois: HashSet<(usize, usize)> = clean.facts().iter().filter(|f| f.r == bo).map(|f| (f.s, f.o)).collect();
    for f in clean.facts().iter().filter(|f| f.r == la) {
        for &(b, a) in &held {
            if a == f.o {
                assert!(!brand_pois.contains(&(b, f.s)));
            }
        }
    }
    // train facts untouched
    for (b, a) in ds2.split(knowsite::dataset::Split::Train) {
        assert!(clean.contains(&Fact::new(b, osa, a)));
    }
    let (again, _) = remove_leakage(&clean, &ds2.holdout()).unwrap();
    assert_eq!(again.facts(), clean.facts());
    assert_eq!(clean.entities_of(Ontology::Region), kg.entities_of(Ontology::Region));
}

#[test]
fn relation_density_report() {
    let (kg, _) = built(&CityConfig { grid: Some((20, 25)), n_brands: 40, n_pois: 2000, seed: 1, ..Default::default() });
    let counts = kg.relation_counts();
    for r in kg.relations() {
        println!("{:<20} {}", r.name, counts[r.id]);
    }
    println!("entities {} facts {}", kg.num_entities(), kg.facts().len());
}
