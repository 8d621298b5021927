mod common;

use common::*;
use knowsite::dataset::Split;
use knowsite::decoder::default_path_table;
use knowsite::eval::AggregateReport;
use knowsite::model::{KnowSite, Layer0, ModelConfig};
use knowsite::numcore::{Tape, Tensor};
use knowsite::pipeline::Prepared;
use knowsite::trainer::{eval_target, evaluate_model, run_experiment, train, Experiment, TrainConfig, Variant};
use knowsite::Error;
use rand_chacha::ChaCha8Rng;

/// No encoder, no path decoder: scores are `(hb * r_osa) . h_a` on layer-0.
fn bilinear_cfg(d: usize) -> ModelConfig {
    let mut m = ModelConfig { d, lambda_reg: 0.0, ..Default::default() };
    m.encoder.layers = 0;
    m.decoder.alpha = 1.0;
    m
}

fn small_cfg() -> (ModelConfig, TrainConfig) {
    let mut m = ModelConfig { d: 8, ..Default::default() };
    m.encoder.layers = 1;
    m.encoder.dropout = 0.0;
    let t = TrainConfig { batch_size: 32, lr: 0.01, max_epochs: 8, patience: 100, runs: 1, ..Default::default() };
    (m, t)
}

fn experiment(p: &Prepared) -> Experiment<'_, f64> {
    Experiment {
        kg: &p.kg,
        data: &p.data,
        popularity: &p.popularity,
        pretrained: None,
        paths: default_path_table(p.kg.relations()).unwrap(),
    }
}

fn loss_of(model: &KnowSite<f64>, pairs: &[(usize, usize)]) -> f64 {
    let tape = Tape::new();
    model.loss::<ChaCha8Rng>(&tape, pairs, None).unwrap().0.item()
}

#[test]
fn equal_scores_over_two_regions_cost_ln2() {
    let kg = toy_kg(1, 2, 0);
    let zeros = Layer0::Pretrained { entities: Tensor::zeros(&[3, 4]), relations: Tensor::zeros(&[5, 4]) };
    let model = KnowSite::new(&kg, bilinear_cfg(4), vec![], zeros, 0).unwrap();
    assert!((loss_of(&model, &[(0, 1)]) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn confident_correct_score_costs_almost_nothing() {
    let kg = toy_kg(1, 2, 0);
    for c in [1.0f64, 5.0, 20.0] {
        let ent = Tensor::new(&[3, 2], vec![c, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let init = Layer0::Pretrained { entities: ent, relations: Tensor::filled(&[5, 2], 1.0) };
        let model = KnowSite::new(&kg, bilinear_cfg(2), vec![], init, 0).unwrap();
        let want = (1.0 + (-2.0 * c).exp()).ln();
        assert!((loss_of(&model, &[(0, 1)]) - want).abs() < 1e-12);
    }
}

#[test]
fn regularizer_is_the_parameter_norm() {
    let kg = toy_kg(1, 2, 0);
    for (squared, want) in [(false, 5.0), (true, 25.0)] {
        let cfg = ModelConfig { freeze_pretrained: true, lambda_reg: 1.0, reg_squared: squared, ..bilinear_cfg(2) };
        let mut model = KnowSite::<f64>::new(&kg, cfg, vec![], Layer0::Random, 0).unwrap();
        assert!(model.store.is_empty());
        model.store.register("theta", Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let tape = Tape::new();
        assert!((model.regularizer(&tape).unwrap().item() - want).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let p = small_city(3, &[]);
    let exp = experiment(&p);
    let (m, mut t) = small_cfg();
    t.lr = 0.0;
    t.max_epochs = 3;
    let out = train(&exp, &m, &t, 5).unwrap();
    let fresh = KnowSite::<f64>::new(&p.kg, m, exp.paths.clone(), Layer0::Random, 5).unwrap();
    assert_eq!(out.model.store.snapshot(), fresh.store.snapshot());
    assert_eq!(out.history.len(), 3);
    let first = out.history[0].train_loss;
    assert!(out.history.iter().all(|h| (h.train_loss - first).abs() < 1e-12 * first));
}

#[test]
fn training_reduces_the_loss() {
    let p = small_city(4, &[]);
    let exp = experiment(&p);
    let (m, mut t) = small_cfg();
    t.max_epochs = 40;
    let out = train(&exp, &m, &t, 1).unwrap();
    assert!(out.history[4].train_loss < out.initial_loss);
    let last = out.history.last().unwrap().train_loss;
    assert!(last < 0.5 * out.initial_loss, "{} -> {last}", out.initial_loss);
}

#[test]
fn early_stopping_keeps_the_best_validation_state() {
    let p = small_city(5, &[]);
    let exp = experiment(&p);
    let (m, mut t) = small_cfg();
    t.patience = 1;
    t.max_epochs = 30;
    t.lr = 0.05;
    let out = train(&exp, &m, &t, 2).unwrap();
    // patience 1: the run ends at the first epoch without improvement
    let stopped_early = out.history.len() < t.max_epochs;
    if stopped_early {
        assert_eq!(out.history.len(), out.best_epoch + 1);
    }
    assert!(out.history.iter().all(|h| h.valid_ndcg10 <= out.best_valid));
    let valid = eval_target(&p.data, Split::Valid, &p.popularity, &out.model.regions, true);
    let (rep, _) = evaluate_model(&out.model, &p.kg, &valid, &[10]).unwrap();
    assert_eq!(rep.at[0].ndcg, out.best_valid);
}

#[test]
fn aggregates_over_runs() {
    let p = small_city(6, &[]);
    let exp = experiment(&p);
    let (m, mut t) = small_cfg();
    t.max_epochs = 3;
    let one = run_experiment(&exp, &m, &t).unwrap();
    assert_eq!(one.aggregate.runs, 1);
    assert_eq!(one.aggregate.mean, one.runs[0].test.at);
    assert!(one.aggregate.std.iter().all(|s| s.values().iter().all(|&v| v == 0.0)));

    let same = AggregateReport::from_reports(&[one.runs[0].test.clone(), one.runs[0].test.clone()]).unwrap();
    assert!(same.std.iter().all(|s| s.values().iter().all(|&v| v == 0.0)));

    t.runs = 4;
    t.jobs = 2;
    let many = run_experiment(&exp, &m, &t).unwrap();
    let seeds: Vec<u64> = many.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![0, 1, 2, 3]);
    for (i, mean) in many.aggregate.mean.iter().enumerate() {
        for (j, v) in mean.values().iter().enumerate() {
            let xs: Vec<f64> = many.runs.iter().map(|r| r.test.at[i].values()[j]).collect();
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo - 1e-12 <= *v && *v <= hi + 1e-12);
        }
    }
    t.jobs = 1;
    let serial = run_experiment(&exp, &m, &t).unwrap();
    assert_eq!(serial, many);
}

#[test]
fn no_decoder_variant_equals_alpha_one() {
    let p = small_city(7, &[]);
    let exp = experiment(&p);
    let (mut m, mut t) = small_cfg();
    t.max_epochs = 3;
    m.decoder.alpha = 0.3;
    let (e, vm) = Variant::NoDecoder.apply(&exp, &m);
    let a = train(&e, &vm, &t, 9).unwrap();
    m.decoder.alpha = 1.0;
    let b = train(&exp, &m, &t, 9).unwrap();
    let brands = p.data.brands();
    assert_eq!(a.model.scores(&brands).unwrap(), b.model.scores(&brands).unwrap());
}

#[test]
fn dropping_every_path_group_is_a_config_error() {
    let p = small_city(8, &[]);
    let mut exp = experiment(&p);
    let (m, t) = small_cfg();
    for v in [Variant::NoRegionPaths, Variant::NoBrandPaths, Variant::NoStorePaths] {
        exp = v.apply(&exp, &m).0;
    }
    assert!(exp.paths.is_empty());
    assert!(matches!(train(&exp, &m, &t, 0), Err(Error::Config(_))));
}

#[test]
fn invalid_training_settings_are_rejected() {
    let m = ModelConfig::default();
    for t in [
        TrainConfig { lr: -1.0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { runs: 0, ..Default::default() },
        TrainConfig { grid_search: true, lr: 0.002, ..Default::default() },
    ] {
        assert!(matches!(t.validate(&m), Err(Error::Config(_))));
    }
}

#[test]
fn single_precision_trains_too() {
    let p = small_city(4, &[]);
    let exp = Experiment::<f32> {
        kg: &p.kg,
        data: &p.data,
        popularity: &p.popularity,
        pretrained: None,
        paths: default_path_table(p.kg.relations()).unwrap(),
    };
    let (m, mut t) = small_cfg();
    t.max_epochs = 10;
    let out = train(&exp, &m, &t, 1).unwrap();
    let last = out.history.last().unwrap().train_loss;
    assert!(last.is_finite() && last < out.initial_loss);
}
