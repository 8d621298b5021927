//! `knowsite` command line: synthetic data, graph construction,
//! pre-training, training, evaluation, explanation and ablations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use knowsite::config::RunConfig;
use knowsite::dataset::{SiteDataset, Split};
use knowsite::decoder::{default_path_table, parse_path_table, PathComposition};
use knowsite::encoder::Composition;
use knowsite::eval::DEFAULT_KS;
use knowsite::explain::{
    brand_attention, category_attention, cosine_matrix, group_deltas_csv, path_group_report, render_heatmap,
    TableSource,
};
use knowsite::model::KnowSite;
use knowsite::pipeline::{load_prepared, prepare, DATASET_FILE};
use knowsite::pretrain::{pretrain, EmbeddingTable};
use knowsite::synthcity::generate_city;
use knowsite::trainer::{ablation_suite, eval_target, evaluate_model, history_csv, train, Experiment, Variant};
use knowsite::urbankg::{load_sources, KnowledgeGraph};
use serde::{Deserialize, Serialize};

mod error;

use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "knowsite", version, about = "Knowledge-graph driven site selection")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Overrides the config seed and KNOWSITE_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city as source tables
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the knowledge graph, site dataset and validation report
    BuildKg {
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        split_per_brand: bool,
        #[arg(long)]
        planar: bool,
    },
    /// Pre-train entity and relation embeddings
    Pretrain {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train one model and write its checkpoint
    Train {
        #[arg(long)]
        kg: PathBuf,
        /// Site dataset; defaults to the one written by build-kg.
        #[arg(long)]
        sites: Option<PathBuf>,
        /// Directory holding pre-trained tables; random init without it.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Score a trained model on one split
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output directory; defaults to the model directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep a brand's regions from other splits among the candidates.
        #[arg(long)]
        unfiltered: bool,
    },
    /// Write attention and cosine-distance reports for a trained model
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        render_heatmaps: bool,
    },
    /// Run the ablation variants over several seeds
    Ablate {
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    encoder_op: Option<String>,
    #[arg(long, value_enum)]
    self_loop: Option<OnOff>,
    #[arg(long)]
    composition: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    freeze_pretrained: bool,
    #[arg(long)]
    reg_squared: bool,
    /// Relation path table overriding the default eight paths.
    #[arg(long)]
    paths: Option<PathBuf>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) -> CliResult<()> {
        let m = &mut cfg.model;
        if let Some(v) = self.d {
            m.d = v;
        }
        if let Some(v) = self.layers {
            m.encoder.layers = v;
        }
        if let Some(v) = &self.encoder_op {
            m.encoder.op = v.parse::<Composition>()?;
        }
        if let Some(v) = self.self_loop {
            m.encoder.self_loop = matches!(v, OnOff::On);
        }
        if let Some(v) = &self.composition {
            m.decoder.composition = v.parse::<PathComposition>()?;
        }
        if let Some(v) = self.alpha {
            m.decoder.alpha = v;
        }
        if let Some(v) = self.dropout {
            m.encoder.dropout = v;
        }
        if let Some(v) = self.lambda_reg {
            m.lambda_reg = v;
        }
        m.freeze_pretrained |= self.freeze_pretrained;
        m.reg_squared |= self.reg_squared;
        let t = &mut cfg.train;
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        Ok(())
    }
}

/// Paths a checkpoint needs to be evaluated later, stored beside it.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    kg: PathBuf,
    sites: PathBuf,
    seed: u64,
    filtered: bool,
    config: RunConfig,
}

const MANIFEST: &str = "run.json";

struct Ctx {
    workdir: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn at(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn config(&self, path: Option<&PathBuf>) -> CliResult<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let p = self.at(p);
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| CliError::new("source", format!("{}: {e}", p.display())))?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::new("config", format!("{}: {}", p.display(), e.message())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(s) = std::env::var("KNOWSITE_SEED") {
            let s = s.parse().map_err(|_| CliError::new("config", format!("KNOWSITE_SEED={s} is not an integer")))?;
            cfg.seed = Some(s);
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        Ok(cfg)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_tables(dir: &Path, kg: &KnowledgeGraph) -> CliResult<(knowsite::Tensor, knowsite::Tensor)> {
    let ents = EmbeddingTable::<f64>::load(&dir.join("entities.ksemb"))?;
    let rels = EmbeddingTable::<f64>::load(&dir.join("relations.ksemb"))?;
    let en: Vec<String> = kg.entities().iter().map(|e| e.name.clone()).collect();
    let rn: Vec<String> = kg.relations().iter().map(|r| r.name.clone()).collect();
    Ok((ents.aligned(&en)?, rels.aligned(&rn)?))
}

fn path_table(ctx: &Ctx, flags: &ModelFlags, kg: &KnowledgeGraph) -> CliResult<Vec<knowsite::decoder::RelationPath>> {
    Ok(match &flags.paths {
        Some(p) => {
            let p = ctx.at(p);
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::new("source", format!("{}: {e}", p.display())))?;
            parse_path_table(&text, kg.relations())?
        }
        None => default_path_table(kg.relations())?,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx { workdir: cli.workdir, seed: cli.seed };
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = ctx.config(config.as_ref())?.resolved();
            let city = generate_city(&cfg.city, &cfg.patterns)?;
            city.write(&ctx.at(&out))?;
        }
        Command::BuildKg { sources, out, config, split_per_brand, planar } => {
            let mut cfg = ctx.config(config.as_ref())?.resolved();
            cfg.split.per_brand |= split_per_brand;
            cfg.extract.planar |= planar;
            let src = load_sources(&ctx.at(&sources))?;
            let prep = prepare(&src, &cfg.extract, &cfg.split)?;
            let out = ctx.at(&out);
            prep.write(&out)?;
            if !prep.report.is_valid() {
                return Err(CliError::new(
                    "validation",
                    format!("schema validation failed, see {}", out.join("validation_report.json").display()),
                ));
            }
        }
        Command::Pretrain { kg, out, config, d, epochs } => {
            let mut cfg = ctx.config(config.as_ref())?.resolved();
            if let Some(d) = d {
                cfg.pretrain.d = d;
            }
            if let Some(e) = epochs {
                cfg.pretrain.max_epochs = e;
            }
            let kg = KnowledgeGraph::read_dir(&ctx.at(&kg))?;
            let res = pretrain::<f64>(&kg, &cfg.pretrain)?;
            let out = ctx.at(&out);
            std::fs::create_dir_all(&out)?;
            res.entities.save(&out.join("entities.ksemb"))?;
            res.relations.save(&out.join("relations.ksemb"))?;
            let mut hist = String::from("epoch,loss\n");
            for (i, l) in res.history.iter().enumerate() {
                hist.push_str(&format!("{i},{l}\n"));
            }
            std::fs::write(out.join("history.csv"), hist)?;
        }
        Command::Train { kg, sites, pretrained, config, out, model } => {
            let mut cfg = ctx.config(config.as_ref())?;
            model.apply(&mut cfg)?;
            let cfg = cfg.resolved();
            let kg_dir = ctx.at(&kg);
            let (graph, mut data, pop) = load_prepared(&kg_dir)?;
            let sites = sites.map(|s| ctx.at(&s)).unwrap_or_else(|| kg_dir.join(DATASET_FILE));
            if sites != kg_dir.join(DATASET_FILE) {
                data = SiteDataset::read_tsv(&sites, &graph)?;
            }
            let tables = pretrained.map(|p| load_tables(&ctx.at(&p), &graph)).transpose()?;
            let paths = path_table(&ctx, &model, &graph)?;
            let exp = Experiment { kg: &graph, data: &data, popularity: &pop, pretrained: tables, paths };
            let res = train(&exp, &cfg.model, &cfg.train, cfg.train.seed)?;
            let out = ctx.at(&out);
            res.model.save(&out, &graph)?;
            std::fs::write(out.join("history.csv"), history_csv(&res.history))?;
            let manifest = RunManifest {
                kg: std::fs::canonicalize(&kg_dir)?,
                sites: std::fs::canonicalize(&sites)?,
                seed: cfg.train.seed,
                filtered: cfg.train.filtered,
                config: cfg,
            };
            write_json(&out.join(MANIFEST), &manifest)?;
        }
        Command::Evaluate { model, split, out, unfiltered } => {
            let dir = ctx.at(&model);
            let (manifest, graph, data, pop, m) = open_model(&dir)?;
            let target = eval_target(&data, split.into(), &pop, &m.regions, manifest.filtered && !unfiltered);
            let (report, _) = evaluate_model(&m, &graph, &target, &DEFAULT_KS)?;
            report.write(&out.map(|o| ctx.at(&o)).unwrap_or(dir))?;
        }
        Command::Explain { model, out, render_heatmaps } => {
            let dir = ctx.at(&model);
            let (manifest, graph, data, _, m) = open_model(&dir)?;
            let out = ctx.at(&out);
            std::fs::create_dir_all(&out)?;
            let brands: Vec<String> = if manifest.config.explain.brands.is_empty() {
                data.brands().iter().map(|&b| graph.entity(b).name.clone()).collect()
            } else {
                manifest.config.explain.brands.clone()
            };
            let ids = brands
                .iter()
                .map(|b| graph.entity_id(b).ok_or_else(|| CliError::new("lookup", format!("unknown brand {b}"))))
                .collect::<CliResult<Vec<_>>>()?;
            let att = brand_attention(&m, &graph, &brands)?;
            std::fs::write(out.join("attention_brands.csv"), att.to_csv())?;
            let (cats, skipped) = category_attention(&att, &graph)?;
            if skipped > 0 {
                eprintln!("warning: {skipped} brands without a Cate1 left out of the category report");
            }
            std::fs::write(out.join("attention_categories.csv"), cats.to_csv())?;
            let (h0, _) = m.layer0_tables();
            let (hk, _) = m.encoded_tables()?;
            for (table, src, name) in
                [(&h0, TableSource::Pretrained, "cosine_pretrained.csv"), (&hk, TableSource::Encoded, "cosine_encoded.csv")]
            {
                let cm = cosine_matrix(table, &ids, brands.clone(), src)?;
                if cm.zero_pairs > 0 {
                    eprintln!("warning: {name}: {} pairs involve a zero vector", cm.zero_pairs);
                }
                std::fs::write(out.join(name), cm.to_csv())?;
                if render_heatmaps || manifest.config.explain.render_heatmaps {
                    render_heatmap(&cm.values, 8, &out.join(name.replace(".csv", ".png")))?;
                }
            }
            if render_heatmaps || manifest.config.explain.render_heatmaps {
                render_heatmap(&att.rows, 8, &out.join("attention_brands.png"))?;
            }
        }
        Command::Ablate { model_config, kg, pretrained, out, runs, jobs, model } => {
            let mut cfg = ctx.config(model_config.as_ref())?;
            model.apply(&mut cfg)?;
            if let Some(r) = runs {
                cfg.train.runs = r;
            }
            if let Some(j) = jobs {
                cfg.train.jobs = j;
            }
            let cfg = cfg.resolved();
            let (graph, data, pop) = load_prepared(&ctx.at(&kg))?;
            let tables = pretrained.map(|p| load_tables(&ctx.at(&p), &graph)).transpose()?;
            let paths = path_table(&ctx, &model, &graph)?;
            let exp = Experiment { kg: &graph, data: &data, popularity: &pop, pretrained: tables, paths };
            let results = ablation_suite(&exp, &cfg.model, &cfg.train, &Variant::ALL)?;
            let out = ctx.at(&out);
            std::fs::create_dir_all(&out)?;
            let mut summary = String::from("variant,hit10_mean,hit10_std,ndcg10_mean,ndcg10_std\n");
            for (v, r) in &results {
                let i = r.aggregate.ks.iter().position(|&k| k == 10).unwrap_or(0);
                summary.push_str(&format!(
                    "{},{},{},{},{}\n",
                    v.label(),
                    r.aggregate.mean[i].hit,
                    r.aggregate.std[i].hit,
                    r.aggregate.mean[i].ndcg,
                    r.aggregate.std[i].ndcg
                ));
            }
            std::fs::write(out.join("ablation_summary.csv"), summary)?;
            std::fs::write(out.join("path_group_deltas.csv"), group_deltas_csv(&path_group_report(&results)?))?;
            let named: Vec<(&str, &knowsite::trainer::ExperimentReport)> =
                results.iter().map(|(v, r)| (v.label(), r)).collect();
            write_json(&out.join("ablation_report.json"), &named)?;
        }
    }
    Ok(())
}

type Opened = (RunManifest, KnowledgeGraph, SiteDataset, std::collections::BTreeMap<usize, u64>, KnowSite<f64>);

fn open_model(dir: &Path) -> CliResult<Opened> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| CliError::new("source", format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let (graph, mut data, pop) = load_prepared(&manifest.kg)?;
    if manifest.sites != manifest.kg.join(DATASET_FILE) {
        data = SiteDataset::read_tsv(&manifest.sites, &graph)?;
    }
    let m = KnowSite::load(dir, &graph)?;
    Ok((manifest, graph, data, pop, m))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind, e.msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
