use std::path::{Path, PathBuf};

use serde::Serialize;

use fieldsel_core::baselines::DatasetEmbeddingStats;
use fieldsel_core::biaslab::{demo_approximation, demo_baseline_bias, demo_layer_bias, BiasDemoReport};
use fieldsel_core::data::{generate_synthetic, SyntheticSpec, TabularDataset};
use fieldsel_core::importance::{comparator_importance, exact_report, field_importance, Comparator, ImportanceReport};
use fieldsel_core::model::CtrModel;
use fieldsel_core::pipeline::{run_selection, selection_curve, surrogate_train_config, train_surrogate};
use fieldsel_core::trainer::{evaluate, Metrics, TrainHistory};

use crate::config::RunConfig;
use crate::{CliError, DataFormat, DemoKind, GenArgs, Method, SplitName};

/// Collects output files of one run and writes the manifest last.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), contents)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn report(&mut self, stem: &str, r: &ImportanceReport) -> Result<(), CliError> {
        self.write(&format!("{stem}.csv"), &r.to_csv())?;
        self.write(&format!("{stem}.jsonl"), &r.to_jsonl()?)
    }

    fn model(&mut self, name: &str, m: &CtrModel, h: &TrainHistory) -> Result<(), CliError> {
        self.write(&format!("{name}.model"), &m.to_text())?;
        self.write(&format!("{name}_history.csv"), &h.to_csv())
    }

    fn finish(self, command: &str, seed: u64, config: &impl Serialize) -> Result<(), CliError> {
        let manifest = serde_json::json!({
            "tool": "fieldsel",
            "version": fieldsel_core::VERSION,
            "command": command,
            "seed": seed,
            "config": config,
            "outputs": self.files,
        });
        std::fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        println!("wrote {} ({} files + manifest.json)", self.dir.display(), self.files.len());
        Ok(())
    }
}

fn print_ranking(r: &ImportanceReport) {
    println!("{:>4}  {:<24} {:>14}", "rank", "field", "score");
    for (rank, &f) in r.order().iter().enumerate() {
        println!("{:>4}  {:<24} {:>14.6}", rank + 1, r.field_names[f], r.scores[f]);
    }
}

fn metrics_json(m: &Metrics) -> String {
    serde_json::json!({ "auc": m.auc, "logloss": m.logloss }).to_string() + "\n"
}

fn parse_pairs(pairs: &[String]) -> Result<Vec<(usize, usize)>, CliError> {
    pairs
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("pair `{p}` is not of the form a:b")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("pair `{p}`: `{v}` is not an index")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

pub fn gen(args: &GenArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        n_rows: args.rows,
        n_fields: args.fields,
        planted: args.planted.clone(),
        vocab_size: args.vocab,
        target_positive_rate: args.rate,
        interaction_pairs: parse_pairs(&args.pairs)?,
        seed: args.seed,
    };
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    let mut out = Outputs::new(&args.out)?;
    match args.format {
        DataFormat::Csv => {
            let mut buf = Vec::new();
            ds.write_csv(&mut buf)?;
            out.write("data.csv", &String::from_utf8(buf).expect("csv is utf-8"))?;
        }
        DataFormat::Fsds => {
            ds.save_snapshot(args.out.join("data.fsds"))?;
            out.files.push("data.fsds".into());
        }
    }
    println!(
        "{} rows, {} fields, positive rate {:.4}, planted {:?}",
        ds.len(),
        ds.n_fields(),
        ds.positive_rate(),
        spec.planted
    );
    out.finish("gen", args.seed, &spec)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.splits()?;
    let (model, history) = train_surrogate(&splits, &cfg.selection())?;
    let metrics = evaluate(&model, &splits.test)?;
    println!("test auc {:.6} logloss {:.6}", metrics.auc, metrics.logloss);
    let mut out = Outputs::new(&cfg.out)?;
    out.model("model", &model, &history)?;
    out.write("metrics.json", &metrics_json(&metrics))?;
    out.finish("train", cfg.seed, cfg)
}

pub fn importance(cfg: &RunConfig, method: Method, model_path: Option<&Path>) -> Result<(), CliError> {
    let splits = cfg.splits()?;
    let sel = cfg.selection();
    let mut out = Outputs::new(&cfg.out)?;
    let model = match model_path {
        Some(p) => CtrModel::load(p)?,
        None => {
            let (m, h) = train_surrogate(&splits, &sel)?;
            out.model("model", &m, &h)?;
            m
        }
    };
    let icfg = surrogate_train_config(&sel).importance;
    let needs_stats = icfg.baseline.needs_stats() || method == Method::Shark;
    let stats = if needs_stats {
        Some(DatasetEmbeddingStats::from_dataset(&model, &splits.train)?)
    } else {
        None
    };
    let (val, stats) = (&splits.validation, stats.as_ref());
    let report = match method {
        Method::Aggregated => field_importance(&model, val, &icfg, stats)?,
        Method::Exact => exact_report(&model, val, &icfg, stats)?,
        Method::Snip => comparator_importance(Comparator::Snip, &model, val, &icfg, stats)?,
        Method::Shark => comparator_importance(Comparator::Shark, &model, val, &icfg, stats)?,
        Method::Sfs => comparator_importance(Comparator::Sfs, &model, val, &icfg, stats)?,
        Method::Pfi => comparator_importance(Comparator::Pfi, &model, val, &icfg, stats)?,
    };
    print_ranking(&report);
    out.report("importance", &report)?;
    out.finish("importance", cfg.seed, cfg)
}

pub fn select(cfg: &RunConfig) -> Result<(), CliError> {
    let k = cfg
        .k
        .ok_or_else(|| CliError::Usage("no K: pass --k or set `k` in the config".into()))?;
    let splits = cfg.splits()?;
    let o = run_selection(&splits, &cfg.selection(), k)?;
    let r = &o.result;
    println!(
        "selected {} of {} fields ({}): {}",
        r.k,
        r.n_fields,
        r.ratio_percent(),
        r.selected.join(", ")
    );
    println!(
        "test auc {:.6} (full {:.6}), logloss {:.6} (full {:.6})",
        r.auc, r.reference_auc, r.logloss, r.reference_logloss
    );
    let mut out = Outputs::new(&cfg.out)?;
    out.write("selection.csv", &r.to_csv())?;
    out.write("selection.jsonl", &r.to_jsonl()?)?;
    out.report("importance", &o.surrogate.report)?;
    out.model("surrogate", &o.surrogate.model, &o.surrogate.history)?;
    out.model("retrained", &o.retrained.model, &o.retrained.history)?;
    out.model("reference", &o.reference.model, &o.reference.history)?;
    out.finish("select", cfg.seed, cfg)
}

pub fn curve(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.splits()?;
    let ks = if cfg.k_list.is_empty() {
        (1..=splits.train.n_fields()).collect()
    } else {
        cfg.k_list.clone()
    };
    let (curve, surrogate) = selection_curve(&splits, &cfg.selection(), &ks, cfg.delta)?;
    println!("{:>4}  {:>10}  {:>10}", "k", "auc", "logloss");
    for p in &curve.points {
        println!("{:>4}  {:>10.6}  {:>10.6}", p.k, p.auc, p.logloss);
    }
    match curve.minimal_k {
        Some(k) => println!("minimal K within delta {}: {k}", curve.delta),
        None => println!("no K within delta {}", curve.delta),
    }
    let mut out = Outputs::new(&cfg.out)?;
    out.write("curve.csv", &curve.to_csv())?;
    out.write("curve.jsonl", &curve.to_jsonl()?)?;
    out.report("importance", &surrogate.report)?;
    out.finish("curve", cfg.seed, cfg)
}

pub fn eval(cfg: &RunConfig, model_path: &Path, split: SplitName) -> Result<(), CliError> {
    let model = CtrModel::load(model_path)?;
    let splits = cfg.splits()?;
    let ds: &TabularDataset = match split {
        SplitName::Train => &splits.train,
        SplitName::Validation => &splits.validation,
        SplitName::Test => &splits.test,
    };
    let metrics = evaluate(&model, ds)?;
    println!("auc {:.6} logloss {:.6}", metrics.auc, metrics.logloss);
    let mut out = Outputs::new(&cfg.out)?;
    out.write("eval.json", &metrics_json(&metrics))?;
    out.finish("eval", cfg.seed, cfg)
}

pub fn demo(kind: DemoKind, seed: u64, dir: &Path) -> Result<(), CliError> {
    let (name, report): (&str, BiasDemoReport) = match kind {
        DemoKind::Approx => ("approx", demo_approximation()?),
        DemoKind::Baseline => ("baseline", demo_baseline_bias(seed)?),
        DemoKind::Layer => ("layer", demo_layer_bias(seed)?),
    };
    for r in &report.records {
        let cols: Vec<String> = r.values.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        println!("{:<28} {}", r.record, cols.join("  "));
    }
    let mut out = Outputs::new(dir)?;
    out.write(&format!("demo_{name}.csv"), &report.to_csv())?;
    out.write(&format!("demo_{name}.jsonl"), &report.to_jsonl()?)?;
    out.finish(&format!("demo {name}"), seed, &report.config)
}
