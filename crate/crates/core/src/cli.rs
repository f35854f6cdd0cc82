//! Command-line driver.
//!
//! Every subcommand reads a flat JSON config (`--config`), applies
//! `--set key=value` overrides and dedicated flags on top, validates the
//! result and only then writes outputs. Exit codes: 0 success, 1 invalid
//! input, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{generate, load_features_with, write_features, DatasetSpec, MultimodalDataset};
use crate::error::{Error, Result};
use crate::eval::{acc_gcd, bias_report, estimate_k, predict_vote, similarity_bins, spearman, GcdEvalReport};
use crate::losses::LossWeights;
use crate::model::{init_model, load_checkpoint, save_checkpoint, Activation, EncoderStack, ModelConfig, Temperatures};
use crate::numerics::RngSeed;
use crate::theory::{alignment_identity_check, correlation_sweep, random_model, GaussianClassModel};
use crate::trainer::{predict, train, TrainConfig, TrainHistory};

pub const OUT_DIR_ENV: &str = "MMGCD_OUT_DIR";
const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "mmgcd", version, about = "Multimodal category discovery on paired features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file with flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the fused-determinant identity on random class models.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<usize>,
        #[arg(long)]
        max_dim: Option<usize>,
        /// Alias for --data-seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep the cross-modal correlation and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Sample a synthetic paired dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on feature files and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on feature files.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the number of categories with k-means.
    EstimateK {
        #[command(flatten)]
        common: Common,
    },
    /// Generate, train and evaluate in one run.
    E2e {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

/// Every key accepted in a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_seed: Option<u64>,
    pub model_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,

    pub k_total: Option<usize>,
    pub k_old: Option<usize>,
    pub dim: Option<usize>,
    pub n_per_class: Option<usize>,
    pub mean_separation: Option<f64>,
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub labeled_fraction: Option<f64>,
    pub cov_condition: Option<f64>,

    pub features_x: Option<PathBuf>,
    pub features_y: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,

    pub num_classes: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub d_h: Option<usize>,
    pub d_z: Option<usize>,
    pub activation: Option<String>,
    pub tau_u: Option<f64>,
    pub tau_s: Option<f64>,
    pub tau_c: Option<f64>,
    pub tau_p: Option<f64>,
    pub tau_q: Option<f64>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub lambda_u: Option<f64>,
    pub lambda_s: Option<f64>,
    pub epsilon: Option<f64>,
    pub epsilon_fused: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub drop_rate: Option<f64>,
    pub map_refresh: Option<usize>,
    pub map_per_batch: Option<bool>,

    pub bins: Option<usize>,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,

    pub models: Option<usize>,
    pub max_dim: Option<usize>,
    pub r_grid: Option<Vec<f64>>,
    pub sweep_classes: Option<usize>,
    pub sweep_dim: Option<usize>,
    pub sweep_separation: Option<f64>,
    pub sweep_n_per_class: Option<usize>,
}

fn missing(key: &str) -> Error {
    Error::InvalidConfig(format!("missing required key `{key}`"))
}

impl ExperimentConfig {
    /// Layers a JSON file, `key=value` overrides and explicit values.
    pub fn resolve(file: Option<&Path>, sets: &[String], flags: Map<String, Value>) -> Result<Self> {
        let mut map = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(Error::format(path, "config must be a JSON object")),
                    Err(e) => return Err(Error::format(path, e.to_string())),
                }
            }
            None => Map::new(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{s}`")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            map.insert(k.trim().to_string(), value);
        }
        map.extend(flags);
        serde_json::from_value(Value::Object(map)).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    fn data_seed(&self) -> Result<RngSeed> {
        self.data_seed.map(RngSeed).ok_or_else(|| missing("data_seed"))
    }

    fn model_seed(&self) -> Result<RngSeed> {
        self.model_seed.map(RngSeed).ok_or_else(|| missing("model_seed"))
    }

    fn path(&self, key: &'static str, v: &Option<PathBuf>) -> Result<PathBuf> {
        v.clone().ok_or_else(|| missing(key))
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            k_total: self.k_total.unwrap_or(10),
            k_old: self.k_old.unwrap_or(5),
            d: self.dim.unwrap_or(32),
            n_per_class: self.n_per_class.unwrap_or(200),
            mean_separation: self.mean_separation.unwrap_or(0.75),
            r_range: (self.r_min.unwrap_or(0.9), self.r_max.unwrap_or(0.9)),
            labeled_fraction: self.labeled_fraction.unwrap_or(0.5),
            cov_condition: self.cov_condition.unwrap_or(10.0),
            seed: self.data_seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn model_config(&self, d_x: usize, d_y: usize, classes: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(d_x, d_y, self.num_classes.unwrap_or(classes));
        if let Some(h) = &self.hidden {
            c.hidden = h.clone();
        }
        c.d_h = self.d_h.unwrap_or(c.d_h);
        c.d_z = self.d_z.unwrap_or(c.d_z);
        c.activation = match self.activation.as_deref() {
            None | Some("tanh") => Activation::Tanh,
            Some("identity") => Activation::Identity,
            Some(other) => {
                return Err(Error::InvalidConfig(format!(
                    "`activation` must be \"tanh\" or \"identity\", got \"{other}\""
                )))
            }
        };
        let t = Temperatures::default();
        c.temps = Temperatures {
            tau_u: self.tau_u.unwrap_or(t.tau_u),
            tau_s: self.tau_s.unwrap_or(t.tau_s),
            tau_c: self.tau_c.unwrap_or(t.tau_c),
            tau_p: self.tau_p.unwrap_or(t.tau_p),
            tau_q: self.tau_q.unwrap_or(t.tau_q),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let w = LossWeights::default();
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr0: self.lr0.unwrap_or(d.lr0),
            weights: LossWeights {
                lambda_u: self.lambda_u.unwrap_or(w.lambda_u),
                lambda_s: self.lambda_s.unwrap_or(w.lambda_s),
                epsilon: self.epsilon.unwrap_or(w.epsilon),
                epsilon_fused: self.epsilon_fused.unwrap_or(w.epsilon_fused),
            },
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            drop_rate: self.drop_rate.unwrap_or(d.drop_rate),
            seed: self.model_seed()?.derive(1),
            map_refresh: self.map_refresh.unwrap_or(d.map_refresh),
            map_per_batch: self.map_per_batch.unwrap_or(d.map_per_batch),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn k_range(&self) -> Result<Vec<usize>> {
        let (lo, hi) = (self.k_min.unwrap_or(5), self.k_max.unwrap_or(15));
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("`k_min` {lo} and `k_max` {hi} must satisfy 1 <= k_min <= k_max")));
        }
        Ok((lo..=hi).collect())
    }

    fn load_dataset(&self) -> Result<MultimodalDataset> {
        let x = self.path("features_x", &self.features_x)?;
        let y = self.path("features_y", &self.features_y)?;
        let l = self.path("labels", &self.labels)?;
        load_features_with(&x, &y, &l, self.k_old)
    }
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<&PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV) {
        return PathBuf::from(p);
    }
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct Seeds {
    data_seed: Option<u64>,
    model_seed: Option<u64>,
}

impl Seeds {
    fn of(cfg: &ExperimentConfig) -> Self {
        Seeds {
            data_seed: cfg.data_seed,
            model_seed: cfg.model_seed,
        }
    }
}

#[derive(Debug, Serialize)]
struct ModelCheck {
    dim: usize,
    rel_err: f64,
    schur_rel_err: f64,
}

#[derive(Debug, Serialize)]
struct TheoryReport {
    command: &'static str,
    seeds: Seeds,
    models: usize,
    max_dim: usize,
    max_rel_err: f64,
    max_schur_rel_err: f64,
    per_model: Vec<ModelCheck>,
}

fn theory_check(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = cfg.data_seed()?;
    let n = cfg.models.unwrap_or(200);
    let max_dim = cfg.max_dim.unwrap_or(6);
    if n == 0 || max_dim == 0 {
        return Err(Error::InvalidConfig("`models` and `max_dim` must be positive".into()));
    }
    let mut per_model = Vec::with_capacity(n);
    for i in 0..n {
        let dim = 1 + i % max_dim;
        let m = random_model(dim, 0.99, seed.derive(i as u64))?;
        let c = alignment_identity_check(&m)?;
        per_model.push(ModelCheck {
            dim,
            rel_err: c.rel_err,
            schur_rel_err: c.schur_rel_err,
        });
    }
    let report = TheoryReport {
        command: "theory-check",
        seeds: Seeds::of(cfg),
        models: n,
        max_dim,
        max_rel_err: per_model.iter().map(|m| m.rel_err).fold(0.0, f64::max),
        max_schur_rel_err: per_model.iter().map(|m| m.schur_rel_err).fold(0.0, f64::max),
        per_model,
    };
    prepare_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    println!("{}", serde_json::json!({"max_rel_err": report.max_rel_err, "max_schur_rel_err": report.max_schur_rel_err}));
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = cfg.data_seed()?;
    let dim = cfg.sweep_dim.unwrap_or(4);
    let grid = cfg
        .r_grid
        .clone()
        .unwrap_or_else(|| (0..10).map(|i| i as f64 / 10.0).collect());
    let template = GaussianClassModel::isotropic(dim, 0.0)?;
    let rows = correlation_sweep(
        &template,
        cfg.sweep_classes.unwrap_or(4),
        cfg.sweep_separation.unwrap_or(0.8),
        &grid,
        cfg.sweep_n_per_class.unwrap_or(200),
        seed,
    )?;
    prepare_dir(out)?;
    write_csv(
        &out.join("sweep.csv"),
        &["r", "l_f_analytic", "l_f_empirical", "kmeans_acc"],
        rows.iter().map(|r| {
            vec![
                r.r.to_string(),
                r.l_f_analytic.to_string(),
                r.l_f_empirical.to_string(),
                r.kmeans_acc.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Serialize)]
struct GenerateReport {
    command: &'static str,
    seeds: Seeds,
    spec: DatasetSpec,
    samples: usize,
    labeled: usize,
    r_per_class: Vec<Vec<f64>>,
}

fn feature_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join("x.csv"), dir.join("y.csv"), dir.join("labels.csv"))
}

fn generate_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = cfg.dataset_spec()?;
    let (ds, models) = generate(&spec)?;
    prepare_dir(out)?;
    let (x, y, l) = feature_paths(out);
    write_features(&ds, &x, &y, &l)?;
    write_json(
        &out.join("report.json"),
        &GenerateReport {
            command: "generate",
            seeds: Seeds::of(cfg),
            samples: ds.len(),
            labeled: ds.samples.iter().filter(|s| s.is_labeled).count(),
            r_per_class: models.iter().map(|m| m.r.clone()).collect(),
            spec,
        },
    )
}

#[derive(Debug, Serialize)]
struct TrainReport {
    command: &'static str,
    seeds: Seeds,
    config: TrainConfig,
    model: ModelConfig,
    steps: usize,
    final_loss: f64,
    label_mapping: Vec<usize>,
}

fn fit(cfg: &ExperimentConfig, ds: &MultimodalDataset) -> Result<(EncoderStack, TrainHistory, TrainConfig)> {
    let train_cfg = cfg.train_config()?;
    let mc = cfg.model_config(ds.dims.0, ds.dims.1, ds.num_classes())?;
    let model = init_model(&mc, cfg.model_seed()?.derive(0))?;
    let (model, history) = train(model, ds, &train_cfg)?;
    Ok((model, history, train_cfg))
}

fn write_training(cfg: &ExperimentConfig, out: &Path, model: &EncoderStack, history: &TrainHistory, train_cfg: TrainConfig) -> Result<()> {
    history.write_csv(&out.join("history.csv"))?;
    save_checkpoint(model, &out.join(CHECKPOINT_FILE))?;
    write_json(
        &out.join("train_report.json"),
        &TrainReport {
            command: "train",
            seeds: Seeds::of(cfg),
            config: train_cfg,
            model: model.config.clone(),
            steps: history.steps,
            final_loss: history.epochs.last().map(|e| e.losses.total).unwrap_or(f64::NAN),
            label_mapping: history.mapping.perm.clone(),
        },
    )
}

fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = cfg.load_dataset()?;
    cfg.train_config()?;
    cfg.model_config(ds.dims.0, ds.dims.1, ds.num_classes())?;
    let (model, history, train_cfg) = fit(cfg, &ds)?;
    prepare_dir(out)?;
    write_training(cfg, out, &model, &history, train_cfg)
}

#[derive(Debug, Serialize)]
pub struct HeadAccuracy {
    pub all: f64,
    pub old: f64,
    pub new: f64,
}

impl From<&GcdEvalReport> for HeadAccuracy {
    fn from(r: &GcdEvalReport) -> Self {
        HeadAccuracy {
            all: r.acc_all,
            old: r.acc_old,
            new: r.acc_new,
        }
    }
}

#[derive(Debug, Serialize)]
struct Accuracies {
    fused: HeadAccuracy,
    x: HeadAccuracy,
    y: HeadAccuracy,
    vote: HeadAccuracy,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    command: &'static str,
    seeds: Seeds,
    evaluated: usize,
    accuracy: Accuracies,
    /// Fused-head cluster id to label.
    assignment: Vec<usize>,
    /// Old/new confusion of the fused head, `[true][predicted]`.
    confusion: [[usize; 2]; 2],
    similarity_spearman: f64,
}

fn evaluate(cfg: &ExperimentConfig, model: &EncoderStack, ds: &MultimodalDataset, out: &Path, command: &'static str) -> Result<HeadAccuracy> {
    let idx = ds.unlabeled_indices();
    if idx.is_empty() {
        return Err(Error::EmptyInput("no unlabelled rows to evaluate"));
    }
    let labels: Vec<usize> = idx
        .iter()
        .map(|&i| ds.samples[i].label.ok_or(Error::EmptyInput("evaluation needs ground-truth labels")))
        .collect::<Result<_>>()?;
    let old = ds.old_set();
    let p = predict(model, ds, &idx)?;
    let fused = acc_gcd(&p.pred_fused, &labels, &old)?;
    let x = acc_gcd(&p.pred_x, &labels, &old)?;
    let y = acc_gcd(&p.pred_y, &labels, &old)?;
    let vote = acc_gcd(&predict_vote(&p.logits_x, &p.logits_y)?, &labels, &old)?;
    let correct: Vec<bool> = p
        .pred_fused
        .iter()
        .zip(&labels)
        .map(|(&q, &l)| fused.map(q) == l)
        .collect();
    let bins = similarity_bins(&p.h_x, &p.h_y, &correct, cfg.bins.unwrap_or(10).min(idx.len()))?;
    let sims: Vec<f64> = bins.iter().map(|b| b.mean_similarity).collect();
    let accs: Vec<f64> = bins.iter().map(|b| b.accuracy).collect();
    let bias = bias_report(&p.pred_fused, &labels, &old)?;

    let report = EvalReport {
        command,
        seeds: Seeds::of(cfg),
        evaluated: idx.len(),
        accuracy: Accuracies {
            fused: (&fused).into(),
            x: (&x).into(),
            y: (&y).into(),
            vote: (&vote).into(),
        },
        assignment: fused.assignment.mapping.clone(),
        confusion: bias.confusion,
        similarity_spearman: spearman(&sims, &accs),
    };
    prepare_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_csv(
        &out.join("bins.csv"),
        &["bin", "mean_similarity", "accuracy"],
        bins.iter().map(|b| vec![b.bin.to_string(), b.mean_similarity.to_string(), b.accuracy.to_string()]),
    )?;
    write_csv(
        &out.join("bias.csv"),
        &["label", "true_count", "predicted_count"],
        bias.classes
            .iter()
            .map(|c| vec![c.label.to_string(), c.true_count.to_string(), c.predicted_count.to_string()]),
    )?;
    Ok(report.accuracy.fused)
}

fn eval_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ckpt = cfg.path("checkpoint", &cfg.checkpoint)?;
    let ds = cfg.load_dataset()?;
    let model = load_checkpoint(&ckpt)?;
    evaluate(cfg, &model, &ds, out, "eval")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct KReport {
    command: &'static str,
    seeds: Seeds,
    k_star_x: usize,
    k_star_y: usize,
    k_star_fused: usize,
}

fn estimate_k_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = cfg.data_seed()?;
    let ks = cfg.k_range()?;
    let ds = cfg.load_dataset()?;
    let vis = ds.visible_labels();
    let all = ds.all_indices();
    let ex = estimate_k(&ds.x_rows(&all), &vis, &ks, seed)?;
    let ey = estimate_k(&ds.y_rows(&all), &vis, &ks, seed)?;
    let ef = estimate_k(&ds.fused_matrix(), &vis, &ks, seed)?;
    prepare_dir(out)?;
    write_csv(
        &out.join("k_sweep.csv"),
        &["k", "acc_x", "acc_y", "acc_fused"],
        (0..ks.len()).map(|i| {
            vec![
                ks[i].to_string(),
                ex.table[i].1.to_string(),
                ey.table[i].1.to_string(),
                ef.table[i].1.to_string(),
            ]
        }),
    )?;
    write_json(
        &out.join("report.json"),
        &KReport {
            command: "estimate-k",
            seeds: Seeds::of(cfg),
            k_star_x: ex.k_star,
            k_star_y: ey.k_star,
            k_star_fused: ef.k_star,
        },
    )
}

fn e2e(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = cfg.dataset_spec()?;
    cfg.model_seed()?;
    cfg.train_config()?;
    cfg.model_config(spec.d, spec.d, spec.k_total)?;
    let (ds, _) = generate(&spec)?;
    let (model, history, train_cfg) = fit(cfg, &ds)?;
    prepare_dir(out)?;
    write_training(cfg, out, &model, &history, train_cfg)?;
    let acc = evaluate(cfg, &model, &ds, out, "e2e")?;
    println!("All {:.4} Old {:.4} New {:.4}", acc.all, acc.old, acc.new);
    Ok(())
}

fn flag_map(pairs: &[(&str, Option<Value>)]) -> Map<String, Value> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v)))
        .collect()
}

fn seed_flags(c: &Common) -> Vec<(&'static str, Option<Value>)> {
    vec![
        ("data_seed", c.data_seed.map(Value::from)),
        ("model_seed", c.model_seed.map(Value::from)),
    ]
}

type Runner = fn(&ExperimentConfig, &Path) -> Result<()>;

fn dispatch(cli: Cli) -> Result<()> {
    let (common, extra, run): (Common, Vec<(&str, Option<Value>)>, Runner) = match cli.command {
        Command::TheoryCheck {
            common,
            models,
            max_dim,
            seed,
        } => (
            common,
            vec![
                ("models", models.map(Value::from)),
                ("max_dim", max_dim.map(Value::from)),
                ("data_seed", seed.map(Value::from)),
            ],
            theory_check,
        ),
        Command::Sweep { common } => (common, vec![], sweep),
        Command::Generate { common } => (common, vec![], generate_cmd),
        Command::Train { common, epochs } => (common, vec![("epochs", epochs.map(Value::from))], train_cmd),
        Command::Eval { common } => (common, vec![], eval_cmd),
        Command::EstimateK { common } => (common, vec![], estimate_k_cmd),
        Command::E2e { common, epochs } => (common, vec![("epochs", epochs.map(Value::from))], e2e),
    };
    let mut flags = seed_flags(&common);
    flags.extend(extra);
    let cfg = ExperimentConfig::resolve(common.config.as_deref(), &common.set, flag_map(&flags))?;
    let out = out_dir(&cfg, common.out.as_ref());
    run(&cfg, &out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidSpec(_)
        | Error::InvalidMapping(_)
        | Error::DimensionMismatch(_)
        | Error::Format { .. }
        | Error::EmptyInput(_) => 1,
        _ => 2,
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let mut flags = Map::new();
        flags.insert("bogus".into(), Value::from(1));
        let err = ExperimentConfig::resolve(None, &[], flags).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn set_overrides_parse_json_values() {
        let cfg = ExperimentConfig::resolve(
            None,
            &["epochs=3".into(), "activation=identity".into(), "hidden=[4,4]".into()],
            Map::new(),
        )
        .unwrap();
        assert_eq!(cfg.epochs, Some(3));
        assert_eq!(cfg.activation.as_deref(), Some("identity"));
        assert_eq!(cfg.hidden, Some(vec![4, 4]));
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"data_seed": 1, "epochs": 5}"#).unwrap();
        let mut flags = Map::new();
        flags.insert("data_seed".into(), Value::from(9));
        let cfg = ExperimentConfig::resolve(Some(&path), &["epochs=7".into()], flags).unwrap();
        assert_eq!(cfg.data_seed, Some(9));
        assert_eq!(cfg.epochs, Some(7));
    }

    #[test]
    fn missing_seed_names_key() {
        let cfg = ExperimentConfig::default();
        let err = cfg.dataset_spec().unwrap_err();
        assert!(err.to_string().contains("data_seed"));
        assert_eq!(exit_code(&err), 1);
    }
}
