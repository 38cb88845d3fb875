//! Experiment orchestration behind the `prism` binary: configuration files,
//! the model file format, and the train / sweep / evaluate / correlate /
//! synth / theory commands.
//!
//! Configuration is a flat `key = value` file. `[section]` headers group
//! keys for readability but do not scope them: every key is unique, and the
//! CLI accepts `--key-name value` for each one, taking precedence over the
//! file. See [`KEYS`] for the full list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::embeddings::{
    decode_table, encode_table, magnitude_popularity_correlation, ApplyTo, EmbeddingTable,
    InitSpec, InitStrategy, LogBase,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, metrics_row, EvalTarget, MetricsReport, Similarity, Window, METRICS_HEADER,
};
use crate::interactions::{
    generate_synthetic, item_popularity, load_interactions, split, stratify, write_interactions,
    Delimiter, InteractionSet, LoadFormat, Split,
};
use crate::io::{fmt_f64, write_atomic, CsvTable};
use crate::losses::{DecayMode, LossKind, LossSpec, MarginTable, Reduction};
use crate::theory::{self, TheoryParams};
use crate::trainer::{epochs_to_convergence, train, TrainConfig, TrainedModel};

/// Every configuration key with its default (empty means unset) and help text.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "dataset",
        "",
        "interaction file; empty selects the synthetic generator",
    ),
    (
        "delimiter",
        "tab",
        "field delimiter: tab, whitespace, comma or a literal such as ::",
    ),
    (
        "min_rating",
        "",
        "drop lines whose third field is below this rating",
    ),
    ("split", "0.8,0.1,0.1", "train,val,test fractions"),
    ("split_seed", "0", "seed of the train/val/test partition"),
    ("synth_users", "1000", "synthetic users"),
    ("synth_items", "1500", "synthetic items"),
    ("synth_edges", "30000", "synthetic interactions"),
    (
        "synth_exponent",
        "1.0",
        "power-law exponent of synthetic item popularity",
    ),
    ("synth_seed", "0", "synthetic generator seed"),
    ("loss", "directau", "bpr, ssm, directau or mawu"),
    ("dim", "64", "embedding dimension"),
    (
        "alpha",
        "",
        "PRISM alpha in [0, 1]; empty uses plain Xavier initialization",
    ),
    (
        "apply_to",
        "both",
        "tables rescaled by PRISM: items, users or both",
    ),
    ("log_base", "e", "PRISM logarithm base: e, 2 or 10"),
    ("gamma", "1.0", "DirectAU uniformity weight"),
    ("gamma_user", "1.0", "MAWU user uniformity weight"),
    ("gamma_item", "1.0", "MAWU item uniformity weight"),
    ("negatives", "10", "negatives per positive for bpr and ssm"),
    ("temperature", "1.0", "SSM softmax temperature"),
    (
        "reduction",
        "sum",
        "combine per-positive ranking terms by sum or mean",
    ),
    ("lr", "0.01", "SGD learning rate"),
    ("lambda", "0", "weight decay strength"),
    (
        "wd_mode",
        "full",
        "weight decay mode: none, full or batched",
    ),
    ("batch_size", "1024", "positives per batch"),
    ("max_epochs", "1000", "epoch limit"),
    (
        "patience",
        "10",
        "epochs without validation improvement before stopping",
    ),
    ("eval_k", "20", "NDCG cutoff cap"),
    (
        "window",
        "literal",
        "NDCG position window: literal or retrieval",
    ),
    ("seed", "0", "training seed"),
    (
        "seeds",
        "",
        "comma-separated seeds for sweeps; empty uses seed",
    ),
    ("axis", "none", "sweep axis: lambda, alpha or none"),
    ("values", "", "comma-separated sweep values"),
    (
        "scorers",
        "dot,cosine",
        "similarities to evaluate with; sweeps report the first",
    ),
    ("jobs", "1", "parallel sweep cells"),
    ("out_dir", "out", "output directory"),
];

/// Resolved `key -> value` settings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn defaults() -> Self {
        Settings(
            KEYS.iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::defaults();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", n + 1),
                    format!("expected key = value, got {raw:?}"),
                )
            })?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Settings::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::config(key, "unknown key"));
        }
        self.0.insert(key, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
    }

    fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parsed(key).map(Some)
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::config(key, format!("cannot parse {s:?}")))
            })
            .collect()
    }

    /// `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File {
        path: PathBuf,
        format: LoadFormat,
    },
    Synthetic {
        users: usize,
        items: usize,
        edges: usize,
        exponent: f64,
        seed: u64,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<InteractionSet> {
        match self {
            DataSource::File { path, format } => load_interactions(path, format),
            DataSource::Synthetic {
                users,
                items,
                edges,
                exponent,
                seed,
            } => generate_synthetic(*users, *items, *edges, *exponent, *seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    None,
    Lambda,
    Alpha,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Alpha => "alpha",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub train: TrainConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub scorers: Vec<Similarity>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub settings: Settings,
}

fn parse_enum<T>(s: &Settings, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
    f(s.get(key)).ok_or_else(|| Error::config(key, format!("unknown value {:?}", s.get(key))))
}

impl ExperimentConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let data = if s.get("dataset").is_empty() {
            DataSource::Synthetic {
                users: s.parsed("synth_users")?,
                items: s.parsed("synth_items")?,
                edges: s.parsed("synth_edges")?,
                exponent: s.parsed("synth_exponent")?,
                seed: s.parsed("synth_seed")?,
            }
        } else {
            DataSource::File {
                path: PathBuf::from(s.get("dataset")),
                format: LoadFormat {
                    delimiter: Delimiter::parse(s.get("delimiter")),
                    min_rating: s.optional("min_rating")?,
                },
            }
        };
        let ratios: Vec<f64> = s.list("split")?;
        let split_ratios: [f64; 3] = ratios
            .try_into()
            .map_err(|_| Error::config("split", "expected three comma-separated fractions"))?;
        if split_ratios.iter().any(|r| !(*r >= 0.0))
            || (split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::config(
                "split",
                "fractions must be >= 0 and sum to 1",
            ));
        }

        let kind = parse_enum(s, "loss", LossKind::parse)?;
        let mut loss = LossSpec::new(kind);
        loss.gamma_uniformity = s.parsed("gamma")?;
        loss.gamma_user = s.parsed("gamma_user")?;
        loss.gamma_item = s.parsed("gamma_item")?;
        loss.n_negatives = s.parsed("negatives")?;
        loss.temperature = s.parsed("temperature")?;
        loss.reduction = parse_enum(s, "reduction", Reduction::parse)?;
        loss.decay.lambda = s.parsed("lambda")?;
        loss.decay.mode = parse_enum(s, "wd_mode", DecayMode::parse)?;

        let init = InitSpec {
            strategy: match s.optional::<f64>("alpha")? {
                Some(alpha) => InitStrategy::Prism { alpha },
                None => InitStrategy::XavierUniform,
            },
            apply_to: parse_enum(s, "apply_to", ApplyTo::parse)?,
            log_base: parse_enum(s, "log_base", LogBase::parse)?,
        };
        let train = TrainConfig {
            loss,
            init,
            dim: s.parsed("dim")?,
            learning_rate: s.parsed("lr")?,
            batch_size: s.parsed("batch_size")?,
            max_epochs: s.parsed("max_epochs")?,
            patience: s.parsed("patience")?,
            eval_k: s.parsed("eval_k")?,
            window: parse_enum(s, "window", Window::parse)?,
            seed: s.parsed("seed")?,
        };
        train.validate()?;

        let axis = match s.get("axis") {
            "none" | "" => SweepAxis::None,
            "lambda" => SweepAxis::Lambda,
            "alpha" => SweepAxis::Alpha,
            other => return Err(Error::config("axis", format!("unknown value {other:?}"))),
        };
        let values: Vec<f64> = s.list("values")?;
        if axis != SweepAxis::None && values.is_empty() {
            return Err(Error::config("values", "must be nonempty when axis is set"));
        }
        for &v in &values {
            match axis {
                SweepAxis::Lambda if !(v >= 0.0) || v * train.learning_rate >= 1.0 => {
                    return Err(Error::config(
                        "values",
                        format!("lambda {v} must be >= 0 with lr * lambda < 1"),
                    ))
                }
                SweepAxis::Alpha if !(0.0..=1.0).contains(&v) => {
                    return Err(Error::config(
                        "values",
                        format!("alpha {v} must lie in [0, 1]"),
                    ))
                }
                _ => {}
            }
        }
        let scorers = s
            .get("scorers")
            .split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| {
                Similarity::parse(x)
                    .ok_or_else(|| Error::config("scorers", format!("unknown scorer {x:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if scorers.is_empty() {
            return Err(Error::config("scorers", "must be nonempty"));
        }
        let mut seeds: Vec<u64> = s.list("seeds")?;
        if seeds.is_empty() {
            seeds.push(train.seed);
        }
        let jobs: usize = s.parsed("jobs")?;
        if jobs < 1 {
            return Err(Error::config("jobs", "must be >= 1"));
        }
        Ok(ExperimentConfig {
            data,
            split_ratios,
            split_seed: s.parsed("split_seed")?,
            train,
            axis,
            values,
            scorers,
            seeds,
            jobs,
            out_dir: PathBuf::from(s.get("out_dir")),
            settings: s.clone(),
        })
    }

    pub fn load_split(&self) -> Result<Split> {
        let set = self.data.load()?;
        split(&set, self.split_ratios, self.split_seed)
    }

    /// Train config of one sweep cell.
    pub fn cell_config(&self, value: Option<f64>, seed: u64) -> TrainConfig {
        let mut cfg = self.train;
        cfg.seed = seed;
        match (self.axis, value) {
            (SweepAxis::Lambda, Some(v)) => {
                cfg.loss.decay.lambda = v;
                cfg.init.strategy = InitStrategy::XavierUniform;
            }
            (SweepAxis::Alpha, Some(v)) => {
                cfg.loss.decay.lambda = 0.0;
                cfg.init.strategy = InitStrategy::Prism { alpha: v };
            }
            _ => {}
        }
        cfg
    }
}

const MODEL_SEPARATOR: &str = "---\n";

/// A model file: `key = value` provenance lines, a `---` line, then the user,
/// item and (MAWU) margin tables in the binary table format. Margins are
/// stored as one-column tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub header: BTreeMap<String, String>,
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
    pub margins: Option<MarginTable>,
}

impl ModelFile {
    pub fn from_trained(model: &TrainedModel, cfg: &TrainConfig, settings: &Settings) -> Self {
        let mut header: BTreeMap<String, String> = settings.0.clone();
        header.insert("seed".into(), cfg.seed.to_string());
        header.insert("config_hash".into(), format!("{:016x}", model.config_hash));
        header.insert("best_epoch".into(), model.best_epoch.to_string());
        header.insert("best_val_ndcg".into(), fmt_f64(model.best_val_ndcg));
        header.insert("format".into(), "1".into());
        ModelFile {
            header,
            users: model.users.clone(),
            items: model.items.clone(),
            margins: model.margins.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str(MODEL_SEPARATOR);
        let mut bytes = out.into_bytes();
        bytes.extend(encode_table(&self.users));
        bytes.extend(encode_table(&self.items));
        if let Some(m) = &self.margins {
            let col = |v: &[f64]| {
                EmbeddingTable::from_values(v.len(), 1, v.to_vec()).expect("one column")
            };
            bytes.extend(encode_table(&col(&m.user)));
            bytes.extend(encode_table(&col(&m.item)));
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sep = b"\n---\n";
        let split_at = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .map(|p| p + sep.len())
            .or_else(|| {
                bytes
                    .starts_with(MODEL_SEPARATOR.as_bytes())
                    .then_some(MODEL_SEPARATOR.len())
            })
            .ok_or_else(|| Error::Format("missing header separator".into()))?;
        let text = std::str::from_utf8(&bytes[..split_at])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty() && *l != "---") {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        fn next(rest: &mut &[u8]) -> Result<EmbeddingTable> {
            let (t, used) = decode_table(rest)?;
            *rest = &rest[used..];
            Ok(t)
        }
        let mut rest = &bytes[split_at..];
        let users = next(&mut rest)?;
        let items = next(&mut rest)?;
        let margins = if rest.is_empty() {
            None
        } else {
            let mu = next(&mut rest)?;
            let mi = next(&mut rest)?;
            Some(MarginTable {
                user: mu.values().to_vec(),
                item: mi.values().to_vec(),
            })
        };
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        if users.dim() != items.dim() {
            return Err(Error::Format("user and item dimensions differ".into()));
        }
        Ok(ModelFile {
            header,
            users,
            items,
            margins,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelFile::from_bytes(&bytes)
    }
}

pub const MODEL_FILE: &str = "model.prsm";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CORRELATION_FILE: &str = "correlation.csv";

fn check_model_fits(users: &EmbeddingTable, items: &EmbeddingTable, data: &Split) -> Result<()> {
    if users.rows() != data.train.n_users() || items.rows() != data.train.n_items() {
        return Err(Error::InvalidArgument(format!(
            "model has {} users x {} items, dataset has {} x {}",
            users.rows(),
            items.rows(),
            data.train.n_users(),
            data.train.n_items()
        )));
    }
    Ok(())
}

fn test_metrics(
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    data: &Split,
    cfg: &TrainConfig,
    scorers: &[Similarity],
) -> Result<Vec<MetricsReport>> {
    check_model_fits(users, items, data)?;
    let strata = stratify(&item_popularity(&data.train));
    let target = EvalTarget::test(data);
    scorers
        .iter()
        .map(|&s| evaluate(users, items, &target, &strata, &cfg.scorer(s)))
        .collect()
}

fn metrics_table(
    run: &str,
    cfg: &TrainConfig,
    scorers: &[Similarity],
    reports: &[MetricsReport],
) -> CsvTable {
    let mut t = CsvTable::new(&METRICS_HEADER);
    for (s, m) in scorers.iter().zip(reports) {
        t.push(metrics_row(run, "test", &cfg.scorer(*s), m));
    }
    t
}

/// Paths written by [`cmd_train`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub model: PathBuf,
    pub epoch_log: PathBuf,
    pub metrics: PathBuf,
}

/// Trains one model and writes the model file, epoch log, test metrics and
/// the id maps of the dataset.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainArtifacts> {
    let data = config.load_split()?;
    let cfg = config.cell_config(None, config.seeds[0]);
    let (model, log) = train(&cfg, &data)?;
    let reports = test_metrics(&model.users, &model.items, &data, &cfg, &config.scorers)?;
    let out = &config.out_dir;
    let paths = TrainArtifacts {
        model: out.join(MODEL_FILE),
        epoch_log: out.join(EPOCH_LOG_FILE),
        metrics: out.join(METRICS_FILE),
    };
    ModelFile::from_trained(&model, &cfg, &config.settings).write(&paths.model)?;
    log.to_csv().write(&paths.epoch_log)?;
    metrics_table("train", &cfg, &config.scorers, &reports).write(&paths.metrics)?;
    let ids = data.train.ids();
    ids.users.write(&out.join("user_ids.tsv"))?;
    ids.items.write(&out.join("item_ids.tsv"))?;
    for (s, m) in config.scorers.iter().zip(&reports) {
        log::info!(
            "test ndcg@{} ({}): overall {:.5} popular {:.5} neutral {:.5} unpopular {:.5}",
            cfg.eval_k,
            s.name(),
            m.ndcg_overall,
            m.ndcg_popular,
            m.ndcg_neutral,
            m.ndcg_unpopular
        );
    }
    Ok(paths)
}

pub const SWEEP_HEADER: [&str; 16] = [
    "axis",
    "value",
    "seed",
    "status",
    "scorer",
    "ndcg_overall",
    "ndcg_popular",
    "ndcg_neutral",
    "ndcg_unpopular",
    "debias_ratio",
    "epochs_to_convergence",
    "epochs_run",
    "item_pearson_log",
    "item_spearman",
    "max_decomposition_residual",
    "error",
];

/// One evaluated sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub outcome: std::result::Result<SweepMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepMetrics {
    pub metrics: MetricsReport,
    pub epochs_to_convergence: usize,
    pub epochs_run: usize,
    pub item_pearson_log: Option<f64>,
    pub item_spearman: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), fmt_f64)
}

pub fn sweep_table(axis: SweepAxis, scorer: Similarity, rows: &[SweepRow]) -> CsvTable {
    let mut t = CsvTable::new(&SWEEP_HEADER);
    for r in rows {
        let mut row = vec![
            axis.name().to_string(),
            fmt_f64(r.value),
            r.seed.to_string(),
        ];
        match &r.outcome {
            Ok(m) => {
                let x = &m.metrics;
                row.extend([
                    "ok".to_string(),
                    scorer.name().to_string(),
                    fmt_f64(x.ndcg_overall),
                    fmt_f64(x.ndcg_popular),
                    fmt_f64(x.ndcg_neutral),
                    fmt_f64(x.ndcg_unpopular),
                    fmt_f64(x.debias_ratio),
                    m.epochs_to_convergence.to_string(),
                    m.epochs_run.to_string(),
                    opt(m.item_pearson_log),
                    opt(m.item_spearman),
                    fmt_f64(x.max_decomposition_residual),
                    String::new(),
                ]);
            }
            Err(e) => {
                row.extend(["failed".to_string(), scorer.name().to_string()]);
                row.extend(std::iter::repeat_n("nan".to_string(), 10));
                row.push(e.clone());
            }
        }
        t.push(row);
    }
    t
}

/// Runs one training per (value, seed) on a pool of `jobs` threads. Failed
/// cells are reported in the table and do not stop the sweep.
pub fn run_sweep(config: &ExperimentConfig, data: &Split) -> Result<Vec<SweepRow>> {
    let values: Vec<Option<f64>> = if config.axis == SweepAxis::None {
        vec![None]
    } else {
        config.values.iter().copied().map(Some).collect()
    };
    let cells: Vec<(Option<f64>, u64)> = values
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let scorer = config.scorers[0];
    let degrees = item_popularity(&data.train).item_degree;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|&(value, seed)| {
                let cfg = config.cell_config(value, seed);
                let run = || -> Result<SweepMetrics> {
                    let (model, log) = train(&cfg, data)?;
                    let metrics =
                        test_metrics(&model.users, &model.items, data, &cfg, &[scorer])?.remove(0);
                    let corr = magnitude_popularity_correlation(&model.items, &degrees)?;
                    Ok(SweepMetrics {
                        metrics,
                        epochs_to_convergence: epochs_to_convergence(&log),
                        epochs_run: log.len(),
                        item_pearson_log: corr.pearson_log,
                        item_spearman: corr.spearman,
                    })
                };
                let outcome = run().map_err(|e| {
                    log::warn!("sweep cell value={value:?} seed={seed} failed: {e}");
                    e.to_string()
                });
                SweepRow {
                    value: value.unwrap_or(f64::NAN),
                    seed,
                    outcome,
                }
            })
            .collect()
    });
    Ok(rows)
}

pub fn cmd_sweep(config: &ExperimentConfig) -> Result<PathBuf> {
    let data = config.load_split()?;
    let rows = run_sweep(config, &data)?;
    let path = config.out_dir.join(SWEEP_FILE);
    sweep_table(config.axis, config.scorers[0], &rows).write(&path)?;
    Ok(path)
}

/// Evaluates a saved model on the configured dataset's test split.
pub fn cmd_evaluate(config: &ExperimentConfig, model: &Path) -> Result<PathBuf> {
    let data = config.load_split()?;
    let m = ModelFile::read(model)?;
    let reports = test_metrics(&m.users, &m.items, &data, &config.train, &config.scorers)?;
    let path = config.out_dir.join(METRICS_FILE);
    metrics_table("evaluate", &config.train, &config.scorers, &reports).write(&path)?;
    Ok(path)
}

pub const CORRELATION_HEADER: [&str; 4] = ["table", "n", "pearson_log", "spearman"];

/// Magnitude against train-split degree for both tables of a saved model.
pub fn cmd_correlate(config: &ExperimentConfig, model: &Path) -> Result<PathBuf> {
    let data = config.load_split()?;
    let m = ModelFile::read(model)?;
    check_model_fits(&m.users, &m.items, &data)?;
    let pop = item_popularity(&data.train);
    let mut t = CsvTable::new(&CORRELATION_HEADER);
    for (name, table, degrees) in [
        ("users", &m.users, &pop.user_degree),
        ("items", &m.items, &pop.item_degree),
    ] {
        let r = magnitude_popularity_correlation(table, degrees)?;
        t.push(vec![
            name.to_string(),
            degrees.len().to_string(),
            opt(r.pearson_log),
            opt(r.spearman),
        ]);
    }
    let path = config.out_dir.join(CORRELATION_FILE);
    t.write(&path)?;
    Ok(path)
}

/// Writes a synthetic power-law interaction file.
pub fn cmd_synth(
    users: usize,
    items: usize,
    edges: usize,
    exponent: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let set = generate_synthetic(users, items, edges, exponent, seed)?;
    write_interactions(&set, out)
}

/// Theory parameters shared by the heatmap and oracle commands.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryArgs {
    pub eta: f64,
    pub lambda: f64,
    pub cos_sq: f64,
    pub exp_sq_mag: f64,
    pub degrees: Vec<f64>,
    pub fractions: Vec<f64>,
}

pub fn cmd_heatmap(args: &TheoryArgs, out: &Path) -> Result<()> {
    let base = TheoryParams {
        eta: args.eta,
        lambda: args.lambda,
        cos_sq: args.cos_sq,
        exp_sq_mag: args.exp_sq_mag,
        ..Default::default()
    };
    theory::heatmap_grid(&base, &args.degrees, &args.fractions)?
        .to_csv()
        .write(out)
}

pub fn cmd_oracle(
    args: &TheoryArgs,
    dim: usize,
    trials: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<theory::OracleRow>> {
    let base = TheoryParams {
        eta: args.eta,
        lambda: args.lambda,
        cos_sq: args.cos_sq,
        exp_sq_mag: args.exp_sq_mag,
        ..Default::default()
    };
    let rows = theory::oracle_grid(&base, &args.degrees, &args.fractions, dim, trials, seed)?;
    theory::oracle_csv(&rows).write(out)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse_and_override() {
        let s = Settings::parse("[train]\nlr = 0.1 # comment\n\n[model]\nloss = ssm\n").unwrap();
        assert_eq!(s.get("lr"), "0.1");
        assert_eq!(s.get("loss"), "ssm");
        assert_eq!(s.get("dim"), "64");
        let mut s = s;
        s.set("batch-size", "7").unwrap();
        assert_eq!(s.get("batch_size"), "7");
        assert!(matches!(s.set("nope", "1"), Err(Error::Config { .. })));
        assert!(Settings::parse("lr 0.1").is_err());
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut s = Settings::defaults();
        s.set("lambda", "-1").unwrap();
        match ExperimentConfig::from_settings(&s) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lambda"),
            other => panic!("{other:?}"),
        }
        let mut s = Settings::defaults();
        s.set("axis", "alpha").unwrap();
        assert!(
            matches!(ExperimentConfig::from_settings(&s), Err(Error::Config { field, .. }) if field == "values")
        );
        let mut s = Settings::defaults();
        s.set("loss", "hinge").unwrap();
        assert!(ExperimentConfig::from_settings(&s).is_err());
    }

    #[test]
    fn sweep_cells_follow_axis_rules() {
        let mut s = Settings::defaults();
        s.set("alpha", "0.5").unwrap();
        s.set("lambda", "1e-4").unwrap();
        s.set("axis", "lambda").unwrap();
        s.set("values", "0,1e-6").unwrap();
        let c = ExperimentConfig::from_settings(&s).unwrap();
        let cell = c.cell_config(Some(1e-6), 3);
        assert_eq!(cell.loss.decay.lambda, 1e-6);
        assert_eq!(cell.init.strategy, InitStrategy::XavierUniform);
        assert_eq!(cell.seed, 3);

        s.set("axis", "alpha").unwrap();
        s.set("values", "0,1").unwrap();
        let c = ExperimentConfig::from_settings(&s).unwrap();
        let cell = c.cell_config(Some(1.0), 0);
        assert_eq!(cell.loss.decay.lambda, 0.0);
        assert_eq!(cell.init.strategy, InitStrategy::Prism { alpha: 1.0 });
    }

    #[test]
    fn model_file_round_trip() {
        let users = crate::embeddings::init_xavier(3, 4, 1).unwrap();
        let items = crate::embeddings::init_xavier(5, 4, 2).unwrap();
        let mut header = BTreeMap::new();
        header.insert("loss".to_string(), "mawu".to_string());
        let with = ModelFile {
            header: header.clone(),
            users: users.clone(),
            items: items.clone(),
            margins: Some(MarginTable {
                user: vec![0.1, 0.2, 0.3],
                item: vec![0.0; 5],
            }),
        };
        assert_eq!(ModelFile::from_bytes(&with.to_bytes()).unwrap(), with);
        let without = ModelFile {
            margins: None,
            ..with
        };
        let bytes = without.to_bytes();
        assert_eq!(ModelFile::from_bytes(&bytes).unwrap(), without);
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ModelFile::from_bytes(b"no separator").is_err());
    }
}
