//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; a config file overrides defaults and command
//! line flags of the same name (`--mu 0.5`) override the file. Lines
//! starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use freekd_core::dataset::DatasetFormat;
use freekd_core::gnn::Architecture;
use freekd_core::synthetic::SbmSpec;
use freekd_core::train::{Mode, ModelSpec, TrainConfig};

use crate::error::CliError;

/// `(key, default, help)` for every configuration key, in file order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "", "dataset path: edge-list directory, JSON file or LINQS directory"),
    ("format", "auto", "auto, edgelist, json, linqs or sbm (synthetic, ignores dataset)"),
    ("sbm_nodes", "60", "synthetic graph: node count"),
    ("sbm_classes", "3", "synthetic graph: classes"),
    ("sbm_p_in", "0.2", "synthetic graph: edge probability inside a class"),
    ("sbm_p_out", "0.02", "synthetic graph: edge probability across classes"),
    ("sbm_features", "24", "synthetic graph: feature dimension"),
    ("sbm_words", "5", "synthetic graph: active features per node"),
    ("sbm_topic", "0.6", "synthetic graph: chance an active feature is on-topic"),
    ("sbm_seed", "0", "synthetic graph: generator seed"),
    ("split", "auto", "auto, file, stratified or fixed"),
    ("split_ratios", "0.6,0.2,0.2", "train,val,test fractions of the stratified split"),
    ("split_val", "500", "validation nodes of the fixed split"),
    ("split_test", "1000", "test nodes of the fixed split"),
    ("split_seed", "0", "seed of the generated split"),
    ("normalize_features", "false", "divide each feature row by its sum"),
    ("mode", "freekd", "training mode"),
    ("models", "gcn,gcn", "comma-separated architectures (gcn, sage, gat)"),
    ("layers", "2", "layers per model"),
    ("hidden", "64", "hidden width per model (GAT: total over heads)"),
    ("heads", "8", "GAT attention heads"),
    ("dropout", "0.5", "feature dropout"),
    ("attention_dropout", "0.5", "GAT attention dropout"),
    ("lr_gcn", "0.01", "learning rate of GCN and GraphSAGE models"),
    ("lr_gat", "0.05", "learning rate of GAT models"),
    ("weight_decay", "0.0005", "weight decay of the model optimizers"),
    ("lr_decay", "0.1", "learning-rate factor applied every lr_decay_every epochs"),
    ("lr_decay_every", "100", "epochs between learning-rate decays"),
    ("max_epochs", "500", "epoch limit"),
    ("patience", "150", "epochs without validation improvement before stopping"),
    ("batch_size", "512", "training nodes per batch"),
    ("mu", "1.0", "node-level distillation weight"),
    ("rho", "1.0", "structure-level distillation weight"),
    ("gamma", "0.3", "neighborhood weight of the agent reward"),
    ("normalize_kd", "true", "divide distillation totals by the batch size"),
    ("policy_lr", "0.01", "agent learning rate"),
    ("beta", "0.5", "diversity loss weight"),
    ("views", "5", "prompt graphs, or augmented views of the aug modes"),
    ("tokens", "100", "tokens per prompt graph"),
    ("token_percent", "5", "percent of token pairs joined inside a prompt graph"),
    ("cross_percent", "0.5", "percent of token-node pairs joined across graphs"),
    ("prompt_lr", "0.01", "prompt learning rate"),
    ("literal_diversity_sign", "false", "minimize the negated diversity term"),
    ("aug_rate", "0.2", "drop rate of the aug modes"),
    ("seeds", "0..10", "comma-separated seeds or a half-open range a..b"),
    ("out", "results", "output directory"),
];

/// Key-value pairs before interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Applies the `key = value` lines of `text`; `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// All keys in table order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    File { path: PathBuf, format: DatasetFormat },
    Synthetic(SbmSpec),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitRule {
    /// Masks from the bundle; otherwise fixed for LINQS bundles and stratified for the rest.
    Auto,
    File,
    Stratified([f64; 3]),
    Fixed { val: usize, test: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub split: SplitRule,
    pub split_ratios: [f64; 3],
    pub split_val: usize,
    pub split_test: usize,
    pub split_seed: u64,
    pub normalize_features: bool,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub raw: RawConfig,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("`seeds`: cannot parse `{text}`"));
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..b).collect()
    } else {
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(CliError::Config("`seeds` is empty".into()));
    }
    Ok(seeds)
}

fn parse_bool(raw: &RawConfig, key: &str) -> Result<bool, CliError> {
    match raw.get(key) {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(CliError::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let format = raw.get("format");
        let dataset = if format == "sbm" {
            DatasetSource::Synthetic(SbmSpec {
                nodes: raw.parse("sbm_nodes")?,
                classes: raw.parse("sbm_classes")?,
                p_in: raw.parse("sbm_p_in")?,
                p_out: raw.parse("sbm_p_out")?,
                feature_dim: raw.parse("sbm_features")?,
                words_per_node: raw.parse("sbm_words")?,
                topic_fraction: raw.parse("sbm_topic")?,
                seed: raw.parse("sbm_seed")?,
            })
        } else {
            let path = raw.get("dataset");
            if path.is_empty() {
                return Err(CliError::Config("`dataset` is required unless format = sbm".into()));
            }
            let path = PathBuf::from(path);
            let format = match format {
                "auto" => DatasetFormat::detect(&path),
                f => f.parse().map_err(|e| CliError::Config(format!("`format`: {e}")))?,
            };
            DatasetSource::File { path, format }
        };

        let ratios: Vec<f64> = raw
            .get("split_ratios")
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Config("`split_ratios`: expected three numbers".into()))?;
        let split_ratios: [f64; 3] = ratios
            .try_into()
            .map_err(|_| CliError::Config("`split_ratios`: expected three numbers".into()))?;
        let split_val = raw.parse("split_val")?;
        let split_test = raw.parse("split_test")?;
        let split = match raw.get("split") {
            "auto" => SplitRule::Auto,
            "file" => SplitRule::File,
            "stratified" => SplitRule::Stratified(split_ratios),
            "fixed" => SplitRule::Fixed {
                val: split_val,
                test: split_test,
            },
            v => return Err(CliError::Config(format!("`split`: unknown rule `{v}`"))),
        };

        let mode: Mode = raw
            .get("mode")
            .parse()
            .map_err(|e| CliError::Config(format!("`mode`: {e}")))?;
        let mut models = Vec::new();
        for name in raw.get("models").split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let arch: Architecture = name
                .parse()
                .map_err(|e| CliError::Config(format!("`models`: {e}")))?;
            let mut spec = ModelSpec::new(arch);
            spec.layers = raw.parse("layers")?;
            spec.hidden = raw.parse("hidden")?;
            spec.heads = raw.parse("heads")?;
            spec.dropout = raw.parse("dropout")?;
            spec.attention_dropout = raw.parse("attention_dropout")?;
            models.push(spec);
        }

        let mut train = TrainConfig {
            mode,
            models,
            ..TrainConfig::default()
        };
        train.lr_gcn = raw.parse("lr_gcn")?;
        train.lr_gat = raw.parse("lr_gat")?;
        train.weight_decay = raw.parse("weight_decay")?;
        train.lr_decay = raw.parse("lr_decay")?;
        train.lr_decay_every = raw.parse("lr_decay_every")?;
        train.max_epochs = raw.parse("max_epochs")?;
        train.patience = raw.parse("patience")?;
        train.policy_lr = raw.parse("policy_lr")?;
        train.aug_rate = raw.parse("aug_rate")?;
        train.kd.batch_size = raw.parse("batch_size")?;
        train.kd.mu = raw.parse("mu")?;
        train.kd.rho = raw.parse("rho")?;
        train.kd.gamma = raw.parse("gamma")?;
        train.kd.normalize_by_batch = parse_bool(raw, "normalize_kd")?;
        train.prompt.beta = raw.parse("beta")?;
        train.prompt.views = raw.parse("views")?;
        train.prompt.tokens = raw.parse("tokens")?;
        train.prompt.token_percent = raw.parse("token_percent")?;
        train.prompt.cross_percent = raw.parse("cross_percent")?;
        train.prompt.lr = raw.parse("prompt_lr")?;
        train.prompt.literal_diversity_sign = parse_bool(raw, "literal_diversity_sign")?;
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;

        Ok(ExperimentConfig {
            dataset,
            split,
            split_ratios,
            split_val,
            split_test,
            split_seed: raw.parse("split_seed")?,
            normalize_features: parse_bool(raw, "normalize_features")?,
            train,
            seeds: parse_seeds(raw.get("seeds"))?,
            out: PathBuf::from(raw.get("out")),
            raw: raw.clone(),
        })
    }
}
