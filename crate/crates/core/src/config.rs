//! Run configuration: a flat `key = value` text format with dotted keys.
//!
//! Grammar, one directive per line:
//!   - blank lines and lines starting with `#` are ignored
//!   - everything else must be `key = value`; keys are dotted lowercase
//!     identifiers, values are typed per key (integer, float, boolean,
//!     string, or a closed enum)
//!   - later assignments to the same key win
//!
//! Unknown keys are rejected. [`RunConfig::to_text`] emits every key in a
//! fixed order with canonical value formatting, and reparsing that text
//! reproduces the config exactly.

use std::path::Path;

use crate::dataset::{CsvSchema, FeatureCols};
use crate::embedding::EmbeddingVariant;
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, PoolMode};
use crate::graph::SamplingPolicy;
use crate::memory::{TimeMode, UpdaterKind};
use crate::model::ModelSpec;
use crate::optim::AdamConfig;
use crate::synthetic::SyntheticOptions;
use crate::training::TrainOptions;

/// Recall cutoffs reported everywhere.
pub const REPORT_KS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: String,
    pub user_col: String,
    pub item_col: String,
    pub time_col: String,
    /// `auto`, `none`, or a comma-separated list of column names.
    pub feature_cols: String,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub d_mem: usize,
    pub d_node: usize,
    pub d_time: usize,
    pub memory_updater: UpdaterKind,
    pub time_mode: TimeMode,
    pub variant: EmbeddingVariant,
    pub heads: usize,
    pub layers: usize,
    pub neighbors: usize,
    pub sampling: SamplingPolicy,
    pub n_neg_train: usize,
    pub n_neg_eval: usize,
    pub eval_pool: PoolMode,
    pub early_stop: bool,
    pub patience: usize,
    pub seed: u64,
    pub output_dir: String,
    pub synthetic_groups: usize,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub synthetic_events: usize,
    pub synthetic_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: String::new(),
            user_col: "user_id".into(),
            item_col: "item_id".into(),
            time_col: "timestamp".into(),
            feature_cols: "auto".into(),
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            batch_size: 1000,
            epochs: 10,
            lr: 1e-4,
            d_mem: 31,
            d_node: 31,
            d_time: 100,
            memory_updater: UpdaterKind::Gru,
            time_mode: TimeMode::Encode,
            variant: EmbeddingVariant::Attention,
            heads: 2,
            layers: 1,
            neighbors: 10,
            sampling: SamplingPolicy::Recent,
            n_neg_train: 1,
            n_neg_eval: 100,
            eval_pool: PoolMode::Global,
            early_stop: false,
            patience: 3,
            seed: 42,
            output_dir: "out".into(),
            synthetic_groups: 2,
            synthetic_users: 200,
            synthetic_items: 200,
            synthetic_events: 20_000,
            synthetic_noise: 0.2,
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::config(format!("config key `{key}`: invalid integer `{value}`")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("config key `{key}`: invalid integer `{value}`")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::config(format!("config key `{key}`: invalid number `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "config key `{key}`: expected `true` or `false`, got `{value}`"
        ))),
    }
}

fn enum_err(key: &str, value: &str, allowed: &str) -> Error {
    Error::config(format!("config key `{key}`: expected one of {allowed}, got `{value}`"))
}

pub fn updater_name(u: UpdaterKind) -> &'static str {
    match u {
        UpdaterKind::Gru => "gru",
        UpdaterKind::Rnn => "rnn",
    }
}

pub fn variant_name(v: EmbeddingVariant) -> &'static str {
    match v {
        EmbeddingVariant::Attention => "attn",
        EmbeddingVariant::Sum => "sum",
        EmbeddingVariant::Gcn => "gcn",
    }
}

fn time_mode_name(t: TimeMode) -> &'static str {
    match t {
        TimeMode::Encode => "encode",
        TimeMode::Raw => "raw",
    }
}

fn sampling_name(s: SamplingPolicy) -> &'static str {
    match s {
        SamplingPolicy::Recent => "recent",
        SamplingPolicy::Uniform => "uniform",
    }
}

fn pool_name(p: PoolMode) -> &'static str {
    match p {
        PoolMode::Global => "global",
        PoolMode::Batch => "batch",
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.path" => self.data_path = value.to_string(),
            "data.user_col" => self.user_col = value.to_string(),
            "data.item_col" => self.item_col = value.to_string(),
            "data.time_col" => self.time_col = value.to_string(),
            "data.feature_cols" => self.feature_cols = value.to_string(),
            "split.train" => self.split_train = parse_f64(key, value)?,
            "split.val" => self.split_val = parse_f64(key, value)?,
            "split.test" => self.split_test = parse_f64(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "lr" => self.lr = parse_f64(key, value)?,
            "d_mem" => self.d_mem = parse_usize(key, value)?,
            "d_node" => self.d_node = parse_usize(key, value)?,
            "d_time" => self.d_time = parse_usize(key, value)?,
            "memory_updater" => {
                self.memory_updater = match value {
                    "gru" => UpdaterKind::Gru,
                    "rnn" => UpdaterKind::Rnn,
                    _ => return Err(enum_err(key, value, "`gru`, `rnn`")),
                }
            }
            "time_mode" => {
                self.time_mode = match value {
                    "encode" => TimeMode::Encode,
                    "raw" => TimeMode::Raw,
                    _ => return Err(enum_err(key, value, "`encode`, `raw`")),
                }
            }
            "embedding.variant" => {
                self.variant = match value {
                    "attn" => EmbeddingVariant::Attention,
                    "sum" => EmbeddingVariant::Sum,
                    "gcn" => EmbeddingVariant::Gcn,
                    _ => return Err(enum_err(key, value, "`attn`, `sum`, `gcn`")),
                }
            }
            "embedding.heads" => self.heads = parse_usize(key, value)?,
            "embedding.layers" => self.layers = parse_usize(key, value)?,
            "embedding.neighbors" => self.neighbors = parse_usize(key, value)?,
            "embedding.sampling" => {
                self.sampling = match value {
                    "recent" => SamplingPolicy::Recent,
                    "uniform" => SamplingPolicy::Uniform,
                    _ => return Err(enum_err(key, value, "`recent`, `uniform`")),
                }
            }
            "n_neg_train" => self.n_neg_train = parse_usize(key, value)?,
            "n_neg_eval" => self.n_neg_eval = parse_usize(key, value)?,
            "eval.pool" => {
                self.eval_pool = match value {
                    "global" => PoolMode::Global,
                    "batch" => PoolMode::Batch,
                    _ => return Err(enum_err(key, value, "`global`, `batch`")),
                }
            }
            "early_stop" => self.early_stop = parse_bool(key, value)?,
            "patience" => self.patience = parse_usize(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "output_dir" => self.output_dir = value.to_string(),
            "synthetic.groups" => self.synthetic_groups = parse_usize(key, value)?,
            "synthetic.users" => self.synthetic_users = parse_usize(key, value)?,
            "synthetic.items" => self.synthetic_items = parse_usize(key, value)?,
            "synthetic.events" => self.synthetic_events = parse_usize(key, value)?,
            "synthetic.noise" => self.synthetic_noise = parse_f64(key, value)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Canonical echo: every key, fixed order, reparses to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("data.path", self.data_path.clone());
        kv("data.user_col", self.user_col.clone());
        kv("data.item_col", self.item_col.clone());
        kv("data.time_col", self.time_col.clone());
        kv("data.feature_cols", self.feature_cols.clone());
        kv("split.train", self.split_train.to_string());
        kv("split.val", self.split_val.to_string());
        kv("split.test", self.split_test.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("d_mem", self.d_mem.to_string());
        kv("d_node", self.d_node.to_string());
        kv("d_time", self.d_time.to_string());
        kv("memory_updater", updater_name(self.memory_updater).to_string());
        kv("time_mode", time_mode_name(self.time_mode).to_string());
        kv("embedding.variant", variant_name(self.variant).to_string());
        kv("embedding.heads", self.heads.to_string());
        kv("embedding.layers", self.layers.to_string());
        kv("embedding.neighbors", self.neighbors.to_string());
        kv("embedding.sampling", sampling_name(self.sampling).to_string());
        kv("n_neg_train", self.n_neg_train.to_string());
        kv("n_neg_eval", self.n_neg_eval.to_string());
        kv("eval.pool", pool_name(self.eval_pool).to_string());
        kv("early_stop", self.early_stop.to_string());
        kv("patience", self.patience.to_string());
        kv("seed", self.seed.to_string());
        kv("output_dir", self.output_dir.clone());
        kv("synthetic.groups", self.synthetic_groups.to_string());
        kv("synthetic.users", self.synthetic_users.to_string());
        kv("synthetic.items", self.synthetic_items.to_string());
        kv("synthetic.events", self.synthetic_events.to_string());
        kv("synthetic.noise", self.synthetic_noise.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("d_mem", self.d_mem),
            ("d_node", self.d_node),
            ("d_time", self.d_time),
            ("embedding.heads", self.heads),
            ("embedding.layers", self.layers),
            ("embedding.neighbors", self.neighbors),
            ("n_neg_train", self.n_neg_train),
            ("n_neg_eval", self.n_neg_eval),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(Error::config(format!("config key `{name}` must be positive")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("config key `lr` must be positive, got {}", self.lr)));
        }
        let sum = self.split_train + self.split_val + self.split_test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios must sum to 1, got {} + {} + {} = {sum}",
                self.split_train, self.split_val, self.split_test
            )));
        }
        if self.layers > 1 && self.d_mem != self.d_node {
            // Deeper hops feed layer-(l-1) outputs where memories go, so the
            // widths must agree.
            return Err(Error::config(format!(
                "embedding.layers > 1 requires d_mem == d_node, got {} and {}",
                self.d_mem, self.d_node
            )));
        }
        self.feature_schema()?;
        Ok(())
    }

    fn feature_schema(&self) -> Result<FeatureCols> {
        Ok(match self.feature_cols.as_str() {
            "auto" => FeatureCols::Auto,
            "none" => FeatureCols::None,
            list => {
                let cols: Vec<String> =
                    list.split(',').map(|c| c.trim().to_string()).collect();
                if cols.iter().any(String::is_empty) {
                    return Err(Error::config(format!(
                        "config key `data.feature_cols`: empty column name in `{list}`"
                    )));
                }
                FeatureCols::Named(cols)
            }
        })
    }

    pub fn csv_schema(&self) -> Result<CsvSchema> {
        Ok(CsvSchema {
            user_col: self.user_col.clone(),
            item_col: self.item_col.clone(),
            time_col: self.time_col.clone(),
            feature_cols: self.feature_schema()?,
        })
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split_train, self.split_val, self.split_test)
    }

    pub fn model_spec(&self, d_e: usize) -> ModelSpec {
        ModelSpec {
            d_mem: self.d_mem,
            d_node: self.d_node,
            d_time: self.d_time,
            d_e,
            updater: self.memory_updater,
            variant: self.variant,
            time_mode: self.time_mode,
            heads: self.heads,
            layers: self.layers,
            n_nbr: self.neighbors,
            policy: self.sampling,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_neg: self.n_neg_eval,
            k_list: REPORT_KS.to_vec(),
            pool: self.eval_pool,
            batch_size: self.batch_size,
            keep_cases: false,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            n_neg: self.n_neg_train,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            seed: self.seed,
            early_stop: self.early_stop,
            patience: self.patience,
            eval: self.eval_options(),
        }
    }

    pub fn synthetic_options(&self) -> SyntheticOptions {
        SyntheticOptions {
            groups: self.synthetic_groups,
            users: self.synthetic_users,
            items: self.synthetic_items,
            events: self.synthetic_events,
            noise: self.synthetic_noise,
        }
    }
}
