//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mixcpt::align::{DpoConfig, Strategy};
use mixcpt::datapipe::PackOrder;
use mixcpt::lssd::TrainConfig;
use mixcpt::model::ModelConfig;
use mixcpt::trainer::OptimConfig;
use mixcpt::{Error, Result};

/// Seed offsets per pipeline stage; each stage runs with `seed + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Mix = 0,
    TrainCpt = 1,
    Select = 2,
    TrainSft = 3,
    TrainDpo = 4,
    Experiment = 5,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub select_k: usize,
    pub select_strategy: Strategy,
    /// Overrides the stage-derived selection seed.
    pub select_seed: Option<u64>,
    pub dpo: DpoConfig,
    pub data_cpt: Option<PathBuf>,
    pub data_sft: Option<PathBuf>,
    pub data_dpo: Option<PathBuf>,
    pub data_min_quality: Option<f64>,
    /// Packing length; defaults to `model.max_seq_len`.
    pub data_max_seq_len: Option<usize>,
    pub data_pack_order: PackOrder,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            select_k: 64,
            select_strategy: Strategy::E,
            select_seed: None,
            dpo: DpoConfig {
                beta: 0.1,
                optim: OptimConfig {
                    lr: 0.05,
                    steps: 200,
                    ..OptimConfig::default()
                },
            },
            data_cpt: None,
            data_sft: None,
            data_dpo: None,
            data_min_quality: None,
            data_max_seq_len: None,
            data_pack_order: PackOrder::Shuffled,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn pack_order_name(o: PackOrder) -> &'static str {
    match o {
        PackOrder::Shuffled => "shuffled",
        PackOrder::PerKind => "per_kind",
        PackOrder::InOrder => "in_order",
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = |v: &str| Some(PathBuf::from(v));
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.vocab_size" => self.model.vocab_size = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "train.alpha" => self.train.alpha = parse(key, v)?,
            "train.lr" => self.train.optim.lr = parse(key, v)?,
            "train.momentum" => self.train.optim.momentum = parse(key, v)?,
            "train.clip_norm" => self.train.optim.clip_norm = parse(key, v)?,
            "train.steps" => self.train.optim.steps = parse(key, v)?,
            "train.batch_size" => self.train.optim.batch_size = parse(key, v)?,
            "select.k" => self.select_k = parse(key, v)?,
            "select.strategy" => self.select_strategy = parse(key, v)?,
            "select.seed" => self.select_seed = Some(parse(key, v)?),
            "dpo.beta" => self.dpo.beta = parse(key, v)?,
            "dpo.lr" => self.dpo.optim.lr = parse(key, v)?,
            "dpo.steps" => self.dpo.optim.steps = parse(key, v)?,
            "dpo.batch_size" => self.dpo.optim.batch_size = parse(key, v)?,
            "data.cpt" => self.data_cpt = path(v),
            "data.sft" => self.data_sft = path(v),
            "data.dpo" => self.data_dpo = path(v),
            "data.min_quality" => self.data_min_quality = Some(parse(key, v)?),
            "data.max_seq_len" => self.data_max_seq_len = Some(parse(key, v)?),
            "data.pack_order" => {
                self.data_pack_order = match v {
                    "shuffled" => PackOrder::Shuffled,
                    "per_kind" => PackOrder::PerKind,
                    "in_order" => PackOrder::InOrder,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for {key}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.dpo.validate().map_err(wrap)?;
        if self.select_k == 0 {
            return Err(Error::Config("select.k must be >= 1".into()));
        }
        if let Some(n) = self.data_max_seq_len {
            if n < 2 || n > self.model.max_seq_len {
                return Err(Error::Config(format!(
                    "data.max_seq_len must be in 2..={}, got {n}",
                    self.model.max_seq_len
                )));
            }
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed + stage as u64
    }

    pub fn pack_len(&self) -> usize {
        self.data_max_seq_len.unwrap_or(self.model.max_seq_len)
    }

    /// CPT settings with the stage seed applied.
    pub fn cpt(&self) -> TrainConfig {
        let mut t = self.train;
        t.optim.seed = self.stage_seed(Stage::TrainCpt);
        t
    }

    /// SFT shares the `train.*` optimizer settings.
    pub fn sft(&self) -> OptimConfig {
        OptimConfig {
            seed: self.stage_seed(Stage::TrainSft),
            ..self.train.optim
        }
    }

    pub fn dpo(&self) -> DpoConfig {
        let mut d = self.dpo;
        d.optim.seed = self.stage_seed(Stage::TrainDpo);
        d
    }

    pub fn selection_seed(&self) -> u64 {
        self.select_seed.unwrap_or(self.stage_seed(Stage::Select))
    }

    /// Fully resolved config in the same format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").unwrap();
        };
        kv("seed", self.seed.to_string());
        kv("model.vocab_size", self.model.vocab_size.to_string());
        kv("model.d_model", self.model.d_model.to_string());
        kv("model.n_layers", self.model.n_layers.to_string());
        kv("model.n_heads", self.model.n_heads.to_string());
        kv("model.max_seq_len", self.model.max_seq_len.to_string());
        kv("train.alpha", self.train.alpha.to_string());
        kv("train.lr", self.train.optim.lr.to_string());
        kv("train.momentum", self.train.optim.momentum.to_string());
        kv("train.clip_norm", self.train.optim.clip_norm.to_string());
        kv("train.steps", self.train.optim.steps.to_string());
        kv("train.batch_size", self.train.optim.batch_size.to_string());
        kv("select.k", self.select_k.to_string());
        kv("select.strategy", self.select_strategy.to_string());
        kv("select.seed", self.selection_seed().to_string());
        kv("dpo.beta", self.dpo.beta.to_string());
        kv("dpo.lr", self.dpo.optim.lr.to_string());
        kv("dpo.steps", self.dpo.optim.steps.to_string());
        kv("dpo.batch_size", self.dpo.optim.batch_size.to_string());
        for (k, p) in [("data.cpt", &self.data_cpt), ("data.sft", &self.data_sft), ("data.dpo", &self.data_dpo)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        if let Some(q) = self.data_min_quality {
            kv("data.min_quality", q.to_string());
        }
        kv("data.max_seq_len", self.pack_len().to_string());
        kv("data.pack_order", pack_order_name(self.data_pack_order).to_string());
        s
    }
}
