//! Run configuration: a flat `key = value` file plus `--set key=value`
//! overrides (overrides win).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use tppdiff::denoiser::{DecoderKind, DenoiserConfig};
use tppdiff::diffusion::NoiseSchedule;
use tppdiff::evaluation::EvalConfig;
use tppdiff::eventdata::HawkesModel;
use tppdiff::rng::derive_seed;
use tppdiff::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: String,
    pub out: String,
    /// Defaults to `<out>/model.json`.
    pub checkpoint: Option<String>,

    pub num_marks: usize,
    pub num_sequences: usize,
    pub base_rate: f64,
    pub horizon: f64,
    /// Defaults to `1.75 / num_marks`.
    pub excitation_scale: Option<f64>,

    pub history_len: usize,
    pub target_len: usize,
    pub steps: usize,
    pub beta_1: f64,
    pub beta_n: f64,
    pub d: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub skip_width: Option<usize>,
    pub decoder: DecoderKind,
    pub sigma0: f64,
    pub rounding_hidden: Option<usize>,

    pub lr: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub max_steps: Option<u64>,
    pub l3_weight: f64,
    pub val_every: usize,
    pub val_limit: usize,
    pub train_stride: usize,
    /// Defaults to `target_len`.
    pub eval_stride: Option<usize>,
    pub resume: bool,

    pub clamp_start: usize,
    pub samples: usize,
    pub chunk: usize,
    /// Horizons for `horizon.csv`; empty means every step.
    pub horizons: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: "data/hawkes.jsonl".into(),
            out: "runs/default".into(),
            checkpoint: None,
            num_marks: 5,
            num_sequences: 500,
            base_rate: 0.02,
            horizon: 200.0,
            excitation_scale: None,
            history_len: 20,
            target_len: 10,
            steps: 500,
            beta_1: 1e-4,
            beta_n: 0.02,
            d: 32,
            n_blocks: 1,
            kernel: 3,
            skip_width: None,
            decoder: DecoderKind::Gru,
            sigma0: 0.1,
            rounding_hidden: None,
            lr: 1e-3,
            gamma: 0.98,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 100,
            patience: 10,
            max_steps: None,
            l3_weight: 1.0,
            val_every: 1,
            val_limit: 256,
            train_stride: 1,
            eval_stride: None,
            resume: false,
            clamp_start: 250,
            samples: 1,
            chunk: 256,
            horizons: Vec::new(),
        }
    }
}

/// Splits `key=value` (whitespace around either side is ignored).
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got {s:?}"))?;
    let k = k.trim();
    if k.is_empty() {
        bail!("empty key in {s:?}");
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Reads `key = value` lines; blank lines and `#` comments are skipped.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_assignment(line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn parse_value(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let parsed = match current {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| serde_json::from_str(s).map_err(|_| anyhow!("{key}: {s:?} is not a number")))
                .collect::<Result<_>>()?,
        ),
        _ => match raw {
            "" | "none" | "null" => Value::Null,
            _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
        },
    };
    Ok(parsed)
}

impl RunConfig {
    /// Applies assignments in order; unknown keys and ill-typed values are
    /// errors naming the key.
    pub fn apply(&self, assignments: &[(String, String)]) -> Result<Self> {
        let mut obj = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (k, v) in assignments {
            let current = obj.get(k).ok_or_else(|| anyhow!("unknown config key {k:?}"))?;
            let value = parse_value(k, current, v)?;
            obj.insert(k.clone(), value);
        }
        let cfg: Self = serde_json::from_value(Value::Object(obj)).map_err(|e| anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut assignments = match file {
            Some(p) => read_config_file(p)?,
            None => Vec::new(),
        };
        for o in overrides {
            assignments.push(parse_assignment(o)?);
        }
        Self::default().apply(&assignments)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate().map_err(|e| anyhow!("{e}"))?;
        self.schedule().map_err(|e| anyhow!("{e}"))?;
        self.train_config().validate().map_err(|e| anyhow!("{e}"))?;
        if self.clamp_start > self.steps {
            bail!("clamp_start {} exceeds steps {}", self.clamp_start, self.steps);
        }
        if self.samples == 0 || self.chunk == 0 || self.train_stride == 0 || self.eval_stride == Some(0) {
            bail!("samples, chunk and strides must be positive");
        }
        if let Some(&h) = self.horizons.iter().find(|&&h| h == 0 || h > self.target_len) {
            bail!("horizon {h} outside 1..={}", self.target_len);
        }
        if self.num_marks == 0 {
            bail!("num_marks must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn derived_seed(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose, &[])
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .as_ref()
            .map_or_else(|| self.out_dir().join("model.json"), PathBuf::from)
    }

    pub fn eval_stride(&self) -> usize {
        self.eval_stride.unwrap_or(self.target_len)
    }

    pub fn horizons(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            (1..=self.target_len).collect()
        } else {
            self.horizons.clone()
        }
    }

    pub fn hawkes(&self) -> Result<HawkesModel> {
        let scale = self
            .excitation_scale
            .unwrap_or_else(|| HawkesModel::default_excitation_scale(self.num_marks));
        HawkesModel::synthetic(
            self.num_marks,
            self.base_rate,
            self.horizon,
            scale,
            self.derived_seed("kernels"),
        )
        .map_err(|e| anyhow!("{e}"))
    }

    /// Model shape for `num_marks` marks (taken from the dataset).
    pub fn denoiser_config_for(&self, num_marks: usize) -> DenoiserConfig {
        DenoiserConfig {
            kernel: self.kernel,
            skip_width: self.skip_width.unwrap_or(self.d),
            decoder: self.decoder,
            sigma0: self.sigma0,
            rounding_hidden: self.rounding_hidden.unwrap_or(self.d),
            ..DenoiserConfig::new(
                self.d,
                self.n_blocks,
                num_marks,
                self.history_len,
                self.target_len,
                self.steps,
            )
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        self.denoiser_config_for(self.num_marks)
    }

    pub fn schedule(&self) -> tppdiff::Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_1, self.beta_n)
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut e = EvalConfig::new(self.clamp_start, self.derived_seed("eval"));
        e.samples = self.samples;
        e.chunk = self.chunk;
        e
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.derived_seed("train"), self.clamp_start);
        t.lr0 = self.lr;
        t.gamma = self.gamma;
        t.weight_decay = self.weight_decay;
        t.batch_size = self.batch_size;
        t.max_epochs = self.epochs;
        t.patience = self.patience;
        t.max_steps = self.max_steps;
        t.l3_weight = self.l3_weight;
        t.val_every = self.val_every;
        t.val_limit = self.val_limit;
        t.eval = self.eval_config();
        t
    }
}
