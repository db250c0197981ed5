//! Run configuration, read from TOML. Every key has a default and unknown
//! keys are rejected. See `docs/config.md` for the full key list.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::pretrain::PretrainConfig;
use crate::backbone::BackboneConfig;
use crate::baselines::Policy;
use crate::consolidate::FlowConfig;
use crate::error::{Error, Result};
use crate::harness::corpus::{gen_mixture, Sample, TaskKind};
use crate::metalib::MetaConfig;
use crate::train::TrainConfig;

/// A mixture corpus: kinds and lengths cycled, `count` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub kinds: Vec<TaskKind>,
    pub lengths: Vec<usize>,
    pub count: usize,
}

impl CorpusSpec {
    pub fn generate(&self, seed: u64) -> Result<Vec<Sample>> {
        if self.count == 0 {
            return Err(Error::Config("corpus count must be at least 1".into()));
        }
        gen_mixture(&self.kinds, &self.lengths, self.count, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain: CorpusSpec,
    pub stage1: CorpusSpec,
    pub stage2: CorpusSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        use TaskKind::*;
        Self {
            pretrain: CorpusSpec { kinds: vec![KvRecall], lengths: vec![16, 32], count: 8000 },
            stage1: CorpusSpec { kinds: vec![Needle, KvRecall], lengths: vec![128, 256, 512], count: 2000 },
            stage2: CorpusSpec { kinds: vec![Copy, Needle], lengths: vec![256, 512], count: 400 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Policy strings, e.g. `"streaming:sink=4"`.
    pub policies: Vec<String>,
    pub budgets: Vec<usize>,
    pub tasks: Vec<TaskKind>,
    pub lengths: Vec<usize>,
    /// Evaluation samples per (task, length).
    pub samples: usize,
    /// Rows always kept at the end of the prompt by the probe partition.
    pub force_recent: usize,
    /// Prompt rows used as surrogate probes in the ablation.
    pub surrogate_window: usize,
    /// Fill the timing columns (off keeps reports byte-reproducible).
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            policies: ["full", "meta-soft", "h2o", "streaming", "snapkv", "random", "mean-merge"].map(String::from).to_vec(),
            budgets: vec![64],
            tasks: vec![TaskKind::Needle, TaskKind::KvRecall, TaskKind::Copy],
            lengths: vec![512],
            samples: 100,
            force_recent: 0,
            surrogate_window: 32,
            timing: false,
        }
    }
}

impl BenchConfig {
    pub fn parsed_policies(&self) -> Result<Vec<Policy>> {
        self.policies.iter().map(|p| Policy::parse(p)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub metalib: MetaConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

/// Named random streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Pretrain = 2,
    PretrainData = 3,
    Train = 4,
    Stage1Data = 5,
    Stage2Data = 6,
    Eval = 7,
    RandomPolicy = 8,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stream_seed(&self, stream: Stream) -> u64 {
        // SplitMix64 finalizer over (seed, stream)
        let mut z = self.seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.backbone.validate().map_err(cfg_err)?;
        self.flow.validate().map_err(cfg_err)?;
        let m = &self.metalib;
        if m.k == 0 || m.size < m.k || m.size > self.backbone.d_model || m.hidden == 0 {
            return Err(Error::Config(format!(
                "metalib needs 1 <= k <= size <= d_model and hidden > 0 (k={}, size={}, d_model={})",
                m.k, m.size, self.backbone.d_model
            )));
        }
        for t in [m.anneal.start, m.anneal.end] {
            if !(t > 0.0 && t <= 10.0) {
                return Err(Error::Config(format!("anneal temperatures must lie in (0, 10], got {t}")));
            }
        }
        self.train.gold_layers.resolve(self.backbone.n_layers)?;
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        self.bench.parsed_policies()?;
        if self.bench.budgets.contains(&0) {
            return Err(Error::Config("budgets must be at least 1".into()));
        }
        if self.bench.samples == 0 || self.bench.tasks.is_empty() || self.bench.lengths.is_empty() {
            return Err(Error::Config("bench needs tasks, lengths and at least one sample".into()));
        }
        if self.bench.surrogate_window == 0 {
            return Err(Error::Config("bench.surrogate_window must be at least 1".into()));
        }
        if self.backbone.vocab_size < crate::harness::corpus::MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} is below the {} tokens the tasks use",
                self.backbone.vocab_size,
                crate::harness::corpus::MIN_VOCAB
            )));
        }
        for spec in [&self.data.pretrain, &self.data.stage1, &self.data.stage2] {
            if spec.kinds.is_empty() || spec.lengths.is_empty() || spec.count == 0 {
                return Err(Error::Config("corpora need kinds, lengths and a positive count".into()));
            }
        }
        let longest = self.bench.lengths.iter().chain(&self.data.stage1.lengths).chain(&self.data.stage2.lengths).max();
        if let Some(&l) = longest {
            // prompt + soft tokens + the longest response
            if l + m.k.max(crate::harness::corpus::COPY_SPAN + 2) > self.backbone.max_positions {
                return Err(Error::Config(format!("length {l} does not fit max_positions {}", self.backbone.max_positions)));
            }
        }
        Ok(())
    }
}
