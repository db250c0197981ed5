//! Corpora, configuration, checkpoints, the benchmark runner, and the
//! end-to-end steps the CLI exposes.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;

use crate::backbone::pretrain::{full_context_accuracy, pretrain};
use crate::backbone::BackboneWeights;
use crate::error::Result;
use crate::numerics::Rng;
use crate::train::{train_stage1, train_stage2, EpochLog, TrainState};

use checkpoint::MetaCheckpoint;
use config::{RunConfig, Stream};
use corpus::{gen_corpus, TaskKind};

/// Initialize and pretrain the backbone. `log` receives progress lines.
pub fn pretrain_backbone(cfg: &RunConfig, log: &mut dyn FnMut(String)) -> Result<BackboneWeights> {
    let mut weights = BackboneWeights::init(&cfg.backbone, &mut Rng::new(cfg.stream_seed(Stream::Init)))?;
    let data = cfg.data.pretrain.generate(cfg.stream_seed(Stream::PretrainData))?;
    let pc = crate::backbone::pretrain::PretrainConfig { seed: cfg.stream_seed(Stream::Pretrain), ..cfg.pretrain.clone() };
    pretrain(&mut weights, &data, &pc, |step, loss| log(format!("pretrain step={step} loss={loss:.4}")))?;
    Ok(weights)
}

/// Greedy full-cache accuracy per (task, length) on fresh samples.
pub fn backbone_ceiling(cfg: &RunConfig, weights: &BackboneWeights, samples: usize) -> Result<Vec<(TaskKind, usize, f64)>> {
    let seed = cfg.stream_seed(Stream::Eval) ^ 0x5EED;
    let mut out = Vec::new();
    for &task in &cfg.bench.tasks {
        for &l in &cfg.bench.lengths {
            let corpus = gen_corpus(task, samples, l, seed)?;
            out.push((task, l, full_context_accuracy(weights, &corpus)?));
        }
    }
    Ok(out)
}

/// Result of both training stages.
pub struct Trained {
    pub state: TrainState,
    pub after_stage1: MetaCheckpoint,
    pub logs: Vec<EpochLog>,
    /// Library penalty before the first update.
    pub initial_penalty: f64,
}

impl Trained {
    pub fn checkpoint(&self) -> MetaCheckpoint {
        checkpoint_of(&self.state)
    }
}

fn checkpoint_of(state: &TrainState) -> MetaCheckpoint {
    MetaCheckpoint {
        library: state.library.clone(),
        selector: state.selector.clone(),
        temperature: state.meta.anneal.end,
    }
}

/// Stage I on the main corpus, then Stage II on the shifted corpus.
pub fn train_metalib(cfg: &RunConfig, weights: &BackboneWeights, log: &mut dyn FnMut(&EpochLog)) -> Result<Trained> {
    let tc = crate::train::TrainConfig { seed: cfg.stream_seed(Stream::Train), ..cfg.train.clone() };
    let mut state = TrainState::new(weights.config.d_model, &cfg.metalib, &tc)?;
    let initial_penalty = state.penalty();
    let main = cfg.data.stage1.generate(cfg.stream_seed(Stream::Stage1Data))?;
    let shifted = cfg.data.stage2.generate(cfg.stream_seed(Stream::Stage2Data))?;
    let mut logs = train_stage1(&mut state, weights, &main, tc.stage1_epochs, log)?;
    let after_stage1 = checkpoint_of(&state);
    logs.extend(train_stage2(&mut state, weights, &shifted, tc.stage2_epochs, log)?);
    Ok(Trained { state, after_stage1, logs, initial_penalty })
}
