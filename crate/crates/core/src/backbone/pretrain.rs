//! One-off next-token training of the backbone on the synthetic tasks. After
//! this the weights are frozen for good.

use serde::{Deserialize, Serialize};

use super::{argmax, token_nll, BackboneWeights, KvCache, Token};
use crate::error::{Error, Result};
use crate::harness::corpus::{Sample, TaskKind, QUERY};
use crate::numerics::{Matrix, View};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Place each training sequence at a random absolute offset.
    pub random_offsets: bool,
    /// Extra `QUERY key value` triples appended to samples that store two or
    /// more pairs, each over a pair drawn from the sample; every value is
    /// supervised.
    pub extra_queries: usize,
    /// Set by the harness from the master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 8, lr: 3e-3, warmup: 100, weight_decay: 0.0, random_offsets: false, extra_queries: 12, seed: 0 }
    }
}

/// Rows of `prompt ++ response[..-1]` whose next token is an answer token.
fn answer_rows(s: &Sample) -> Vec<usize> {
    let l = s.prompt.len();
    (s.answer_start..s.response.len()).map(|i| l + i - 1).collect()
}

/// `prompt ++ response`, plus `extra` re-queries of the stored pairs when the
/// sample holds at least two, with the rows whose next token is supervised.
pub fn training_sequence(s: &Sample, extra: usize, rng: &mut crate::numerics::Rng) -> (Vec<Token>, Vec<usize>) {
    let mut seq: Vec<Token> = s.prompt.iter().chain(&s.response).copied().collect();
    let mut rows = answer_rows(s);
    let pairs: Vec<usize> = if s.kind == TaskKind::Copy { Vec::new() } else { s.payload_positions.iter().step_by(2).copied().collect() };
    if pairs.len() >= 2 {
        for _ in 0..extra {
            let p = pairs[rng.below(pairs.len())];
            seq.extend([QUERY, s.prompt[p], s.prompt[p + 1]]);
            rows.push(seq.len() - 2);
        }
    }
    (seq, rows)
}

/// Mean next-token cross-entropy over `rows` of `seq[..-1]`, and its gradient.
pub fn sequence_loss_and_grad(weights: &BackboneWeights, seq: &[Token], rows: &[usize], offset: usize) -> Result<(f64, BackboneWeights)> {
    let inputs = &seq[..seq.len() - 1];
    let x = weights.embed(inputs, offset)?;
    let fwd = weights.forward_rows(&KvCache::empty(&weights.config), &x, true)?;
    let hidden = fwd.hidden.select_rows(rows);
    let mut dlogits = weights.logits(&hidden);
    let inv = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    for (r, &row) in rows.iter().enumerate() {
        let target = seq[row + 1];
        let z = dlogits.row_mut(r);
        loss += token_nll(z, target);
        crate::numerics::softmax_in_place(z, 1.0);
        z[target as usize] -= 1.0;
        z.iter_mut().for_each(|g| *g *= inv);
    }
    let mut d_hidden = Matrix::zeros(fwd.hidden.rows(), weights.config.d_model);
    let dh_rows = crate::numerics::gemm(View::of(&dlogits), View::of(&weights.unembed).t())?;
    for (r, &row) in rows.iter().enumerate() {
        d_hidden.row_mut(row).copy_from_slice(dh_rows.row(r));
    }
    let g = weights.backward(&fwd, Some(&d_hidden), None, true)?;
    let mut gw = g.weights.expect("weight gradients requested");
    crate::numerics::gemm_into(1.0, View::of(&hidden).t(), View::of(&dlogits), 1.0, &mut gw.unembed, 0)?;
    for (i, &t) in inputs.iter().enumerate() {
        let d = g.d_input.row(i);
        gw.tok_emb.row_mut(t as usize).iter_mut().zip(d).for_each(|(a, b)| *a += b);
        gw.pos_emb.row_mut(offset + i).iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    Ok((loss * inv, gw))
}

/// Mean answer-token cross-entropy for one sample and its gradient.
pub fn answer_loss_and_grad(weights: &BackboneWeights, sample: &Sample, offset: usize) -> Result<(f64, BackboneWeights)> {
    let seq: Vec<Token> = sample.prompt.iter().chain(&sample.response).copied().collect();
    sequence_loss_and_grad(weights, &seq, &answer_rows(sample), offset)
}

/// Greedy full-context accuracy (whole answer must match) with the query
/// teacher-forced.
pub fn full_context_accuracy(weights: &BackboneWeights, samples: &[Sample]) -> Result<f64> {
    let mut hits = 0usize;
    for s in samples {
        let p = super::prefill(weights, &s.prompt, None)?;
        let mut cache = p.cache;
        let mut logits = p.last_logits;
        let mut ok = true;
        for (i, &t) in s.response.iter().enumerate() {
            if i >= s.answer_start && argmax(&logits) != t {
                ok = false;
                break;
            }
            if i + 1 < s.response.len() {
                logits = super::decode_step(weights, &mut cache, t)?.logits;
            }
        }
        hits += ok as usize;
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

/// Train all backbone weights on `data` (cycled in order) for `cfg.steps`
/// mini-batches. `log(step, mean_loss)` is called every 50 steps.
pub fn pretrain(
    weights: &mut BackboneWeights,
    data: &[Sample],
    cfg: &PretrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<()> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::Parameter("pretraining needs data and a positive batch".into()));
    }
    let sizes: Vec<usize> = weights.tensors().iter().map(|(_, m)| m.as_slice().len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
        sizes,
    );
    let mut cursor = 0usize;
    let mut window = 0.0;
    let mut rng = crate::numerics::Rng::new(cfg.seed);
    let max_pos = weights.config.max_positions;
    for step in 0..cfg.steps {
        let mut acc = weights.zeros_like();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let sample = &data[cursor % data.len()];
            let (seq, rows) = training_sequence(sample, cfg.extra_queries, &mut rng);
            let len = seq.len() - 1;
            if len > max_pos {
                return Err(Error::Parameter(format!("training sequence of {len} tokens exceeds max_positions {max_pos}")));
            }
            let offset = if cfg.random_offsets { rng.below(max_pos - len + 1) } else { 0 };
            let (loss, g) = sequence_loss_and_grad(weights, &seq, &rows, offset)?;
            cursor += 1;
            batch_loss += loss;
            for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                a.add_scaled(b.1, 1.0 / cfg.batch as f64)?;
            }
        }
        // linear warmup, cosine decay to 10%
        let lr = if step < cfg.warmup {
            cfg.lr * (step + 1) as f64 / cfg.warmup as f64
        } else {
            let t = (step - cfg.warmup) as f64 / (cfg.steps - cfg.warmup).max(1) as f64;
            cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos()))
        };
        let grads: Vec<&Matrix> = acc.tensors().into_iter().map(|(_, m)| m).collect();
        opt.step(weights.tensors_mut(), &grads, lr);
        window += batch_loss / cfg.batch as f64;
        if (step + 1) % 50 == 0 {
            log(step + 1, window / 50.0);
            window = 0.0;
        }
    }
    Ok(())
}
