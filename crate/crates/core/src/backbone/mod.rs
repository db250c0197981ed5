//! Tiny decoder-only transformer used as the frozen backbone.
//!
//! Pre-norm blocks (RMSNorm → causal multi-head attention → residual,
//! RMSNorm → GELU MLP → residual), learned absolute positions, untied output
//! head. The forward pass can run over any block of new rows on top of an
//! existing [`KvCache`], which covers prefill (empty prefix), single-token
//! decode, and the soft-token suffix used while training the probes.

mod grad;
pub mod pretrain;

pub use grad::Gradients;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, gemm_into, softmax_in_place, Matrix, Rng, View};

pub type Token = u32;

pub(crate) const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { vocab_size: 256, d_model: 64, n_layers: 4, n_heads: 4, d_head: 16, d_ff: 256, max_positions: 1024 }
    }
}

impl BackboneConfig {
    /// Config with `d_head = d_model / n_heads` and a 4x feed-forward width.
    pub fn new(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize, max_positions: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Parameter(format!("d_model {d_model} is not divisible by n_heads {n_heads}")));
        }
        let cfg = Self { vocab_size, d_model, n_layers, n_heads, d_head: d_model / n_heads, d_ff: 4 * d_model, max_positions };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Parameter(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Parameter("backbone dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
    pub unembed: Matrix,
}

impl BackboneWeights {
    /// Scaled-Gaussian initialization (std `1/sqrt(fan_in)`) for every
    /// weight except the positional table, which starts from unit-norm
    /// sinusoids and is trained like the rest.
    pub fn init(config: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let g = 1.0 / (d as f64).sqrt();
        let tok_emb = Matrix::gaussian(config.vocab_size, d, g, rng);
        let pos_emb = sinusoids(config.max_positions, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(d),
                wq: Matrix::gaussian(d, d, g, rng),
                wk: Matrix::gaussian(d, d, g, rng),
                wv: Matrix::gaussian(d, d, g, rng),
                wo: Matrix::gaussian(d, d, g, rng),
                ffn_norm: ones(d),
                w1: Matrix::gaussian(d, config.d_ff, g, rng),
                b1: Matrix::zeros(1, config.d_ff),
                w2: Matrix::gaussian(config.d_ff, d, 1.0 / (config.d_ff as f64).sqrt(), rng),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        let unembed = Matrix::gaussian(d, config.vocab_size, g, rng);
        Ok(Self { config: config.clone(), tok_emb, pos_emb, layers, final_norm: ones(d), unembed })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        z
    }

    /// Named tensors in checkpoint declaration order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, lw) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{l}.attn_norm"), &lw.attn_norm),
                (format!("layers.{l}.wq"), &lw.wq),
                (format!("layers.{l}.wk"), &lw.wk),
                (format!("layers.{l}.wv"), &lw.wv),
                (format!("layers.{l}.wo"), &lw.wo),
                (format!("layers.{l}.ffn_norm"), &lw.ffn_norm),
                (format!("layers.{l}.w1"), &lw.w1),
                (format!("layers.{l}.b1"), &lw.b1),
                (format!("layers.{l}.w2"), &lw.w2),
                (format!("layers.{l}.b2"), &lw.b2),
            ]);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for lw in &mut self.layers {
            out.extend([
                &mut lw.attn_norm,
                &mut lw.wq,
                &mut lw.wk,
                &mut lw.wv,
                &mut lw.wo,
                &mut lw.ffn_norm,
                &mut lw.w1,
                &mut lw.b1,
                &mut lw.w2,
                &mut lw.b2,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    /// Rebuild from tensors produced by [`Self::tensors`] (names and shapes
    /// are checked against a fresh layout for `config`).
    pub fn from_tensors(config: &BackboneConfig, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut w = Self::init(config, &mut Rng::new(0))?;
        let expected: Vec<(String, (usize, usize))> =
            w.tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!("expected {} backbone tensors, found {}", expected.len(), tensors.len())));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&tensors) {
            if name != got_name || *shape != got.shape() {
                return Err(Error::Format(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        for (slot, (_, m)) in w.tensors_mut().into_iter().zip(tensors) {
            *slot = m;
        }
        Ok(w)
    }

    /// Token plus positional embeddings for `tokens` placed at
    /// `start_pos..start_pos + len`.
    pub fn embed(&self, tokens: &[Token], start_pos: usize) -> Result<Matrix> {
        let d = self.config.d_model;
        if start_pos + tokens.len() > self.config.max_positions {
            return Err(Error::Capacity(format!(
                "positions up to {} exceed max_positions {}",
                start_pos + tokens.len(),
                self.config.max_positions
            )));
        }
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(Error::Parameter(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
            }
            let row = x.row_mut(i);
            row.copy_from_slice(self.tok_emb.row(t));
            row.iter_mut().zip(self.pos_emb.row(start_pos + i)).for_each(|(a, b)| *a += b);
        }
        Ok(x)
    }

    /// Raw token embeddings (no positions), one row per token.
    pub fn token_embeddings(&self, tokens: &[Token]) -> Matrix {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.tok_emb.select_rows(&idx)
    }

    /// Add positional rows `start_pos..` to externally supplied embeddings.
    pub fn position_rows(&self, emb: &Matrix, start_pos: usize) -> Result<Matrix> {
        if start_pos + emb.rows() > self.config.max_positions {
            return Err(Error::Capacity(format!(
                "positions up to {} exceed max_positions {}",
                start_pos + emb.rows(),
                self.config.max_positions
            )));
        }
        if emb.cols() != self.config.d_model {
            return Err(Error::Shape(format!("embedding width {} != d_model {}", emb.cols(), self.config.d_model)));
        }
        let mut x = emb.clone();
        for i in 0..x.rows() {
            x.row_mut(i).iter_mut().zip(self.pos_emb.row(start_pos + i)).for_each(|(a, b)| *a += b);
        }
        Ok(x)
    }

    /// Output logits for post-norm hidden rows.
    pub fn logits(&self, hidden: &Matrix) -> Matrix {
        gemm(View::of(hidden), View::of(&self.unembed)).expect("hidden width matches d_model")
    }
}

fn sinusoids(rows: usize, d: usize) -> Matrix {
    let scale = (2.0 / d as f64).sqrt();
    let mut m = Matrix::zeros(rows, d);
    for p in 0..rows {
        for (c, v) in m.row_mut(p).iter_mut().enumerate() {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
            let a = p as f64 * freq;
            *v = scale * if c % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    m
}

fn ones(n: usize) -> Matrix {
    Matrix::from_vec(1, n, vec![1.0; n]).expect("1xn")
}

/// Keys and values of one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    pub keys: Matrix,
    pub values: Matrix,
}

/// One layer of cache. Rows across heads share `positions`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub heads: Vec<HeadCache>,
    pub positions: Vec<usize>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Rows `idx` (sorted) of every head.
    pub fn select(&self, idx: &[usize]) -> LayerCache {
        LayerCache {
            heads: self
                .heads
                .iter()
                .map(|h| HeadCache { keys: h.keys.select_rows(idx), values: h.values.select_rows(idx) })
                .collect(),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
        }
    }
}

/// Per-layer, per-head keys and values with the original position of every
/// row. Layers may hold different subsets of positions after compression.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    /// Position assigned to the next appended token.
    pub next_position: usize,
}

impl KvCache {
    pub fn empty(config: &BackboneConfig) -> Self {
        let layer = LayerCache {
            heads: (0..config.n_heads)
                .map(|_| HeadCache {
                    keys: Matrix::zeros(0, config.d_head),
                    values: Matrix::zeros(0, config.d_head),
                })
                .collect(),
            positions: Vec::new(),
        };
        Self { layers: vec![layer; config.n_layers], next_position: 0 }
    }

    /// Row counts per layer.
    pub fn lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    /// Checks row counts and strictly increasing positions.
    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                if head.keys.rows() != layer.len() || head.values.rows() != layer.len() {
                    return Err(Error::Contract(format!("layer {l} head {h}: key/value rows disagree with positions")));
                }
            }
            if layer.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(format!("layer {l}: positions not strictly increasing")));
            }
            if layer.positions.last().is_some_and(|&p| p >= self.next_position) {
                return Err(Error::Contract(format!("layer {l}: position beyond next_position")));
            }
        }
        Ok(())
    }
}

/// Attention probabilities recorded during a pass: `probs[layer][head]` has
/// one row per processed query and one column per key it could see.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub probs: Vec<Vec<Matrix>>,
}

impl AttentionRecord {
    pub fn n_layers(&self) -> usize {
        self.probs.len()
    }

    pub fn n_heads(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn n_rows(&self) -> usize {
        self.probs.first().and_then(|l| l.first()).map_or(0, Matrix::rows)
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.probs
            .iter()
            .flatten()
            .flat_map(|m| m.iter_rows().map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

pub(crate) struct LayerTape {
    pub x_in: Matrix,
    pub inv_rms1: Vec<f64>,
    pub z: Matrix,
    pub q: Matrix,
    pub kfull: Vec<Matrix>,
    pub vfull: Vec<Matrix>,
    pub o: Matrix,
    pub x_mid: Matrix,
    pub inv_rms2: Vec<f64>,
    pub u: Matrix,
    pub f1: Matrix,
    pub act: Matrix,
    pub prefix_len: usize,
}

pub(crate) struct Tape {
    pub layers: Vec<LayerTape>,
    pub x_final: Matrix,
    pub inv_rms_f: Vec<f64>,
}

/// Result of running new rows through the stack.
pub struct Forward {
    /// `new_kv[layer][head]` keys/values of the new rows.
    pub new_kv: Vec<Vec<HeadCache>>,
    pub record: AttentionRecord,
    /// Post final-norm hidden states, one row per new row.
    pub hidden: Matrix,
    pub(crate) tape: Option<Tape>,
}

pub(crate) fn rms_norm(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = x.row(i);
        let ms = r.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(s);
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(r).zip(gain.as_slice()) {
            *o = v * s * g;
        }
    }
    (out, inv)
}

fn add_bias(m: &mut Matrix, b: &Matrix) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(b.as_slice()).for_each(|(a, c)| *a += c);
    }
}

impl BackboneWeights {
    /// Run `input` rows (embeddings with positions already added) on top of
    /// `prefix`. Row `i` attends to every prefix row and to new rows `0..=i`.
    pub fn forward_rows(&self, prefix: &KvCache, input: &Matrix, keep_tape: bool) -> Result<Forward> {
        let cfg = &self.config;
        let (n, d, dh) = (input.rows(), cfg.d_model, cfg.d_head);
        if input.cols() != d {
            return Err(Error::Shape(format!("input width {} != d_model {d}", input.cols())));
        }
        if prefix.layers.len() != cfg.n_layers {
            return Err(Error::Contract("cache layer count differs from backbone".into()));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = input.clone();
        let mut new_kv = Vec::with_capacity(cfg.n_layers);
        let mut probs_all = Vec::with_capacity(cfg.n_layers);
        let mut tapes = Vec::new();

        for (lw, lc) in self.layers.iter().zip(&prefix.layers) {
            let t = lc.len();
            let (z, inv_rms1) = rms_norm(&x, &lw.attn_norm);
            let q = gemm(View::of(&z), View::of(&lw.wq))?;
            let k = gemm(View::of(&z), View::of(&lw.wk))?;
            let v = gemm(View::of(&z), View::of(&lw.wv))?;
            let mut o = Matrix::zeros(n, d);
            let mut layer_kv = Vec::with_capacity(cfg.n_heads);
            let mut layer_probs = Vec::with_capacity(cfg.n_heads);
            let mut kfulls = Vec::new();
            let mut vfulls = Vec::new();
            for (h, hc) in lc.heads.iter().enumerate() {
                let kh = k.column_block(h * dh, dh);
                let vh = v.column_block(h * dh, dh);
                let kfull = hc.keys.vstack(&kh)?;
                let vfull = hc.values.vstack(&vh)?;
                let mut s = Matrix::zeros(n, t + n);
                gemm_into(scale, View::columns(&q, h * dh, dh), View::of(&kfull).t(), 0.0, &mut s, 0)?;
                for i in 0..n {
                    let row = s.row_mut(i);
                    row[t + i + 1..].fill(f64::NEG_INFINITY);
                    softmax_in_place(row, 1.0);
                }
                gemm_into(1.0, View::of(&s), View::of(&vfull), 0.0, &mut o, h * dh)?;
                layer_kv.push(HeadCache { keys: kh, values: vh });
                layer_probs.push(s);
                if keep_tape {
                    kfulls.push(kfull);
                    vfulls.push(vfull);
                }
            }
            let a = gemm(View::of(&o), View::of(&lw.wo))?;
            let x_in = if keep_tape { Some(x.clone()) } else { None };
            x.add_scaled(&a, 1.0)?;
            let (u, inv_rms2) = rms_norm(&x, &lw.ffn_norm);
            let mut f1 = gemm(View::of(&u), View::of(&lw.w1))?;
            add_bias(&mut f1, &lw.b1);
            let mut act = f1.clone();
            act.as_mut_slice().iter_mut().for_each(|v| *v = crate::numerics::gelu(*v));
            let mut f2 = gemm(View::of(&act), View::of(&lw.w2))?;
            add_bias(&mut f2, &lw.b2);
            let x_mid = if keep_tape { Some(x.clone()) } else { None };
            x.add_scaled(&f2, 1.0)?;
            if keep_tape {
                tapes.push(LayerTape {
                    x_in: x_in.unwrap(),
                    inv_rms1,
                    z,
                    q,
                    kfull: kfulls,
                    vfull: vfulls,
                    o,
                    x_mid: x_mid.unwrap(),
                    inv_rms2,
                    u,
                    f1,
                    act,
                    prefix_len: t,
                });
            }
            new_kv.push(layer_kv);
            probs_all.push(layer_probs);
        }
        let (hidden, inv_rms_f) = rms_norm(&x, &self.final_norm);
        let tape = keep_tape.then_some(Tape { layers: tapes, x_final: x, inv_rms_f });
        Ok(Forward { new_kv, record: AttentionRecord { probs: probs_all }, hidden, tape })
    }
}

/// Output of [`prefill`].
pub struct Prefill {
    /// Cache of the prompt rows only; extra rows are never written here.
    pub cache: KvCache,
    /// Attention over prompt rows followed by any extra rows.
    pub record: AttentionRecord,
    /// Post-norm hidden states for every processed row.
    pub hidden: Matrix,
    /// Logits at the last prompt row (the prediction for the next token).
    pub last_logits: Vec<f64>,
}

/// Process the prompt, optionally followed by `extra` embedding rows placed at
/// positions `L..L+k`. Extra rows see the whole prompt but are not cached.
pub fn prefill(weights: &BackboneWeights, tokens: &[Token], extra: Option<&Matrix>) -> Result<Prefill> {
    let cfg = &weights.config;
    let l = tokens.len();
    let k = extra.map_or(0, Matrix::rows);
    if l == 0 {
        return Err(Error::Parameter("empty prompt".into()));
    }
    if l + k > cfg.max_positions {
        return Err(Error::Capacity(format!("{l} prompt + {k} extra rows exceed max_positions {}", cfg.max_positions)));
    }
    let mut input = weights.embed(tokens, 0)?;
    if let Some(e) = extra {
        input = input.vstack(&weights.position_rows(e, l)?)?;
    }
    let fwd = weights.forward_rows(&KvCache::empty(cfg), &input, false)?;
    let layers = fwd
        .new_kv
        .into_iter()
        .map(|heads| LayerCache {
            heads: heads
                .into_iter()
                .map(|hc| HeadCache {
                    keys: if k == 0 { hc.keys } else { hc.keys.select_rows(&(0..l).collect::<Vec<_>>()) },
                    values: if k == 0 { hc.values } else { hc.values.select_rows(&(0..l).collect::<Vec<_>>()) },
                })
                .collect(),
            positions: (0..l).collect(),
        })
        .collect();
    let last_logits = weights.logits(&fwd.hidden.select_rows(&[l - 1])).into_vec();
    Ok(Prefill { cache: KvCache { layers, next_position: l }, record: fwd.record, hidden: fwd.hidden, last_logits })
}

/// One decode step result.
pub struct DecodeStep {
    pub logits: Vec<f64>,
    /// `probs[layer][head]`: a single row over the cache as it was plus the
    /// new token.
    pub record: AttentionRecord,
}

/// Append `token` at `cache.next_position` and return its logits.
pub fn decode_step(weights: &BackboneWeights, cache: &mut KvCache, token: Token) -> Result<DecodeStep> {
    let input = weights.embed(&[token], cache.next_position)?;
    let fwd = weights.forward_rows(cache, &input, false)?;
    for (lc, heads) in cache.layers.iter_mut().zip(fwd.new_kv) {
        for (hc, new) in lc.heads.iter_mut().zip(heads) {
            hc.keys.push_row(new.keys.row(0))?;
            hc.values.push_row(new.values.row(0))?;
        }
        lc.positions.push(cache.next_position);
    }
    cache.next_position += 1;
    Ok(DecodeStep { logits: weights.logits(&fwd.hidden).into_vec(), record: fwd.record })
}

/// `-log softmax(logits)[target]`
pub fn token_nll(logits: &[f64], target: Token) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

pub fn argmax(logits: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as Token
}

/// Mean teacher-forced NLL (nats/token) of `targets` continuing from a cache.
/// `first_logits` predicts `targets[0]` (the prefill's last-row logits);
/// every later target is predicted after decoding its predecessor.
pub fn sequence_nll(weights: &BackboneWeights, cache: &KvCache, first_logits: &[f64], targets: &[Token]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Parameter("sequence_nll needs at least one target".into()));
    }
    let mut cache = cache.clone();
    let mut total = token_nll(first_logits, targets[0]);
    for w in targets.windows(2) {
        let step = decode_step(weights, &mut cache, w[0])?;
        total += token_nll(&step.logits, w[1]);
    }
    Ok(total / targets.len() as f64)
}

/// Same quantity as [`sequence_nll`] from one monolithic pass over
/// `context ++ targets` (no cache involved).
pub fn sequence_nll_full(weights: &BackboneWeights, context: &[Token], targets: &[Token]) -> Result<f64> {
    if targets.is_empty() || context.is_empty() {
        return Err(Error::Parameter("sequence_nll_full needs context and targets".into()));
    }
    let seq: Vec<Token> = context.iter().chain(targets).copied().collect();
    let input = weights.embed(&seq[..seq.len() - 1], 0)?;
    let fwd = weights.forward_rows(&KvCache::empty(&weights.config), &input, false)?;
    let rows: Vec<usize> = (context.len() - 1..seq.len() - 1).collect();
    let logits = weights.logits(&fwd.hidden.select_rows(&rows));
    let total: f64 = targets.iter().enumerate().map(|(i, &t)| token_nll(logits.row(i), t)).sum();
    Ok(total / targets.len() as f64)
}
