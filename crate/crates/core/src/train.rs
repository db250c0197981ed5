//! Gold attention targets, the probe loss with its analytic gradients, and
//! the two training stages (joint library + selector, then selector only).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{prefill, BackboneWeights, KvCache, Token};
use crate::error::{Error, Result};
use crate::harness::corpus::Sample;
use crate::metalib::{
    orthogonality_penalty, orthogonality_penalty_grad, prompt_features, sample_noise, synthesize, MetaConfig,
    MetaLibrary, SelectorParams,
};
use crate::numerics::{matmul_nt, matmul_tn, Matrix, Rng};
use crate::optim::{AdamW, AdamWConfig};

/// Which layers the gold and probe distributions average over:
/// `"all"`, `"last"` or a comma-separated index list such as `"0,3"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoldLayers(pub String);

impl Default for GoldLayers {
    fn default() -> Self {
        GoldLayers("all".into())
    }
}

impl GoldLayers {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        let out: Vec<usize> = match self.0.trim() {
            "all" => (0..n_layers).collect(),
            "last" => vec![n_layers.saturating_sub(1)],
            list => list
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad gold layer `{t}`"))))
                .collect::<Result<_>>()?,
        };
        if out.is_empty() || out.iter().any(|&l| l >= n_layers) {
            return Err(Error::Config(format!("gold layers `{}` invalid for {n_layers} layers", self.0)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Samples per optimizer step.
    pub batch: usize,
    pub lambda_div: f64,
    pub optimizer: AdamWConfig,
    pub gold_layers: GoldLayers,
    /// Renormalize gold over the prompt columns before the loss.
    pub renormalize_gold: bool,
    /// Set by the harness from the master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 5,
            stage2_epochs: 3,
            batch: 1,
            lambda_div: 0.01,
            optimizer: AdamWConfig::default(),
            gold_layers: GoldLayers::default(),
            renormalize_gold: false,
            seed: 0,
        }
    }
}

/// Response-to-prompt attention, one entry per prompt position.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldDistribution {
    pub values: Vec<f64>,
}

/// Teacher-force the response after the prompt and average the
/// response-to-prompt attention over heads, response rows and `layers`.
pub fn extract_gold(weights: &BackboneWeights, sample: &Sample, layers: &[usize], renormalize: bool) -> Result<GoldDistribution> {
    let l = sample.prompt.len();
    if sample.response.is_empty() {
        return Err(Error::Parameter("gold extraction needs a response".into()));
    }
    let p = prefill(weights, &sample.prompt, None)?;
    let x = weights.embed(&sample.response, l)?;
    let fwd = weights.forward_rows(&p.cache, &x, false)?;
    let mut values = vec![0.0; l];
    let mut count = 0usize;
    for &layer in layers {
        for probs in &fwd.record.probs[layer] {
            for r in probs.iter_rows() {
                values.iter_mut().zip(&r[..l]).for_each(|(v, a)| *v += a);
                count += 1;
            }
        }
    }
    values.iter_mut().for_each(|v| *v /= count as f64);
    if renormalize {
        let z: f64 = values.iter().sum();
        values.iter_mut().for_each(|v| *v /= z);
    }
    Ok(GoldDistribution { values })
}

/// Loss settings for one evaluation.
#[derive(Clone, Debug)]
pub struct LossSpec<'a> {
    pub temperature: f64,
    pub lambda_div: f64,
    pub layers: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub penalty: f64,
    /// Layer-averaged probe distribution.
    pub a_soft: Vec<f64>,
}

pub struct LossGrads {
    pub basis: Matrix,
    pub selector: SelectorParams,
}

/// Loss and analytic gradients for one prompt. `noise` is the frozen Gumbel
/// draw (`None` for the noise-free pass). `prefix` may carry the prompt's
/// cache to skip the prefill.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    library: &MetaLibrary,
    selector: &SelectorParams,
    weights: &BackboneWeights,
    prompt: &[Token],
    gold: &GoldDistribution,
    noise: Option<&Matrix>,
    spec: &LossSpec<'_>,
    prefix: Option<&KvCache>,
) -> Result<(LossValue, LossGrads)> {
    let l = prompt.len();
    if gold.values.len() != l {
        return Err(Error::Shape(format!("gold of length {} for a prompt of {l}", gold.values.len())));
    }
    let features = prompt_features(&weights.token_embeddings(prompt))?;
    let trace = selector.forward(&features, noise, spec.temperature)?;
    let soft = synthesize(library, &trace.weights)?;
    let k = soft.embeddings.rows();
    let owned;
    let cache = match prefix {
        Some(c) => c,
        None => {
            owned = prefill(weights, prompt, None)?.cache;
            &owned
        }
    };
    let input = weights.position_rows(&soft.embeddings, l)?;
    let fwd = weights.forward_rows(cache, &input, true)?;

    let n_heads = weights.config.n_heads;
    let row_w = 1.0 / (spec.layers.len() * n_heads * k) as f64;
    let mut a_soft = vec![0.0; l];
    for &layer in spec.layers {
        for p in &fwd.record.probs[layer] {
            for r in p.iter_rows() {
                let z: f64 = r[..l].iter().sum();
                a_soft.iter_mut().zip(&r[..l]).for_each(|(a, v)| *a += row_w * v / z);
            }
        }
    }
    let diff: Vec<f64> = a_soft.iter().zip(&gold.values).map(|(a, g)| a - g).collect();
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / l as f64;
    let penalty = orthogonality_penalty(library);
    let total = mse + spec.lambda_div * penalty;

    // dL/dP through restrict-then-renormalize; soft columns get nothing
    let da: Vec<f64> = diff.iter().map(|d| 2.0 * d / l as f64).collect();
    let mut d_probs: Vec<Vec<Matrix>> = fwd
        .record
        .probs
        .iter()
        .map(|heads| heads.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect())
        .collect();
    for &layer in spec.layers {
        for (p, dp) in fwd.record.probs[layer].iter().zip(d_probs[layer].iter_mut()) {
            for i in 0..p.rows() {
                let r = &p.row(i)[..l];
                let z: f64 = r.iter().sum();
                let dot: f64 = r.iter().zip(&da).map(|(v, g)| v / z * g).sum();
                for (j, o) in dp.row_mut(i)[..l].iter_mut().enumerate() {
                    *o += row_w * (da[j] - dot) / z;
                }
            }
        }
    }
    let g = weights.backward(&fwd, None, Some(&d_probs), false)?;
    let d_e = g.d_input;
    let d_w = matmul_nt(&d_e, &library.basis)?;
    let mut d_basis = matmul_tn(&trace.weights, &d_e)?;
    d_basis.add_scaled(&orthogonality_penalty_grad(library), spec.lambda_div)?;
    let d_sel = selector.backward(&features, &trace, &d_w)?;
    Ok((LossValue { total, mse, penalty, a_soft }, LossGrads { basis: d_basis, selector: d_sel }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fresh,
    JointDone,
    SelectorDone,
}

/// Trainable parameters, optimizer moments and schedule position.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub library: MetaLibrary,
    pub selector: SelectorParams,
    pub meta: MetaConfig,
    pub config: TrainConfig,
    pub stage: Stage,
    /// Optimizer steps taken so far across both stages.
    pub step: usize,
    pub temperature: f64,
    lib_opt: AdamW,
    sel_opt: AdamW,
    rng: Rng,
}

impl TrainState {
    pub fn new(d_model: usize, meta: &MetaConfig, config: &TrainConfig) -> Result<Self> {
        if meta.size > d_model {
            return Err(Error::Config(format!("library size {} exceeds d_model {d_model}", meta.size)));
        }
        if config.batch == 0 {
            return Err(Error::Config("training batch must be at least 1".into()));
        }
        let mut rng = Rng::new(config.seed);
        let library = MetaLibrary::init(meta.init, meta.size, d_model, &mut rng.fork(1))?;
        let selector = SelectorParams::init(d_model, meta.hidden, meta.k, meta.size, &mut rng.fork(2))?;
        let lib_opt = AdamW::new(config.optimizer.clone(), [library.basis.as_slice().len()]);
        let sel_opt = AdamW::new(config.optimizer.clone(), selector.tensors().map(|(_, m)| m.as_slice().len()));
        Ok(Self {
            library,
            selector,
            meta: meta.clone(),
            config: config.clone(),
            stage: Stage::Fresh,
            step: 0,
            temperature: meta.anneal.start,
            lib_opt,
            sel_opt,
            rng: rng.fork(3),
        })
    }

    pub fn penalty(&self) -> f64 {
        orthogonality_penalty(&self.library)
    }
}

/// One sampled-noise evaluation of the loss for `sample` at the state's
/// current temperature.
pub fn loss_total(
    state: &mut TrainState,
    weights: &BackboneWeights,
    sample: &Sample,
    gold: &GoldDistribution,
) -> Result<(LossValue, LossGrads)> {
    let layers = state.config.gold_layers.resolve(weights.config.n_layers)?;
    let noise = sample_noise(&state.selector, &mut state.rng);
    let spec = LossSpec { temperature: state.temperature, lambda_div: state.config.lambda_div, layers: &layers };
    loss_and_grad(&state.library, &state.selector, weights, &sample.prompt, gold, Some(&noise), &spec, None)
}

/// Epoch summary, printed as one `key=value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub penalty: f64,
    pub temperature: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} epoch={} loss={:.6e} mse={:.6e} penalty={:.6e} tau={:.4}",
            self.stage, self.epoch, self.loss, self.mse, self.penalty, self.temperature
        )
    }
}

fn golds(weights: &BackboneWeights, data: &[Sample], config: &TrainConfig) -> Result<Vec<GoldDistribution>> {
    let layers = config.gold_layers.resolve(weights.config.n_layers)?;
    data.iter().map(|s| extract_gold(weights, s, &layers, config.renormalize_gold)).collect()
}

fn run_epochs(
    state: &mut TrainState,
    weights: &BackboneWeights,
    data: &[Sample],
    epochs: usize,
    joint: bool,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Parameter("training needs a nonempty dataset".into()));
    }
    if epochs == 0 {
        return Ok(Vec::new());
    }
    let gold = golds(weights, data, &state.config)?;
    let batch = state.config.batch;
    let steps_per_epoch = data.len().div_ceil(batch);
    let total = epochs * steps_per_epoch;
    let lr = state.config.optimizer.lr;
    let mut logs = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        state.rng.shuffle(&mut order);
        let (mut sum_loss, mut sum_mse) = (0.0, 0.0);
        for (s, chunk) in order.chunks(batch).enumerate() {
            state.temperature = if joint { state.meta.anneal.at(epoch * steps_per_epoch + s, total) } else { state.meta.anneal.end };
            let mut g_basis = Matrix::zeros(state.library.size(), state.library.dim());
            let mut g_sel = state.selector.zeros_like();
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (v, g) = loss_total(state, weights, &data[i], &gold[i])?;
                sum_loss += v.total;
                sum_mse += v.mse;
                g_basis.add_scaled(&g.basis, inv)?;
                for (a, b) in g_sel.tensors_mut().into_iter().zip(g.selector.tensors()) {
                    a.add_scaled(b.1, inv)?;
                }
            }
            if joint {
                state.lib_opt.step(vec![&mut state.library.basis], &[&g_basis], lr);
            }
            let grads: Vec<&Matrix> = g_sel.tensors().iter().map(|(_, m)| *m).collect();
            state.sel_opt.step(state.selector.tensors_mut(), &grads, lr);
            state.step += 1;
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            stage: if joint { 1 } else { 2 },
            epoch: epoch + 1,
            loss: sum_loss / n,
            mse: sum_mse / n,
            penalty: state.penalty(),
            temperature: state.temperature,
        };
        log(&entry);
        logs.push(entry);
    }
    Ok(logs)
}

/// Joint optimization of library and selector with the temperature annealed
/// linearly over all steps of the stage.
pub fn train_stage1(
    state: &mut TrainState,
    weights: &BackboneWeights,
    data: &[Sample],
    epochs: usize,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let logs = run_epochs(state, weights, data, epochs, true, log)?;
    state.stage = Stage::JointDone;
    Ok(logs)
}

/// Selector-only fine-tuning with the library frozen, at the final
/// temperature.
pub fn train_stage2(
    state: &mut TrainState,
    weights: &BackboneWeights,
    data: &[Sample],
    epochs: usize,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if state.stage == Stage::Fresh {
        return Err(Error::State("selector fine-tuning requires a completed joint stage".into()));
    }
    let logs = run_epochs(state, weights, data, epochs, false, log)?;
    state.stage = Stage::SelectorDone;
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::harness::corpus::{gen_corpus, TaskKind};

    fn tiny() -> (BackboneWeights, MetaLibrary, SelectorParams) {
        let cfg = BackboneConfig::new(256, 8, 2, 2, 32).unwrap();
        let w = BackboneWeights::init(&cfg, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let lib = MetaLibrary { basis: Matrix::gaussian(4, 8, 0.7, &mut rng) };
        let sel = SelectorParams::init(8, 5, 2, 4, &mut rng).unwrap();
        (w, lib, sel)
    }

    #[test]
    fn gold_matches_triple_loop_oracle() {
        let (w, _, _) = tiny();
        let s = &gen_corpus(TaskKind::Needle, 1, 9, 3).unwrap()[0];
        let got = extract_gold(&w, s, &[0, 1], false).unwrap();
        let seq: Vec<Token> = s.prompt.iter().chain(&s.response).copied().collect();
        let full = prefill(&w, &seq, None).unwrap();
        let (l, r) = (s.prompt.len(), s.response.len());
        for j in 0..l {
            let mut acc = 0.0;
            for layer in 0..2 {
                for h in 0..2 {
                    for i in 0..r {
                        acc += full.record.probs[layer][h][(l + i, j)];
                    }
                }
            }
            assert!((got.values[j] - acc / (2 * 2 * r) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn renormalized_gold_sums_to_one() {
        let (w, _, _) = tiny();
        let s = &gen_corpus(TaskKind::Needle, 1, 9, 3).unwrap()[0];
        let g = extract_gold(&w, s, &[1], true).unwrap();
        assert!((g.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let raw = extract_gold(&w, s, &[1], false).unwrap();
        assert!(raw.values.iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn gold_layers_parse() {
        assert_eq!(GoldLayers("all".into()).resolve(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(GoldLayers("last".into()).resolve(3).unwrap(), vec![2]);
        assert_eq!(GoldLayers("0, 2".into()).resolve(3).unwrap(), vec![0, 2]);
        assert!(GoldLayers("3".into()).resolve(3).is_err());
        assert!(GoldLayers("x".into()).resolve(3).is_err());
    }

    #[test]
    fn loss_is_zero_when_probe_matches_gold_without_penalty() {
        let (w, lib, sel) = tiny();
        let prompt: Vec<Token> = (150..156).collect();
        let spec = LossSpec { temperature: 1.0, lambda_div: 0.0, layers: &[0, 1] };
        let dummy = GoldDistribution { values: vec![0.0; 6] };
        let (v, _) = loss_and_grad(&lib, &sel, &w, &prompt, &dummy, None, &spec, None).unwrap();
        let gold = GoldDistribution { values: v.a_soft.clone() };
        let (z, _) = loss_and_grad(&lib, &sel, &w, &prompt, &gold, None, &spec, None).unwrap();
        assert_eq!(z.total, 0.0);
        let two = LossSpec { lambda_div: 0.2, ..spec.clone() };
        let (t, _) = loss_and_grad(&lib, &sel, &w, &prompt, &gold, None, &two, None).unwrap();
        let one = LossSpec { lambda_div: 0.1, ..spec };
        let (o, _) = loss_and_grad(&lib, &sel, &w, &prompt, &gold, None, &one, None).unwrap();
        assert!((t.total - o.total - 0.1 * o.penalty).abs() < 1e-15);
    }

    #[test]
    fn stage_two_before_stage_one_is_a_state_error() {
        let (w, _, _) = tiny();
        let meta = MetaConfig { size: 4, k: 2, hidden: 5, ..Default::default() };
        let mut st = TrainState::new(8, &meta, &TrainConfig::default()).unwrap();
        let data = gen_corpus(TaskKind::Needle, 2, 8, 1).unwrap();
        assert!(matches!(train_stage2(&mut st, &w, &data, 1, &mut |_| {}), Err(Error::State(_))));
    }

    #[test]
    fn zero_epochs_leave_the_state_unchanged() {
        let (w, _, _) = tiny();
        let meta = MetaConfig { size: 4, k: 2, hidden: 5, ..Default::default() };
        let mut st = TrainState::new(8, &meta, &TrainConfig::default()).unwrap();
        let before = (st.library.clone(), st.selector.clone());
        let data = gen_corpus(TaskKind::Needle, 2, 8, 1).unwrap();
        assert!(train_stage1(&mut st, &w, &data, 0, &mut |_| {}).unwrap().is_empty());
        assert_eq!((st.library.clone(), st.selector.clone()), before);
    }

    #[test]
    fn stages_are_deterministic_and_stage_two_freezes_the_library() {
        let (w, _, _) = tiny();
        let meta = MetaConfig { size: 4, k: 2, hidden: 5, ..Default::default() };
        let cfg = TrainConfig { optimizer: AdamWConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
        let data = gen_corpus(TaskKind::Needle, 6, 10, 1).unwrap();
        let run = || {
            let mut st = TrainState::new(8, &meta, &cfg).unwrap();
            train_stage1(&mut st, &w, &data, 2, &mut |_| {}).unwrap();
            st
        };
        let (a, mut b) = (run(), run());
        assert_eq!(a.library, b.library);
        assert_eq!(a.selector, b.selector);
        let lib = b.library.clone();
        let sel = b.selector.clone();
        let logs = train_stage2(&mut b, &w, &data, 2, &mut |_| {}).unwrap();
        assert_eq!(b.library, lib);
        assert_ne!(b.selector, sel);
        assert_eq!(logs[0].penalty, logs[1].penalty);
        assert_eq!(b.stage, Stage::SelectorDone);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (w, lib, sel) = tiny();
        let prompt: Vec<Token> = vec![1, 150, 20, 90, 160, 170];
        let gold = GoldDistribution { values: vec![0.05, 0.1, 0.4, 0.3, 0.1, 0.05] };
        let noise = sample_noise(&sel, &mut Rng::new(7));
        let spec = LossSpec { temperature: 0.8, lambda_div: 0.3, layers: &[0, 1] };
        let f = |lib: &MetaLibrary, sel: &SelectorParams| {
            loss_and_grad(lib, sel, &w, &prompt, &gold, Some(&noise), &spec, None).unwrap().0.total
        };
        let (_, g) = loss_and_grad(&lib, &sel, &w, &prompt, &gold, Some(&noise), &spec, None).unwrap();
        let h = 1e-5;
        for idx in 0..lib.basis.as_slice().len() {
            let (mut p, mut m) = (lib.clone(), lib.clone());
            p.basis.as_mut_slice()[idx] += h;
            m.basis.as_mut_slice()[idx] -= h;
            let fd = (f(&p, &sel) - f(&m, &sel)) / (2.0 * h);
            let an = g.basis.as_slice()[idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "basis[{idx}] fd {fd} an {an}");
        }
        let gs: Vec<Matrix> = g.selector.tensors().iter().map(|(_, m)| (*m).clone()).collect();
        for (t, gt) in gs.iter().enumerate() {
            for idx in 0..gt.as_slice().len() {
                let (mut p, mut m) = (sel.clone(), sel.clone());
                p.tensors_mut()[t].as_mut_slice()[idx] += h;
                m.tensors_mut()[t].as_mut_slice()[idx] -= h;
                let fd = (f(&lib, &p) - f(&lib, &m)) / (2.0 * h);
                let an = gt.as_slice()[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "selector {t}[{idx}] fd {fd} an {an}");
            }
        }
    }
}
