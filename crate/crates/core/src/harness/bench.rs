//! End-to-end evaluation: prefill once per sample (with soft tokens when a
//! trained library is present), compress with each method and budget, then
//! score the answer by decoding on the compressed cache.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::backbone::{argmax, decode_step, prefill, token_nll, BackboneWeights, KvCache, Prefill};
use crate::baselines::{
    h2o_policy, mean_merge_policy, random_policy, snapkv_policy, streaming_policy, Compressed, Policy, DEFAULT_SINK,
    DEFAULT_SNAP_POOL, DEFAULT_SNAP_WINDOW,
};
use crate::consolidate::{consolidate, FlowConfig, FlowPlan};
use crate::error::{Error, Result};
use crate::harness::checkpoint::MetaCheckpoint;
use crate::harness::config::{RunConfig, Stream};
use crate::harness::corpus::{gen_corpus, Sample, TaskKind};
use crate::metalib::{prompt_features, synthesize};
use crate::numerics::{Matrix, Rng};
use crate::probe::{partition_recent, probe_scores, scores_from_rows, ImportanceScores};
use crate::train::extract_gold;

/// Arms of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    /// Last prompt rows as probes, hard eviction.
    Neither,
    /// Soft-token probes, hard eviction.
    DstOnly,
    /// Last prompt rows as probes, flow consolidation.
    AfaOnly,
    /// Soft-token probes, flow consolidation.
    DstAfa,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Neither, Arm::DstOnly, Arm::AfaOnly, Arm::DstAfa];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Neither => "neither",
            Arm::DstOnly => "dst-only",
            Arm::AfaOnly => "afa-only",
            Arm::DstAfa => "dst+afa",
        }
    }

    fn soft_probes(self) -> bool {
        matches!(self, Arm::DstOnly | Arm::DstAfa)
    }

    fn gamma(self) -> f64 {
        match self {
            Arm::Neither | Arm::DstOnly => 0.0,
            Arm::AfaOnly | Arm::DstAfa => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Policy(Policy),
    Ablation(Arm),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Policy(p) => write!(f, "{p}"),
            Method::Ablation(a) => write!(f, "ablation:{}", a.name()),
        }
    }
}

/// Frozen pieces shared by every sample.
pub struct Pipeline<'a> {
    pub weights: &'a BackboneWeights,
    pub meta: Option<&'a MetaCheckpoint>,
    pub flow: FlowConfig,
    pub force_recent: usize,
    pub surrogate_window: usize,
    pub gold_layers: Vec<usize>,
    pub renormalize_gold: bool,
    /// Base seed of the random policy.
    pub random_seed: u64,
}

impl<'a> Pipeline<'a> {
    pub fn from_config(cfg: &RunConfig, weights: &'a BackboneWeights, meta: Option<&'a MetaCheckpoint>) -> Result<Self> {
        Ok(Self {
            weights,
            meta,
            flow: cfg.flow,
            force_recent: cfg.bench.force_recent,
            surrogate_window: cfg.bench.surrogate_window,
            gold_layers: cfg.train.gold_layers.resolve(weights.config.n_layers)?,
            renormalize_gold: cfg.train.renormalize_gold,
            random_seed: cfg.stream_seed(Stream::RandomPolicy),
        })
    }

    /// Soft-token embeddings for a prompt (deterministic selection).
    pub fn soft_tokens(&self, prompt: &[u32]) -> Result<Option<Matrix>> {
        let Some(meta) = self.meta else { return Ok(None) };
        let features = prompt_features(&self.weights.token_embeddings(prompt))?;
        let trace = meta.selector.forward(&features, None, meta.temperature)?;
        Ok(Some(synthesize(&meta.library, &trace.weights)?.embeddings))
    }

    pub fn prepare(&self, sample: &Sample) -> Result<Prepared> {
        let start = Instant::now();
        let soft = self.soft_tokens(&sample.prompt)?;
        let pre = prefill(self.weights, &sample.prompt, soft.as_ref())?;
        let prefill_ms = start.elapsed().as_secs_f64() * 1e3;
        let gold = extract_gold(self.weights, sample, &self.gold_layers, self.renormalize_gold)?.values;
        let k = soft.map_or(0, |s| s.rows());
        Ok(Prepared { pre, k, gold, prefill_ms })
    }

    fn need_soft(&self, prep: &Prepared, what: &str) -> Result<()> {
        if self.meta.is_none() || prep.k == 0 {
            return Err(Error::State(format!("{what} needs a trained library checkpoint")));
        }
        Ok(())
    }

    fn flow_compress(&self, cache: &KvCache, scores: &ImportanceScores, budget: usize, gamma: f64) -> Result<(Compressed, FlowPlan)> {
        let part = partition_recent(cache, scores, budget, self.force_recent.min(budget))?;
        let (out, plan) = consolidate(&part, &FlowConfig { gamma, ..self.flow })?;
        Ok((Compressed { cache: out, importance: scores.mean_over(&[]) }, plan))
    }

    /// Compress the prepared cache. `stream` individualizes the random policy
    /// per sample.
    pub fn compress(&self, prep: &Prepared, method: &Method, budget: usize, stream: u64) -> Result<(Compressed, Option<FlowPlan>)> {
        let cache = &prep.pre.cache;
        let record = &prep.pre.record;
        let l = cache.next_position;
        let plain = |c: Compressed| Ok((c, None));
        match method {
            Method::Policy(p) => match p.name.as_str() {
                "full" => plain(Compressed { cache: cache.clone(), importance: vec![1.0 / l as f64; l] }),
                "meta-soft" => {
                    self.need_soft(prep, "meta-soft")?;
                    let scores = probe_scores(record, l, prep.k)?;
                    let gamma = p.param_f64("gamma", self.flow.gamma)?;
                    let (c, plan) = self.flow_compress(cache, &scores, budget, gamma)?;
                    Ok((c, Some(plan)))
                }
                "h2o" => plain(h2o_policy(cache, record, budget)?),
                "streaming" => plain(streaming_policy(cache, budget, p.param_usize("sink", DEFAULT_SINK)?)?),
                "snapkv" => {
                    let w = p.param_usize("window", DEFAULT_SNAP_WINDOW)?.min(l);
                    plain(snapkv_policy(cache, record, budget, w, p.param_usize("pool", DEFAULT_SNAP_POOL)?)?)
                }
                "random" => {
                    let seed = self.random_seed ^ p.param_usize("seed", 0)? as u64;
                    plain(random_policy(cache, budget, &mut Rng::new(seed).fork(stream))?)
                }
                "mean-merge" => {
                    self.need_soft(prep, "mean-merge")?;
                    plain(mean_merge_policy(cache, record, budget, prep.k)?)
                }
                other => Err(Error::Config(format!("unknown policy `{other}`"))),
            },
            Method::Ablation(arm) => {
                let scores = if arm.soft_probes() {
                    self.need_soft(prep, arm.name())?;
                    probe_scores(record, l, prep.k)?
                } else {
                    let w = self.surrogate_window.min(l);
                    scores_from_rows(record, l - w..l, l)?
                };
                let (c, plan) = self.flow_compress(cache, &scores, budget, arm.gamma())?;
                Ok((c, Some(plan)))
            }
        }
    }
}

/// A sample after prefill, before any compression.
pub struct Prepared {
    pub pre: Prefill,
    /// Soft tokens appended during prefill.
    pub k: usize,
    pub gold: Vec<f64>,
    pub prefill_ms: f64,
}

/// Teacher-forced pass over the response on `cache`: mean answer-token NLL
/// and whether greedy decoding reproduces the whole answer.
pub fn score_answer(weights: &BackboneWeights, cache: &KvCache, first_logits: &[f64], sample: &Sample) -> Result<(f64, bool)> {
    let mut cache = cache.clone();
    let mut logits = first_logits.to_vec();
    let (mut nll, mut hit) = (0.0, true);
    for (i, &t) in sample.response.iter().enumerate() {
        if i >= sample.answer_start {
            nll += token_nll(&logits, t);
            hit &= argmax(&logits) == t;
        }
        if i + 1 < sample.response.len() {
            logits = decode_step(weights, &mut cache, t)?.logits;
        }
    }
    Ok((nll / sample.answer().len() as f64, hit))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// One report line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub policy: String,
    pub task: String,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub accuracy: f64,
    pub nll_delta: f64,
    pub attn_mse: f64,
    pub prefill_ms: Option<f64>,
    pub decode_ms_per_tok: Option<f64>,
}

pub const CSV_HEADER: &str = "policy,task,L,B,accuracy,nll_delta,attn_mse,prefill_ms,decode_ms_per_tok";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.3}"))
}

impl ReportRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6e},{},{}",
            self.policy,
            self.task,
            self.l,
            self.b,
            self.accuracy,
            self.nll_delta,
            self.attn_mse,
            opt(self.prefill_ms),
            opt(self.decode_ms_per_tok)
        )
    }
}

#[derive(Clone, Copy, Default)]
struct Acc {
    hits: usize,
    nll_delta: f64,
    attn_mse: f64,
    prefill_ms: f64,
    decode_ms: f64,
    decode_tokens: usize,
}

struct SampleResult {
    cells: Vec<Acc>,
}

fn run_sample(p: &Pipeline<'_>, sample: &Sample, methods: &[Method], budgets: &[usize], stream: u64) -> Result<SampleResult> {
    let prep = p.prepare(sample)?;
    let l = sample.prompt.len();
    let t0 = Instant::now();
    let (full_nll, _) = score_answer(p.weights, &prep.pre.cache, &prep.pre.last_logits, sample)?;
    let full_decode_ms = t0.elapsed().as_secs_f64() * 1e3;
    let steps = sample.response.len() - 1;
    let mut cells = Vec::with_capacity(methods.len() * budgets.len());
    for m in methods {
        for &b in budgets {
            let is_full = matches!(m, Method::Policy(p) if p.name == "full");
            let t0 = Instant::now();
            let (c, _) = p.compress(&prep, m, b, stream)?;
            let compress_ms = t0.elapsed().as_secs_f64() * 1e3;
            let want = if is_full { l } else { b.min(l) };
            if c.cache.lens().iter().any(|&n| n != want) {
                return Err(Error::Contract(format!("{m} returned {:?} rows for budget {want}", c.cache.lens())));
            }
            let t1 = Instant::now();
            let (nll, hit) = if is_full {
                (full_nll, score_answer(p.weights, &c.cache, &prep.pre.last_logits, sample)?.1)
            } else {
                score_answer(p.weights, &c.cache, &prep.pre.last_logits, sample)?
            };
            let decode_ms = if is_full { full_decode_ms } else { t1.elapsed().as_secs_f64() * 1e3 };
            cells.push(Acc {
                hits: hit as usize,
                nll_delta: nll - full_nll,
                attn_mse: mse(&c.importance, &prep.gold),
                prefill_ms: prep.prefill_ms + compress_ms,
                decode_ms,
                decode_tokens: steps,
            });
        }
    }
    Ok(SampleResult { cells })
}

/// Evaluation grid.
pub struct Grid<'g> {
    pub methods: &'g [Method],
    pub budgets: &'g [usize],
    pub tasks: &'g [TaskKind],
    pub lengths: &'g [usize],
    pub samples: usize,
    pub seed: u64,
    pub timing: bool,
    pub jobs: usize,
}

/// Seed of the evaluation corpus for one (task, length).
pub fn eval_corpus(seed: u64, task: TaskKind, l: usize, samples: usize) -> Result<Vec<Sample>> {
    gen_corpus(task, samples, l, seed.wrapping_add(l as u64))
}

fn run_parallel(p: &Pipeline<'_>, corpus: &[Sample], grid: &Grid<'_>, base_stream: u64) -> Result<Vec<SampleResult>> {
    let jobs = grid.jobs.max(1).min(corpus.len());
    let work = |t: usize| -> Result<Vec<(usize, SampleResult)>> {
        (t..corpus.len())
            .step_by(jobs)
            .map(|i| Ok((i, run_sample(p, &corpus[i], grid.methods, grid.budgets, base_stream + i as u64)?)))
            .collect()
    };
    let mut all: Vec<(usize, SampleResult)> = if jobs == 1 {
        work(0)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs).map(|t| s.spawn(move || work(t))).collect();
            let mut out = Vec::new();
            for h in handles {
                out.extend(h.join().expect("worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    all.sort_by_key(|(i, _)| *i);
    Ok(all.into_iter().map(|(_, r)| r).collect())
}

/// Run every (task, length, method, budget) cell.
pub fn evaluate(p: &Pipeline<'_>, grid: &Grid<'_>) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (ti, &task) in grid.tasks.iter().enumerate() {
        for &l in grid.lengths {
            let corpus = eval_corpus(grid.seed, task, l, grid.samples)?;
            let base = ((ti as u64) << 40) + ((l as u64) << 20);
            let results = run_parallel(p, &corpus, grid, base)?;
            let n = results.len() as f64;
            for (mi, m) in grid.methods.iter().enumerate() {
                for (bi, &b) in grid.budgets.iter().enumerate() {
                    let idx = mi * grid.budgets.len() + bi;
                    let mut acc = Acc::default();
                    for r in &results {
                        let c = &r.cells[idx];
                        acc.hits += c.hits;
                        acc.nll_delta += c.nll_delta;
                        acc.attn_mse += c.attn_mse;
                        acc.prefill_ms += c.prefill_ms;
                        acc.decode_ms += c.decode_ms;
                        acc.decode_tokens += c.decode_tokens;
                    }
                    let is_full = matches!(m, Method::Policy(p) if p.name == "full");
                    rows.push(ReportRow {
                        policy: m.to_string(),
                        task: task.name().to_string(),
                        l,
                        b: if is_full { l } else { b.min(l) },
                        accuracy: acc.hits as f64 / n,
                        nll_delta: acc.nll_delta / n,
                        attn_mse: acc.attn_mse / n,
                        prefill_ms: grid.timing.then(|| acc.prefill_ms / n),
                        decode_ms_per_tok: grid.timing.then(|| acc.decode_ms / acc.decode_tokens.max(1) as f64),
                    });
                }
            }
        }
    }
    // full-cache rows repeat per budget; keep one
    rows.dedup_by(|a, b| a.policy == b.policy && a.task == b.task && a.l == b.l && a.b == b.b);
    Ok(rows)
}

pub fn policy_methods(cfg: &RunConfig) -> Result<Vec<Method>> {
    Ok(cfg.bench.parsed_policies()?.into_iter().map(Method::Policy).collect())
}

pub fn ablation_methods() -> Vec<Method> {
    Arm::ALL.iter().map(|&a| Method::Ablation(a)).collect()
}

/// Benchmark grid from the config.
pub fn bench_grid<'g>(cfg: &'g RunConfig, methods: &'g [Method], jobs: usize) -> Grid<'g> {
    Grid {
        methods,
        budgets: &cfg.bench.budgets,
        tasks: &cfg.bench.tasks,
        lengths: &cfg.bench.lengths,
        samples: cfg.bench.samples,
        seed: cfg.stream_seed(Stream::Eval),
        timing: cfg.bench.timing,
        jobs,
    }
}

#[derive(Serialize)]
struct ReportMeta<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    version: &'static str,
    timing: bool,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    meta: ReportMeta<'a>,
    rows: &'a [ReportRow],
}

/// Write `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_report(dir: &Path, stem: &str, command: &str, cfg: &RunConfig, rows: &[ReportRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = Vec::new();
    writeln!(csv, "{CSV_HEADER}").unwrap();
    for r in rows {
        writeln!(csv, "{}", r.csv()).unwrap();
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let json = ReportJson {
        meta: ReportMeta {
            command,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION"),
            timing: cfg.bench.timing,
        },
        rows,
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&json).expect("report serializes");
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::metalib::{MetaLibrary, SelectorParams};

    fn setup() -> (BackboneWeights, MetaCheckpoint) {
        let cfg = BackboneConfig::new(256, 16, 2, 2, 128).unwrap();
        let w = BackboneWeights::init(&cfg, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let meta = MetaCheckpoint {
            library: MetaLibrary::orthonormal(8, 16, &mut rng).unwrap(),
            selector: SelectorParams::init(16, 8, 2, 8, &mut rng).unwrap(),
            temperature: 0.1,
        };
        (w, meta)
    }

    fn pipeline<'a>(w: &'a BackboneWeights, meta: Option<&'a MetaCheckpoint>) -> Pipeline<'a> {
        Pipeline {
            weights: w,
            meta,
            flow: FlowConfig::default(),
            force_recent: 0,
            surrogate_window: 8,
            gold_layers: vec![0, 1],
            renormalize_gold: false,
            random_seed: 9,
        }
    }

    fn all_methods() -> Vec<Method> {
        let mut m: Vec<Method> = crate::baselines::POLICY_NAMES.iter().map(|n| Method::Policy(Policy::parse(n).unwrap())).collect();
        m.extend(ablation_methods());
        m
    }

    #[test]
    fn full_cache_has_zero_delta_and_full_budget_changes_nothing() {
        let (w, meta) = setup();
        let p = pipeline(&w, Some(&meta));
        let methods = all_methods();
        let grid = Grid {
            methods: &methods,
            budgets: &[8, 40],
            tasks: &[TaskKind::Needle],
            lengths: &[40],
            samples: 3,
            seed: 4,
            timing: false,
            jobs: 1,
        };
        let rows = evaluate(&p, &grid).unwrap();
        let full = rows.iter().find(|r| r.policy == "full").unwrap();
        assert_eq!(full.nll_delta, 0.0);
        assert_eq!(full.b, 40);
        for r in rows.iter().filter(|r| r.b == 40) {
            assert_eq!(r.nll_delta, 0.0, "{}", r.policy);
            assert_eq!(r.accuracy, full.accuracy, "{}", r.policy);
        }
        assert!(rows.iter().filter(|r| r.b == 8).count() == methods.len() - 1);
        assert!(rows.iter().all(|r| r.prefill_ms.is_none()));
    }

    #[test]
    fn jobs_do_not_change_results() {
        let (w, meta) = setup();
        let p = pipeline(&w, Some(&meta));
        let methods = all_methods();
        let mut grid = Grid {
            methods: &methods,
            budgets: &[6],
            tasks: &[TaskKind::KvRecall],
            lengths: &[32],
            samples: 5,
            seed: 1,
            timing: false,
            jobs: 1,
        };
        let a = evaluate(&p, &grid).unwrap();
        grid.jobs = 3;
        assert_eq!(a, evaluate(&p, &grid).unwrap());
    }

    #[test]
    fn surrogate_arm_runs_without_a_checkpoint() {
        let (w, _) = setup();
        let p = pipeline(&w, None);
        let s = &gen_corpus(TaskKind::Needle, 1, 30, 0).unwrap()[0];
        let prep = p.prepare(s).unwrap();
        assert_eq!(prep.k, 0);
        assert!(p.compress(&prep, &Method::Ablation(Arm::Neither), 8, 0).is_ok());
        assert!(matches!(p.compress(&prep, &Method::Ablation(Arm::DstOnly), 8, 0), Err(Error::State(_))));
    }

    #[test]
    fn dst_only_arm_is_meta_soft_without_consolidation() {
        let (w, meta) = setup();
        let p = pipeline(&w, Some(&meta));
        let s = &gen_corpus(TaskKind::Copy, 1, 30, 0).unwrap()[0];
        let prep = p.prepare(s).unwrap();
        let a = p.compress(&prep, &Method::Ablation(Arm::DstOnly), 8, 0).unwrap().0;
        let b = p.compress(&prep, &Method::Policy(Policy::parse("meta-soft:gamma=0").unwrap()), 8, 0).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rows_have_fixed_columns() {
        let r = ReportRow {
            policy: "h2o".into(),
            task: "needle".into(),
            l: 64,
            b: 8,
            accuracy: 0.5,
            nll_delta: 0.25,
            attn_mse: 1e-4,
            prefill_ms: None,
            decode_ms_per_tok: None,
        };
        assert_eq!(r.csv(), "h2o,needle,64,8,0.500000,0.250000,1.000000e-4,,");
        assert_eq!(CSV_HEADER.split(',').count(), r.csv().split(',').count());
    }
}
