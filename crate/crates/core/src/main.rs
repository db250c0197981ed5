use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metasoft::baselines::Policy;
use metasoft::harness::bench::{ablation_methods, bench_grid, eval_corpus, evaluate, policy_methods, write_report, Method, Pipeline};
use metasoft::harness::checkpoint::{load_backbone, load_meta, save_backbone, save_meta, MetaCheckpoint};
use metasoft::harness::config::{RunConfig, Stream};
use metasoft::harness::corpus::TaskKind;
use metasoft::harness::{backbone_ceiling, pretrain_backbone, train_metalib};
use metasoft::probe::probe_scores;
use metasoft::Error;

#[derive(Parser)]
#[command(name = "metasoft", version, about = "Soft-token probing and flow consolidation for KV-cache compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration (defaults apply to missing keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Artifacts {
    /// Backbone checkpoint (default: <out>/backbone.ckpt)
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Trained library checkpoint (default: <out>/metalib.ckpt)
    #[arg(long)]
    metalib: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the evaluation corpora as JSON lines
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the backbone and write backbone.ckpt
    PretrainBackbone {
        #[command(flatten)]
        common: Common,
    },
    /// Run both training stages and write metalib checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
    },
    /// Evaluate every configured policy and write report.csv / report.json
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        /// Worker threads over samples
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate the four ablation arms and write ablation.csv / ablation.json
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print probe scores and gold attention for one sample
    Inspect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long, default_value = "needle")]
        task: String,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Budget (default: first configured budget)
        #[arg(long)]
        budget: Option<usize>,
        /// Prompt length (default: first configured length)
        #[arg(long)]
        length: Option<usize>,
        /// Write the meta-soft flow plan here
        #[arg(long)]
        dump_flow: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> metasoft::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> metasoft::Result<&Path> {
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

fn backbone_path(common: &Common, a: &Artifacts) -> PathBuf {
    a.backbone.clone().unwrap_or_else(|| common.out.join("backbone.ckpt"))
}

fn meta_path(common: &Common, a: &Artifacts) -> PathBuf {
    a.metalib.clone().unwrap_or_else(|| common.out.join("metalib.ckpt"))
}

fn write_text(path: &Path, text: &str) -> metasoft::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn needs_meta(methods: &[Method]) -> bool {
    methods.iter().any(|m| match m {
        Method::Policy(p) => p.name == "meta-soft" || p.name == "mean-merge",
        Method::Ablation(_) => true,
    })
}

fn run(cli: Cli) -> metasoft::Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common)?;
            let seed = cfg.stream_seed(Stream::Eval);
            for &task in &cfg.bench.tasks {
                for &l in &cfg.bench.lengths {
                    let corpus = eval_corpus(seed, task, l, cfg.bench.samples)?;
                    let mut text = String::new();
                    for s in &corpus {
                        text += &serde_json::to_string(s).expect("sample serializes");
                        text.push('\n');
                    }
                    write_text(&dir.join(format!("{}-L{l}.jsonl", task.name())), &text)?;
                }
            }
        }
        Command::PretrainBackbone { common } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common)?;
            let mut lines = Vec::new();
            let weights = pretrain_backbone(&cfg, &mut |line| {
                eprintln!("{line}");
                lines.push(line);
            })?;
            for (task, l, acc) in backbone_ceiling(&cfg, &weights, 50)? {
                let line = format!("ceiling task={} L={l} accuracy={acc:.3}", task.name());
                eprintln!("{line}");
                lines.push(line);
            }
            save_backbone(&dir.join("backbone.ckpt"), &weights)?;
            write_text(&dir.join("pretrain.log"), &(lines.join("\n") + "\n"))?;
        }
        Command::Train { common, artifacts } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common)?;
            let weights = load_backbone(&backbone_path(&common, &artifacts))?;
            if weights.config != cfg.backbone {
                return Err(Error::Config("backbone checkpoint does not match the configured backbone".into()));
            }
            let mut lines = Vec::new();
            let trained = train_metalib(&cfg, &weights, &mut |e| {
                eprintln!("{e}");
                lines.push(e.to_string());
            })?;
            save_meta(&dir.join("metalib-stage1.ckpt"), &trained.after_stage1)?;
            save_meta(&meta_path(&common, &artifacts), &trained.checkpoint())?;
            write_text(&dir.join("train.log"), &(lines.join("\n") + "\n"))?;
        }
        Command::Bench { common, artifacts, jobs } => {
            let cfg = load_config(&common)?;
            let methods = policy_methods(&cfg)?;
            run_grid(&cfg, &common, &artifacts, &methods, jobs, "report", "bench")?;
        }
        Command::Ablate { common, artifacts, jobs } => {
            let cfg = load_config(&common)?;
            let methods = ablation_methods();
            run_grid(&cfg, &common, &artifacts, &methods, jobs, "ablation", "ablate")?;
        }
        Command::Inspect { common, artifacts, task, sample, budget, length, dump_flow } => {
            let cfg = load_config(&common)?;
            let task = TaskKind::parse(&task)?;
            let l = length.unwrap_or(cfg.bench.lengths[0]);
            let b = budget.unwrap_or(cfg.bench.budgets[0]);
            let weights = load_backbone(&backbone_path(&common, &artifacts))?;
            let meta = load_meta(&meta_path(&common, &artifacts))?;
            let p = Pipeline::from_config(&cfg, &weights, Some(&meta))?;
            let corpus = eval_corpus(cfg.stream_seed(Stream::Eval), task, l, sample + 1)?;
            let s = &corpus[sample];
            let prep = p.prepare(s)?;
            let scores = probe_scores(&prep.pre.record, l, prep.k)?;
            let mean = scores.mean_over(&[]);
            let mut out = std::io::stdout().lock();
            let io = |e| Error::io("stdout", e);
            writeln!(out, "task={} L={l} B={b} payload={:?}", task.name(), s.payload_positions).map_err(io)?;
            writeln!(out, "position,token,a_soft,a_gold").map_err(io)?;
            for j in 0..l {
                writeln!(out, "{j},{},{:.6e},{:.6e}", s.prompt[j], mean[j], prep.gold[j]).map_err(io)?;
            }
            let (_, plan) = p.compress(&prep, &Method::Policy(Policy::parse("meta-soft")?), b, 0)?;
            if let (Some(path), Some(plan)) = (dump_flow, plan) {
                let mut buf = Vec::new();
                plan.dump(&mut buf).map_err(|e| Error::io(&path, e))?;
                std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

fn run_grid(
    cfg: &RunConfig,
    common: &Common,
    artifacts: &Artifacts,
    methods: &[Method],
    jobs: usize,
    stem: &str,
    command: &str,
) -> metasoft::Result<()> {
    let dir = out_dir(common)?;
    let weights = load_backbone(&backbone_path(common, artifacts))?;
    let meta: Option<MetaCheckpoint> = if needs_meta(methods) { Some(load_meta(&meta_path(common, artifacts))?) } else { None };
    let p = Pipeline::from_config(cfg, &weights, meta.as_ref())?;
    let rows = evaluate(&p, &bench_grid(cfg, methods, jobs))?;
    write_report(dir, stem, command, cfg, &rows)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 3,
            })
        }
    }
}
