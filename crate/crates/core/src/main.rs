use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use lpt_seqopt::dso::{rank_score, Dso, RunOutcome, RunReport};
use lpt_seqopt::harness::config::RunConfig;
use lpt_seqopt::harness::eval::{evaluate, EvalReport};
use lpt_seqopt::harness::experiment::{self, Prepared, Variant};
use lpt_seqopt::model::checkpoint::{Checkpoint, Dtype};
use lpt_seqopt::oracles::{brute_force, LandscapeParams, Oracle, OracleDef};
use lpt_seqopt::seqcore::{encode, format_dataset, load_dataset, write_atomic, LabeledSample, TokenSeq};
use lpt_seqopt::{Error, Result};

#[derive(Parser)]
#[command(name = "lpt-seqopt", version, about = "Latent prompt transformer sequence optimizer")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the oracle query budget.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    PriorSampling,
    UniformWeights,
    SingleIteration,
    FrozenPrior,
    LambdaSweep,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Table,
    SmoothHash,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the decoder and prior on offline sequences.
    Pretrain(RunArgs),
    /// Train all parts on offline sequences with labels.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run the online optimization loop.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue the run checkpointed in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a run report or a labeled dataset.
    Evaluate {
        /// `report.json` from `optimize`, or a `sequence<TAB>score` file.
        #[arg(long)]
        input: PathBuf,
        /// Oracle definition; needed for dataset files, optional for reports.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full method next to one or more ablated variants.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        variant: AblationArg,
        /// Guidance weights for the lambda sweep.
        #[arg(long, value_delimiter = ',', default_values_t = Variant::LAMBDAS)]
        lambdas: Vec<f64>,
    },
    /// Write an oracle definition file, optionally with its full score table.
    MakeOracle {
        #[arg(long, value_enum, default_value = "table")]
        kind: OracleKind,
        #[arg(long, default_value_t = 8)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "ACGT")]
        alphabet: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write every sequence with its scores.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Enumerate a tabulable oracle and print its exact optimum.
    BruteForce {
        #[arg(long)]
        oracle: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LPT_SEQOPT_LOG", "warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain(run) => for_each_seed(&run, "pretrain", |cfg, seed, dir| {
            let mut pre = cfg.clone();
            pre.finetune.epochs = 0;
            let p = experiment::prepare(&pre, seed, Some(dir))?;
            save_model(&p, seed, dir)
        }),
        Cmd::Finetune { run, init } => for_each_seed(&run, "finetune", |cfg, seed, dir| {
            let p = prepare_with(cfg, seed, dir, init.as_deref())?;
            save_model(&p, seed, dir)
        }),
        Cmd::Optimize { run, init, resume } => {
            if let Some(rdir) = resume {
                return resume_run(&run, &rdir);
            }
            for_each_seed(&run, "optimize", |cfg, seed, dir| {
                let p = prepare_with(cfg, seed, dir, init.as_deref())?;
                let mut c = cfg.clone();
                if c.dso.checkpoint_dir.is_none() {
                    c.dso.checkpoint_dir = Some(dir.join("checkpoint"));
                }
                let out = experiment::optimize(&c, &p, seed)?;
                write_outcome(&c, &out, dir)
            })
        }
        Cmd::Ablate { run, variant, lambdas } => {
            let variants: Vec<Variant> = match variant {
                AblationArg::PriorSampling => vec![Variant::PriorSampling],
                AblationArg::UniformWeights => vec![Variant::UniformWeights],
                AblationArg::SingleIteration => vec![Variant::SingleIteration],
                AblationArg::FrozenPrior => vec![Variant::FrozenPrior],
                AblationArg::LambdaSweep => lambdas.iter().map(|&l| Variant::Lambda(l)).collect(),
                AblationArg::All => Variant::ABLATIONS.to_vec(),
            };
            let mut all = vec![Variant::Full];
            all.extend(variants.into_iter().filter(|v| *v != Variant::Full));
            for_each_seed(&run, "ablate", |cfg, seed, dir| {
                let mut summary = Vec::new();
                for (v, out) in experiment::run_variants(cfg, &all, seed)? {
                    let mut c = cfg.clone();
                    v.apply(&mut c);
                    let vdir = dir.join(v.name());
                    write_outcome(&c, &out, &vdir)?;
                    let last = out.report.iterations.last();
                    summary.push(json!({
                        "variant": v.name(),
                        "best": out.report.best_ever.as_ref().map(|b| b.score),
                        "final_buffer_top_k_mean": last.map(|it| it.mean_top_k),
                        "final_proposal_top_k_mean": last.map(|it| it.proposal_top_k_mean),
                        "queries_used": out.report.queries_used,
                    }));
                }
                let text = serde_json::to_string_pretty(&summary)?;
                println!("{text}");
                write_atomic(&dir.join("ablation.json"), text.as_bytes())
            })
        }
        Cmd::Evaluate { input, oracle, budget, out } => {
            let report = evaluate_file(&input, oracle.as_deref(), budget)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            match out {
                Some(p) => write_atomic(&p, text.as_bytes()),
                None => Ok(()),
            }
        }
        Cmd::MakeOracle { kind, length, seed, alphabet, out, table } => {
            let mut params = LandscapeParams::new(length, seed);
            params.alphabet = alphabet;
            let def = match kind {
                OracleKind::Table => OracleDef::Table(params),
                OracleKind::SmoothHash => OracleDef::SmoothHash(params),
            };
            let oracle = Oracle::from_def(&def)?;
            write_atomic(&out, serde_json::to_string_pretty(&def)?.as_bytes())?;
            if let Some(path) = table {
                let rows: Vec<LabeledSample> = lpt_seqopt::oracles::enumerate_space(oracle.vocab())?
                    .into_iter()
                    .map(|x| {
                        let y = oracle.peek(&x);
                        LabeledSample::oracle(x, y)
                    })
                    .collect();
                write_atomic(&path, format_dataset(&rows, oracle.vocab()).as_bytes())?;
            }
            Ok(())
        }
        Cmd::BruteForce { oracle } => {
            let o = Oracle::load(&oracle)?;
            let cons = o.constraints();
            let bf = brute_force(&o, |y| cons.iter().all(|c| c.holds(y)).then_some(y[0]))?;
            let out = json!({
                "size": bf.size,
                "max": bf.max,
                "argmax": bf.argmax,
                "min": bf.min,
                "top_0.1pct_threshold": bf.top_fraction_threshold(0.001),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
    }
}

/// Loads the config, applies overrides, and runs `f` once per seed in its
/// own output directory after writing the resolved config there.
fn for_each_seed<F>(run: &RunArgs, command: &str, mut f: F) -> Result<()>
where
    F: FnMut(&RunConfig, u64, &Path) -> Result<()>,
{
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(b) = run.budget {
        cfg.dso.oracle_budget = b;
    }
    if let Some(o) = &run.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let seeds = match run.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    for seed in seeds {
        let dir = cfg.out_dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut echo = cfg.clone();
        echo.seeds = vec![seed];
        echo.out_dir = dir.clone();
        write_atomic(&dir.join("config.json"), echo.to_json()?.as_bytes())?;
        let meta = json!({
            "command": command,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "argv": std::env::args().collect::<Vec<_>>(),
        });
        write_atomic(&dir.join("run.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        log::info!("{command}: seed {seed} -> {}", dir.display());
        f(&echo, seed, &dir)?;
    }
    Ok(())
}

fn prepare_with(cfg: &RunConfig, seed: u64, dir: &Path, init: Option<&Path>) -> Result<Prepared> {
    match init {
        None => experiment::prepare(cfg, seed, Some(dir)),
        Some(path) => {
            let oracle = Oracle::from_def(&cfg.oracle)?;
            let offline = experiment::build_offline(&cfg.offline, &oracle, seed)?;
            let mut model = Checkpoint::load(path)?.to_model()?;
            let labeled = experiment::standardize(&offline, &experiment::constraints_for(&cfg.dso, &oracle));
            let log = dir.join("finetune_metrics.jsonl");
            experiment::train(&mut model, &labeled, &cfg.finetune, &cfg.posterior, seed + 1, Some(&log))?;
            Ok(Prepared { offline, model })
        }
    }
}

fn save_model(p: &Prepared, seed: u64, dir: &Path) -> Result<()> {
    Checkpoint::from_model(&p.model, seed).save(dir.join("model.ckpt"), Dtype::F32)
}

fn write_outcome(cfg: &RunConfig, out: &RunOutcome, dir: &Path) -> Result<()> {
    out.report.save(dir)?;
    let vocab = out.model.vocab();
    out.state.buffer.save_snapshot(&dir.join("buffer.tsv"), vocab, out.state.t)?;
    Checkpoint::from_model(&out.model, out.report.seed).save(dir.join("model.ckpt"), Dtype::F32)?;
    let oracle = Oracle::from_def(&cfg.oracle)?;
    let samples: Vec<(TokenSeq, f64)> = out.state.buffer.entries().iter().map(|e| (e.sample.x.clone(), e.score)).collect();
    let eval = evaluate(
        &samples,
        primary_range(&oracle),
        Some((&out.report.query_scores, cfg.dso.oracle_budget as usize)),
        Some(out.report.queries_used),
    )?;
    write_atomic(&dir.join("eval.json"), serde_json::to_string_pretty(&eval)?.as_bytes())
}

fn resume_run(run: &RunArgs, rdir: &Path) -> Result<()> {
    let cfg = RunConfig::load(&run.config)?;
    let oracle = Oracle::from_def(&cfg.oracle)?;
    let mut dso = Dso::resume(rdir, &oracle)?;
    dso.run_to_end()?;
    let out = dso.into_outcome();
    let dir = run.out.clone().unwrap_or_else(|| rdir.parent().unwrap_or(rdir).to_path_buf());
    write_outcome(&cfg, &out, &dir)
}

fn primary_range(oracle: &Oracle) -> Option<(f64, f64)> {
    oracle.range().and_then(|r| r.first().copied())
}

fn evaluate_report(report: &RunReport, oracle: &Oracle, budget: Option<u64>) -> Result<EvalReport> {
    let samples = report
        .top_k
        .iter()
        .map(|s| Ok((encode(&s.sequence, oracle.vocab())?, s.score)))
        .collect::<Result<Vec<(TokenSeq, f64)>>>()?;
    let budget = budget.unwrap_or(report.config.oracle_budget) as usize;
    evaluate(
        &samples,
        primary_range(oracle),
        Some((&report.query_scores, budget)),
        Some(report.queries_used),
    )
}

fn evaluate_file(input: &Path, oracle: Option<&Path>, budget: Option<u64>) -> Result<EvalReport> {
    if input.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
        let report: RunReport = serde_json::from_str(&text)?;
        let o = match (oracle, &report.oracle) {
            (Some(p), _) => Oracle::load(p)?,
            (None, Some(def)) => Oracle::from_def(&serde_json::from_value(def.clone())?)?,
            (None, None) => return Err(Error::Config("report has no oracle definition; pass --oracle".into())),
        };
        return evaluate_report(&report, &o, budget);
    }
    let path = oracle.ok_or_else(|| Error::Config("dataset files need --oracle for the vocabulary".into()))?;
    let o = Oracle::load(path)?;
    let cons = o.constraints();
    let samples: Vec<(TokenSeq, f64)> = load_dataset(input, o.vocab())?
        .into_iter()
        .map(|s| {
            let score = rank_score(&s.y, &cons);
            (s.x, score)
        })
        .collect();
    evaluate(&samples, primary_range(&o), None, None)
}
