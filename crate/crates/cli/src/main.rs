use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use consis4d::audit::{audit_budget, audit_flops};
use consis4d::config::{AttentionMode, BcLayout, Config, DimPreset};
use consis4d::fuser::build_bc_mask_with;
use consis4d::thinker::{build_mask, ScLayout};
use consis4d::train::{eval_seed, evaluate_closed_loop, evaluate_model, run_grad_checks, train, Checkpoint, LossRecord};
use consis4d::world::{generate_dataset, Dataset, ExpertPolicy};
use consis4d::Error;

#[derive(Parser, Debug)]
#[command(name = "consis4d", version, about = "Train, evaluate and audit the desk-scale token-efficient VLA stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config; toy defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert episodes as JSONL.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train from a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset from gen-data; generated in memory from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Per-step loss stream as JSONL.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Closed-loop evaluation of a checkpoint or of the scripted expert.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Finite-difference gradient checks on the micro configuration.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    AuditBudget {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
    },
    AuditFlops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Print an attention mask as rows of 0/1.
    MaskDump {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        layout: MaskKind,
        /// sc: ten segment counts; bc: geo per view, views, agg.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[arg(long, value_enum, default_value = "sc")]
        mode: ModeArg,
        #[arg(long)]
        per_view_causal: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskKind {
    Sc,
    Bc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Sc,
    Causal,
    Bidirectional,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sc => AttentionMode::Sc,
            ModeArg::Causal => AttentionMode::Causal,
            ModeArg::Bidirectional => AttentionMode::Bidirectional,
        }
    }
}

fn load_config(common: &Common) -> consis4d::Result<Config> {
    match &common.config {
        Some(p) => Config::load(p),
        None => Ok(Config::toy()),
    }
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> consis4d::Result<()> {
    if let Some(path) = path {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

fn preset_of(arg: &Option<String>, cfg: &Config) -> consis4d::Result<DimPreset> {
    match arg {
        Some(s) => s.parse(),
        None => Ok(cfg.audit.preset),
    }
}

fn run(cli: Cli) -> consis4d::Result<()> {
    match cli.command {
        Command::GenData { common, episodes } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(0);
            let n = episodes.unwrap_or(cfg.train.episodes);
            let data = generate_dataset(&cfg, seed, n)?;
            if let Some(out) = &common.out {
                data.save(out)?;
            }
            let steps: usize = data.episodes.iter().map(|e| e.steps.len()).sum();
            println!("generated {n} episodes ({steps} steps), seed {seed}, world {}", data.header.config_hash);
        }
        Command::Train { common, data, steps, log } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            if let Some(steps) = steps {
                cfg.train.steps = steps;
            }
            cfg.validate()?;
            let data = match &data {
                Some(p) => Dataset::load(p)?,
                None => generate_dataset(&cfg, cfg.train.seed, cfg.train.episodes)?,
            };
            let mut log_out = match &log {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            };
            let mut io_err = None;
            let every = cfg.train.log_every.max(1);
            let outcome = train(&cfg, &data, |r: &LossRecord| {
                if let Some(w) = log_out.as_mut() {
                    let line = serde_json::to_string(r).expect("loss record serializes");
                    if let Err(e) = writeln!(w, "{line}") {
                        io_err.get_or_insert(e);
                    }
                }
                if r.step % every == 0 {
                    log::info!("step {} L_total {:.5} L_action {:.5}", r.step, r.l_total, r.l_action);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            if let Some(mut w) = log_out {
                w.flush()?;
            }
            let checkpoint = Checkpoint::from_model(&outcome.model, outcome.records.len());
            if let Some(out) = &common.out {
                checkpoint.save(out)?;
            }
            match (outcome.records.first(), outcome.records.last()) {
                (Some(a), Some(b)) => println!("trained {} steps: L_total {:.5} -> {:.5}", outcome.records.len(), a.l_total, b.l_total),
                _ => println!("trained 0 steps"),
            }
        }
        Command::Eval { common, checkpoint, expert, episodes } => {
            let cfg = load_config(&common)?;
            let n = episodes.unwrap_or(cfg.train.eval_episodes);
            let seed = common.seed.unwrap_or_else(|| eval_seed(cfg.train.seed));
            let report = match checkpoint {
                Some(p) if !expert => {
                    let model = Checkpoint::load(&p)?.restore(&cfg)?;
                    evaluate_model(&model, n, seed)?
                }
                _ => evaluate_closed_loop(&mut ExpertPolicy { cfg: cfg.world.clone() }, &cfg.world, n, seed)?,
            };
            write_json(common.out.as_deref(), &report)?;
            match report.success_rate {
                Some(rate) => println!("success {}/{} ({:.3})", report.successes, report.n_episodes, rate),
                None => println!("no episodes evaluated"),
            }
        }
        Command::GradCheck { common } => {
            let cfg = match &common.config {
                Some(p) => Config::load(p)?,
                None => Config::micro(),
            };
            let summary = run_grad_checks(&cfg, common.seed.unwrap_or(0))?;
            write_json(common.out.as_deref(), &summary)?;
            for g in &summary.groups {
                println!(
                    "{:<18} {:>3} checked  max rel err {:.3e}  {}",
                    g.group.name(),
                    g.checked,
                    g.max_rel_error,
                    if g.passed { "ok" } else { "FAIL" }
                );
            }
            println!("frozen parameters zero-gradient: {}", summary.frozen_zero);
            if !summary.passed {
                return Err(Error::Eval("gradient check failed".into()));
            }
        }
        Command::AuditBudget { common, preset } => {
            let cfg = load_config(&common)?;
            let report = audit_budget(&cfg, preset_of(&preset, &cfg)?)?;
            write_json(common.out.as_deref(), &report)?;
            println!(
                "obj {} agg {} queries {} of {} ({})",
                report.obj_ratio, report.agg_ratio, report.query_tokens, report.sequence_len, report.query_share
            );
        }
        Command::AuditFlops { common, preset } => {
            let cfg = load_config(&common)?;
            let report = audit_flops(&cfg, preset_of(&preset, &cfg)?)?;
            write_json(common.out.as_deref(), &report)?;
            println!(
                "with E3D {} MACs (n={}), without {} MACs (n={}), ratio {}",
                report.with_e3d.total,
                report.with_e3d.tokens,
                report.without_e3d.total,
                report.without_e3d.tokens,
                report.ratio.map_or("n/a".to_string(), |r| format!("{r:.4}"))
            );
        }
        Command::MaskDump { common, layout, counts, mode, per_view_causal } => {
            let mask = match layout {
                MaskKind::Sc => build_mask(&ScLayout::from_slice(&counts)?, mode.into()),
                MaskKind::Bc => {
                    let [geo, views, agg] = counts[..] else {
                        return Err(Error::Contract(format!("bc layout takes 3 counts, got {}", counts.len())));
                    };
                    let kind = if per_view_causal { BcLayout::PerViewCausal } else { BcLayout::TwoBlock };
                    build_bc_mask_with(kind, geo, views, agg)
                }
            };
            let text = mask.to_string();
            match &common.out {
                Some(p) => std::fs::write(p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
