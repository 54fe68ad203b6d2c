use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdm::commands::{self, default_grid, parse_cells, EvalPair};
use sdm::config::RunConfig;
use sdm_core::metrics::Pairing;

#[derive(Parser)]
#[command(name = "sdm", version, about = "Stackelberg driver model: pretraining, game training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Each one sets the config key of the same name
/// (dashes become underscores); `--set key=value` reaches every other key.
#[derive(Args, Default)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed(s), comma separated.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// `synthetic` or a scenario CSV file.
    #[arg(long)]
    scenarios: Option<String>,
    #[arg(long)]
    vehicle_count: Option<String>,
    /// Any config key, e.g. `--set batch_size=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the AV with SAC against rule-based BVs.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Pretraining environment steps.
        #[arg(long)]
        steps: Option<String>,
        /// Extra checkpoints at these total step counts, comma separated.
        #[arg(long)]
        checkpoint_marks: Option<String>,
    },
    /// Game training from a pretrained AV (or non-game SAC).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["sdm", "simgm", "nsg", "isdm", "non-game"])]
        mode: Option<String>,
        /// Aggressiveness regularization scale.
        #[arg(long)]
        beta: Option<String>,
        /// AV:BV policy updates per round, e.g. 5:1.
        #[arg(long)]
        freq_ratio: Option<String>,
        /// Pretrained checkpoint; `{seed}` expands to each seed.
        #[arg(long)]
        pretrained: Option<String>,
        #[arg(long)]
        game_steps: Option<String>,
        #[arg(long)]
        checkpoint_marks: Option<String>,
        /// Continue from a checkpoint instead of starting a run.
        #[arg(long, conflicts_with_all = ["mode", "pretrained"])]
        resume: Option<PathBuf>,
        /// With --resume: stop at this total step count.
        #[arg(long, requires = "resume")]
        until: Option<u64>,
    },
    /// Cross-test checkpoints and write metric tables.
    Eval {
        #[command(flatten)]
        common: Common,
        /// AV checkpoint(s); pairs with --bv by position.
        #[arg(long, required = true)]
        av: Vec<PathBuf>,
        /// BV checkpoint(s), or `rule` for rule-based BVs. Defaults to rule.
        #[arg(long)]
        bv: Vec<String>,
        #[arg(long, value_parser = ["pretrained_av_vs_rl_bv", "rl_av_vs_rule_bv", "rl_av_vs_rl_bv"])]
        pairing: Option<String>,
        #[arg(long)]
        eval_episodes: Option<String>,
    },
    /// Pretrain, train and evaluate an SDM grid over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Cells as beta@f_av:f_bv, comma separated. Defaults to the seven SDM cells.
        #[arg(long)]
        cells: Option<String>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        game_steps: Option<String>,
    },
}

fn build(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<RunConfig, String> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    let named = [("seeds", &common.seed), ("out", &common.out), ("scenarios", &common.scenarios), ("vehicle_count", &common.vehicle_count)];
    for (k, v) in named.iter().chain(flags) {
        if let Some(v) = v {
            cfg.set(k, v).map_err(|e| e.to_string())?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v).map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

fn report(written: &[commands::Written]) {
    for w in written {
        println!("seed {} step {} {} sha256 {}", w.seed, w.total_steps, w.path.display(), w.digest);
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let s = |e: commands::CommandError| e.to_string();
    match cli.command {
        Command::Pretrain { common, steps, checkpoint_marks } => {
            let cfg = build(&common, &[("steps", &steps), ("checkpoint_marks", &checkpoint_marks)])?;
            report(&commands::pretrain(&cfg).map_err(s)?);
        }
        Command::Train { common, mode, beta, freq_ratio, pretrained, game_steps, checkpoint_marks, resume, until } => {
            let out = match resume {
                Some(path) => commands::resume(&path, until).map_err(s)?,
                None => {
                    let cfg = build(
                        &common,
                        &[
                            ("mode", &mode),
                            ("beta", &beta),
                            ("freq_ratio", &freq_ratio),
                            ("pretrained", &pretrained),
                            ("game_steps", &game_steps),
                            ("checkpoint_marks", &checkpoint_marks),
                        ],
                    )?;
                    let (resolved, _) = commands::resolve_mode(&cfg);
                    let g = resolved.effective_game();
                    println!(
                        "mode {} leader {} beta {} freq_ratio {}:{}",
                        resolved.mode.as_str(),
                        g.leader.as_str(),
                        g.beta,
                        g.f_av,
                        g.f_bv
                    );
                    commands::train(&cfg).map_err(s)?
                }
            };
            for n in &out.notes {
                eprintln!("note: {n}");
            }
            report(&out.checkpoints);
        }
        Command::Eval { common, av, bv, pairing, eval_episodes } => {
            let cfg = build(&common, &[("eval_episodes", &eval_episodes)])?;
            if !bv.is_empty() && bv.len() != av.len() {
                return Err(format!("got {} --av and {} --bv; give one --bv per --av (or none for rule BVs)", av.len(), bv.len()));
            }
            let pairs: Vec<EvalPair> = av
                .iter()
                .enumerate()
                .map(|(i, a)| EvalPair { av: a.clone(), bv: bv.get(i).filter(|b| b.as_str() != "rule").map(PathBuf::from) })
                .collect();
            let pairing = pairing.as_deref().and_then(Pairing::parse);
            let out = commands::eval(&cfg, &pairs, pairing).map_err(s)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for r in &out.rows {
                let m = &r.report;
                println!(
                    "{} seed {} step {}: av_cr {:.4} bv_cr {:.4} cps {:.6} cpm {:.6} episodes {}",
                    m.pairing.as_str(),
                    r.seed,
                    r.checkpoint_step,
                    m.av_cr,
                    m.bv_cr,
                    m.cps,
                    m.cpm,
                    m.episodes
                );
            }
            println!("wrote {}", cfg.out.join("metrics.csv").display());
        }
        Command::Ablate { common, cells, jobs, steps, game_steps } => {
            let cfg = build(&common, &[("steps", &steps), ("game_steps", &game_steps)])?;
            let cells = match cells {
                Some(c) => parse_cells(&c).map_err(|e| e.to_string())?,
                None => default_grid(),
            };
            let rows = commands::ablate(&cfg, &cells, jobs).map_err(s)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!("wrote {} rows to {} ({failed} failed)", rows.len(), cfg.out.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
