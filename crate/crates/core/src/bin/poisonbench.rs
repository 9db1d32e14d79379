use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use poisonbench::harness::config::parse_overrides;
use poisonbench::harness::{
    cmd_ablate, cmd_attack, cmd_deviation, cmd_eval, cmd_sweep, cmd_synth, cmd_train, record_timing, AblationOutput,
    ExperimentConfig, HarnessError, Workspace,
};

#[derive(Parser)]
#[command(name = "poisonbench", version, about = "Targeted content poisoning of news recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for independent runs (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Any config key as `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as MIND files.
    Synth(Common),
    /// Fit the offline ensemble and the online model.
    Train(Common),
    /// Run one method over the target list.
    Attack(Common),
    /// Score stored sequences by retraining both systems.
    Eval(Common),
    /// Budget by horizon grid of MRR gains.
    Sweep(Common),
    /// HS or risk ablation.
    Ablate(Common),
    /// Online minus offline gain per method.
    Deviation(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut over = parse_overrides(&c.overrides)?;
    if let Some(j) = c.jobs {
        over.push(("jobs".into(), j.to_string()));
    }
    Ok(ExperimentConfig::from_file(&c.config, &over)?)
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Train(c)
            | Command::Attack(c)
            | Command::Eval(c)
            | Command::Sweep(c)
            | Command::Ablate(c)
            | Command::Deviation(c) => c,
        }
    }

    /// Row label in timings.csv.
    fn stage(&self, cfg: &ExperimentConfig) -> String {
        match self {
            Command::Synth(_) => "synth".into(),
            Command::Train(_) => "train".into(),
            Command::Attack(_) => format!("attack:{}", cfg.method),
            Command::Eval(_) => "eval".into(),
            Command::Sweep(_) => "sweep".into(),
            Command::Ablate(_) => format!("ablate:{}", cfg.ablate),
            Command::Deviation(_) => "deviation".into(),
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = load(cli.command.common())?;
    let start = std::time::Instant::now();
    execute(&cli.command, &cfg)?;
    record_timing(&cfg, &cli.command.stage(&cfg), start.elapsed().as_secs_f64())
}

fn execute(command: &Command, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    match command {
        Command::Synth(_) => {
            let dir = cmd_synth(cfg)?;
            println!("corpus written to {}", dir.display());
        }
        Command::Train(_) => {
            let ws = Workspace::load(cfg)?;
            cmd_train(&ws)?;
            println!("models written to {}", ws.out("models").display());
        }
        Command::Attack(_) => {
            let ws = Workspace::load(cfg)?;
            let method = ws.cfg.method;
            let start = std::time::Instant::now();
            let runs = cmd_attack(&ws, method)?;
            let gains: Vec<f64> = runs.iter().map(|r| r.episode.gain).collect();
            println!(
                "{method}: {} targets, mean estimated gain {:+.4}, {:.1}s",
                runs.len(),
                gains.iter().sum::<f64>() / gains.len().max(1) as f64,
                start.elapsed().as_secs_f64()
            );
        }
        Command::Eval(_) => {
            let ws = Workspace::load(cfg)?;
            let out = cmd_eval(&ws)?;
            print!("{}", std::fs::read_to_string(ws.out("eval/results.md")).unwrap_or_default());
            let t = out.timing;
            println!(
                "timing: {} samples, estimate {:.2} ms, retrain {:.1} ms, speedup {:.1}x",
                t.samples,
                1e3 * t.estimate_secs / t.samples.max(1) as f64,
                1e3 * t.retrain_secs / t.samples.max(1) as f64,
                t.speedup()
            );
        }
        Command::Sweep(_) => {
            let ws = Workspace::load(cfg)?;
            for cell in cmd_sweep(&ws)? {
                println!("budget {} horizon {} gain {:+.4}", cell.budget, cell.horizon, cell.mrr_gain);
            }
        }
        Command::Ablate(_) => {
            let ws = Workspace::load(cfg)?;
            match cmd_ablate(&ws, ws.cfg.ablate)? {
                AblationOutput::Hs(ab) => {
                    for (v, _) in &ab.final_gains {
                        println!("{v}: final gain {:+.4}", ab.mean_final(*v));
                    }
                }
                AblationOutput::Risk(rows) => {
                    for r in rows {
                        println!(
                            "{} {}: {} perturbations, top-popularity {:.2}, top-similarity {:.2}",
                            r.rule.name(),
                            r.mode,
                            r.perturbations,
                            r.popularity[0],
                            r.similarity[0]
                        );
                    }
                }
            }
        }
        Command::Deviation(_) => {
            let ws = Workspace::load(cfg)?;
            for r in cmd_deviation(&ws)? {
                println!("{}: deviation {:+.5}", r.method, r.deviation());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
