use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morefree::buffer::ReplayBuffer;
use morefree::envs::{EnvId, EnvSpec};
use morefree::explore::Variant;
use morefree::harness::{
    ablate, emit_heatmap, load_agent_into, train, train_verbose, ExperimentConfig, Trainer,
};
use morefree::Error;

#[derive(Parser)]
#[command(
    name = "morefree",
    version,
    about = "Reset-free model-based RL experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate the checkpoint of a finished run.
    Eval {
        /// Run directory holding config.toml and checkpoint/.
        run_dir: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Render a visitation heatmap from a buffer dump.
    Heatmap {
        buffer_dir: PathBuf,
        #[arg(long, default_value = "umaze")]
        env: EnvId,
        #[arg(long, default_value_t = 40)]
        resolution: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "heatmap")]
        stem: String,
    },
    /// Run the ablation suite over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of seeds, starting from the configured one.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        quiet: bool,
    },
    /// Print the wall layout of an environment.
    Gridcheck {
        #[arg(long)]
        env: Option<EnvId>,
        #[arg(long, default_value_t = 40)]
        resolution: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    config: PathBuf,
    /// Override any key, e.g. `--set agent.batch=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    env: Option<EnvId>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> morefree::Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("run.seed", self.seed.map(|s| s.to_string()));
        push("run.env", self.env.map(|e| format!("\"{e}\"")));
        push("run.variant", self.variant.map(|v| format!("\"{v}\"")));
        push("run.total_env_steps", self.steps.map(|s| s.to_string()));
        push("output.dir", self.out.as_ref().map(|p| toml_str(p)));
        ExperimentConfig::load(&self.config, &overrides)
    }
}

fn toml_str(p: &Path) -> String {
    toml_quote(&p.display().to_string())
}

fn toml_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn run(cli: Cli) -> morefree::Result<()> {
    match cli.command {
        Command::Run { cfg, quiet } => {
            let cfg = cfg.load()?;
            let dir = cfg.output.dir.clone();
            let s = if quiet {
                train(cfg)?
            } else {
                train_verbose(cfg)?
            };
            println!(
                "{} {} seed {}: success {:.3}  return {:.3}  task-relevant {:.3}  -> {}",
                s.env,
                s.variant,
                s.seed,
                s.final_success,
                s.final_return,
                s.task_relevant_fraction,
                dir.display()
            );
        }
        Command::Eval { run_dir, episodes } => {
            let mut cfg = ExperimentConfig::load(&run_dir.join("config.toml"), &[])?;
            if let Some(n) = episodes {
                cfg.run.eval_episodes = n;
            }
            let mut t = Trainer::new(cfg)?;
            if t.cfg.run.variant.trains() {
                load_agent_into(&mut t.agent, &run_dir.join("checkpoint"))?;
            }
            let r = t.evaluate();
            println!(
                "success {:.3}  return {:.4}",
                r.mean_success, r.mean_discounted_return
            );
        }
        Command::Heatmap {
            buffer_dir,
            env,
            resolution,
            out,
            stem,
        } => {
            let buffer = ReplayBuffer::load(&buffer_dir)?;
            let spec = EnvSpec::new(env);
            let files = emit_heatmap(
                &buffer,
                &spec,
                &spec.task_relevant_boxes(),
                resolution,
                &out,
                &stem,
            )?;
            println!(
                "{}\n{}\n{}",
                files.csv.display(),
                files.pgm.display(),
                files.fraction.display()
            );
        }
        Command::Ablate { cfg, seeds, quiet } => {
            let base = cfg.load()?;
            let seeds: Vec<u64> = (0..seeds).map(|k| base.run.seed + k).collect();
            let (table, _) = ablate(&base, &Variant::ABLATIONS, &seeds, !quiet)?;
            print!("{}", table.summary_text());
        }
        Command::Gridcheck { env, resolution } => {
            if resolution == 0 {
                return Err(Error::Config("resolution must be positive".into()));
            }
            let ids = env.map_or(EnvId::ALL.to_vec(), |e| vec![e]);
            for id in ids {
                println!("# {id}");
                print!("{}", EnvSpec::new(id).render_grid(resolution));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
