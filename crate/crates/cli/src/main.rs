use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use posegen_cli::commands::{eval, gen_data, generate, inspect, sweep, train};
use posegen_cli::config::Settings;
use posegen_cli::exit_code;
use posegen_core::Result;

#[derive(Parser)]
#[command(name = "posegen", version, about = "Pose-conditioned video generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every command accepts. Precedence: built-in defaults, then the
/// config file, then `--set` pairs, then dedicated flags.
#[derive(Args)]
struct Common {
    /// Flat key=value config file ('#' starts a comment).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of stick-figure scenes.
    GenData {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Frame size as HxW.
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the base or stitch adapters.
    Train {
        #[arg(long)]
        role: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path; the loss curve and resolved config go next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a long video from a reference scene and a driving scene.
    Generate {
        /// Scene directory supplying the reference image and caption.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Scene directory supplying the pose and hand track.
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        stitch: Option<PathBuf>,
        /// k_t,k_l or "default"; 0,0 disables sharing.
        #[arg(long)]
        gate: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute a run's metrics from its written frames.
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
        /// Write the metrics CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print cache statistics and draw source masks as a heat image.
    Inspect {
        #[arg(long)]
        cache: Option<PathBuf>,
        /// 1-based layer; 0 averages all cached layers.
        #[arg(long)]
        layer: Option<usize>,
        /// 1-based timestep; 0 averages all cached timesteps.
        #[arg(long)]
        timestep: Option<usize>,
        /// Heat image path (PPM).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate once per (k_t, k_l) gate cell and tabulate the metrics.
    Sweep {
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        stitch: Option<PathBuf>,
        /// Comma-separated k_t values or "auto".
        #[arg(long)]
        k_t: Option<String>,
        /// Comma-separated k_l values or "auto".
        #[arg(long)]
        k_l: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn layered(mut s: Settings, common: &Common) -> Result<Settings> {
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    s.apply_pairs(&common.set)?;
    Ok(s)
}

fn show(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { scenes, frames, size, seed, out, common } => {
            let mut s = layered(gen_data::defaults(), &common)?;
            s.set_opt("scenes", scenes)?;
            s.set_opt("frames", frames)?;
            s.set_opt("size", size)?;
            s.set_opt("seed", seed)?;
            s.set_opt("out", show(&out))?;
            let dir = gen_data::run(&s)?;
            println!("wrote {} scenes to {}", s.raw("scenes"), dir.display());
        }
        Command::Train { role, data, steps, seed, out, common } => {
            let mut s = layered(train::defaults(), &common)?;
            s.set_opt("role", role)?;
            s.set_opt("data", show(&data))?;
            s.set_opt("steps", steps)?;
            s.set_opt("seed", seed)?;
            s.set_opt("out", show(&out))?;
            let r = train::run(&s)?;
            match (r.initial_loss, r.final_loss) {
                (Some(a), Some(b)) => println!(
                    "trained {} adapters for {} steps: smoothed loss {a:.4} -> {b:.4}",
                    r.checkpoint.role, r.checkpoint.step
                ),
                _ => println!("wrote initial {} checkpoint", r.checkpoint.role),
            }
        }
        Command::Generate { reference, poses, length, base, stitch, gate, seed, out, common } => {
            let mut s = layered(generate::defaults(), &common)?;
            s.set_opt("ref", show(&reference))?;
            s.set_opt("poses", show(&poses))?;
            s.set_opt("length", length)?;
            s.set_opt("base", show(&base))?;
            s.set_opt("stitch", show(&stitch))?;
            s.set_opt("gate", gate)?;
            s.set_opt("seed", seed)?;
            s.set_opt("out", show(&out))?;
            let (dir, r) = generate::run(&s)?;
            println!(
                "wrote {} frames from {} segments to {} (cache {} entries, {} bytes)",
                r.long.video.num_frames(),
                r.plan.segments.len(),
                dir.display(),
                r.long.cache.len(),
                r.long.cache.bytes()
            );
        }
        Command::Eval { run, out, common } => {
            let mut s = layered(eval::defaults(), &common)?;
            s.set_opt("run", show(&run))?;
            s.set_opt("out", show(&out))?;
            let r = eval::run(&s)?;
            if s.opt_path("out").is_none() {
                print!("{}", r.csv);
            }
            if let Some(d) = r.max_diff {
                eprintln!("max difference to the run's metrics.csv: {d:e}");
            }
        }
        Command::Inspect { cache, layer, timestep, out, common } => {
            let mut s = layered(inspect::defaults(), &common)?;
            s.set_opt("cache", show(&cache))?;
            s.set_opt("layer", layer)?;
            s.set_opt("timestep", timestep)?;
            s.set_opt("out", show(&out))?;
            print!("{}", inspect::run(&s)?);
        }
        Command::Sweep { reference, poses, length, base, stitch, k_t, k_l, seed, out, common } => {
            let mut s = layered(sweep::defaults(), &common)?;
            s.set_opt("ref", show(&reference))?;
            s.set_opt("poses", show(&poses))?;
            s.set_opt("length", length)?;
            s.set_opt("base", show(&base))?;
            s.set_opt("stitch", show(&stitch))?;
            s.set_opt("k_t", k_t)?;
            s.set_opt("k_l", k_l)?;
            s.set_opt("seed", seed)?;
            s.set_opt("out", show(&out))?;
            let (dir, cells) = sweep::run(&s)?;
            print!("{}", sweep::sweep_csv(&cells));
            println!("wrote {}", dir.join(sweep::SWEEP_FILE).display());
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("POSEGEN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| posegen_core::Error::Config(format!("POSEGEN_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| posegen_core::Error::Internal(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("posegen: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
