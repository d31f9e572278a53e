use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use flowdistill::cross_rank::Executor;
use flowdistill::pipeline::{self, Arm, Run};
use flowdistill::{gradcheck, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "flowdistill", version, about = "Cross-model motion distillation on synthetic clips")]
struct Cli {
    /// Config file, `default` for the built-in desk-scale config, or `smoke`
    /// for a toy-sized variant that runs in seconds.
    #[arg(long, global = true, default_value = "default")]
    config: PathBuf,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory holding the run's artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,

    /// Resize the rank table by repeating it.
    #[arg(long, global = true)]
    ranks: Option<usize>,

    /// Run rank micro-steps on threads or in a sequential loop.
    #[arg(long, global = true)]
    executor: Option<ExecutorArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExecutorArg {
    Sequential,
    Threads,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArmArg {
    Cross,
    Single,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every base model and the initial motion module.
    Pretrain,
    /// Build the ground-truth and teacher-generated datasets.
    GenData,
    /// Run the stage plan. Missing pretraining or data artifacts are built first.
    Distill {
        #[arg(long, value_enum, default_value = "cross")]
        arm: ArmArg,
    },
    /// Draw clips from the distilled student and write them as CSV.
    Sample {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        style: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Distilled vs reference distances for every evaluation style and step count.
    Eval,
    /// Cross-model vs single-model distillation on every ablation style.
    Ablate,
    /// Finite-difference check of every training loss.
    Gradcheck,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.ranks {
        cfg = cfg.with_rank_count(n)?;
    }
    if let Some(e) = cli.executor {
        cfg.executor = match e {
            ExecutorArg::Sequential => Executor::Sequential,
            ExecutorArg::Threads => Executor::Threads,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_prerequisites(run: &Run) -> anyhow::Result<()> {
    let cfg = &run.cfg;
    let have_models = run.motion_path().exists()
        && cfg.styles.iter().all(|s| run.base_path(s.style_id).exists());
    if !have_models {
        log::info!("pretrained models missing; running pretrain");
        pipeline::pretrain(run)?;
    }
    if !cfg.datasets.iter().all(|d| run.dataset_path(&d.id).exists()) {
        log::info!("datasets missing; running gen-data");
        pipeline::gen_data(run)?;
    }
    Ok(())
}

fn write_clips_csv(path: &Path, clips: &[flowdistill::Clip]) -> anyhow::Result<()> {
    let dim = clips.first().map_or(0, |c| c.dim());
    let mut s = String::from("clip,frame");
    for d in 0..dim {
        write!(s, ",x{d}")?;
    }
    s.push('\n');
    for (i, c) in clips.iter().enumerate() {
        for f in 0..c.frames() {
            write!(s, "{i},{f}")?;
            for v in c.frame(f) {
                write!(s, ",{v}")?;
            }
            s.push('\n');
        }
    }
    flowdistill::fsutil::write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Command::Gradcheck = cli.command {
        let results = gradcheck::run_all(cli.seed.unwrap_or(0))?;
        let mut ok = true;
        for r in &results {
            println!(
                "{} {:<28} coords={:<5} max_rel_err={:.3e}",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.coordinates,
                r.max_rel_error
            );
            ok &= r.passed();
        }
        return Ok(ok);
    }
    let cfg = load_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(true);
    }
    let run = Run::open(cfg, &cli.run_dir)?;
    match cli.command {
        Command::Pretrain => {
            let s = pipeline::pretrain(&run)?;
            for (style, r) in &s.bases {
                println!("base {style}: loss {:.5} -> {:.5}", r.initial_loss, r.final_loss);
            }
            println!("motion: loss {:.5} -> {:.5}", s.motion.initial_loss, s.motion.final_loss);
        }
        Command::GenData => {
            for (id, n) in pipeline::gen_data(&run)? {
                println!("dataset {id}: {n} clips");
            }
        }
        Command::Distill { arm } => {
            ensure_prerequisites(&run)?;
            let arms: &[Arm] = match arm {
                ArmArg::Cross => &[Arm::Cross],
                ArmArg::Single => &[Arm::Single],
                ArmArg::Both => &[Arm::Cross, Arm::Single],
            };
            for &a in arms {
                let start = std::time::Instant::now();
                let log = pipeline::distill(&run, a)?;
                println!(
                    "{} arm: {} updates in {:.1}s, checkpoints in {}",
                    a.name(),
                    log.len(),
                    start.elapsed().as_secs_f64(),
                    run.distill_dir(a).display()
                );
            }
        }
        Command::Sample {
            steps,
            style,
            out,
            count,
        } => {
            if count == 0 {
                bail!("--count must be >= 1");
            }
            let clips = pipeline::sample_clips(&run, style, steps, count)?;
            write_clips_csv(&out, &clips)?;
            println!("wrote {} clips to {}", clips.len(), out.display());
        }
        Command::Eval => {
            let styles = run.cfg.eval.styles.clone();
            let r = pipeline::run_main_comparison(&run, &styles, true)?;
            print!("{}", r.distilled.flat.to_csv());
            print!("{}", r.undistilled.flat.to_csv());
            print!("{}", r.undistilled_guided.flat.to_csv());
        }
        Command::Ablate => {
            let r = pipeline::run_cross_ablation(&run, true)?;
            print!("{}", r.cross.flat.to_csv());
            print!("{}", r.single.flat.to_csv());
        }
        Command::Gradcheck | Command::ShowConfig => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
