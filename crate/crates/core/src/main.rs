use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use topogeo::curvature::Solver;
use topogeo::pipeline::{self, RunConfig};
use topogeo::synth::{Profile, SynthConfig};
use topogeo::verify;

#[derive(Parser)]
#[command(name = "topogeo", version, about = "Rank checkpoints from the geometry and topology of class-conditional embedding graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features and score every checkpoint of a bundle.
    Score(RunArgs),
    /// Train score weights on positive and negative views.
    TrainWeights(RunArgs),
    /// Rank checkpoints with every score variant against ground-truth accuracy.
    Rank(RunArgs),
    /// Score deltas of each view kind against its anchor.
    Controls(RunArgs),
    /// Retrain with objective terms or score coordinates removed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Ablation name or "all".
        #[arg(long, default_value = "all")]
        ablation: String,
    },
    /// Run the theory checks and print one line per claim.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic checkpoint family as a bundle.
    Synth(SynthArgs),
}

/// Flags shared by the run commands; unset flags fall back to the config
/// file and then to the defaults.
#[derive(Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feature cache directory.
    #[arg(long, env = "TOPOGEO_CACHE")]
    cache: Option<PathBuf>,
    /// torsion_only, ricci_only, fixed_geoscore, topology_aware_fixed or learned.
    #[arg(long)]
    variant: Option<String>,
    /// Trained weights JSON to use instead of training.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Laziness of the random walk in the curvature computation.
    #[arg(long)]
    alpha: Option<f64>,
    /// exact or sinkhorn.
    #[arg(long)]
    solver: Option<Solver>,
    #[arg(long)]
    sinkhorn_eps: Option<f64>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Views per kind, positive and negative.
    #[arg(long)]
    views_per_kind: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            k => k, per_class => per_class, seed => seed, jobs => jobs, out => out,
            variant => variant, alpha => curvature.alpha, solver => curvature.solver,
            sinkhorn_eps => curvature.sinkhorn_eps, sinkhorn_iters => curvature.sinkhorn_iters,
            steps => hyper.steps, step_size => hyper.step_size, lambda => hyper.lambda,
            margin => hyper.margin, mu => hyper.mu,
        );
        if let Some(b) = &self.bundle {
            cfg.bundle = Some(b.clone());
        }
        if let Some(c) = &self.cache {
            cfg.cache = Some(c.clone());
        }
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
        if let Some(n) = self.views_per_kind {
            cfg.views.per_positive_kind = n;
            cfg.views.per_negative_kind = n;
        }
        cfg.score_variant()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// separation_sweep or noise_sweep.
    #[arg(long, default_value = "separation_sweep")]
    profile: Profile,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    checkpoints: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Score(args) => {
            let cfg = args.resolve()?;
            let out = pipeline::cmd_score(&cfg)?;
            println!("scorer: {}", out.scorer.name());
            for (ckpt, s) in out.prepared.family.checkpoints.iter().zip(&out.scores) {
                println!("{}\t{s:.6}", ckpt.checkpoint_id);
            }
            println!("feature cache: {} hit, {} computed", out.prepared.stats.hits, out.prepared.stats.computed);
            println!("wrote {}", cfg.out.display());
        }
        Command::TrainWeights(args) => {
            let cfg = args.resolve()?;
            let out = pipeline::cmd_train_weights(&cfg)?;
            println!("w = {:?}", out.weights.w);
            if let Some(obj) = out.weights.objective_final {
                println!("objective {obj:.6}");
            }
            println!("wrote {}", cfg.out.join("weights.json").display());
        }
        Command::Rank(args) => {
            let cfg = args.resolve()?;
            let reports = pipeline::cmd_rank(&cfg)?;
            print!("{}", topogeo::eval::ranking_csv(&reports));
        }
        Command::Controls(args) => {
            let cfg = args.resolve()?;
            let out = pipeline::cmd_controls(&cfg)?;
            println!("scorer: {}", out.scorer.name());
            print!("{}", out.report.to_csv());
        }
        Command::Ablate { run, ablation } => {
            let cfg = run.resolve()?;
            let results = pipeline::cmd_ablate(&cfg, &ablation)?;
            let reports: Vec<_> = results.into_iter().map(|r| r.report).collect();
            print!("{}", topogeo::eval::ranking_csv(&reports));
        }
        Command::Verify { seed } => {
            let checks = verify::run_all(seed)?;
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            return Ok(failed == 0);
        }
        Command::Synth(a) => {
            let cfg = SynthConfig {
                seed: a.seed,
                num_checkpoints: a.checkpoints,
                num_classes: a.classes,
                dim: a.dim,
                per_class: a.per_class,
                ..SynthConfig::default()
            };
            let family = pipeline::cmd_synth(a.profile, &cfg, &a.out)
                .with_context(|| format!("writing {}", a.out.display()))?;
            println!("{}: {} checkpoints -> {}", family.family_id, family.checkpoints.len(), a.out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
