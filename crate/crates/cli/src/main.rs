use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use npinorm::phantom::{generate_records, LabelModel, PhantomConfig};
use npinorm::pipeline::run::Context;
use npinorm::pipeline::{run_pipeline, RunConfig};
use npinorm::volnet::gradcheck::gradcheck_first_smooth_point;
use npinorm::volnet::NetSpec;
use npinorm::{Error, Exec, Result};

#[derive(Parser)]
#[command(name = "npinorm", version, about = "Normative NPIQ modelling from 3D volumes: train, score DNPI, and evaluate")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). For `phantom`, a phantom configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known ground truth, plus a starter run.toml.
    Phantom(PhantomArgs),
    /// Validate the cohort table and volumes.
    Ingest,
    /// Assign subjects to train/val/test.
    Split,
    /// Train the normative model on the training split.
    Train,
    /// Score validation and test visits (writes the deviation CSV).
    Score {
        /// Permit scoring visits from the checkpoint's training manifest.
        #[arg(long)]
        allow_training_visits: bool,
    },
    /// Fit the association models (odds ratios per adjustment set).
    Assoc,
    /// Fit discrimination models on val, evaluate on test.
    Discrim,
    /// Render tables and figures from the association and discrimination JSON.
    Report,
    /// Run every stage in order.
    Run,
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 40)]
    subjects: usize,
    #[arg(long, default_value_t = 1)]
    visits: usize,
    /// Cubic volume side.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Injected DNPI for converters.
    #[arg(long, default_value_t = 2.0)]
    delta: f64,
    /// NPIQ observation noise.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0.2)]
    converter_fraction: f64,
    /// Draw labels from a logistic model in the true deviation with this slope.
    #[arg(long)]
    logistic_beta: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Random points to try before giving up on a kink-free one.
    #[arg(long, default_value_t = 20)]
    max_points: usize,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let path = g.config.as_deref().ok_or_else(|| Error::Argument("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.override_seeds(seed);
    }
    if let Some(out) = &g.out {
        cfg.paths.output_dir = out.clone();
    }
    Ok(cfg)
}

fn phantom(g: &Global, a: &PhantomArgs, exec: Exec) -> Result<()> {
    let out = g.out.as_deref().ok_or_else(|| Error::Argument("phantom needs --out".into()))?;
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<PhantomConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => {
            let seed = g.seed.ok_or_else(|| Error::Argument("phantom needs --seed (or --config)".into()))?;
            let mut c = PhantomConfig::new(a.subjects, seed);
            c.visits_per_subject = a.visits;
            c.dims = [a.size; 3];
            c.injected_deviation = a.delta;
            c.observation_noise_sigma = a.noise;
            c.converter_fraction = a.converter_fraction;
            if let Some(beta) = a.logistic_beta {
                c.label_model = LabelModel::Logistic { intercept: -1.5, beta };
            }
            c
        }
    };
    if let (Some(seed), Some(_)) = (g.seed, &g.config) {
        cfg.rng_seed = seed;
    }
    let cohort = generate_records(&cfg)?;
    cohort.write(out, exec)?;
    let run = RunConfig::example(Path::new("cohort.csv"), Path::new("volumes"), Path::new("out"), cfg.rng_seed);
    let p = out.join("run.toml");
    std::fs::write(&p, run.to_toml()?).map_err(|e| Error::io(&p, e))?;
    let converters = cohort.records.iter().filter(|r| r.label.is_converter()).count();
    println!("wrote {} visits ({converters} converter) to {}", cohort.records.len(), out.display());
    Ok(())
}

fn gradcheck(g: &Global, a: &GradcheckArgs, exec: Exec) -> Result<()> {
    let spec = NetSpec::preset(&a.preset, [a.size; 3])?;
    let (seed, report) = gradcheck_first_smooth_point(&spec, g.seed.unwrap_or(0), a.max_points, a.h, exec)?;
    println!(
        "params {}  point seed {}  max rel error {:.3e} (smooth {:.3e})  kink crossings {}  worst {} in {}",
        report.n_params,
        seed,
        report.max_rel_error,
        report.max_rel_error_smooth,
        report.kink_crossings,
        report.worst_param,
        report.worst_layer
    );
    if report.passes(a.tol) {
        println!("PASS (tol {:.0e})", a.tol);
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {:.3e} ≥ {:.0e}", report.max_rel_error, a.tol)))
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let exec = if g.sequential { Exec::Sequential } else { Exec::default() };
    match &cli.command {
        Command::Phantom(a) => return phantom(g, a, exec),
        Command::Gradcheck(a) => return gradcheck(g, a, exec),
        Command::Run => {
            let s = run_pipeline(load_config(g)?, exec)?;
            println!(
                "ok: {} visits ({} rejected), {} scored, checkpoint {}, audit clean",
                s.n_visits, s.n_rejected, s.n_scored, s.checkpoint_id
            );
            return Ok(());
        }
        _ => {}
    }
    let mut cfg = load_config(g)?;
    if let Command::Score { allow_training_visits: true } = cli.command {
        cfg.scoring.allow_training_visits = true;
    }
    let ctx = Context::new(cfg, exec)?;
    match &cli.command {
        Command::Ingest => {
            let r = ctx.ingest()?;
            println!("{} visits accepted, {} rejected, {} relabelled", r.records.len(), r.rejects.len(), r.relabeled);
            for x in &r.rejects {
                println!("  line {}: {}", x.line, x.reason);
            }
        }
        Command::Split => {
            let m = ctx.split(&ctx.ingest()?.records)?;
            for gsum in &m.groups {
                println!("{}: {} exams, achieved {:?} (target {:?})", gsum.label, gsum.exams, gsum.achieved, gsum.target);
            }
        }
        Command::Train => {
            let records = ctx.ingest()?.records;
            let (model, id) = ctx.train(&records, &ctx.load_manifest()?)?;
            println!("checkpoint {id}: best epoch {} val MSE {:.4}", model.epoch, model.best_val_loss);
        }
        Command::Score { .. } => {
            let records = ctx.ingest()?.records;
            let (model, id) = ctx.load_checkpoint()?;
            let dev = ctx.score(&records, &ctx.load_manifest()?, &model, &id)?;
            println!("scored {} visits", dev.len());
        }
        Command::Assoc => {
            let records = ctx.ingest()?.records;
            let out = ctx.associate(&ctx.load_deviation()?, &records)?;
            for r in &out.rows {
                println!("{}", npinorm::pipeline::report::table_one_row(&r.model, r.dnpi.odds_ratio, r.dnpi.ci95, r.dnpi.p_value));
            }
            for f in &out.failures {
                println!("{}: not fitted ({})", f.model, f.error);
            }
        }
        Command::Discrim => {
            let records = ctx.ingest()?.records;
            let out = ctx.discriminate(&ctx.load_deviation()?, &records, &ctx.load_manifest()?)?;
            for r in &out.reports {
                println!("{}: AUC {:.2} [{:.2}, {:.2}]  BA {:.2}  F1 {:.2}", r.model, r.auc, r.auc_ci95[0], r.auc_ci95[1], r.balanced_accuracy, r.f1);
            }
            for f in &out.failures {
                println!("{}: not fitted ({})", f.model, f.error);
            }
        }
        Command::Report => {
            let r = ctx.report(&ctx.load_association()?, &ctx.load_discrimination()?)?;
            print!("{}\n{}", r.table1_txt, r.table2_txt);
        }
        Command::Phantom(_) | Command::Gradcheck(_) | Command::Run => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
