//! `ubmf` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use ubmf::datagen::{self, DatasetManifest};
use ubmf::perturb::PerturbSpec;
use ubmf::pipeline::{report, Pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "ubmf",
    version,
    about = "Few-shot fault diagnosis with uncertainty-aware Bayesian meta-learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// Manifest JSON; the default synthetic manifest when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the manifest seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply a list of perturbation specs to every sample of a dataset file.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        /// JSON array of {kind, strength, params, seed}.
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-label propagation and contrastive training of the encoder.
    TrainSsl(StageArgs),
    /// Train the Dirichlet filter head on encoder features.
    TrainFilter(StageArgs),
    /// Fit the classifier prior.
    FitPrior(StageArgs),
    /// Episodic evaluation; writes metrics and CSV artifacts.
    Evaluate(StageArgs),
    /// All stages in order.
    Run(StageArgs),
    /// Print the summary of a finished run.
    Report { run_dir: PathBuf },
}

#[derive(Args)]
struct StageArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reuse checkpoints whose configuration matches.
    #[arg(long)]
    resume: bool,
    /// Config overrides as `--key value` pairs; nested keys use dots
    /// (`--ssl.tau 0.3`). Values are parsed as JSON when possible.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

impl StageArgs {
    /// `--resume` may also appear among the trailing overrides.
    fn resume(&self) -> bool {
        self.resume || self.overrides.iter().any(|f| f == "--resume")
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just created")
            }
            _ => bail!("cannot set `{key}`: `{p}` is inside a non-object value"),
        };
        if i + 1 == parts.len() {
            obj.insert(p.replace('-', "_"), v);
            return Ok(());
        }
        cur = obj.entry(p.replace('-', "_")).or_insert(Value::Null);
    }
    Ok(())
}

fn load_config(args: &StageArgs) -> Result<RunConfig> {
    let mut v = match &args.config {
        Some(p) => serde_json::from_slice(
            &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => Value::Object(Default::default()),
    };
    let mut it = args.overrides.iter().filter(|f| *f != "--resume");
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected `--key value`, found `{flag}`"))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, r)) => (k, r.to_string()),
            None => (
                key,
                it.next()
                    .ok_or_else(|| anyhow!("`--{key}` needs a value"))?
                    .clone(),
            ),
        };
        set_path(&mut v, key, parse_value(&raw))?;
    }
    if v.get("seed").is_none() {
        bail!("the config must set `seed` (in the file or with --seed)");
    }
    let cfg: RunConfig = serde_json::from_value(v).context("invalid run configuration")?;
    Ok(cfg)
}

fn stage(args: &StageArgs, target: Stage) -> Result<()> {
    let cfg = load_config(args)?;
    let resume = args.resume();
    let mut p = Pipeline::new(cfg)?;
    if target == Stage::Evaluate && !resume {
        p.execute(target, true, false)?;
    } else if target == Stage::Evaluate {
        p.run(true)?;
    } else {
        p.execute(target, true, resume)?;
    }
    if target == Stage::Evaluate {
        print!("{}", report(p.dir())?);
    }
    Ok(())
}

fn gen_data(manifest: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut m = match manifest {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => DatasetManifest::default_synthetic(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        m.seed = s;
    }
    let file = datagen::generate(&m)?;
    datagen::save(&file, out)?;
    println!("wrote {} samples to {}", file.n_samples(), out.display());
    Ok(())
}

fn perturb(input: &Path, specs: &Path, out: &Path) -> Result<()> {
    let file = datagen::load(input)?;
    let specs: Vec<PerturbSpec> = serde_json::from_slice(&std::fs::read(specs)?)?;
    let perturbed = datagen::perturb_dataset(&file, &specs)?;
    datagen::save(&perturbed, out)?;
    println!(
        "wrote {} perturbed samples to {}",
        perturbed.n_samples(),
        out.display()
    );
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            manifest,
            out,
            seed,
        } => gen_data(manifest.as_deref(), &out, seed).context("stage `gen-data` failed"),
        Command::Perturb { input, specs, out } => {
            perturb(&input, &specs, &out).context("stage `perturb` failed")
        }
        Command::TrainSsl(a) => stage(&a, Stage::Ssl),
        Command::TrainFilter(a) => stage(&a, Stage::Filter),
        Command::FitPrior(a) => stage(&a, Stage::Prior),
        Command::Evaluate(a) => stage(&a, Stage::Evaluate),
        Command::Run(a) => {
            let cfg = load_config(&a)?;
            let mut p = Pipeline::new(cfg)?;
            p.run(a.resume())?;
            print!("{}", report(p.dir())?);
            Ok(())
        }
        Command::Report { run_dir } => {
            print!("{}", report(&run_dir)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("UBMF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
