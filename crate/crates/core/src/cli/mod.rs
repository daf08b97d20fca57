//! `b2b` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation, AblationRow};
use crate::config::{load_config, RunConfig};
use crate::export::{heatmap_file_names, Heatmap};
use crate::gradcheck::{check_seed, TOLERANCE};
use crate::guidance::run_guided_sampling;
use crate::layout::{load_layout, LayoutSpec};
use crate::metrics::compute_metrics;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "b2b", version, about = "Reward-guided latent steering on a toy denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample one scene and export heatmaps, trace and metrics.
    Run(RunArgs),
    /// Run the reward-component grids and write one metrics row per combination.
    Ablate(AblateArgs),
    /// Compare the analytic latent gradient with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Skip all guidance (baseline sampling).
    #[arg(long)]
    pub unguided: bool,
    /// Apply `z + gamma * grad` without step halving.
    #[arg(long)]
    pub no_backtrack: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => return cmd_gradcheck(args.seeds),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

struct Inputs {
    layout: LayoutSpec,
    config: RunConfig,
    scenario: String,
}

fn load_inputs(args: &InputArgs) -> anyhow::Result<Inputs> {
    let layout = load_layout(&args.layout)
        .with_context(|| format!("reading layout {}", args.layout.display()))?;
    let mut config = match &args.config {
        Some(path) => load_config(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let scenario = args
        .layout
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Inputs {
        layout,
        config,
        scenario,
    })
}

/// Files written into an output directory; removed again unless committed.
struct OutputGuard {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        self.files.push(path.clone());
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

pub fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let Inputs {
        layout,
        mut config,
        scenario,
    } = load_inputs(&args.inputs)?;
    if args.no_backtrack {
        config.backtrack = false;
    }
    let mut guidance = config.guidance();
    if args.unguided {
        guidance.guided_steps.clear();
    }
    let (emb, initial) = config.prepare(&layout)?;
    let run = run_guided_sampling(&guidance, &layout, &emb, &initial)?;
    let metrics = compute_metrics(&run.attention, &layout, &run.masks, &scenario, !args.unguided)?;

    let mut out = OutputGuard::new(&args.inputs.out)?;
    for (i, name) in heatmap_file_names(&layout.prompt_tokens).iter().enumerate() {
        out.write(name, &Heatmap::from_map(run.attention.map(i)).to_pgm())?;
    }
    if !args.unguided {
        let mut csv = Vec::new();
        run.trace.write_csv(&mut csv)?;
        out.write("trace.csv", &csv)?;
    }
    let mut json = serde_json::to_vec_pretty(&metrics)?;
    json.push(b'\n');
    out.write("metrics.json", &json)?;
    out.commit();
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let Inputs {
        layout,
        config,
        scenario,
    } = load_inputs(&args.inputs)?;
    let results = run_ablation(&layout, &config, &scenario)?;

    let mut out = OutputGuard::new(&args.inputs.out)?;
    let mut table = csv::Writer::from_writer(Vec::new());
    for r in &results {
        table.serialize(AblationRow::from(r))?;
        let mut json = serde_json::to_vec_pretty(&r.metrics)?;
        json.push(b'\n');
        out.write(
            &format!("metrics_{}_{}.json", r.combination.grid, r.combination.name()),
            &json,
        )?;
    }
    let bytes = table.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    out.write("ablation.csv", &bytes)?;
    out.commit();
    Ok(())
}

pub fn cmd_gradcheck(seeds: u64) -> i32 {
    match gradcheck_report(seeds, &mut std::io::stdout()) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

/// Checks seeds `0..seeds`; returns whether all passed.
pub fn gradcheck_report<W: Write>(seeds: u64, out: &mut W) -> anyhow::Result<bool> {
    if seeds == 0 {
        bail!("seed count must be at least 1");
    }
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..seeds {
        let r = check_seed(seed)?;
        writeln!(out, "seed {seed:>3}: max relative error {:.3e}", r.max_rel_error)?;
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            failures.push(r);
        }
    }
    writeln!(out, "max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})")?;
    for f in &failures {
        eprintln!(
            "seed {} failed: relative error {:.3e} at (channel, row, col) = {:?}",
            f.seed, f.max_rel_error, f.worst
        );
    }
    Ok(failures.is_empty())
}
