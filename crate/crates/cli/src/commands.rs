//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaforge::bench::{self, write_report, Report, ReportFormat, Variant};
use metaforge::meta::{Algorithm, MamlConfig, Model};
use metaforge::tasks::{Split, TOY_TASKS};

use crate::checkpoint::Checkpoint;
use crate::config::{AlgorithmChoice, Overrides, RunConfig, SwitchChoice, PRESETS};
use crate::error::{CliError, Result};
use crate::train::{init_model, model_from_checkpoint, train_loop, Trainer};

#[derive(Parser, Debug)]
#[command(name = "metaforge", version, about = "Few-shot meta-learning with MAML and HyperMAML")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train a model, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Measure few-shot accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Time adaptation of MAML with 0..=N inner steps against HyperMAML.
    BenchTime(BenchTimeArgs),
    /// Train on the 2-D toy family, report per-task accuracy and plot decision boundaries.
    Toy2d(Toy2dArgs),
    /// Plot decision boundaries of a 2-D checkpoint on one episode per toy task.
    Plot(PlotArgs),
    /// List the built-in configurations, or print one.
    Presets {
        name: Option<String>,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration; see `metaforge presets`.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug)]
struct OverrideArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the episodes of a meta-batch.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmChoice>,
    /// MAML inner-loop steps.
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Drop second-order terms from the meta-gradient.
    #[arg(long)]
    first_order: bool,
    /// HyperMAML warm-up from gradient steps to the hypernetwork.
    #[arg(long, value_enum)]
    switch_mode: Option<SwitchChoice>,
    /// Feed the hypernetwork embeddings and labels only, without head predictions.
    #[arg(long)]
    no_enhancement: bool,
}

impl OverrideArgs {
    fn overrides(&self, out: Option<PathBuf>) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            out,
            epochs: self.epochs,
            algorithm: self.algorithm,
            inner_steps: self.inner_steps,
            first_order: self.first_order,
            switch_mode: self.switch_mode,
            no_enhancement: self.no_enhancement,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Output directory; defaults to `out` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint. Without --config/--preset, the
    /// `config.toml` next to it is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Load a checkpoint even if it was written under another configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the `config.toml` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Defaults to `val_episodes` or `test_episodes`.
    #[arg(long)]
    episodes: Option<usize>,
    /// Episode stream; defaults to the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the report here (`.json` or `.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct BenchTimeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Time this trained model instead of a freshly initialized one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Test episodes to adapt per repeat.
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Largest MAML inner-step count timed.
    #[arg(long, default_value_t = 5)]
    max_steps: usize,
    /// Write the report here (`.json` or `.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Toy2dArgs {
    #[arg(long, value_enum, default_value = "hypermaml")]
    algorithm: AlgorithmChoice,
    /// MAML inner-loop steps (1 or 5 pick a preset; other values adjust the 1-step one).
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test episodes per task.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the `config.toml` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "boundaries.svg")]
    out: PathBuf,
    /// Grid cells per axis.
    #[arg(long, default_value_t = 200)]
    resolution: usize,
    /// Half-width of the plotted square.
    #[arg(long, default_value_t = 6.0)]
    extent: f64,
    #[arg(long)]
    force: bool,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::BenchTime(a) => bench_time(a),
        Command::Toy2d(a) => toy2d(a),
        Command::Plot(a) => plot(a),
        Command::Presets { name: None } => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
            Ok(())
        }
        Command::Presets { name: Some(name) } => {
            let (_, text) = PRESETS
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CliError::Config(format!("unknown preset `{name}`")))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(args: &ConfigArgs, beside: Option<&Path>) -> Result<RunConfig> {
    match (&args.config, &args.preset, beside) {
        (Some(path), _, _) => RunConfig::load(path),
        (None, Some(name), _) => RunConfig::preset(name),
        (None, None, Some(ckpt)) => RunConfig::load(&config_beside(ckpt)),
        (None, None, None) => Err(CliError::Config("pass --config FILE or --preset NAME".into())),
    }
}

fn config_beside(ckpt: &Path) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join("config.toml")
}

/// A trainer restored from `ckpt` under `cfg`.
fn restore(cfg: RunConfig, ckpt: &Path, force: bool) -> Result<Trainer> {
    Trainer::resume(cfg, &Checkpoint::load(ckpt)?, ckpt, force)
}

fn print_report(r: &Report) {
    println!("{:<24} {:6.2}% ± {:.2}  ({} episodes)", r.variant, 100.0 * r.accuracy_mean, 100.0 * r.accuracy_ci95, r.episodes);
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, a.checkpoint.as_deref())?;
    cfg.apply(&a.overrides.overrides(a.out.clone()))?;
    let outcome = train_loop(cfg, a.checkpoint.as_deref(), a.force)?;
    let t = &outcome.trainer;
    match outcome.log.iter().rev().find_map(|r| r.val_accuracy.zip(r.val_ci95)) {
        Some((acc, ci)) => println!("trained {} epochs, validation {:.2}% ± {:.2}", t.epoch, 100.0 * acc, 100.0 * ci),
        None => println!("trained {} epochs", t.epoch),
    }
    println!("checkpoints in {}", t.cfg.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config.clone().unwrap_or_else(|| config_beside(&a.checkpoint)))?;
    let trainer = restore(cfg, &a.checkpoint, a.force)?;
    let split = Split::from(a.split);
    let episodes = a.episodes.unwrap_or(match split {
        Split::Val => trainer.cfg.val_episodes,
        _ => trainer.cfg.test_episodes,
    });
    let report = trainer.evaluate(split, episodes, a.seed.unwrap_or(trainer.cfg.seed))?;
    print_report(&report);
    if let Some(out) = &a.out {
        write_report(std::slice::from_ref(&report), out, ReportFormat::from_path(out))?;
    }
    Ok(())
}

fn bench_time(a: BenchTimeArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, a.checkpoint.as_deref())?;
    let maml = match &cfg.algorithm {
        Algorithm::Maml(m) => MamlConfig { head_only: false, ..m.clone() },
        Algorithm::HyperMaml(_) => MamlConfig::default(),
    };
    let mut model = match &a.checkpoint {
        Some(p) => restore(cfg.clone(), p, a.force)?.model,
        None => init_model(&cfg)?,
    };
    if model.hyper.is_none() {
        cfg.apply(&Overrides { algorithm: Some(AlgorithmChoice::Hypermaml), ..Overrides::default() })?;
        model.hyper = init_model(&cfg)?.hyper;
    }
    let trainer = Trainer::new(cfg)?;
    let c = &trainer.cfg;
    let episodes = (0..a.episodes as u64)
        .map(|i| trainer.source.episode(Split::Test, c.n_way, c.k_shot, c.q_per_class, i))
        .collect::<metaforge::Result<Vec<_>>>()?;
    let reports = time_variants(&c.algorithm, &maml, &model, &episodes, a.max_steps, a.repeats, c.seed)?;
    for r in &reports {
        println!("{:<12} {:9.3} ms ± {:.3}", r.variant, 1e3 * r.time_mean_s, 1e3 * r.time_std_s);
    }
    if let Some(out) = &a.out {
        write_report(&reports, out, ReportFormat::from_path(out))?;
    }
    Ok(())
}

/// Times MAML with `0..=max_steps` inner steps and the hypernetwork update
/// at λ = 1 on the same model and episodes.
pub fn time_variants(
    hyper: &Algorithm,
    maml: &MamlConfig,
    model: &Model<f32>,
    episodes: &[metaforge::tasks::Episode],
    max_steps: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<Report>> {
    let mut variants: Vec<Variant<'_, f32>> = (0..=max_steps)
        .map(|s| Variant {
            name: format!("maml-{s}"),
            algorithm: Algorithm::Maml(MamlConfig { inner_steps: s, ..maml.clone() }),
            model,
            lambda: 1.0,
        })
        .collect();
    variants.push(Variant { name: "hypermaml".into(), algorithm: hyper.clone(), model, lambda: 1.0 });
    Ok(bench::time_adaptation(&variants, episodes, repeats, seed)?)
}

/// The toy preset matching an algorithm choice and inner-step count.
pub fn toy_preset(algorithm: AlgorithmChoice, inner_steps: Option<usize>) -> &'static str {
    match (algorithm, inner_steps) {
        (AlgorithmChoice::Hypermaml, _) => "toy2d-hypermaml",
        (_, Some(5)) => "toy2d-maml5",
        _ => "toy2d-maml1",
    }
}

/// Per-task test reports `task-0..` followed by the pooled one.
pub fn toy_reports(trainer: &Trainer, episodes_per_task: usize) -> Result<Vec<Report>> {
    let c = &trainer.cfg;
    let lambda = c.lambda(trainer.epoch);
    let mut reports = Vec::new();
    for task in 0..TOY_TASKS {
        let episode = |i| {
            trainer
                .source
                .toy_task_episode(task, Split::Test, c.k_shot, c.q_per_class, i)
                .unwrap_or_else(|| Err(metaforge::Error::Config("not a 2-D toy configuration".into())))
        };
        let mut r = bench::evaluate(&format!("task-{task}"), &c.algorithm, &trainer.model, episode, episodes_per_task, lambda, c.seed)?;
        r.config_hash = format!("{:016x}", c.config_hash());
        reports.push(r);
    }
    let pooled: Vec<f64> = reports.iter().flat_map(|r| r.accuracies.iter().copied()).collect();
    let mut all = Report::new("all-tasks", c.seed).with_accuracies(pooled);
    all.config_hash = format!("{:016x}", c.config_hash());
    reports.push(all);
    Ok(reports)
}

/// SVG of one test episode per toy task.
pub fn toy_boundaries(trainer: &Trainer, resolution: usize, extent: f64) -> Result<String> {
    let c = &trainer.cfg;
    let episodes = (0..TOY_TASKS)
        .map(|t| {
            trainer
                .source
                .toy_task_episode(t, Split::Test, c.k_shot, c.q_per_class, 0)
                .unwrap_or_else(|| Err(metaforge::Error::Config("decision boundaries need the 2-D toy task".into())))
        })
        .collect::<metaforge::Result<Vec<_>>>()?;
    Ok(bench::render_svg(&c.algorithm, &trainer.model, &episodes, c.lambda(trainer.epoch), resolution, extent)?)
}

fn toy2d(a: Toy2dArgs) -> Result<()> {
    let preset = toy_preset(a.algorithm, a.inner_steps);
    let mut cfg = RunConfig::preset(preset)?;
    let fomaml = a.algorithm == AlgorithmChoice::Fomaml;
    cfg.apply(&Overrides {
        seed: a.seed,
        epochs: a.epochs,
        out: a.out.clone(),
        inner_steps: a.inner_steps.filter(|&s| s != 1 && s != 5),
        first_order: fomaml,
        ..Overrides::default()
    })?;
    if a.episodes < 2 {
        return Err(CliError::Config("--episodes must be at least 2".into()));
    }
    let trainer = train_loop(cfg, None, false)?.trainer;
    let out = trainer.cfg.out.clone();
    let reports = toy_reports(&trainer, a.episodes)?;
    write_report(&reports, &out.join("report.json"), ReportFormat::Json)?;
    let svg_path = out.join("boundaries.svg");
    std::fs::write(&svg_path, toy_boundaries(&trainer, 200, 6.0)?).map_err(|e| CliError::io(&svg_path, e))?;
    println!("{preset}{}:", if fomaml { " (first-order)" } else { "" });
    reports.iter().for_each(print_report);
    println!("wrote {} and {}", out.join("report.json").display(), svg_path.display());
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config.clone().unwrap_or_else(|| config_beside(&a.checkpoint)))?;
    if !cfg.task.is_toy() {
        return Err(CliError::Config("plot needs a 2-D toy configuration".into()));
    }
    let trainer = restore(cfg, &a.checkpoint, a.force)?;
    let svg = toy_boundaries(&trainer, a.resolution, a.extent)?;
    std::fs::write(&a.out, svg).map_err(|e| CliError::io(&a.out, e))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Convenience for tests: a model restored from a checkpoint under `cfg`.
pub fn load_model(cfg: &RunConfig, ckpt: &Path, force: bool) -> Result<Model<f32>> {
    let c = Checkpoint::load(ckpt)?;
    c.check_config(cfg.config_hash(), force, ckpt)?;
    model_from_checkpoint(&init_model(cfg)?, &c, ckpt)
}
