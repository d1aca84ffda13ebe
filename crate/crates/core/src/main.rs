use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use acat_core::acat::events_csv;
use acat_core::attack::{optimize_patch, save_patch, AdversarialPatch};
use acat_core::config::RunConfig;
use acat_core::eval::report::{summarize, Table};
use acat_core::eval::scene::SceneConfig;
use acat_core::eval::{
    count_passes, gen_video_dataset, load_dataset, results_csv, run_ablation, run_cell, run_layer_sweep,
    run_period_sweep, scene_images, standard_ablation_grid,
};
use acat_core::net::{load_weights, save_weights, train_toy_model};
use acat_core::{AcatError, Result, VERSION};

#[derive(Parser)]
#[command(name = "acat", version, about = "Multi-frame adversarial-patch defense experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy segmentation network on procedural scenes.
    TrainToy(Common),
    /// Optimize an adversarial patch against a trained network.
    CraftPatch(Common),
    /// Render an attacked video with ground-truth masks.
    GenVideo(Common),
    /// Run the defense over a video and log per-frame events.
    RunDefense(Common),
    /// Run the ablation grid over the defense components.
    Ablate(Common),
    /// Sweep the trace update period.
    SweepPeriod(Common),
    /// Sweep the monitored layer.
    SweepLayer(Common),
    /// Aggregate result CSVs into mean and standard deviation per configuration.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: out/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monitored layer.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Update period, a positive count or `inf`.
    #[arg(long)]
    period: Option<String>,
    /// Minimum adversarial pixel count before a reset, or `auto`.
    #[arg(long = "lambda-m")]
    lambda_m: Option<String>,
    /// Starting-mask provider: gt or detector.
    #[arg(long)]
    provider: Option<String>,
    /// Comma list of att+, att-, upd, nf (or all / none).
    #[arg(long)]
    flags: Option<String>,
    /// Fail if the dataset lacks ground-truth masks.
    #[arg(long = "require-gt")]
    require_gt: bool,
    /// Network weights to load.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Patch image to load.
    #[arg(long)]
    patch: Option<PathBuf>,
    /// Dataset directory to read.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Any other configuration key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSVs sharing one schema.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut put = |k: &str, v: Option<String>| -> Result<()> {
            match v {
                Some(v) => cfg.set(k, &v),
                None => Ok(()),
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("seed", self.seed.map(|v| v.to_string()))?;
        put("out", path(&self.out))?;
        put("layer", self.layer.map(|v| v.to_string()))?;
        put("beta", self.beta.map(|v| v.to_string()))?;
        put("tau", self.tau.map(|v| v.to_string()))?;
        put("period", self.period.clone())?;
        put("lambda_m", self.lambda_m.clone())?;
        put("provider", self.provider.clone())?;
        put("flags", self.flags.clone())?;
        put("weights", path(&self.weights))?;
        put("patch", path(&self.patch))?;
        put("dataset", path(&self.dataset))?;
        if self.require_gt {
            put("require_gt", Some("true".into()))?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| AcatError::Config(format!("--set expects key=value, got {kv:?}")))?;
            put(k.trim(), Some(v.trim().to_string()))?;
        }
        Ok(cfg)
    }
}

/// Creates the run directory and writes the resolved config and version.
fn open_run(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| Path::new("out").join(command));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    fs::write(dir.join("version.txt"), format!("{VERSION}\n"))?;
    Ok(dir)
}

/// Missing inputs are a configuration problem, reported with the offending key.
fn require_input(path: &Path, key: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(AcatError::Config(format!("{key} path {} does not exist", path.display())))
    }
}

fn write_results(dir: &Path, csv: &str) -> Result<()> {
    fs::write(dir.join("results.csv"), csv)?;
    Ok(())
}

fn train_toy(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let outcome = train_toy_model(&cfg.train_config())?;
    save_weights(&outcome.net, &dir.join("toy.weights"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l:.6}", e + 1);
    }
    write_results(dir, &csv)?;
    println!(
        "trained {} epochs: loss {:.4} -> {:.4}, holdout pixel accuracy {:.4}",
        cfg.epochs, outcome.initial_loss, outcome.final_loss, outcome.holdout_accuracy
    );
    Ok(())
}

fn craft_patch(cfg: &RunConfig, dir: &Path) -> Result<()> {
    require_input(&cfg.weights, "weights")?;
    let net = load_weights(&cfg.weights)?;
    let scene = SceneConfig {
        class_count: net.class_count(),
        ..SceneConfig::new(cfg.height, cfg.width)
    };
    let images = scene_images(cfg.seed, cfg.attack_images.max(1), &scene)?;
    let attack = cfg.attack_config();
    let patch = optimize_patch(&net, &images, &attack, cfg.seed)?;
    save_patch(&dir.join("patch.ppm"), &patch, &attack, cfg.seed)?;
    write_results(
        dir,
        &format!(
            "patch_height,patch_width,beta,steps\n{},{},{},{}\n",
            patch.height(),
            patch.width(),
            attack.beta,
            attack.steps
        ),
    )?;
    println!("patch written to {}", dir.join("patch.ppm").display());
    Ok(())
}

fn gen_video(cfg: &RunConfig, dir: &Path) -> Result<()> {
    require_input(&cfg.patch, "patch")?;
    let patch = AdversarialPatch::load_ppm(&cfg.patch)?;
    let ds = gen_video_dataset(&cfg.video_spec(), &patch, dir)?;
    let mut csv = String::from("frame,mask_pixels\n");
    for (k, m) in ds.gt_masks.iter().flatten().enumerate() {
        let _ = writeln!(csv, "{k},{}", m.count_zeros());
    }
    write_results(dir, &csv)?;
    println!("{} frames written to {}", ds.len(), dir.display());
    Ok(())
}

fn run_defense(cfg: &RunConfig, dir: &Path) -> Result<()> {
    require_input(&cfg.weights, "weights")?;
    let net = load_weights(&cfg.weights)?;
    require_input(&cfg.dataset, "dataset")?;
    let ds = load_dataset(&cfg.dataset, cfg.require_gt)?;
    let settings = cfg.run_settings();
    let rep = run_cell(&ds, &net, &settings.params, cfg.provider, &settings)?;
    write_results(dir, &events_csv(&rep.events))?;
    let passes = count_passes(&rep.outcomes);
    let iou = rep
        .mean_mask_iou_after_detection()
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} frames, {:.3} forward passes ({:.3} of the two-pass baseline), mean mask IoU {iou}",
        rep.outcomes.len(),
        passes.total,
        passes.ratio
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    require_input(&cfg.weights, "weights")?;
    let net = load_weights(&cfg.weights)?;
    require_input(&cfg.dataset, "dataset")?;
    let ds = load_dataset(&cfg.dataset, true)?;
    let rows = run_ablation(&ds, &net, &standard_ablation_grid(cfg.provider), &cfg.run_settings())?;
    let csv = results_csv(&rows);
    write_results(dir, &csv)?;
    print!("{csv}");
    Ok(())
}

fn sweep_period(cfg: &RunConfig, dir: &Path) -> Result<()> {
    require_input(&cfg.weights, "weights")?;
    let net = load_weights(&cfg.weights)?;
    require_input(&cfg.dataset, "dataset")?;
    let ds = load_dataset(&cfg.dataset, true)?;
    let rows = run_period_sweep(&ds, &net, &cfg.periods, cfg.provider, &cfg.run_settings())?;
    let csv = results_csv(&rows);
    write_results(dir, &csv)?;
    print!("{csv}");
    Ok(())
}

fn sweep_layer(cfg: &RunConfig, dir: &Path) -> Result<()> {
    require_input(&cfg.weights, "weights")?;
    let net = load_weights(&cfg.weights)?;
    require_input(&cfg.dataset, "dataset")?;
    let ds = load_dataset(&cfg.dataset, true)?;
    let rows = run_layer_sweep(&ds, &net, &cfg.layers, cfg.provider, &cfg.run_settings())?;
    let csv = results_csv(&rows);
    write_results(dir, &csv)?;
    print!("{csv}");
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let tables = args
        .inputs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)
                .map_err(|e| AcatError::Data(format!("cannot read {}: {e}", p.display())))?;
            Table::parse(&p.display().to_string(), &text)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&tables)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("out/report"));
    fs::create_dir_all(&dir)?;
    let csv = summary.to_csv();
    let inputs: Vec<String> = args.inputs.iter().map(|p| p.display().to_string()).collect();
    fs::write(dir.join("config.txt"), format!("inputs={}\n", inputs.join(",")))?;
    fs::write(dir.join("version.txt"), format!("{VERSION}\n"))?;
    fs::write(dir.join("results.csv"), &csv)?;
    fs::write(dir.join("report.dat"), summary.to_dat())?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (name, common) = match &cli.command {
        Command::Report(args) => return report(args),
        Command::TrainToy(c) => ("train-toy", c),
        Command::CraftPatch(c) => ("craft-patch", c),
        Command::GenVideo(c) => ("gen-video", c),
        Command::RunDefense(c) => ("run-defense", c),
        Command::Ablate(c) => ("ablate", c),
        Command::SweepPeriod(c) => ("sweep-period", c),
        Command::SweepLayer(c) => ("sweep-layer", c),
    };
    let cfg = common.resolve()?;
    let dir = open_run(&cfg, name)?;
    match &cli.command {
        Command::TrainToy(_) => train_toy(&cfg, &dir),
        Command::CraftPatch(_) => craft_patch(&cfg, &dir),
        Command::GenVideo(_) => gen_video(&cfg, &dir),
        Command::RunDefense(_) => run_defense(&cfg, &dir),
        Command::Ablate(_) => ablate(&cfg, &dir),
        Command::SweepPeriod(_) => sweep_period(&cfg, &dir),
        Command::SweepLayer(_) => sweep_layer(&cfg, &dir),
        Command::Report(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = e.print();
            } else {
                let text = e.render().to_string();
                eprintln!("acat: {}", text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            }
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acat: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
