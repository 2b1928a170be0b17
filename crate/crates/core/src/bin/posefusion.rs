use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use posefusion::error::{Error, Result};
use posefusion::fusion::write_sweep_csv;
use posefusion::harness::{
    keyframes, predict_relative, run_fusion_sweep, run_pipeline, scene_for, sfm_input, sfm_stage_from, simulate_runs,
    source_streams, sweep_sfm, train_fusion_stage, train_rpr_stage, write_losses, write_sfm_sweep_csv, write_streams,
    ExperimentConfig, FusionMethod,
};
use posefusion::sfm::{read_matches, write_matches, write_point_cloud};

#[derive(Parser)]
#[command(name = "posefusion", version, about = "Simulate, reconstruct, regress and fuse camera pose streams")]
struct Cli {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trains for the full-length iteration counts instead of the short defaults.
    #[arg(long, global = true)]
    paper_iterations: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes ground-truth, degraded absolute and relative streams of every
    /// run, the mapping keyframes and their feature matches.
    Simulate,
    /// Reconstructs the scene and localizes every frame of the test run.
    Sfm {
        /// Feature matches to reconstruct from instead of simulated ones.
        #[arg(long)]
        matches: Option<PathBuf>,
    },
    /// Trains the relative pose regressor on simulated optical flow.
    TrainRpr,
    /// Trains the recurrent fusion network on the training runs.
    TrainFusion,
    /// Refines the test run with pose-graph optimization.
    Pgo,
    /// Runs the configured pipeline and writes `report.csv`.
    Eval,
    /// Grid search over the reconstruction hyperparameters.
    SweepSfm,
    /// Grid search over fusion networks, ranked against the baselines.
    SweepFusion,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.paper_iterations {
        cfg.use_paper_iterations();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn in_stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } | Error::Config(_) => e,
        other => other.in_stage(name),
    })
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let runs = simulate_runs(cfg)?;
    for (k, r) in runs.iter().enumerate() {
        write_streams(out, &format!("run{k}_gt"), cfg.scenario.rate, &r.gt, None)?;
        write_streams(out, &format!("run{k}_absolute"), cfg.scenario.rate, &r.abs, Some(&r.rel))?;
    }
    let keys = keyframes(cfg, &runs);
    write_streams(out, "keyframes", cfg.scenario.rate / cfg.mapping.keyframe_stride as f64, &keys, None)?;
    let scene = scene_for(cfg)?;
    let input = sfm_input(cfg, &scene, &runs)?;
    write_matches(out.join("matches.csv"), &input.pairs)
}

fn sfm(cfg: &ExperimentConfig, out: &Path, matches: Option<&Path>) -> Result<()> {
    let runs = simulate_runs(cfg)?;
    let scene = scene_for(cfg)?;
    let mut input = sfm_input(cfg, &scene, &runs)?;
    if let Some(m) = matches {
        input.pairs = read_matches(m).map_err(|e| Error::Config(format!("{}: {e}", m.display())))?;
    }
    let o = sfm_stage_from(cfg, &cfg.sfm, &runs, &scene, &input)?;
    write_point_cloud(out.join("pointcloud.csv"), &o.reconstruction.cloud)?;
    write_streams(out, "sfm", cfg.scenario.rate, &o.streams[0], None)?;
    let mut w = csv::Writer::from_path(out.join("sfm_summary.csv"))?;
    w.write_record(["landmarks", "observations", "rounds", "rms_px", "localized", "failed"])?;
    w.write_record([
        o.reconstruction.cloud.landmarks.len().to_string(),
        o.reconstruction.observations.to_string(),
        o.reconstruction.rounds.to_string(),
        o.reconstruction.rms.to_string(),
        o.localized.to_string(),
        o.failed.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn train_rpr(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.train_runs == 0 {
        return Err(Error::Config("train-rpr needs train_runs >= 1".into()));
    }
    let runs = simulate_runs(cfg)?;
    let (net, losses) = train_rpr_stage(cfg, &runs[1..])?;
    net.save(out.join("rpr.ckpt"))?;
    write_losses(out.join("rpr_loss.csv"), &losses)?;
    let rel = predict_relative(cfg, &net, &runs[0].gt)?;
    write_streams(out, "rpr", cfg.scenario.rate, &runs[0].gt, Some(&rel))
}

fn train_fusion(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.train_runs == 0 {
        return Err(Error::Config("train-fusion needs train_runs >= 1".into()));
    }
    let src = source_streams(cfg)?;
    let train: Vec<_> = (1..src.runs.len())
        .map(|k| (src.abs[k].clone(), src.rel[k].clone(), src.runs[k].gt.clone()))
        .collect();
    let (net, losses) = in_stage("fusion", train_fusion_stage(cfg, &train))?;
    net.save(out.join("fusion.ckpt"))?;
    write_losses(out.join("fusion_loss.csv"), &losses)
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = cfg.out.clone();
    in_stage("io", std::fs::create_dir_all(&out).map_err(Error::from))?;
    match &cli.command {
        Command::Simulate => in_stage("simulate", simulate(&cfg, &out)),
        Command::Sfm { matches } => in_stage("sfm", sfm(&cfg, &out, matches.as_deref())),
        Command::TrainRpr => in_stage("rpr", train_rpr(&cfg, &out)),
        Command::TrainFusion => train_fusion(&cfg, &out),
        Command::Pgo => {
            cfg.fusion = FusionMethod::Pgo;
            run_pipeline(&cfg).map(|_| ())
        }
        Command::Eval => {
            let report = run_pipeline(&cfg)?;
            for r in &report.rows {
                println!(
                    "{:<10} {:>10.4} m {:>9.3} deg {:>+8.1} %",
                    r.method, r.median_pos_m, r.median_ori_deg, r.improvement_pct
                );
            }
            Ok(())
        }
        Command::SweepSfm => {
            let rows = sweep_sfm(&cfg, &cfg.sweep_sfm)?;
            in_stage("io", write_sfm_sweep_csv(out.join("sweep_sfm.csv"), &rows))
        }
        Command::SweepFusion => {
            let rows = run_fusion_sweep(&cfg)?;
            in_stage("io", write_sweep_csv(out.join("sweep_fusion.csv"), &rows))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
