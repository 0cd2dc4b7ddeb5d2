use std::path::PathBuf;
use std::process::ExitCode;

use caspi_core::pipeline::{run_stage, PipelineConfig, PipelineError, RunDir, Stage, StageOptions};
use caspi_core::policy::LossMode;
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    GenCorpus,
    TrainBaselines,
    TrainReward,
    TrainPolicy,
    Evaluate,
    Report,
    Sweep,
    ExportPairs,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::GenCorpus => Stage::GenCorpus,
            StageArg::TrainBaselines => Stage::TrainBaselines,
            StageArg::TrainReward => Stage::TrainReward,
            StageArg::TrainPolicy => Stage::TrainPolicy,
            StageArg::Evaluate => Stage::Evaluate,
            StageArg::Report => Stage::Report,
            StageArg::Sweep => Stage::Sweep,
            StageArg::ExportPairs => Stage::ExportPairs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    CaspiFull,
    DetOnly,
    CeBaseline,
}

impl From<ModeArg> for LossMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::CaspiFull => LossMode::CaspiFull,
            ModeArg::DetOnly => LossMode::DetOnly,
            ModeArg::CeBaseline => LossMode::CeBaseline,
        }
    }
}

/// Runs one pipeline stage. Exit codes: 0 success, 2 configuration error,
/// 3 missing or corrupt predecessor artifact, 1 anything else.
#[derive(Parser)]
#[command(name = "caspi", version)]
struct Cli {
    stage: StageArg,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Policy mode for train-policy and evaluate; defaults to `policy.train.mode`.
    #[arg(long)]
    mode: Option<ModeArg>,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = cli.out {
        cfg.paths.out = out;
    }
    let stage: Stage = cli.stage.into();
    let dir = RunDir::open(&cfg.paths.out)?;
    let entry = run_stage(&dir, &cfg, stage, &StageOptions { mode: cli.mode.map(Into::into) })?;
    for (path, digest) in &entry.outputs {
        eprintln!("{}  {path}", &digest[..12]);
    }
    eprintln!("{stage} finished in {:.1}s", entry.wall_clock_secs);
    let show = match stage {
        Stage::Report => Some("report/report.txt"),
        Stage::Sweep => Some("sweep/sweep.txt"),
        _ => None,
    };
    if let Some(rel) = show {
        if let Ok(text) = std::fs::read_to_string(dir.path(rel)) {
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
