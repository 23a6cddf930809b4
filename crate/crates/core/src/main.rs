use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ionreadout::harness::{self, io, pipeline, Executor, ExperimentConfig, SimulatedSource};
use ionreadout::metrics::{read_verdicts_csv, reports_from_verdicts, write_verdicts_csv};
use ionreadout::{Error, Result};

#[derive(Parser)]
#[command(name = "ionreadout", version, about = "Trapped-ion camera readout simulator and classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trials and write frames.irf1 plus labels.txt.
    Simulate(Common),
    /// Fit per-pixel distributions and thresholds from labelled frames.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Classify frames and write verdicts.csv.
    Classify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Directory written by `calibrate`.
        #[arg(long)]
        calibration: PathBuf,
    },
    /// Summarise a verdict CSV into reports.csv.
    Report {
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Cumulative-signal and ROI cross-talk tables.
    Crosstalk(Common),
    /// Run the configured experiment end to end.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; keys not given take the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment to run with default settings when no config is given.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    /// Worker threads (0 = all cores). Never changes results.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Data {
    /// IRF1 frame file; simulated from the config when omitted.
    #[arg(long, requires = "labels")]
    frames: Option<PathBuf>,
    /// Label sidecar matching --frames.
    #[arg(long, requires = "frames")]
    labels: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let text = match (&self.config, &self.experiment) {
            (Some(p), _) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            (None, Some(kind)) => format!("experiment = {kind:?}\n"),
            (None, None) => return Err(Error::Config("give --config or --experiment".into())),
        };
        let mut cfg = ExperimentConfig::from_toml(&text, self.seed)?;
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(d) = &self.out_dir {
            cfg.output.dir = d.display().to_string();
        }
        cfg.validate()?;
        let dir = PathBuf::from(&cfg.output.dir);
        Ok((cfg, dir))
    }
}

fn executor(cfg: &ExperimentConfig) -> Result<Executor> {
    Executor::new(cfg.threads, cfg.batch_size)
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn calibrate(cfg: &ExperimentConfig, data: &Data, dir: &Path) -> Result<Vec<PathBuf>> {
    let exec = executor(cfg)?;
    let cal = match (&data.frames, &data.labels) {
        (Some(f), Some(l)) => pipeline::calibrate(cfg, &exec, &pipeline::load_dataset(cfg, f, l)?)?,
        _ => {
            let sim = pipeline::simulator(cfg)?;
            let trials = if cfg.calibration.trials > 0 {
                cfg.calibration.trials
            } else {
                cfg.trials
            };
            let src = SimulatedSource {
                sim: &sim,
                seed: cfg.seed,
                tag: "cal",
                trials,
            };
            pipeline::calibrate(cfg, &exec, &src)?
        }
    };
    pipeline::write_calibration(dir, &cal)?;
    let mut out = vec![dir.join(pipeline::CALIBRATION_FILE)];
    if cal.mn.is_some() {
        out.push(dir.join(pipeline::CALIBRATION_MN_FILE));
        out.push(dir.join(pipeline::CALIBRATION_MN3_FILE));
    }
    out.push(dir.join(pipeline::THRESHOLDS_FILE));
    Ok(out)
}

fn classify(cfg: &ExperimentConfig, data: &Data, cal_dir: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let exec = executor(cfg)?;
    let cal = pipeline::read_calibration(cal_dir)?;
    let rows = match (&data.frames, &data.labels) {
        (Some(f), Some(l)) => pipeline::classify(cfg, &exec, &pipeline::load_dataset(cfg, f, l)?, &cal)?,
        _ => {
            let sim = pipeline::simulator(cfg)?;
            let src = SimulatedSource {
                sim: &sim,
                seed: cfg.seed,
                tag: "test",
                trials: cfg.trials,
            };
            pipeline::classify(cfg, &exec, &src, &cal)?
        }
    };
    fs::create_dir_all(dir)?;
    let p = dir.join(pipeline::VERDICTS_FILE);
    write_verdicts_csv(io::create(&p)?, &rows)?;
    Ok(vec![p])
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Simulate(c) => {
            let (cfg, dir) = c.load()?;
            let (frames, labels) = pipeline::simulate(&cfg, &executor(&cfg)?, "test")?;
            pipeline::write_dataset(&dir, &frames, &labels)?;
            let m = harness::write_manifest(&dir, &cfg, &toml::Table::new())?;
            Ok(vec![dir.join(pipeline::FRAMES_FILE), dir.join(pipeline::LABELS_FILE), m])
        }
        Command::Calibrate { common, data } => {
            let (cfg, dir) = common.load()?;
            calibrate(&cfg, &data, &dir)
        }
        Command::Classify {
            common,
            data,
            calibration,
        } => {
            let (cfg, dir) = common.load()?;
            classify(&cfg, &data, &calibration, &dir)
        }
        Command::Report { verdicts, out_dir } => {
            let rows = read_verdicts_csv(fs::File::open(&verdicts)?)?;
            let reports = reports_from_verdicts(&rows)?;
            fs::create_dir_all(&out_dir)?;
            let p = out_dir.join(pipeline::REPORTS_FILE);
            harness::write_reports(&p, &reports)?;
            Ok(vec![p])
        }
        Command::Crosstalk(c) => {
            let (cfg, dir) = c.load()?;
            let r = harness::experiments::crosstalk_study(&cfg, &executor(&cfg)?)?;
            harness::write_crosstalk(&dir, &r)
        }
        Command::Run(c) => {
            let (cfg, dir) = c.load()?;
            let out = harness::run_experiment(&cfg, &executor(&cfg)?)?;
            harness::write_run(&dir, &cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(paths) => {
            announce(&paths);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
