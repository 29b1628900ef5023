//! Command-line entry point: `gen`, `train`, `eval`, `inspect`, `export-viz`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use crate::config::TrainConfig;
use crate::data::{generate_domain_pair, read_dataset, read_labels, write_dataset, write_labels, Dataset, DomainSpec};
use crate::error::{Error, Result};
use crate::numeric::argmax;
use crate::pipeline::{evaluate, AdaptState, Predictor, Trainer, DIAGNOSTICS_HEADER};
use crate::viz::{render_svg, Scene};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

#[derive(Debug, Parser)]
#[command(name = "protogmm", version, about = "Multi-prototype GMM domain adaptation on feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled source set and a shifted target set from a domain spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_source: PathBuf,
        #[arg(long)]
        out_target: PathBuf,
        #[arg(long)]
        out_target_labels: PathBuf,
    },
    /// Train on a labeled source set and an unlabeled target set.
    #[command(after_long_help = TrainConfig::key_help())]
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Flat `key = value` file; see `train --help` for keys and defaults.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint, diagnostics and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Write the freshly initialized state without training.
        #[arg(long)]
        init_only: bool,
    },
    /// Score a checkpoint against labeled data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = PredictorArg::Head)]
        predictor: PredictorArg,
        /// Metrics CSV path [default: <checkpoint>/metrics-<predictor>.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump learned state as CSV on stdout.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: What,
    },
    /// Render embeddings, GMM means and target prototypes as SVG.
    ExportViz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PredictorArg {
    Head,
    Gmm,
}

impl PredictorArg {
    fn predictor(self) -> Predictor {
        match self {
            PredictorArg::Head => Predictor::Head,
            PredictorArg::Gmm => Predictor::Gmm,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PredictorArg::Head => "head",
            PredictorArg::Gmm => "gmm",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum What {
    Gmm,
    Prototypes,
    Priors,
}

/// Record of one `train` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub seed: u64,
    /// `key = value` snapshot; parsing it reproduces the run's config.
    pub config: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub init_only: bool,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// `running`, `complete` or `failed`.
    pub status: String,
    /// Files written to the output directory, relative to it.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return i32::from(usage);
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

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            spec,
            out_source,
            out_target,
            out_target_labels,
        } => {
            let spec = DomainSpec::from_kv(&fs::read_to_string(&spec)?)?;
            let (source, target, labels) = generate_domain_pair(&spec)?;
            write_dataset(&source, &out_source)?;
            write_dataset(&target, &out_target)?;
            write_labels(&labels, spec.n_classes, &out_target_labels)?;
            println!(
                "wrote {} source and {} target samples",
                source.len(),
                target.len()
            );
            Ok(())
        }
        Command::Train {
            source,
            target,
            config,
            out,
            init_only,
        } => train(&source, &target, &config, &out, init_only),
        Command::Eval {
            checkpoint,
            data,
            labels,
            predictor,
            out,
        } => eval(&checkpoint, &data, &labels, predictor, out),
        Command::Inspect { checkpoint, what } => {
            let ck = Checkpoint::load(&checkpoint)?;
            print!("{}", inspect(&ck.state, what)?);
            Ok(())
        }
        Command::ExportViz { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = read_dataset(&data)?;
            check_compatible(&ck.state, &data)?;
            fs::write(&out, export_viz(&ck.state, &data)?)?;
            Ok(())
        }
    }
}

fn check_compatible(state: &AdaptState, data: &Dataset) -> Result<()> {
    let shape = state.models.student.shape();
    if data.dim != shape.input_dim || data.n_classes != shape.n_classes {
        return Err(Error::Input(format!(
            "data has dim={} classes={}, checkpoint expects dim={} classes={}",
            data.dim, data.n_classes, shape.input_dim, shape.n_classes
        )));
    }
    Ok(())
}

fn train(source: &Path, target: &Path, config: &Path, out: &Path, init_only: bool) -> Result<()> {
    let mut cfg = TrainConfig::from_kv(&fs::read_to_string(config)?)?;
    cfg.apply_env()?;
    let src = read_dataset(source)?;
    let tgt = read_dataset(target)?;
    if src.dim != tgt.dim || src.n_classes != tgt.n_classes {
        return Err(Error::Input(format!(
            "source has dim={} classes={}, target has dim={} classes={}",
            src.dim, src.n_classes, tgt.dim, tgt.n_classes
        )));
    }
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest {
        artifact: "protogmm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.to_kv(),
        source: source.to_path_buf(),
        target: target.to_path_buf(),
        init_only,
        started_unix: now_unix(),
        finished_unix: None,
        status: "running".into(),
        outputs: vec![MANIFEST_FILE.into()],
    };
    manifest.save(out)?;

    let result = train_into(cfg, src, tgt, out, init_only, &mut manifest.outputs);
    manifest.finished_unix = Some(now_unix());
    manifest.status = if result.is_ok() { "complete" } else { "failed" }.into();
    manifest.save(out)?;
    result
}

fn train_into(
    cfg: TrainConfig,
    src: Dataset,
    tgt: Dataset,
    out: &Path,
    init_only: bool,
    outputs: &mut Vec<String>,
) -> Result<()> {
    let mut trainer = Trainer::new(cfg.clone(), src, tgt)?;
    let mut diag = BufWriter::new(File::create(out.join(DIAGNOSTICS_FILE))?);
    outputs.push(DIAGNOSTICS_FILE.into());
    writeln!(diag, "{DIAGNOSTICS_HEADER}")?;
    if !init_only {
        let every = (cfg.n_iter / 10).max(1);
        trainer.run(|rec| {
            writeln!(diag, "{}", rec.csv_row())?;
            if rec.iteration % every == 0 {
                eprintln!(
                    "iter {:>6}/{} loss {:.5} conf {:.3}",
                    rec.iteration, cfg.n_iter, rec.total, rec.confidence
                );
            }
            Ok(())
        })?;
    }
    diag.flush()?;
    Checkpoint::new(cfg, trainer.into_state()).save(out)?;
    outputs.push(CHECKPOINT_FILE.into());
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, labels: &Path, predictor: PredictorArg, out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = read_dataset(data)?;
    let (labels, n_classes) = read_labels(labels)?;
    if labels.len() != data.len() || n_classes != data.n_classes {
        return Err(Error::Input(format!(
            "{} samples with {} classes but {} labels with {} classes",
            data.len(),
            data.n_classes,
            labels.len(),
            n_classes
        )));
    }
    check_compatible(&ck.state, &data)?;
    let metrics = evaluate(&ck.state, &data, &labels, predictor.predictor())?;
    print!("{}", metrics.to_table());
    let file_name = format!("metrics-{}.csv", predictor.name());
    match out {
        Some(path) => fs::write(path, metrics.to_csv())?,
        None => {
            fs::write(checkpoint.join(&file_name), metrics.to_csv())?;
            // Keep the run's inventory complete.
            if let Ok(mut manifest) = RunManifest::load(checkpoint) {
                if !manifest.outputs.contains(&file_name) {
                    manifest.outputs.push(file_name);
                    manifest.save(checkpoint)?;
                }
            }
        }
    }
    Ok(())
}

fn csv_values(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn inspect(state: &AdaptState, what: What) -> Result<String> {
    let c = state.n_classes();
    let dim = state.gmm.dim();
    let mut out = String::new();
    match what {
        What::Priors => {
            let header: Vec<String> = (0..c).map(|k| format!("c{k}")).collect();
            out.push_str(&format!("domain,{}\n", header.join(",")));
            out.push_str(&format!("source,{}\n", csv_values(&state.priors.delta_source)));
            out.push_str(&format!("target,{}\n", csv_values(&state.priors.delta_target)));
        }
        What::Gmm => {
            if !state.gmm.gmms().any(|g| g.is_some()) {
                return Err(Error::not_ready("no class GMM is initialized yet"));
            }
            let mean_cols: Vec<String> = (0..dim).map(|d| format!("mean{d}")).collect();
            let var_cols: Vec<String> = (0..dim).map(|d| format!("var{d}")).collect();
            out.push_str(&format!("class,component,weight,{},{}\n", mean_cols.join(","), var_cols.join(",")));
            for g in state.gmm.gmms().flatten() {
                for (m, (w, comp)) in g.weights.iter().zip(&g.components).enumerate() {
                    out.push_str(&format!(
                        "{},{m},{w},{},{}\n",
                        g.class_id,
                        csv_values(&comp.mean),
                        csv_values(&comp.variance)
                    ));
                }
            }
        }
        What::Prototypes => {
            if state.prototypes.n_initialized() == 0 {
                return Err(Error::not_ready("no target prototype is initialized yet"));
            }
            let cols: Vec<String> = (0..dim).map(|d| format!("v{d}")).collect();
            out.push_str(&format!("class,bank_size,{}\n", cols.join(",")));
            for k in 0..c {
                if let Some(p) = state.prototypes.get(k) {
                    out.push_str(&format!("{k},{},{}\n", state.target_bank.len(k), csv_values(p)));
                }
            }
        }
    }
    Ok(out)
}

fn export_viz(state: &AdaptState, data: &Dataset) -> Result<String> {
    let model = &state.models.student;
    let mut embeddings = Vec::new();
    let mut predictions = Vec::new();
    for i in 0..data.len() {
        let fw = model.forward(data.row(i))?;
        if let Some(e) = fw.embedding {
            predictions.push(argmax(&fw.logits));
            embeddings.push(e.into_inner());
        }
    }
    let gmm_means: Vec<(usize, Vec<f64>)> = state
        .gmm
        .gmms()
        .flatten()
        .flat_map(|g| g.components.iter().map(move |comp| (g.class_id, comp.mean.clone())))
        .collect();
    let prototypes: Vec<(usize, Vec<f64>)> = (0..state.n_classes())
        .filter_map(|k| state.prototypes.get(k).map(|p| (k, p.to_vec())))
        .collect();
    render_svg(&Scene {
        embeddings: &embeddings,
        predictions: &predictions,
        gmm_means: &gmm_means,
        prototypes: &prototypes,
    })
}
