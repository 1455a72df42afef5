//! `tada` command-line interface.

mod overrides;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use tada::data::events::{read_dataset_dir, read_events_file, write_dataset_dir, DatasetSplits};
use tada::data::series::{IrregularSeries, Label, Task};
use tada::data::synth::{synth_generate, synth_splits, SynthConfig, SynthJob};
use tada::data::uci::{uci_splits, UciJob};
use tada::dla::WindowMode;
use tada::gradcheck::{check_model, module_errors};
use tada::manifest::{reproduce, run_protocol, write_run, RunManifest};
use tada::metrics::MetricsReport;
use tada::model::prepare_all;
use tada::modelio::load_model;
use tada::train::{evaluate, RunConfig};
use tada::{Result, TadaError, TadaModel};

#[derive(Parser)]
#[command(name = "tada", version, about = "Irregular time series classification")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set model.dla.L=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic frequency task as a dataset directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert the UCI person-activity CSV into a dataset directory.
    ConvertUci {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed and write the run manifest and model files.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Ablation switch: no_dla, no_learnable_range or no_mixer.
        #[arg(long)]
        ablate: Vec<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Re-run a recorded manifest and check that it reproduces.
        #[arg(long, conflicts_with_all = ["config", "overrides", "ablate", "seeds"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model file and print the metrics as CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory (scored on its test split) or a single event file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients per module.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Check a saved model instead of a freshly initialized one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        features: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = TaskArg::Sequence)]
        task: TaskArg,
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long, default_value_t = 3e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
    /// Write the local attention weights of one sample as CSV.
    ExportAttention {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory (test split) or a single event file.
        #[arg(long)]
        data: PathBuf,
        /// Sample id; defaults to the first sample.
        #[arg(long)]
        sample: Option<String>,
        /// Override the window mode used for the dump.
        #[arg(long, value_enum)]
        window: Option<WindowArg>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Sequence,
    Step,
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    Soft,
    Hard,
}

fn load_config<T: Serialize + DeserializeOwned + Default>(args: &ConfigArgs) -> Result<T> {
    let base: T = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| TadaError::Config(format!("{}: {e}", path.display())))?
        }
        None => T::default(),
    };
    overrides::apply(&base, &args.overrides)
}

fn read_eval_set(path: &Path, d: usize) -> Result<Vec<IrregularSeries>> {
    if path.is_dir() {
        let splits = read_dataset_dir(path)?;
        if splits.manifest.d != d {
            return Err(TadaError::Data(format!(
                "dataset has D={}, model expects {d}",
                splits.manifest.d
            )));
        }
        Ok(splits.test)
    } else {
        read_events_file(path, d)
    }
}

fn cmd_synth(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let job: SynthJob = load_config(cfg)?;
    let splits = synth_splits(&job)?;
    write_dataset_dir(out, &splits)?;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_convert_uci(input: &Path, cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let job: UciJob = load_config(cfg)?;
    let splits = uci_splits(input, &job)?;
    write_dataset_dir(out, &splits)?;
    println!(
        "wrote {} train, {} val, {} test windows to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &ConfigArgs,
    ablate: &[String],
    seeds: &[u64],
    manifest: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let splits: DatasetSplits = read_dataset_dir(data)?;
    let run = match manifest {
        Some(path) => {
            let recorded = RunManifest::read(path)?;
            let run = reproduce(&recorded, &splits)?;
            println!("reproduced {} seed(s) bit for bit", recorded.seeds.len());
            run
        }
        None => {
            let mut config: RunConfig = load_config(cfg)?;
            for name in ablate {
                config.model.ablations.set(name)?;
            }
            let seeds = if seeds.is_empty() {
                vec![config.seed]
            } else {
                seeds.to_vec()
            };
            run_protocol(&config, &seeds, &splits)?
        }
    };
    write_run(out, &run)?;
    println!("{}", RunManifest::CSV_HEADER);
    println!("{}", run.manifest.csv_line());
    println!("test {}", run.manifest.aggregate.summary());
    Ok(())
}

fn cmd_eval(model: &Path, data: &Path) -> Result<()> {
    let model = load_model(model)?;
    let set = read_eval_set(data, model.arch.n_features)?;
    let report = evaluate(&model, &set)?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

/// Synthetic samples for any feature count (features beyond the generator's are dropped).
fn gradcheck_batch(d: usize, classes: usize, task: Task, n: usize) -> Result<Vec<IrregularSeries>> {
    let gen_d = d.max(2);
    let rates = if gen_d == 4 {
        SynthConfig::default().rate_per_feature
    } else {
        vec![8.0; gen_d]
    };
    let ds = synth_generate(&SynthConfig {
        n_samples: n,
        d: gen_d,
        rate_per_feature: rates,
        classes: classes.max(2),
        task,
        ..SynthConfig::default()
    })?;
    let mut series = ds.series;
    if gen_d != d {
        for s in &mut series {
            for step in &mut s.steps {
                step.observations.retain(|o| o.feature < d);
            }
            let keep: Vec<bool> = s
                .steps
                .iter()
                .map(|st| !st.observations.is_empty())
                .collect();
            let mut k = keep.iter();
            s.steps.retain(|_| *k.next().unwrap());
            if let Label::Step(labels) = &mut s.label {
                let mut k = keep.iter();
                labels.retain(|_| *k.next().unwrap());
            }
        }
        series.retain(|s| !s.steps.is_empty());
    }
    Ok(series)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    cfg: &ConfigArgs,
    model: Option<&Path>,
    features: usize,
    classes: usize,
    task: TaskArg,
    batch: usize,
    eps: f64,
    threshold: f64,
) -> Result<()> {
    let model = match model {
        Some(path) => load_model(path)?,
        None => {
            let config: RunConfig = load_config(cfg)?;
            let task = match task {
                TaskArg::Sequence => Task::Sequence,
                TaskArg::Step => Task::Step,
            };
            TadaModel::new(&config.model, features, classes, task, config.seed)?
        }
    };
    let arch = &model.arch;
    let series = gradcheck_batch(arch.n_features, arch.n_classes, arch.task, batch)?;
    let prepared = prepare_all(&series, arch.n_features)?;
    let report = check_model(&model, &prepared, eps)?;
    println!("module,max_rel_error");
    for (module, err) in module_errors(&report) {
        println!("{module},{err:e}");
    }
    let worst = report.max_rel_error();
    println!("all,{worst:e}");
    if worst < threshold {
        Ok(())
    } else {
        Err(TadaError::Verification(format!(
            "max relative error {worst:e} exceeds {threshold:e}"
        )))
    }
}

fn cmd_export(
    model: &Path,
    data: &Path,
    sample: Option<&str>,
    window: Option<WindowArg>,
    out: &Path,
) -> Result<()> {
    let mut model = load_model(model)?;
    if let (Some(w), Some(dla)) = (window, model.arch.dla.as_mut()) {
        dla.config.window = match w {
            WindowArg::Soft => WindowMode::Soft,
            WindowArg::Hard => WindowMode::Hard,
        };
    }
    let set = read_eval_set(data, model.arch.n_features)?;
    let series = match sample {
        Some(id) => set
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| TadaError::Data(format!("no sample with id `{id}`")))?,
        None => set
            .first()
            .ok_or_else(|| TadaError::Data("no samples to export".into()))?,
    };
    let dump = model.attention(series)?;
    dump.write_csv_file(out)?;
    println!("wrote attention for `{}` to {}", series.id, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out } => cmd_synth(&cfg, &out),
        Command::ConvertUci { input, cfg, out } => cmd_convert_uci(&input, &cfg, &out),
        Command::Train {
            cfg,
            ablate,
            seeds,
            manifest,
            data,
            out,
        } => cmd_train(&cfg, &ablate, &seeds, manifest.as_deref(), &data, &out),
        Command::Eval { model, data } => cmd_eval(&model, &data),
        Command::Gradcheck {
            cfg,
            model,
            features,
            classes,
            task,
            batch,
            eps,
            threshold,
        } => cmd_gradcheck(
            &cfg,
            model.as_deref(),
            features,
            classes,
            task,
            batch,
            eps,
            threshold,
        ),
        Command::ExportAttention {
            model,
            data,
            sample,
            window,
            out,
        } => cmd_export(&model, &data, sample.as_deref(), window, &out),
    }
}

/// 3 for numerical failures, 2 for everything else.
fn exit_code(e: &TadaError) -> u8 {
    if e.is_numerical() || matches!(e, TadaError::Verification(_)) {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
