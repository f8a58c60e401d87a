use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unembed::config::{DatasetKind, RunConfig};
use unembed::data::LabeledDataset;
use unembed::embfile::EmbeddingSet;
use unembed::eval::{embed_dataset, evaluate, Metric, Mode};
use unembed::gradcheck::{run_suite, worst, DEFAULT_STEP, DEFAULT_TOLERANCE};
use unembed::model::Variant;
use unembed::pipeline::{build_model, eval_split, held_out_set, training_set};
use unembed::train::train_with;
use unembed::{Error, Model32, Result};

#[derive(Parser)]
#[command(name = "unembed", version, about = "Multi-task embedding training and binary retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.apply_env()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets and a manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint, a loss log and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory holding the dataset files (defaults to `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (defaults to `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of flashlight, lens, shopping.
        #[arg(long, default_value = "flashlight,lens,shopping")]
        datasets: String,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Embed every record of a dataset with a checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "float")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score retrieval on a query/corpus split of a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// FEMB or BEMB file covering the dataset.
        #[arg(long, conflicts_with = "checkpoint")]
        embeddings: Option<PathBuf>,
        #[arg(long, required_unless_present = "embeddings")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: String,
        /// Comma-separated metrics, e.g. `p1,avgp20,r1,r10`.
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long, default_value = "binary")]
        mode: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every autodiff op and the model loss against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    create_dir(out)?;
    let mut manifest = String::from("file\tdataset\trecords\tseed\tsample_stream\tspec\n");
    let mut emit = |kind: DatasetKind, ds: &LabeledDataset, file: String, stream: u64| -> Result<()> {
        ds.save(&out.join(&file))?;
        let spec = &cfg.gen[&kind];
        let kv = cfg
            .to_text()
            .lines()
            .filter_map(|l| l.strip_prefix(&format!("gen.{kind}.")))
            .map(|l| l.replace(" = ", "="))
            .collect::<Vec<_>>()
            .join(",");
        manifest.push_str(&format!("{file}\t{kind}\t{}\t{}\t{stream}\t{kv}\n", ds.len(), spec.seed));
        println!("wrote {} ({} records)", out.join(&file).display(), ds.len());
        Ok(())
    };
    for kind in DatasetKind::ALL {
        emit(kind, &training_set(cfg, kind)?, kind.file_name(), 0)?;
        if cfg.held_out_samples_per_class > 0 {
            let ds = held_out_set(cfg, kind, cfg.held_out_samples_per_class)?;
            emit(kind, &ds, kind.eval_file_name(), unembed::pipeline::HELD_OUT_STREAM)?;
        }
    }
    write_file(&out.join("manifest.tsv"), &manifest)?;
    write_file(&out.join("config.txt"), &cfg.to_text())
}

fn train_cmd(mut cfg: RunConfig, data: &Path, out: &Path, datasets: &str) -> Result<()> {
    let kinds = DatasetKind::parse_list(datasets)?;
    cfg.validate()?;
    let sets = kinds
        .iter()
        .map(|k| LabeledDataset::load(&data.join(k.file_name())))
        .collect::<Result<Vec<_>>>()?;
    cfg.model.feature_dim = sets[0].feature_dim;
    let mut model: Model32 = build_model(&cfg, &sets)?;
    create_dir(out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let log = train_with(&mut model, &sets, &cfg.train, |_, e| {
        let losses: Vec<String> = e.task_losses.iter().map(|(t, l)| format!("{t}={l:.4}")).collect();
        eprintln!("epoch {} lr {:.5} {}", e.epoch, e.lr, losses.join(" "));
    })?;
    model.save(&out.join("model.mtck"))?;
    write_file(&out.join("train_log.tsv"), &format!("epoch\ttask\tloss\n{}", log.to_tsv()))?;
    println!("wrote {}", out.join("model.mtck").display());
    Ok(())
}

fn embed_cmd(checkpoint: &Path, dataset: &Path, mode: Mode, out: &Path) -> Result<()> {
    let model = Model32::load(checkpoint)?;
    let ds = LabeledDataset::load(dataset)?;
    if ds.feature_dim != model.config().feature_dim {
        return Err(Error::Config(format!(
            "dataset feature_dim {} does not match checkpoint feature_dim {}",
            ds.feature_dim,
            model.config().feature_dim
        )));
    }
    let mut set = embed_dataset(&model, &ds)?;
    if mode == Mode::Binary {
        set = set.to_binary()?;
    }
    set.save(out)?;
    println!("wrote {} ({} records)", out.display(), set.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    cfg: &RunConfig,
    embeddings: Option<&Path>,
    checkpoint: Option<&Path>,
    dataset: &Path,
    task: &str,
    metrics: &[Metric],
    mode: Mode,
    out: Option<&Path>,
) -> Result<()> {
    let ds = LabeledDataset::load(dataset)?;
    let set = match (embeddings, checkpoint) {
        (Some(path), _) => EmbeddingSet::load(path)?,
        (None, Some(path)) => embed_dataset(&Model32::load(path)?, &ds)?,
        (None, None) => return Err(Error::Config("pass --embeddings or --checkpoint".into())),
    };
    let split = eval_split(cfg, &ds, task)?;
    let report = evaluate(&set, &ds, &split, task, metrics, mode)?;
    let text = report.to_tsv();
    print!("{text}");
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    Ok(())
}

fn grad_check_cmd(seeds: u64, tolerance: f64) -> Result<bool> {
    let mut all = Vec::new();
    for seed in 0..seeds {
        all.extend(run_suite(seed, DEFAULT_STEP, tolerance)?);
    }
    let mut ops: Vec<&str> = Vec::new();
    for r in &all {
        if !ops.contains(&r.op.as_str()) {
            ops.push(&r.op);
        }
    }
    let mut ok = true;
    for op in ops {
        let runs: Vec<_> = all.iter().filter(|r| r.op == op).collect();
        let max = runs.iter().map(|r| r.max_error).fold(0.0, f64::max);
        let pass = runs.iter().all(|r| r.passed);
        ok &= pass;
        println!("{}\t{op}\t{max:.3e}", if pass { "PASS" } else { "FAIL" });
    }
    if let Some(w) = worst(&all) {
        println!("worst\t{}\t{:.3e}", w.op, w.max_error);
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.resolve()?;
            let out = out.unwrap_or_else(|| cfg.data_dir.clone());
            gen_data(&cfg, &out)?;
        }
        Command::Train {
            cfg,
            data,
            out,
            datasets,
            variant,
            epochs,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(v) = variant {
                cfg.model.variant = v.parse::<Variant>()?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            train_cmd(cfg, &data, &out, &datasets)?;
        }
        Command::Embed {
            checkpoint,
            dataset,
            mode,
            out,
        } => embed_cmd(&checkpoint, &dataset, mode.parse()?, &out)?,
        Command::Eval {
            cfg,
            embeddings,
            checkpoint,
            dataset,
            task,
            metrics,
            mode,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let metrics = match metrics {
                Some(m) => Metric::parse_list(&m)?,
                None => cfg.eval.metrics.clone(),
            };
            eval_cmd(
                &cfg,
                embeddings.as_deref(),
                checkpoint.as_deref(),
                &dataset,
                &task,
                &metrics,
                mode.parse()?,
                out.as_deref(),
            )?;
        }
        Command::GradCheck { seeds, tolerance } => return grad_check_cmd(seeds, tolerance),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
