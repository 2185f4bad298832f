use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use finemine::data::{self, DatasetBundle};
use finemine::error::{Error, Result};
use finemine::fusion;
use finemine::harness::{self, ReportFormat, RunConfig, STAGES};
use finemine::mining::{self, PseudoLabelSet};
use finemine::model::{self, Classifier};
use finemine::seed;
use finemine::tensor::{Tensor, MAGIC};

#[derive(Parser)]
#[command(name = "finemine", version, about = "Pseudo-label mining and fusion on a synthetic fine-grained benchmark")]
struct Cli {
    /// Run every parallel section on one thread (bit-exact reruns).
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset bundle.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per configured role on labeled_train.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One mining round over inclass_unlabeled with the given models.
    Mine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster outclass_unlabeled and pretrain on the cluster ids.
    ClusterPretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weighted sum of N×C logit files.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        logits: Vec<PathBuf>,
        /// Comma- or newline-separated weights, one per logits file.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 error of predictions against truths.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run every stage and print the report.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Resume at this stage (1-10), reloading earlier artifacts.
        #[arg(long, default_value_t = 1)]
        from_stage: usize,
    },
    /// Print the report of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> Result<DatasetBundle> {
    data::load_bundle(dir)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Class ids from an FMT1 file (N×C logits or an N-vector of ids) or from
/// text with one id per line.
fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    if bytes.starts_with(&MAGIC) {
        let t = Tensor::decode(&bytes, &origin)?;
        return match t.dims.len() {
            2 => Ok(t.rows()?.iter().map(|r| fusion::argmax(&r.iter().map(|&v| v as f64).collect::<Vec<_>>())).collect()),
            1 => t
                .data
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::integrity(format!("{origin}: {v} is not a class id")))
                    }
                })
                .collect(),
            r => Err(Error::integrity(format!("{origin}: expected rank 1 or 2, got rank {r}"))),
        };
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::integrity(format!("{origin}: not UTF-8 text")))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::integrity(format!("{origin}:{}: `{l}` is not a class id", n + 1)))
        })
        .collect()
}

fn read_weights(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    text.split([',', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::integrity(format!("{}: bad weight `{s}`", path.display()))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = load_config(&config)?;
            let bundle = data::generate(&cfg.gen)?;
            data::save_bundle(&bundle, &out, Some(&cfg.gen))?;
            println!("wrote {} examples to {}", bundle.total_len(), out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let bundle = load_data(&data)?;
            let c = bundle.num_inclass_classes;
            let samples = mining::training_samples(&bundle.labeled_train, &[], &PseudoLabelSet::new(), c, cfg.train.label_smooth_eps)?;
            for (i, role) in cfg.model_roles.iter().enumerate() {
                let start = Classifier::init(c, seed::derive(role.seed, "init", 0))?;
                let trained = model::train(&start, &samples, &role.train_config(&cfg.train))?.model;
                let name = format!("{}-{i}", role.role.name());
                trained.save(&out.join(&name))?;
                let acc = mining::ensemble_score(std::slice::from_ref(&trained), &bundle.validation)?.per_model[0];
                println!("{name}: validation accuracy {:.1}%", 100.0 * acc);
            }
        }
        Command::Mine { data, models, config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let bundle = load_data(&data)?;
            let models = models.iter().map(|d| Classifier::load(d)).collect::<Result<Vec<_>>>()?;
            let set = mining::mine_round(&models, &bundle.inclass_unlabeled, &cfg.mining.thresholds, 1)?;
            set.write(&out)?;
            println!("mined {} pseudo-labels into {}", set.len(), out.display());
        }
        Command::ClusterPretrain { data, config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let bundle = load_data(&data)?;
            let ccfg = cfg.cluster.config();
            let k = ccfg.k_for(bundle.num_outclass_classes);
            let tcfg = cfg.cluster.train_config(&cfg.train);
            let pre = mining::cluster_pretrain_with(&bundle.outclass_unlabeled, k, &tcfg, &ccfg)?;
            pre.model.save(&out)?;
            let path = out.join("assignments.json");
            let text = serde_json::to_string_pretty(&serde_json::json!({
                "k": k,
                "assignments": pre.assignments,
                "holdout": pre.holdout,
                "holdout_accuracy": pre.holdout_accuracy,
            }))
            .expect("assignments serialize");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            println!("K={k}, holdout cluster accuracy {:.1}%", 100.0 * pre.holdout_accuracy);
        }
        Command::Fuse { logits, weights, out } => {
            let weights = read_weights(&weights)?;
            let tensors = logits.iter().map(|p| Tensor::read(p)).collect::<Result<Vec<_>>>()?;
            let dims = tensors[0].dims.clone();
            if dims.len() != 2 || tensors.iter().any(|t| t.dims != dims) {
                return Err(Error::validation("logit files must all be N×C with equal shapes"));
            }
            let rows = tensors.iter().map(Tensor::rows).collect::<Result<Vec<_>>>()?;
            let fused = (0..dims[0])
                .map(|i| {
                    let z: Vec<Vec<f64>> = rows.iter().map(|r| r[i].iter().map(|&v| v as f64).collect()).collect();
                    Ok(fusion::fuse(&z, &weights)?.iter().map(|&v| v as f32).collect())
                })
                .collect::<Result<Vec<Vec<f32>>>>()?;
            Tensor::from_rows(&fused)?.write(&out)?;
        }
        Command::Eval { pred, truth } => {
            let err = harness::top1_error(&read_labels(&pred)?, &read_labels(&truth)?)?;
            println!("top1_error: {err:.1}");
        }
        Command::Pipeline { config, from_stage } => {
            let cfg = load_config(&config)?;
            let report = harness::run_pipeline_from(&cfg, from_stage, &mut |i, name| {
                eprintln!("[{i}/{}] {name}", STAGES.len());
            })?;
            print!("{}", harness::render_report(&report, ReportFormat::Table));
        }
        Command::Report { run, format } => {
            let path = run.join(STAGES[STAGES.len() - 1]).join("report.csv");
            let report = harness::parse_report_csv(&read_text(&path)?, &path.display().to_string())?;
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Table => ReportFormat::Table,
            };
            print!("{}", harness::render_report(&report, format));
        }
    }
    Ok(())
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
    if cli.single_thread {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: could not configure the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
