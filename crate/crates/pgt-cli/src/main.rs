//! `pgt`: train and evaluate temporal convolutional classifiers on synthetic
//! sequence tasks, with progressive training as the headline mode.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage or
//! configuration error, 3 numeric failure (non-finite values).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pgt_core::checkpoint;
use pgt_core::config::{self, RunConfig};
use pgt_core::error::{PgtError, Result};
use pgt_core::eval::{self, InferenceMode};
use pgt_core::rng::{stream, STREAM_VERIFY};
use pgt_core::schedule::{make_schedule, DprMode};
use pgt_core::synthetic::{gen_dataset, split};
use pgt_core::tensor::{Dtype, Scalar};
use pgt_core::train::{
    integrated_accumulate, progressive_accumulate, train_epoch, Dataset, Sgd, StepLossMode,
    TrainMode,
};
use pgt_core::verify::{self, random_sequence, VerifyOptions};
use pgt_core::Model;

#[derive(Parser)]
#[command(name = "pgt", version, about = "Progressive training for temporal convolutional networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set schedule.P=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Override the run seed (`train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics and a checkpoint to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint written by a previous `train` run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs and checkpoint, leaving the learning
        /// rate schedule (and a later `--resume`) on the full horizon.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on freshly generated validation data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Inference layout: orig-long, pg-long, or multi-view. Defaults to the
        /// layout matching the configured training mode.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run the self-verification suite: equivalences, truncation, gradients,
    /// schedules, memory scaling, degenerate identities.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Element type the checks run in.
        #[arg(long, default_value = "f64")]
        dtype: String,
        /// Sabotage boundary truncation; the truncation check must then fail.
        #[arg(long)]
        break_truncation: bool,
        /// Number of random models for the forward equivalence sweep.
        #[arg(long, default_value_t = 12)]
        models: usize,
    },
    /// Measure effective receptive fields of one or two checkpoints.
    Erf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint; the summary then reports the width ratio a/b.
        #[arg(long)]
        checkpoint_b: Option<PathBuf>,
        /// Configuration describing the second checkpoint's model (for example
        /// the `run.cfg` its training run wrote). Defaults to the primary one.
        #[arg(long, requires = "checkpoint_b")]
        config_b: Option<PathBuf>,
        /// Frame the probe differentiates; defaults to the center frame.
        #[arg(long)]
        target_frame: Option<usize>,
        /// Fraction of the peak gradient a frame must reach to count as covered.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Output path prefix for the profile CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report peak activation memory across step counts at fixed step length.
    Membench {
        #[command(flatten)]
        common: Common,
        /// Step counts to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8])]
        steps: Vec<usize>,
        /// Also measure one whole-sequence forward per step count.
        #[arg(long)]
        integrated: bool,
        /// Output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic dataset and write it as CSV.
    Gendata {
        #[command(flatten)]
        common: Common,
        /// Output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration in canonical form.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PgtError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { common, resume, stop_after } => {
            let cfg = resolve(&common)?;
            match cfg.dtype {
                Dtype::F32 => cmd_train::<f32>(&cfg, resume.as_deref(), stop_after)?,
                Dtype::F64 => cmd_train::<f64>(&cfg, resume.as_deref(), stop_after)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { common, checkpoint, mode } => {
            let cfg = resolve(&common)?;
            match checkpoint::peek_dtype(&checkpoint)? {
                Dtype::F32 => cmd_eval::<f32>(&cfg, &checkpoint, mode.as_deref())?,
                Dtype::F64 => cmd_eval::<f64>(&cfg, &checkpoint, mode.as_deref())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify { common, dtype, break_truncation, models } => {
            let cfg = resolve(&common)?;
            let opts = VerifyOptions {
                seed: common.seed.unwrap_or(cfg.train.seed),
                break_truncation,
                equivalence_models: models,
            };
            let ok = match Dtype::parse(&dtype)? {
                Dtype::F32 => cmd_verify::<f32>(&opts)?,
                Dtype::F64 => cmd_verify::<f64>(&opts)?,
            };
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Erf { common, checkpoint, checkpoint_b, config_b, target_frame, threshold, out } => {
            let cfg = resolve(&common)?;
            let cfg_b = match &config_b {
                None => None,
                Some(path) => {
                    let parsed = config::parse(&std::fs::read_to_string(path)?)?;
                    parsed.validate()?;
                    Some(parsed)
                }
            };
            let b = checkpoint_b.as_deref().map(|p| (p, cfg_b.as_ref().unwrap_or(&cfg)));
            match checkpoint::peek_dtype(&checkpoint)? {
                Dtype::F32 => cmd_erf::<f32>(&cfg, &checkpoint, b, target_frame, threshold, out.as_deref())?,
                Dtype::F64 => cmd_erf::<f64>(&cfg, &checkpoint, b, target_frame, threshold, out.as_deref())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Membench { common, steps, integrated, out } => {
            let cfg = resolve(&common)?;
            match cfg.dtype {
                Dtype::F32 => cmd_membench::<f32>(&cfg, &steps, integrated, out.as_deref())?,
                Dtype::F64 => cmd_membench::<f64>(&cfg, &steps, integrated, out.as_deref())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gendata { common, out } => {
            let cfg = resolve(&common)?;
            match cfg.dtype {
                Dtype::F32 => cmd_gendata::<f32>(&cfg, out.as_deref())?,
                Dtype::F64 => cmd_gendata::<f64>(&cfg, out.as_deref())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Config { common } => {
            let cfg = resolve(&common)?;
            print!("{}", config::serialize(&cfg));
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Load the configuration file (or defaults), apply `--set` overrides and the
/// `--seed` shorthand, and validate the result.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => config::parse(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for assignment in &common.set {
        config::apply_set(&mut cfg, assignment)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The inference layout that matches how a model was trained.
fn natural_mode(cfg: &RunConfig) -> InferenceMode {
    match cfg.mode {
        TrainMode::Progressive => InferenceMode::PgLong {
            t_prime: cfg.train.t_prime,
            aggregate: cfg.aggregate,
        },
        TrainMode::Clip => InferenceMode::MultiView {
            t_prime: cfg.train.t_prime,
            views: cfg.views,
        },
        TrainMode::Integrated => InferenceMode::OrigLong,
    }
}

fn parse_mode(cfg: &RunConfig, name: Option<&str>) -> Result<InferenceMode> {
    match name {
        None => Ok(natural_mode(cfg)),
        Some("orig-long") => Ok(InferenceMode::OrigLong),
        Some("pg-long") => Ok(InferenceMode::PgLong {
            t_prime: cfg.train.t_prime,
            aggregate: cfg.aggregate,
        }),
        Some("multi-view") => Ok(InferenceMode::MultiView {
            t_prime: cfg.train.t_prime,
            views: cfg.views,
        }),
        Some(other) => Err(PgtError::config(format!(
            "unknown inference mode `{other}` (expected orig-long, pg-long or multi-view)"
        ))),
    }
}

fn mode_name(mode: InferenceMode) -> &'static str {
    match mode {
        InferenceMode::OrigLong => "orig-long",
        InferenceMode::PgLong { .. } => "pg-long",
        InferenceMode::MultiView { .. } => "multi-view",
    }
}

fn make_datasets<S: Scalar>(cfg: &RunConfig) -> Result<(Dataset<S>, Dataset<S>)> {
    let data = gen_dataset::<S>(&cfg.task, cfg.train_size + cfg.val_size, cfg.train.seed)?;
    split(data, cfg.train_size)
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn cmd_train<S: Scalar>(cfg: &RunConfig, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(out_path(cfg, "run.cfg"), config::serialize(cfg))?;

    let (train_set, val_set) = make_datasets::<S>(cfg)?;
    let (mut model, mut opt, from_epoch) = match resume {
        None => {
            let model = Model::<S>::new(cfg.model.clone(), cfg.train.seed)?;
            let opt = Sgd::new(&model, cfg.train.momentum, cfg.train.weight_decay);
            (model, opt, 0)
        }
        Some(path) => {
            let (model, state) = checkpoint::load::<S>(path, &cfg.model)?;
            let mut opt = Sgd::new(&model, cfg.train.momentum, cfg.train.weight_decay);
            let from = match state {
                Some(state) => {
                    let epochs = state.epochs_completed;
                    opt.restore_velocities(state.velocities)?;
                    epochs
                }
                None => {
                    return Err(PgtError::checkpoint(
                        "checkpoint has no resume state; it was written for inference only",
                    ))
                }
            };
            (model, opt, from)
        }
    };
    if from_epoch >= cfg.train.epochs {
        return Err(PgtError::config(format!(
            "checkpoint already covers {} epochs, train.epochs is {}",
            from_epoch, cfg.train.epochs
        )));
    }
    let to_epoch = match stop_after {
        None => cfg.train.epochs,
        Some(stop) if from_epoch < stop && stop <= cfg.train.epochs => stop,
        Some(stop) => {
            return Err(PgtError::config(format!(
                "--stop-after {stop} must lie in ({from_epoch}, {}]",
                cfg.train.epochs
            )))
        }
    };

    let eval_mode = natural_mode(cfg);
    let step_columns = if cfg.mode == TrainMode::Progressive && cfg.train.dpr == DprMode::Off {
        cfg.train.num_steps
    } else {
        0
    };
    let mut csv = String::from("epoch,lr,loss,val_acc");
    for p in 0..step_columns {
        write!(csv, ",step_loss_{p}").unwrap();
    }
    csv.push('\n');

    println!(
        "training {} for epochs {}..{} ({} sequences, eval {})",
        cfg.mode.name(),
        from_epoch,
        to_epoch,
        train_set.len(),
        mode_name(eval_mode),
    );
    for epoch in from_epoch..to_epoch {
        let stats = train_epoch(&mut model, &mut opt, &train_set, &cfg.train, cfg.mode, epoch)?;
        if !stats.loss.is_finite() {
            return Err(PgtError::numeric(format!(
                "epoch {epoch}: training loss is not finite"
            )));
        }
        let acc = eval::accuracy(&model, &val_set, eval_mode)?;
        write!(csv, "{},{},{},{}", stats.epoch, stats.lr, stats.loss, acc).unwrap();
        match &stats.step_losses {
            Some(losses) if step_columns > 0 => {
                for l in losses {
                    write!(csv, ",{l}").unwrap();
                }
            }
            _ => {
                for _ in 0..step_columns {
                    csv.push(',');
                }
            }
        }
        csv.push('\n');
        println!(
            "epoch {:>3}/{}  lr {:.4}  loss {:.4}  val {:.1}%",
            epoch + 1,
            cfg.train.epochs,
            stats.lr,
            stats.loss,
            100.0 * acc
        );
    }

    let metrics = out_path(cfg, "metrics.csv");
    std::fs::write(&metrics, csv)?;
    let ckpt = out_path(cfg, "model.pgtc");
    checkpoint::save(&ckpt, &model, Some((&opt, to_epoch)))?;
    println!("wrote {} and {}", metrics.display(), ckpt.display());
    Ok(())
}

fn cmd_eval<S: Scalar>(cfg: &RunConfig, ckpt: &Path, mode: Option<&str>) -> Result<()> {
    let mode = parse_mode(cfg, mode)?;
    let (model, _) = checkpoint::load::<S>(ckpt, &cfg.model)?;
    let (_, val_set) = make_datasets::<S>(cfg)?;
    let acc = eval::accuracy(&model, &val_set, mode)?;
    println!(
        "{}  val accuracy {:.4} ({} sequences)",
        mode_name(mode),
        acc,
        val_set.len()
    );
    Ok(())
}

fn cmd_verify<S: Scalar>(opts: &VerifyOptions) -> Result<bool> {
    let reports = verify::run_suite::<S>(opts)?;
    for r in &reports {
        let tag = if r.passed { "[ ok ]" } else { "[FAIL]" };
        println!("{tag} {:<22} {}", r.id, r.detail);
    }
    let passed = reports.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed", reports.len());
    Ok(verify::all_passed(&reports))
}

/// Mean profile over the probe sequences, plus the mean width.
fn erf_profile<S: Scalar>(
    model: &Model<S>,
    probes: &[pgt_core::Tensor<S>],
    target: usize,
    threshold: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut mean = vec![0.0; probes[0].frames()];
    let mut width = 0.0;
    for x in probes {
        let p = eval::compute_erf(model, x, target, threshold)?;
        for (m, v) in mean.iter_mut().zip(&p.magnitudes) {
            *m += v;
        }
        width += p.width as f64;
    }
    for m in mean.iter_mut() {
        *m /= probes.len() as f64;
    }
    Ok((mean, width / probes.len() as f64))
}

fn write_profile(path: &Path, profile: &[f64]) -> Result<()> {
    let mut csv = String::from("frame,magnitude\n");
    for (f, m) in profile.iter().enumerate() {
        writeln!(csv, "{f},{m}").unwrap();
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn cmd_erf<S: Scalar>(
    cfg: &RunConfig,
    ckpt_a: &Path,
    b: Option<(&Path, &RunConfig)>,
    target_frame: Option<usize>,
    threshold: f64,
    out: Option<&Path>,
) -> Result<()> {
    let (_, val_set) = make_datasets::<S>(cfg)?;
    let n = val_set.len().min(32);
    let probes = &val_set.sequences[..n];
    let target = target_frame.unwrap_or(cfg.task.frames / 2);

    let prefix = match out {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&cfg.out_dir)?;
            out_path(cfg, "erf")
        }
    };
    let csv_path = |suffix: &str| -> PathBuf {
        let mut s = prefix.as_os_str().to_os_string();
        s.push(suffix);
        s.push(".csv");
        PathBuf::from(s)
    };

    let (model_a, _) = checkpoint::load::<S>(ckpt_a, &cfg.model)?;
    let (profile_a, width_a) = erf_profile(&model_a, probes, target, threshold)?;
    let path_a = csv_path(if b.is_some() { "-a" } else { "" });
    write_profile(&path_a, &profile_a)?;
    println!(
        "erf width {width_a:.2} frames (threshold {threshold}, target frame {target}, {n} probes)  wrote {}",
        path_a.display()
    );

    if let Some((ckpt_b, cfg_b)) = b {
        let (model_b, _) = checkpoint::load::<S>(ckpt_b, &cfg_b.model)?;
        let (profile_b, width_b) = erf_profile(&model_b, probes, target, threshold)?;
        let path_b = csv_path("-b");
        write_profile(&path_b, &profile_b)?;
        println!(
            "erf width {width_b:.2} frames (threshold {threshold}, target frame {target}, {n} probes)  wrote {}",
            path_b.display()
        );
        if width_b > 0.0 {
            println!("erf width ratio {:.3}", width_a / width_b);
        } else {
            println!("erf width ratio undefined (second profile is empty)");
        }
    }
    Ok(())
}

fn cmd_membench<S: Scalar>(
    cfg: &RunConfig,
    steps: &[usize],
    integrated: bool,
    out: Option<&Path>,
) -> Result<()> {
    if steps.is_empty() {
        return Err(PgtError::config("membench needs at least one step count"));
    }
    let t_prime = cfg.train.t_prime;
    let mut model = Model::<S>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut rng = stream(cfg.train.seed, STREAM_VERIFY);

    let mut csv = String::from("mode,t_prime,num_steps,total_frames,peak_elements\n");
    let report = |csv: &mut String, mode: &str, p: usize, total: usize, peak: usize| {
        writeln!(csv, "{mode},{t_prime},{p},{total},{peak}").unwrap();
        println!("{mode:<12} T'={t_prime:<3} P={p:<3} T={total:<4} peak {peak} elements");
    };
    for &p in steps {
        let schedule = make_schedule(t_prime, p)?;
        let x = random_sequence::<S, _>(&mut rng, schedule.total_frames, &cfg.model.input)?;
        let run = progressive_accumulate(&mut model, &x, 0, &schedule, StepLossMode::Mean)?;
        model.store.zero_grads();
        report(&mut csv, "progressive", p, schedule.total_frames, run.peak_activation_elems);
        if integrated {
            let run = integrated_accumulate(&mut model, &x, 0)?;
            model.store.zero_grads();
            report(&mut csv, "integrated", p, schedule.total_frames, run.peak_activation_elems);
        }
    }

    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&cfg.out_dir)?;
            out_path(cfg, "membench.csv")
        }
    };
    std::fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gendata<S: Scalar>(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let data = gen_dataset::<S>(&cfg.task, cfg.train_size + cfg.val_size, cfg.train.seed)?;
    let numel = data.sequences[0].numel();
    let mut csv = String::from("label");
    for i in 0..numel {
        write!(csv, ",x{i}").unwrap();
    }
    csv.push('\n');
    for (x, &label) in data.sequences.iter().zip(&data.labels) {
        write!(csv, "{label}").unwrap();
        for v in x.data() {
            write!(csv, ",{}", v.to_f64_val()).unwrap();
        }
        csv.push('\n');
    }

    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&cfg.out_dir)?;
            out_path(cfg, "data.csv")
        }
    };
    std::fs::write(&path, csv)?;
    println!(
        "wrote {} ({} sequences, {} classes, {} values each)",
        path.display(),
        data.len(),
        data.classes,
        numel
    );
    Ok(())
}
