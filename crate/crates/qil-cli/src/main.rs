//! Command-line front end: dataset generation, training at full
//! precision, quantized finetuning (direct or progressive), quantizer-only
//! training, heterogeneous distillation, evaluation over the reference or
//! packed integer path, deployment, microbenchmarks and CSV report
//! export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use qil::checkpoint::{atomic_write, load_network_into, save_network};
use qil::data::{load_mnist, split_classes, synth, DatasetHandle};
use qil::deploy::{deploy, is_deployed_file, load_deployed, save_deployed};
use qil::nn::{lenet_q, LenetOptions, Network};
use qil::report::{activation_histogram_csv, run_report_csv, weight_histogram_csv};
use qil::train::{
    argmax, calibration_batch, evaluate, init_quantizers, progressive_train, train, RunReport,
    TrainConfig, TrainMode,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qil", version, about = "Low bit-width networks with trainable quantization intervals")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory with IDX files (defaults to $QIL_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON experiment config (TrainConfig schema); defaults are used
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-epoch training report CSV here.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the full-precision reference network.
    TrainFp {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a low-bit network from a checkpoint (direct, or walking
    /// the whole bit schedule with --progressive).
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// Starting checkpoint (usually the full-precision model).
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Walk the config's bit_schedule instead of a single stage.
        #[arg(long)]
        progressive: bool,
        /// Direct finetune bit widths as "N_X,N_W" (overrides config).
        #[arg(long)]
        bits: Option<String>,
    },
    /// Finetune only the quantizer parameters, keeping weights frozen.
    QuantizerOnly {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        progressive: bool,
        #[arg(long)]
        bits: Option<String>,
    },
    /// Distill a low-bit student from a full-precision teacher on a
    /// class subset, without using labels.
    Distill {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Training classes, e.g. "5,6,7,8,9".
        #[arg(long)]
        data_classes: String,
        /// Evaluation classes (defaults to all).
        #[arg(long)]
        eval_classes: Option<String>,
        #[arg(long)]
        bits: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print test accuracy of a checkpoint (packed integer path for
    /// deployed models).
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Fold weight quantizers into integer levels and write the deployed
    /// model.
    Deploy {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark the packed dot product against the naive real dot.
    PackBench {
        /// Comma-separated vector lengths.
        #[arg(long, default_value = "1024,16384,65536")]
        sizes: String,
        #[arg(long, default_value_t = 31)]
        reps: usize,
        /// Bit widths as "N_X,N_W".
        #[arg(long, default_value = "2,2")]
        bits: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export weight/activation histograms with quantization thresholds,
    /// and pruning ratios over epochs from a run report.
    Report {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Training report CSV to extract pruning trajectories from.
        #[arg(long)]
        run_csv: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate the synthetic digit dataset as IDX files.
    SynthData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageErrorWrapper>() {
                eprintln!("error: {}", u.0);
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}

/// Errors that should exit with the usage code (2) instead of 1.
#[derive(Debug)]
struct UsageErrorWrapper(String);
impl std::fmt::Display for UsageErrorWrapper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl std::error::Error for UsageErrorWrapper {}

fn usage_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageErrorWrapper(msg.into()))
}

fn data_dir(args: &DataArgs) -> anyhow::Result<PathBuf> {
    if let Some(d) = &args.data_dir {
        return Ok(d.clone());
    }
    std::env::var_os("QIL_DATA_DIR")
        .map(PathBuf::from)
        .ok_or_else(|| usage_err("no --data-dir given and QIL_DATA_DIR is not set"))
}

fn parse_bits(s: &str) -> anyhow::Result<(u32, u32)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(usage_err(format!("bad bits '{s}', expected \"N_X,N_W\"")));
    }
    let n_x = parts[0].trim().parse::<u32>().map_err(|_| usage_err("bits must be integers"))?;
    let n_w = parts[1].trim().parse::<u32>().map_err(|_| usage_err("bits must be integers"))?;
    Ok((n_x, n_w))
}

fn parse_classes(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| usage_err(format!("bad class list '{s}'")))
        })
        .collect()
}

fn fp_defaults(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 0.05,
        quantizer_lr_ratio: 0.01,
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs: 10,
        lr_decay_epochs: vec![7],
        lr_decay_factor: 0.1,
        batch_size: 64,
        mode: TrainMode::Joint,
        bit_schedule: vec![(4, 4), (3, 3), (2, 2)],
        seed,
        gamma_trainable: true,
        gamma_init: 1.0,
        distill_freeze_weights: false,
    }
}

fn finetune_defaults(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 0.005,
        ..fp_defaults(seed)
    }
}

fn load_config(args: &TrainArgs, defaults: TrainConfig) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| usage_err(format!("bad config: {e}")))?
        }
        None => defaults,
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage_err(e.to_string()))?;
    Ok(cfg)
}

fn load_data(args: &DataArgs) -> anyhow::Result<(DatasetHandle, DatasetHandle)> {
    let dir = data_dir(args)?;
    load_mnist(&dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn build_net(cfg: &TrainConfig, bits: (u32, u32)) -> Network {
    lenet_q(
        &LenetOptions {
            bits,
            gamma_trainable: cfg.gamma_trainable,
            gamma_init: cfg.gamma_init,
        },
        cfg.seed,
    )
}

fn write_report(path: &Option<PathBuf>, report: &RunReport) -> anyhow::Result<()> {
    if let Some(p) = path {
        atomic_write(p, run_report_csv(report).as_bytes())?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn load_lenet(path: &Path) -> anyhow::Result<Network> {
    let mut net = lenet_q(&LenetOptions::default(), 0);
    load_network_into(path, &mut net)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(net)
}

fn finetune_cmd(
    train_args: &TrainArgs,
    init: &Path,
    out: &Path,
    progressive: bool,
    bits: &Option<String>,
    mode: TrainMode,
) -> anyhow::Result<()> {
    let cfg = {
        let mut c = load_config(train_args, finetune_defaults(0))?;
        c.mode = mode;
        c
    };
    let (train_data, eval_data) = load_data(&train_args.data)?;
    let fp = load_lenet(init)?;
    if progressive {
        let (nets, reports) = progressive_train(&fp, &train_data, &eval_data, &cfg)?;
        for (i, (net, &(n_x, n_w))) in nets.iter().zip(&cfg.bit_schedule).enumerate() {
            let stage_path = out.with_extension(format!("stage{i}_{n_x}_{n_w}.qiln"));
            save_network(&stage_path, net)?;
        }
        save_network(out, nets.last().expect("non-empty schedule"))?;
        // the report of the final stage is the primary artifact
        write_report(&train_args.report_out, reports.last().unwrap())?;
        let last = reports.last().unwrap().records.last().unwrap();
        println!("final stage eval accuracy={}", last.eval_accuracy);
    } else {
        let stage_bits = match bits {
            Some(s) => parse_bits(s)?,
            None => *cfg
                .bit_schedule
                .first()
                .ok_or_else(|| usage_err("no --bits and empty bit_schedule"))?,
        };
        let mut cfg = cfg;
        cfg.bit_schedule = vec![stage_bits];
        let (nets, reports) = progressive_train(&fp, &train_data, &eval_data, &cfg)?;
        save_network(out, &nets[0])?;
        write_report(&train_args.report_out, &reports[0])?;
        let last = reports[0].records.last().unwrap();
        println!("eval accuracy={}", last.eval_accuracy);
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::TrainFp { train: targs, out } => {
            let cfg = load_config(&targs, fp_defaults(0))?;
            let (train_data, eval_data) = load_data(&targs.data)?;
            let mut net = build_net(&cfg, *cfg.bit_schedule.first().unwrap_or(&(4, 4)));
            net.quant_active = false;
            let report = train(&mut net, &train_data, &eval_data, &cfg, None)?;
            save_network(&out, &net)?;
            write_report(&targs.report_out, &report)?;
            let last = report.records.last().unwrap();
            println!("eval accuracy={}", last.eval_accuracy);
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Cmd::Finetune {
            train: targs,
            init,
            out,
            progressive,
            bits,
        } => finetune_cmd(&targs, &init, &out, progressive, &bits, TrainMode::Joint),
        Cmd::QuantizerOnly {
            train: targs,
            init,
            out,
            progressive,
            bits,
        } => finetune_cmd(
            &targs,
            &init,
            &out,
            progressive,
            &bits,
            TrainMode::QuantizerOnly,
        ),
        Cmd::Distill {
            train: targs,
            teacher,
            data_classes,
            eval_classes,
            bits,
            out,
        } => {
            let mut cfg = load_config(&targs, finetune_defaults(0))?;
            cfg.mode = TrainMode::Distill;
            let stage_bits = match &bits {
                Some(s) => parse_bits(s)?,
                None => *cfg
                    .bit_schedule
                    .first()
                    .ok_or_else(|| usage_err("no --bits and empty bit_schedule"))?,
            };
            let classes = parse_classes(&data_classes)?;
            let (train_data, eval_data) = load_data(&targs.data)?;
            let distill_set = split_classes(&train_data, &[classes], true)?
                .pop()
                .expect("one group");
            if distill_set.is_empty() {
                return Err(usage_err("distillation class subset is empty"));
            }
            let eval_set = match &eval_classes {
                Some(s) => split_classes(&eval_data, &[parse_classes(s)?], true)?
                    .pop()
                    .expect("one group"),
                None => eval_data,
            };
            let teacher_net = load_lenet(&teacher)?;
            let mut student = teacher_net.clone();
            student.set_bits(stage_bits.0, stage_bits.1)?;
            student.quant_active = true;
            init_quantizers(&mut student, &calibration_batch(&distill_set, 256))?;
            let report = train(&mut student, &distill_set, &eval_set, &cfg, Some(&teacher_net))?;
            save_network(&out, &student)?;
            write_report(&targs.report_out, &report)?;
            let last = report.records.last().unwrap();
            println!("eval accuracy={}", last.eval_accuracy);
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Cmd::Eval { data, ckpt } => {
            let (_, eval_data) = load_data(&data)?;
            let accuracy = if is_deployed_file(&ckpt)? {
                let arch = lenet_q(&LenetOptions::default(), 0);
                let model = load_deployed(&ckpt, &arch)?;
                eval_deployed(&model, &eval_data)?
            } else {
                let net = load_lenet(&ckpt)?;
                evaluate(&net, &eval_data, 64)?.accuracy
            };
            println!("accuracy={accuracy}");
            Ok(())
        }
        Cmd::Deploy { ckpt, out } => {
            let net = load_lenet(&ckpt)?;
            let model = deploy(&net)?;
            save_deployed(&out, &model)?;
            println!("deployed model written to {}", out.display());
            Ok(())
        }
        Cmd::PackBench {
            sizes,
            reps,
            bits,
            out,
        } => {
            if reps < 30 {
                return Err(usage_err("--reps must be at least 30"));
            }
            let (n_x, n_w) = parse_bits(&bits)?;
            let sizes: Vec<usize> = sizes
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| usage_err("bad --sizes")))
                .collect::<anyhow::Result<_>>()?;
            let rows = qil::bitpack::bench_dot(&sizes, reps, n_w, n_x, 1);
            let mut csv = String::from("path,len,median_ns,reps\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{}\n", r.path, r.len, r.median_ns, r.reps));
            }
            atomic_write(&out, csv.as_bytes())?;
            println!("benchmark written to {}", out.display());
            Ok(())
        }
        Cmd::Report {
            data,
            ckpt,
            run_csv,
            out_dir,
        } => {
            let net = load_lenet(&ckpt)?;
            std::fs::create_dir_all(&out_dir)?;
            // histograms need a batch of activations
            let (_, eval_data) = load_data(&data)?;
            let calib = calibration_batch(&eval_data, 256);
            let was_active = net.quant_active;
            if !was_active {
                return Err(anyhow!("report requires a quantized checkpoint"));
            }
            let mut fp_view = net.clone();
            fp_view.quant_active = false;
            let (_, cache) = fp_view.forward(&calib, qil::nn::Mode::Eval)?;
            let inputs = fp_view.quant_layer_inputs(&cache);
            for layer in net.quantized_layer_names() {
                let w_csv = weight_histogram_csv(&net, &layer)?;
                atomic_write(&out_dir.join(format!("hist_w_{layer}.csv")), w_csv.as_bytes())?;
                let acts = inputs
                    .get(layer.as_str())
                    .ok_or_else(|| anyhow!("no activations captured for {layer}"))?;
                let a_csv = activation_histogram_csv(&net, &layer, acts)?;
                atomic_write(&out_dir.join(format!("hist_a_{layer}.csv")), a_csv.as_bytes())?;
            }
            if let Some(run_csv) = run_csv {
                let text = std::fs::read_to_string(&run_csv)
                    .with_context(|| format!("reading {}", run_csv.display()))?;
                let pruning = extract_pruning_columns(&text)
                    .ok_or_else(|| usage_err("run CSV has no pruning columns"))?;
                atomic_write(&out_dir.join("pruning_over_epochs.csv"), pruning.as_bytes())?;
            }
            println!("reports written to {}", out_dir.display());
            Ok(())
        }
        Cmd::SynthData {
            out_dir,
            train,
            test,
            seed,
        } => {
            synth::write_synthetic_dataset(&out_dir, train, test, seed)?;
            println!(
                "wrote {train} train / {test} test samples to {}",
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn eval_deployed(model: &qil::deploy::DeployedModel, data: &DatasetHandle) -> anyhow::Result<f64> {
    let mut correct = 0usize;
    let mut idx = 0;
    while idx < data.len() {
        let end = (idx + 64).min(data.len());
        let (x, labels) = data.batch_range(idx, end);
        let logits = model.forward(&x)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
        idx = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Select the epoch and pruning columns out of a run-report CSV
/// (eval rows only).
fn extract_pruning_columns(csv: &str) -> Option<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let keep: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| **h == "epoch" || h.starts_with("prune_"))
        .map(|(i, _)| i)
        .collect();
    if keep.len() <= 1 {
        return None;
    }
    let split_col = header.iter().position(|h| *h == "split")?;
    let mut out = keep
        .iter()
        .map(|&i| header[i])
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.get(split_col) != Some(&"eval") {
            continue;
        }
        let row: Vec<&str> = keep.iter().map(|&i| cells[i]).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Some(out)
}
