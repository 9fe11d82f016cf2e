use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use rfcnet::analysis::{compare_presets, count_flops, reference_note, render_comparison};
use rfcnet::data::{load_checkpoint, save_checkpoint, save_mask, DatasetSpec, Sample, Source};
use rfcnet::ldcs::Merge;
use rfcnet::rfcnet::{enumerate_chains, receptive_field, Preset, RfcConfig, RfcModel};
use rfcnet::training::{
    check_model_gradients, evaluate, predict, train_loop, MiouMode, Profile, TrainConfig,
};

/// Gradient tolerance for `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "rfcnet",
    version,
    about = "Receptive-field-chain segmentation networks on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Per-layer parameter and FLOP report.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Input height and width.
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [224, 224])]
        input_size: Vec<usize>,
        /// Emit the per-layer table as CSV instead of text.
        #[arg(long)]
        csv: bool,
        /// Also tabulate all four presets with the same depth and width.
        #[arg(long)]
        compare: bool,
    },
    /// List every receptive-field chain with its theoretical size.
    Chains {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Finite-difference check of all parameter gradients at 64-bit.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [8, 8])]
        input_size: Vec<usize>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Train, writing per-epoch logs and checkpoints to --out.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        opt: TrainArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Print the mIoU of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long, default_value = "pooled")]
        miou_mode: MiouMode,
    },
    /// Write predicted masks (0/255 PNG) for a dataset split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Preset fixing m and the kernel list.
    #[arg(long, conflicts_with_all = ["m", "kernels"])]
    preset: Option<Preset>,
    /// Tree branching factor.
    #[arg(long, requires = "kernels")]
    m: Option<usize>,
    /// Comma-separated strong kernel sizes, one per branch.
    #[arg(long, value_delimiter = ',', requires = "m")]
    kernels: Option<Vec<usize>>,
    #[arg(long)]
    depth: Option<usize>,
    /// Channels per tree group (also the stem width).
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    merge: Option<Merge>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    no_bias: bool,
    #[arg(long, env = "RFCNET_SEED", default_value_t = 0)]
    seed: u64,
    /// Width 2, depth 2: small enough for exhaustive checks.
    #[arg(long)]
    tiny: bool,
}

impl ModelArgs {
    fn config(&self) -> rfcnet::Result<RfcConfig> {
        let mut cfg = RfcConfig::preset(self.preset.unwrap_or(Preset::A));
        if let (Some(m), Some(k)) = (self.m, &self.kernels) {
            cfg.m = m;
            cfg.kernels = k.clone();
        }
        if self.tiny {
            cfg = cfg.with_width(2).with_depth(2);
        }
        if let Some(d) = self.depth {
            cfg = cfg.with_depth(d);
        }
        if let Some(w) = self.width {
            cfg = cfg.with_width(w);
        }
        if let Some(merge) = self.merge {
            cfg.merge = merge;
        }
        if let Some(c) = self.classes {
            cfg.num_classes = c;
        }
        cfg.include_bias = !self.no_bias;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn preset_label(&self) -> Option<Preset> {
        match (self.preset, self.m) {
            (Some(p), _) => Some(p),
            (None, None) => Some(Preset::A),
            _ => None,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Use generated ellipse images instead of a directory.
    #[arg(long, conflicts_with = "data")]
    synthetic: bool,
    /// Number of synthetic samples.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Directory with images/ and masks/ subdirectories.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `filename,split` list; without it 80% of samples train.
    #[arg(long, requires = "data")]
    manifest: Option<PathBuf>,
    /// Dataset profile supplying image size and schedule defaults.
    #[arg(long)]
    profile: Option<Profile>,
    /// Image height and width (default: profile size, else 64 64).
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    image_size: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Threads for image decoding; the numeric path is single-threaded.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl DataArgs {
    fn spec(&self) -> anyhow::Result<DatasetSpec> {
        let resize = match (&self.image_size, self.profile) {
            (Some(v), _) => (v[0], v[1]),
            (None, Some(p)) => p.resize(),
            (None, None) => (64, 64),
        };
        let source = match &self.data {
            Some(path) => Source::Directory {
                path: path.clone(),
                manifest: self.manifest.clone(),
            },
            None if self.synthetic => Source::Synthetic {
                count: self.samples,
            },
            None => bail!("no data source: pass --synthetic or --data DIR"),
        };
        let mut spec = DatasetSpec::synthetic(0, resize.0, resize.1, self.data_seed);
        spec.source = source;
        spec.threads = self.threads.max(1);
        Ok(spec)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    ohem_threshold: Option<f64>,
    #[arg(long, default_value = "pooled")]
    miou_mode: MiouMode,
}

impl TrainArgs {
    fn config(&self, profile: Option<Profile>, seed: u64) -> rfcnet::Result<TrainConfig> {
        let mut c = TrainConfig::profile(profile.unwrap_or(Profile::Kvasir));
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.base_lr = self.lr.unwrap_or(c.base_lr);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.step_size = self.step_size.unwrap_or(c.step_size);
        c.gamma = self.gamma.unwrap_or(c.gamma);
        c.momentum = self.momentum.unwrap_or(c.momentum);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.ohem_threshold = self.ohem_threshold.unwrap_or(c.ohem_threshold);
        c.miou_mode = self.miou_mode;
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

/// Reports a flag problem the way clap does, exiting with status 2.
fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, msg).exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Analyze {
            model,
            input_size,
            csv,
            compare,
        } => {
            let cfg = model.config().unwrap_or_else(|e| usage_error(e));
            let (h, w) = (input_size[0], input_size[1]);
            if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
                usage_error(format!(
                    "--input-size {h} {w}: both must be positive multiples of 4"
                ));
            }
            analyze(&cfg, model.preset_label(), h, w, csv, compare)
        }
        Command::Chains { model } => {
            let cfg = model.config().unwrap_or_else(|e| usage_error(e));
            println!("{:>5}  {:<24} {:>4}", "leaf", "kernels", "rf");
            for chain in enumerate_chains(&cfg) {
                let ks: Vec<String> = chain
                    .kernel_sequence
                    .iter()
                    .map(|k| k.to_string())
                    .collect();
                println!(
                    "{:>5}  {:<24} {:>4}",
                    chain.leaf_index,
                    ks.join(","),
                    receptive_field(&chain)
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            model,
            input_size,
            eps,
        } => {
            let cfg = model.config().unwrap_or_else(|e| usage_error(e));
            let (h, w) = (input_size[0], input_size[1]);
            if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
                usage_error(format!(
                    "--input-size {h} {w}: both must be positive multiples of 4"
                ));
            }
            let report = check_model_gradients(&cfg, h, w, eps)?;
            for (name, r) in &report.per_param {
                println!(
                    "{name:<28} {:>6} coords  max rel error {:.3e}",
                    r.checked, r.max_rel_error
                );
            }
            let max = report.max_rel_error();
            println!("checked {} coordinates; max relative error {max:.3e} (tolerance {GRADCHECK_TOL:e})", report.checked());
            Ok(if max <= GRADCHECK_TOL {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Train {
            model,
            data,
            opt,
            out,
        } => {
            let cfg = model.config().unwrap_or_else(|e| usage_error(e));
            let tc = opt
                .config(data.profile, cfg.seed)
                .unwrap_or_else(|e| usage_error(e));
            let spec = data.spec().unwrap_or_else(|e| usage_error(e));
            train(cfg, tc, &spec, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            miou_mode,
        } => {
            let spec = data.spec().unwrap_or_else(|e| usage_error(e));
            let model = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let samples = select(&spec, split)?;
            if samples.is_empty() {
                bail!("selected split is empty");
            }
            let score = evaluate(&model, &samples, miou_mode)?;
            println!("mIoU ({miou_mode}, {} samples): {score:.4}", samples.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict {
            checkpoint,
            data,
            split,
            out,
        } => {
            let spec = data.spec().unwrap_or_else(|e| usage_error(e));
            let model = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let samples = select(&spec, split)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, s) in samples.iter().enumerate() {
                let name = s.name.clone().unwrap_or_else(|| format!("{i:05}"));
                let path = out.join(format!("{name}.png"));
                save_mask(&predict(&model, s)?, &path)?;
            }
            println!("wrote {} masks to {}", samples.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn select(spec: &DatasetSpec, split: SplitArg) -> anyhow::Result<Vec<Sample>> {
    let (train, val) = spec.load()?;
    Ok(match split {
        SplitArg::Train => train,
        SplitArg::Val => val,
        SplitArg::All => train.into_iter().chain(val).collect(),
    })
}

fn analyze(
    cfg: &RfcConfig,
    preset: Option<Preset>,
    h: usize,
    w: usize,
    csv: bool,
    compare: bool,
) -> anyhow::Result<ExitCode> {
    let model = RfcModel::<f32>::build(cfg)?;
    let report = count_flops(&model, h, w);
    if csv {
        print!("{}", report.to_csv());
        return Ok(ExitCode::SUCCESS);
    }
    println!(
        "config: m={} kernels={:?} depth={} width={} merge={} bias={}",
        cfg.m, cfg.kernels, cfg.depth, cfg.width, cfg.merge, cfg.include_bias
    );
    print!("{}", report.render_text());
    if let Some(p) = preset {
        println!();
        print!("{}", reference_note(p, &report));
    }
    if compare {
        println!();
        print!(
            "{}",
            render_comparison(&compare_presets(&Preset::ALL, cfg, h, w)?)
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train(
    cfg: RfcConfig,
    tc: TrainConfig,
    spec: &DatasetSpec,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let (train_set, val_set) = spec.load()?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!(
            "need non-empty train and validation splits, got {} and {}",
            train_set.len(),
            val_set.len()
        );
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let model = RfcModel::<f32>::build(&cfg)?;
    save_checkpoint(&model, &out.join("init.ckpt"))?;
    eprintln!(
        "training {} params on {} train / {} val samples for {} epochs",
        model.num_params(true),
        train_set.len(),
        val_set.len(),
        tc.epochs
    );
    let start = Instant::now();
    let mut log = String::new();
    let outcome = train_loop(&model, &train_set, &val_set, &tc, |r| {
        let line = r.log_line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    fs::write(out.join("train.log"), &log)?;
    fs::write(out.join("history.csv"), outcome.history.to_csv())?;
    save_checkpoint(&model, &out.join("last.ckpt"))?;
    model.load_state(&outcome.best_state)?;
    save_checkpoint(&model, &out.join("best.ckpt"))?;
    let h = &outcome.history;
    println!(
        "best val mIoU {:.4} at epoch {} ({:.1}s); checkpoints in {}",
        h.best_val_miou().unwrap_or(0.0),
        h.converged_epoch.unwrap_or(0),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
