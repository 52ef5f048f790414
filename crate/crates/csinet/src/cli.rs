//! The `csinet` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use csinet_core::channel::{peak_energy_fraction, ChannelDims, Dataset, DftPlan, SplitSizes, SyntheticProfile};
use csinet_core::complexity::{analyze, AccountingMode, Scope};
use csinet_core::models::{Architecture, CompressionRatio, ModelGraph, ModelSpec};
use csinet_core::train::{
    evaluate, evaluate_reconstruction, history_csv, table_header, table_row, train, EpochRecord, EvalReport, TrainConfig,
    TrainObserver,
};

use crate::io;
use crate::parallel::{self, ThreadPool};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "csinet", version, about = "Convolutional CSI-feedback autoencoders: data, training, analysis, verification")]
pub struct Cli {
    /// key=value file of default flag values (explicit flags take precedence)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/val/test splits
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train an architecture and write weights, history and a test row
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Score weights (or an untrained model) on a dataset
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Per-layer parameter and FLOP report
    #[command(args_override_self = true)]
    Analyze(AnalyzeArgs),
    /// Compress a dataset into codewords
    #[command(args_override_self = true)]
    Encode(EncodeArgs),
    /// Reconstruct from codewords
    #[command(args_override_self = true)]
    Decode(DecodeArgs),
    /// Run the self-checks and print a JSON summary
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Convcsinet,
    Shufflecsinet,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Convcsinet => Architecture::ConvCsiNet,
            ArchArg::Shufflecsinet => Architecture::ShuffleCsiNet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Standard,
    PaperTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Encoder,
    Decoder,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Text,
    Csv,
}

fn parse_cr(s: &str) -> std::result::Result<u32, String> {
    let den = s.strip_prefix("1/").unwrap_or(s);
    match den.parse::<u32>() {
        Ok(v @ (16 | 32)) => Ok(v),
        _ => Err(format!("compression ratio must be 16 or 32 (1/16 or 1/32), got '{s}'")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "convcsinet")]
    pub arch: ArchArg,
    /// Compression ratio denominator
    #[arg(long, value_parser = parse_cr, default_value = "16")]
    pub cr: u32,
}

impl ModelArgs {
    pub fn spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::new(self.arch.into(), CompressionRatio::one_over(self.cr))?)
    }
}

/// Architecture flags that are checked against a weights file when given.
#[derive(Debug, Clone, Args)]
pub struct OptModelArgs {
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    #[arg(long, value_parser = parse_cr)]
    pub cr: Option<u32>,
}

impl OptModelArgs {
    fn load(&self, weights: &Path) -> Result<ModelGraph<f32>> {
        let model = io::read_weights(weights, None)?;
        let spec = model.spec();
        if let Some(a) = self.arch {
            if Architecture::from(a) != spec.arch {
                bail!(csinet_core::Error::Spec(format!("{} holds {} weights, --arch asks for {}", weights.display(), spec.arch, Architecture::from(a))));
            }
        }
        if let Some(c) = self.cr {
            if CompressionRatio::one_over(c) != spec.cr {
                bail!(csinet_core::Error::Spec(format!("{} holds CR {} weights, --cr asks for 1/{c}", weights.display(), spec.cr)));
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Output directory for train/val/test .csib + .meta
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub val: usize,
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    /// 75,000 / 12,500 / 12,500 samples
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Fixed cluster count (sets both ends of the range)
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub clusters_min: usize,
    #[arg(long, default_value_t = 3)]
    pub clusters_max: usize,
    /// Delay and angle spread together
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub delay_spread: f64,
    #[arg(long, default_value_t = 1.0)]
    pub angle_spread: f64,
    /// Cluster delay centers lie in 0..delay-max
    #[arg(long, default_value_t = 6)]
    pub delay_max: usize,
    #[arg(long, default_value_t = 1.0)]
    pub power_decay: f64,
    /// Subcarriers
    #[arg(long, default_value_t = 256)]
    pub nc: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

impl GenDataArgs {
    pub fn profile(&self) -> SyntheticProfile {
        let (cmin, cmax) = match self.clusters {
            Some(k) => (k, k),
            None => (self.clusters_min, self.clusters_max),
        };
        let (ds, as_) = match self.spread {
            Some(s) => (s, s),
            None => (self.delay_spread, self.angle_spread),
        };
        SyntheticProfile {
            clusters_min: cmin,
            clusters_max: cmax,
            delay_max: self.delay_max,
            delay_spread: ds,
            angle_spread: as_,
            power_decay: self.power_decay,
            seed: self.seed,
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        if self.full_scale {
            SplitSizes::full_scale()
        } else {
            SplitSizes { train: self.train, val: self.val, test: self.test }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory holding train/val/test datasets
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Output directory for weights, history and evaluation row
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Seed of the initialization and the mini-batch order
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Epochs (100 by default, 1000 with --full-scale)
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub full_scale: bool,
    /// Stop after this many optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Use only the first N training samples
    #[arg(long)]
    pub limit: Option<usize>,
    /// Validate every N epochs (0 disables validation)
    #[arg(long, default_value_t = 1)]
    pub val_every: usize,
    /// Save the last weights as the main file instead of the best validated ones
    #[arg(long)]
    pub keep_final: bool,
    /// Record elapsed seconds in the history (makes it run-dependent)
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Gradient shards per batch (defaults to --threads). Batch-norm
    /// statistics are per shard, so this value changes results.
    #[arg(long)]
    pub shards: Option<usize>,
    /// Evaluation chunk size
    #[arg(long, default_value_t = 100)]
    pub chunk: usize,
    /// No per-epoch progress on stderr
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let mut cfg = if self.full_scale { TrainConfig::default() } else { TrainConfig::desk() };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.max_steps = self.steps;
        cfg.batch_size = self.batch;
        cfg.adam.lr = self.lr;
        cfg.seed = self.seed;
        cfg.val_every = self.val_every;
        cfg.best_checkpoint = !self.keep_final;
        cfg.shards = self.shards.unwrap_or(self.threads).max(1);
        cfg.eval_chunk = self.chunk;
        cfg
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "untrained")]
    pub weights: Option<PathBuf>,
    /// Score a freshly initialized model (uses --arch, --cr, --seed)
    #[arg(long, conflicts_with = "weights")]
    pub untrained: bool,
    #[command(flatten)]
    pub model: OptModelArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Dataset stem
    #[arg(long, default_value = "data/test")]
    pub data: PathBuf,
    /// Also write the report here
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub chunk: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "standard")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "full")]
    pub scope: ScopeArg,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub model: OptModelArgs,
    /// Dataset stem or CSIB tensor of shape (n, 2, 32, 32)
    #[arg(long)]
    pub input: PathBuf,
    /// Codeword tensor (n, M/4, 2, 2)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub chunk: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub model: OptModelArgs,
    /// Codeword tensor (n, M/4, 2, 2)
    #[arg(long)]
    pub input: PathBuf,
    /// Reconstruction tensor (n, 2, 32, 32)
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth dataset stem; reports NMSE and rho
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub chunk: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Complexity table, shapes, gradient checks, MAC counts, pipeline and metrics
    #[arg(long)]
    pub quick: bool,
    /// Gradient checks only (every layer, then --arch or both architectures)
    #[arg(long)]
    pub gradcheck: bool,
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    #[arg(long, value_parser = parse_cr, default_value = "16")]
    pub cr: u32,
    /// Check a weights file
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = csinet_core::autodiff::GRAD_CHECK_PROBES)]
    pub probes: usize,
    #[arg(long, default_value_t = csinet_core::autodiff::GRAD_CHECK_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Parses `args` (program name first), merging `--config` if present.
pub fn parse(args: &[String]) -> Result<Cli> {
    let config = find_config(args)?;
    let mut merged: Vec<String> = args.to_vec();
    if let Some(path) = config {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
        let entries = crate::config::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let sub_pos = subcommand_position(args).ok_or_else(|| anyhow!("--config needs a command"))?;
        let root = Cli::command();
        let sub = root
            .find_subcommand(&args[sub_pos])
            .ok_or_else(|| anyhow!("unknown command '{}'", args[sub_pos]))?;
        let extra = crate::config::to_args(&entries, sub).with_context(|| format!("in {}", path.display()))?;
        merged.splice(sub_pos + 1..sub_pos + 1, extra);
    }
    let matches = Cli::command().try_get_matches_from(&merged)?;
    Ok(Cli::from_arg_matches(&matches)?)
}

fn find_config(args: &[String]) -> Result<Option<PathBuf>> {
    let mut found = None;
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            found = Some(PathBuf::from(it.next().ok_or_else(|| anyhow!("--config needs a file"))?));
        } else if let Some(v) = a.strip_prefix("--config=") {
            found = Some(PathBuf::from(v));
        }
    }
    Ok(found)
}

fn subcommand_position(args: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if a == "--config" {
            i += 2;
            continue;
        }
        if !a.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Runs a parsed command. Data goes to `out`, progress to `err`. Returns
/// the process exit status.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out).map(|_| 0),
        Command::Train(a) => train_cmd(&a, out, err).map(|_| 0),
        Command::Eval(a) => eval_cmd(&a, out).map(|_| 0),
        Command::Analyze(a) => analyze_cmd(&a, out).map(|_| 0),
        Command::Encode(a) => encode_cmd(&a, out).map(|_| 0),
        Command::Decode(a) => decode_cmd(&a, out).map(|_| 0),
        Command::Verify(a) => verify::run(&a, out, err),
    }
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let dims = ChannelDims { nc: a.nc, ..ChannelDims::default() };
    let profile = a.profile();
    let pool = ThreadPool::new(a.threads);
    let splits = parallel::generate_splits(&profile, dims, a.sizes(), &pool)?;
    for d in &splits {
        io::write_dataset(&a.out.join(&d.meta.split), d)?;
        writeln!(
            out,
            "{:<5} {:>6} samples  energy retained {:.6}  clipped {}",
            d.meta.split, d.meta.count, d.meta.energy_retained, d.meta.clipped
        )?;
    }
    let train = &splits[0];
    let mats = train.delay_matrices()?;
    let concentration = mats.iter().map(peak_energy_fraction).sum::<f64>() / mats.len() as f64;
    writeln!(out, "delay-domain energy concentration (train, mean peak-cell share) {concentration:.4}")?;
    writeln!(out, "normalization scale {:e} offset {}", train.meta.info.scale, train.meta.info.offset)?;
    Ok(())
}

struct Progress<'a> {
    err: &'a mut dyn Write,
    start: Option<Instant>,
    quiet: bool,
}

impl TrainObserver for Progress<'_> {
    fn epoch_end(&mut self, r: &EpochRecord) {
        if self.quiet {
            return;
        }
        let v = match (r.val_nmse_db, r.val_rho) {
            (Some(n), Some(p)) => format!("  val NMSE {n:.2} dB  rho {p:.4}"),
            _ => String::new(),
        };
        let _ = writeln!(self.err, "epoch {:>4}  loss {:.6}{v}", r.epoch, r.train_loss);
    }

    fn elapsed_seconds(&self) -> Option<f64> {
        self.start.map(|s| s.elapsed().as_secs_f64())
    }
}

fn limit(mut d: Dataset, n: Option<usize>) -> Result<Dataset> {
    if let Some(n) = n.filter(|&n| n < d.len()) {
        d.x = d.x.slice_samples(0, n)?;
        d.meta.count = n;
    }
    Ok(d)
}

fn check_dims(spec: &ModelSpec, d: &Dataset, name: &str) -> Result<()> {
    if d.meta.dims.ncp != spec.ncp || d.meta.dims.nt != spec.nt {
        bail!(csinet_core::Error::Spec(format!(
            "{name} holds {}x{} matrices, the model expects {}x{}",
            d.meta.dims.ncp, d.meta.dims.nt, spec.ncp, spec.nt
        )));
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let spec = a.model.spec()?;
    let cfg = a.config();
    let train_set = limit(io::read_dataset(&a.data.join("train"))?, a.limit)?;
    check_dims(&spec, &train_set, "training set")?;
    let val_set = if a.val_every > 0 { Some(io::read_dataset(&a.data.join("val"))?) } else { None };
    let test_stem = a.data.join("test");
    let test_set = if io::dataset_paths(&test_stem).0.is_file() { Some(io::read_dataset(&test_stem)?) } else { None };
    let mut model = ModelGraph::<f32>::build(spec.clone(), a.seed)?;
    let pool = ThreadPool::new(a.threads);
    let mut progress = Progress { err, start: a.wall_clock.then(Instant::now), quiet: a.quiet };
    let outcome = train(&mut model, &train_set, val_set.as_ref(), &cfg, &pool, &mut progress)?;

    let tag = spec.tag();
    io::write_weights(&a.out.join(format!("{tag}.final.csiw")), &model)?;
    let chosen = match (&outcome.best, cfg.best_checkpoint) {
        (Some((epoch, params)), true) => {
            let mut m = model.clone();
            m.set_params(params.clone())?;
            writeln!(out, "best validation NMSE at epoch {epoch}")?;
            m
        }
        _ => model,
    };
    io::write_weights(&a.out.join(format!("{tag}.csiw")), &chosen)?;
    io::write_text(&a.out.join(format!("{tag}.history.csv")), &history_csv(&outcome.history))?;
    writeln!(out, "{} optimizer steps over {} epochs", outcome.steps, outcome.history.len())?;
    if let Some(t) = test_set {
        check_dims(&spec, &t, "test set")?;
        let report = evaluate(&chosen, &t, &DftPlan::new(t.meta.dims)?, a.chunk)?;
        let text = eval_text(&spec, spec.arch.name(), &report);
        io::write_text(&a.out.join(format!("{tag}.eval.txt")), &text)?;
        out.write_all(text.as_bytes())?;
    }
    Ok(())
}

fn eval_text(spec: &ModelSpec, method: &str, r: &EvalReport) -> String {
    let mut s = format!("{}\n{}\n", table_header(), table_row(&spec.cr.to_string(), method, r));
    s.push_str(&format!(
        "samples {}  NMSE p10 {:.2} / p50 {:.2} / p90 {:.2} dB  rho skipped subcarriers {}\n",
        r.count,
        r.percentile(10.0),
        r.percentile(50.0),
        r.percentile(90.0),
        r.rho_skipped
    ));
    s
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (model, method) = match &a.weights {
        Some(w) => {
            let m = a.model.load(w)?;
            let name = m.spec().arch.name().to_string();
            (m, name)
        }
        None => {
            let spec = ModelSpec::new(
                a.model.arch.unwrap_or(ArchArg::Convcsinet).into(),
                CompressionRatio::one_over(a.model.cr.unwrap_or(16)),
            )?;
            let name = format!("{} (untrained)", spec.arch.name());
            (ModelGraph::<f32>::build(spec, a.seed)?, name)
        }
    };
    let data = io::read_dataset(&a.data)?;
    check_dims(model.spec(), &data, "dataset")?;
    let report = evaluate(&model, &data, &DftPlan::new(data.meta.dims)?, a.chunk)?;
    let text = eval_text(model.spec(), &method, &report);
    if let Some(p) = &a.out {
        io::write_text(p, &text)?;
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn analyze_cmd(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let model = ModelGraph::<f32>::build(a.model.spec()?, 0)?;
    let mode = match a.mode {
        ModeArg::Standard => AccountingMode::standard(),
        ModeArg::PaperTable => AccountingMode::paper_table(),
    };
    let scope = match a.scope {
        ScopeArg::Encoder => Scope::Encoder,
        ScopeArg::Decoder => Scope::Decoder,
        ScopeArg::Full => Scope::Full,
    };
    let report = analyze(&model, mode, scope)?;
    let text = match a.format {
        FormatArg::Text => report.to_text(),
        FormatArg::Csv => report.to_csv(),
    };
    match &a.out {
        Some(p) => io::write_text(p, &text),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

/// Reads a `(n, 2, N_c', N_t)` tensor from a dataset stem or a bare CSIB file.
fn read_images(path: &Path) -> Result<csinet_core::Tensor4<f32>> {
    if io::dataset_paths(path).1.is_file() || !path.is_file() {
        return Ok(io::read_dataset(path)?.x);
    }
    Ok(io::read_tensor(path)?.into_tensor())
}

fn encode_cmd(a: &EncodeArgs, out: &mut dyn Write) -> Result<()> {
    let model = a.model.load(&a.weights)?;
    let x = read_images(&a.input)?;
    let s = chunked(&x, a.chunk, |c| model.encode(c))?;
    io::write_tensor(&a.out, &s)?;
    writeln!(out, "wrote codewords {} to {}", s.shape(), a.out.display())?;
    Ok(())
}

fn decode_cmd(a: &DecodeArgs, out: &mut dyn Write) -> Result<()> {
    let model = a.model.load(&a.weights)?;
    let s: csinet_core::Tensor4<f32> = io::read_tensor(&a.input)?.into_tensor();
    let y = chunked(&s, a.chunk, |c| model.decode(c))?;
    io::write_tensor(&a.out, &y)?;
    writeln!(out, "wrote reconstruction {} to {}", y.shape(), a.out.display())?;
    if let Some(t) = &a.truth {
        let truth = io::read_dataset(t)?;
        let r = evaluate_reconstruction(&truth.x, &y, &truth.meta.info, &DftPlan::new(truth.meta.dims)?)?;
        out.write_all(eval_text(model.spec(), model.spec().arch.name(), &r).as_bytes())?;
    }
    Ok(())
}

fn chunked(
    x: &csinet_core::Tensor4<f32>,
    chunk: usize,
    f: impl Fn(&csinet_core::Tensor4<f32>) -> csinet_core::Result<csinet_core::Tensor4<f32>>,
) -> Result<csinet_core::Tensor4<f32>> {
    let n = x.shape().n;
    if n == 0 {
        bail!(csinet_core::Error::EmptyDataset("input holds no samples".into()));
    }
    let parts = (0..n)
        .step_by(chunk.max(1))
        .map(|s| f(&x.slice_samples(s, (s + chunk.max(1)).min(n))?))
        .collect::<csinet_core::Result<Vec<_>>>()?;
    Ok(csinet_core::Tensor4::stack(&parts)?)
}
