//! Command-line surface: configuration, subcommands and run manifests.
//!
//! Settings come from built-in defaults, then an optional `key = value`
//! file, then `--set key=value` overrides, then dedicated flags. Every
//! command writes its artifacts plus a `manifest.txt` echoing the resolved
//! configuration into its output directory.

use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    gen_synthetic_pair, read_flo, read_gray, read_idx, read_kitti_flow_png, write_flo, write_flow_magnitude_pgm,
    write_gray_png16, DisplacementModel, IdxData, SyntheticParams,
};
use crate::densify::{densify, DensifyParams};
use crate::eval::{
    count_distractors, epe, outlier_rate, pool_stats, sensitivity_ratios, sensitivity_stats, write_csv, BucketStat,
    CsvRow, DisplacementBuckets,
};
use crate::loss::LossConfig;
use crate::mnist::{self, MnistConfig, Schedule};
use crate::net::{Architecture, DescriptorNet};
use crate::nnf::{sparse_flow, PmParams};
use crate::sampler::{SamplerConfig, Strategy, TrainingPair};
use crate::train::{train_from, write_loss_csv, TrainConfig};
use crate::types::FlowField;
use crate::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.txt";

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, Error>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident: $ty:ty = $default:expr,)*) => {
        /// Every tunable of every command.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
                match key.trim() {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string())),*]
            }
        }
    };
}

run_config! {
    strategy: Strategy = Strategy::Baseline,
    epochs: usize = 100,
    triplets_per_epoch: usize = 5000,
    batch_size: usize = 64,
    patch_size: usize = 31,
    descriptor_dim: usize = 64,
    margin: f64 = 100.0,
    lambda: f64 = 0.8,
    lr: f64 = 0.01,
    momentum: f64 = 0.9,
    lr_halve_every: usize = 100,
    val_fraction: f64 = 0.1,
    /// Also write a checkpoint every this many epochs (0 writes only the last).
    checkpoint_every: usize = 0,
    seed: u64 = 0,
    pm_range: usize = 100,
    pm_iterations: usize = 6,
    pm_decay: f64 = 0.5,
    consistency_tau: f64 = 1.0,
    densify_neighbours: usize = 16,
    densify_sigma_s: f64 = 15.0,
    densify_sigma_c: f64 = 0.08,
    outlier_threshold: f64 = 3.0,
    distractor_radius: f64 = 25.0,
    sensitivity_offset: usize = 5,
    synth_pairs: usize = 1,
    synth_width: usize = 160,
    synth_height: usize = 128,
    synth_octaves: usize = 4,
    synth_base_cell: f64 = 32.0,
    synth_model: DisplacementModel = DisplacementModel::Regions { count: 16 },
    synth_v_max: f64 = 90.0,
    synth_appearance: f64 = 0.0,
    mnist_epochs: usize = 15,
    mnist_batch_size: usize = 32,
    mnist_lr: f64 = 0.05,
    mnist_momentum: f64 = 0.9,
    mnist_channels: usize = 8,
    mnist_a_max: f64 = 0.8,
    mnist_weight_floor: f64 = 0.1,
    mnist_val_fraction: f64 = 0.1,
    mnist_test_fraction: f64 = 0.2,
    /// Directory of training or evaluation pairs.
    pairs: String = String::new(),
    mnist_images: String = String::new(),
    mnist_labels: String = String::new(),
}

impl RunConfig {
    /// Applies a `key = value` document; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Error> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), Error> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            strategy: self.strategy,
            epochs: self.epochs,
            triplets_per_epoch: self.triplets_per_epoch,
            batch_size: self.batch_size,
            architecture: Architecture {
                output_dim: self.descriptor_dim,
                ..Architecture::desk(self.patch_size)
            },
            sampler: SamplerConfig {
                patch_size: self.patch_size,
                loss: LossConfig {
                    margin: self.margin,
                    lambda: self.lambda,
                },
                ..SamplerConfig::default()
            },
            lr: self.lr,
            momentum: self.momentum,
            lr_halve_every: self.lr_halve_every,
            val_fraction: self.val_fraction,
            seed: self.seed,
        }
    }

    pub fn pm_params(&self) -> PmParams {
        PmParams {
            range: self.pm_range,
            iterations: self.pm_iterations,
            decay: self.pm_decay,
            seed: self.seed,
        }
    }

    pub fn densify_params(&self) -> DensifyParams {
        DensifyParams {
            neighbours: self.densify_neighbours,
            sigma_s: self.densify_sigma_s,
            sigma_c: self.densify_sigma_c,
        }
    }

    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            width: self.synth_width,
            height: self.synth_height,
            octaves: self.synth_octaves,
            base_cell: self.synth_base_cell,
            model: self.synth_model,
            v_max: self.synth_v_max,
            appearance: self.synth_appearance,
        }
    }

    pub fn mnist_config(&self) -> MnistConfig {
        MnistConfig {
            epochs: self.mnist_epochs,
            batch_size: self.mnist_batch_size,
            lr: self.mnist_lr,
            momentum: self.mnist_momentum,
            conv_channels: self.mnist_channels,
            a_max: self.mnist_a_max,
            weight_floor: self.mnist_weight_floor,
            val_fraction: self.mnist_val_fraction,
            test_fraction: self.mnist_test_fraction,
            seed: self.seed,
        }
    }

    /// Checks every derived module configuration and that referenced
    /// dataset paths exist.
    pub fn validate(&self) -> Result<(), Error> {
        self.train_config().validate()?;
        self.pm_params().validate()?;
        self.densify_params().validate()?;
        self.synthetic_params().validate()?;
        self.mnist_config().validate()?;
        if !(self.consistency_tau >= 0.0) {
            return Err(Error::Config("consistency_tau must be non-negative".into()));
        }
        if !(self.outlier_threshold >= 0.0) {
            return Err(Error::Config("outlier_threshold must be non-negative".into()));
        }
        if !(self.distractor_radius >= 1.0) {
            return Err(Error::Config("distractor_radius must be at least 1".into()));
        }
        for (key, path) in [
            ("pairs", &self.pairs),
            ("mnist_images", &self.mnist_images),
            ("mnist_labels", &self.mnist_labels),
        ] {
            if !path.is_empty() && !Path::new(path).exists() {
                return Err(Error::Config(format!("{key}: {path} does not exist")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "patchflow", version, about = "Train patch descriptors and compute optical flow")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic frame pairs with ground-truth flow.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a descriptor network on a directory of pairs.
    Train {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Match two frames and write a dense flow field.
    Flow {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frame1: PathBuf,
        #[arg(long)]
        frame2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Outlier rate and end-point error of a flow field against ground truth.
    Eval {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean distractor counts per displacement bucket.
    Distractors {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Descriptor sensitivity to a small horizontal shift per displacement bucket.
    Sensitivity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare training schedules on hardened MNIST.
    MnistBench {
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated schedule tags; all by default.
        #[arg(long, value_delimiter = ',')]
        schedules: Vec<Schedule>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Flow { .. } => "flow",
            Command::Eval { .. } => "eval",
            Command::Distractors { .. } => "distractors",
            Command::Sensitivity { .. } => "sensitivity",
            Command::MnistBench { .. } => "mnist-bench",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Resolves the configuration from defaults, file, overrides and flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Some(Command::Synth { count: Some(n), .. }) => cfg.synth_pairs = *n,
        Some(Command::Train {
            pairs, strategy, epochs, ..
        }) => {
            if let Some(p) = pairs {
                cfg.pairs = path_str(p);
            }
            if let Some(s) = strategy {
                cfg.strategy = *s;
            }
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
        }
        Some(Command::Distractors { pairs: Some(p), .. }) | Some(Command::Sensitivity { pairs: Some(p), .. }) => {
            cfg.pairs = path_str(p)
        }
        Some(Command::MnistBench { images, labels, .. }) => {
            if let Some(p) = images {
                cfg.mnist_images = path_str(p);
            }
            if let Some(p) = labels {
                cfg.mnist_labels = path_str(p);
            }
        }
        _ => {}
    }
    Ok(cfg)
}

struct Run<'a> {
    out: &'a Path,
    inputs: Vec<(&'static str, String)>,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(out: &'a Path) -> Result<Self, Error> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        Ok(Self {
            out,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, key: &'static str, path: &Path) {
        self.inputs.push((key, path_str(path)));
    }

    /// Registers an artifact and returns its full path.
    fn artifact(&mut self, name: String) -> PathBuf {
        let path = self.out.join(&name);
        self.outputs.push(name);
        path
    }

    fn write_text(&mut self, name: &str, text: &[u8]) -> Result<(), Error> {
        let path = self.artifact(name.to_string());
        fs::write(&path, text).map_err(io_err(&path))
    }

    fn finish(self, command: &str, cfg: &RunConfig) -> Result<(), Error> {
        let mut m = format!("command = {command}\nversion = {VERSION}\n");
        for (k, v) in &self.inputs {
            m.push_str(&format!("input.{k} = {v}\n"));
        }
        for o in &self.outputs {
            m.push_str(&format!("output = {o}\n"));
        }
        m.push_str(&cfg.to_text());
        let path = self.out.join(MANIFEST);
        fs::write(&path, m).map_err(io_err(&path))
    }
}

fn csv_bytes(rows: &[CsvRow]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    buf
}

/// Reads one pair directory holding `frame1.png`, `frame2.png` and a
/// ground truth `gt.flo` or KITTI-style `gt.png`.
pub fn load_pair(dir: &Path) -> Result<TrainingPair, Error> {
    let frame1 = read_gray(dir.join("frame1.png"))?;
    let frame2 = read_gray(dir.join("frame2.png"))?;
    let flo = dir.join("gt.flo");
    let gt = if flo.exists() {
        read_flo(flo)?
    } else {
        read_kitti_flow_png(dir.join("gt.png"))?
    };
    Ok(TrainingPair::new(frame1, frame2, gt)?)
}

/// Loads `dir` itself if it is a pair directory, otherwise every pair
/// subdirectory in name order.
pub fn load_pairs(dir: &Path) -> Result<Vec<TrainingPair>, Error> {
    if dir.join("frame1.png").exists() {
        return Ok(vec![load_pair(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.join("frame1.png").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Config(format!("{}: no pair directories found", dir.display())));
    }
    subdirs.iter().map(|d| load_pair(d)).collect()
}

fn require_path<'p>(key: &str, value: &'p str) -> Result<&'p Path, Error> {
    if value.is_empty() {
        return Err(Error::Config(format!("{key} is not set")));
    }
    Ok(Path::new(value))
}

/// Writes `count` synthetic pairs as `pair_NNN/{frame1.png,frame2.png,gt.flo}`.
fn synth(cfg: &RunConfig, run: &mut Run<'_>) -> Result<(), Error> {
    let params = cfg.synthetic_params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.synth_pairs {
        let (f1, f2, gt) = gen_synthetic_pair(&mut rng, &params)?;
        let dir = format!("pair_{i:03}");
        let full = run.out.join(&dir);
        fs::create_dir_all(&full).map_err(io_err(&full))?;
        write_gray_png16(run.artifact(format!("{dir}/frame1.png")), &f1)?;
        write_gray_png16(run.artifact(format!("{dir}/frame2.png")), &f2)?;
        write_flo(run.artifact(format!("{dir}/gt.flo")), &gt)?;
    }
    Ok(())
}

fn train_cmd(cfg: &RunConfig, run: &mut Run<'_>) -> Result<(), Error> {
    let dir = require_path("pairs", &cfg.pairs)?;
    run.input("pairs", dir);
    let pairs = load_pairs(dir)?;
    let tc = cfg.train_config();
    let net = DescriptorNet::new(tc.architecture.clone(), tc.seed)?;
    let mut saved: Vec<(usize, Vec<u8>)> = Vec::new();
    let (net, records) = train_from(&pairs, &tc, net, |rec, net| {
        if cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0 && rec.epoch < tc.epochs {
            saved.push((rec.epoch, net.to_bytes()));
        }
        eprintln!(
            "epoch {:>4} train {:.4} val {:.4} r_i {:.4}",
            rec.epoch, rec.train_loss, rec.val_loss, rec.r_i
        );
    })?;
    for (epoch, bytes) in saved {
        run.write_text(&format!("model_epoch{epoch:04}.ckpt"), &bytes)?;
    }
    run.write_text("model.ckpt", &net.to_bytes())?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &records).expect("writing to memory");
    run.write_text("loss.csv", &csv)?;
    Ok(())
}

/// Describe, match both ways, keep consistent matches and densify.
pub fn compute_flow(
    net: &DescriptorNet,
    pair: (&crate::types::GrayImage, &crate::types::GrayImage),
    cfg: &RunConfig,
) -> Result<(FlowField, FlowField), Error> {
    let p = net.input_size();
    let (da, db) = rayon::join(|| net.describe_field(pair.0, p), || net.describe_field(pair.1, p));
    let sparse = sparse_flow(&da?, &db?, &cfg.pm_params(), cfg.consistency_tau)?;
    let dense = densify(&sparse, pair.0, &cfg.densify_params())?;
    Ok((sparse, dense))
}

fn flow_cmd(cfg: &RunConfig, run: &mut Run<'_>, model: &Path, frame1: &Path, frame2: &Path) -> Result<(), Error> {
    run.input("model", model);
    run.input("frame1", frame1);
    run.input("frame2", frame2);
    let net = DescriptorNet::load(model)?;
    let f1 = read_gray(frame1)?;
    let f2 = read_gray(frame2)?;
    let (sparse, dense) = compute_flow(&net, (&f1, &f2), cfg)?;
    write_flo(run.artifact("sparse.flo".into()), &sparse)?;
    write_flo(run.artifact("flow.flo".into()), &dense)?;
    let max = write_flow_magnitude_pgm(run.artifact("magnitude.pgm".into()), &dense)?;
    println!("flow magnitude max {max}");
    Ok(())
}

fn read_gt(path: &Path) -> Result<FlowField, Error> {
    Ok(if path.extension().is_some_and(|e| e == "png") {
        read_kitti_flow_png(path)?
    } else {
        read_flo(path)?
    })
}

fn eval_cmd(cfg: &RunConfig, run: &mut Run<'_>, flow: &Path, gt: &Path) -> Result<(), Error> {
    run.input("flow", flow);
    run.input("gt", gt);
    let flow = read_flo(flow)?;
    let gt = read_gt(gt)?;
    if (flow.width(), flow.height()) != (gt.width(), gt.height()) {
        return Err(Error::Config("flow and ground truth sizes differ".into()));
    }
    let both: Vec<bool> = (0..gt.u().len()).map(|i| gt.valid()[i] && flow.valid()[i]).collect();
    let gt_valid = gt.valid_count();
    let mut rows = vec![CsvRow::overall(
        "density",
        if gt_valid == 0 {
            0.0
        } else {
            100.0 * both.iter().filter(|&&b| b).count() as f64 / gt_valid as f64
        },
    )];
    rows.push(CsvRow::overall("outlier_rate", outlier_rate(&flow, &gt, cfg.outlier_threshold, &both)?));
    rows.push(CsvRow::overall("epe", epe(&flow, &gt, &both)?));
    let buckets = DisplacementBuckets::default();
    for b in 0..buckets.len() {
        let mask: Vec<bool> = both
            .iter()
            .enumerate()
            .map(|(i, &m)| m && buckets.index(gt.u()[i].hypot(gt.v()[i])) == Some(b))
            .collect();
        if !mask.contains(&true) {
            continue;
        }
        let (low, high) = buckets.bounds(b);
        for (metric, value) in [
            ("outlier_rate", outlier_rate(&flow, &gt, cfg.outlier_threshold, &mask)?),
            ("epe", epe(&flow, &gt, &mask)?),
        ] {
            rows.push(CsvRow {
                low,
                high,
                metric: metric.into(),
                value,
            });
        }
    }
    run.write_text("metrics.csv", &csv_bytes(&rows))
}

fn describe_pairs(
    cfg: &RunConfig,
    run: &mut Run<'_>,
    model: &Path,
) -> Result<(Vec<TrainingPair>, DescriptorNet), Error> {
    let dir = require_path("pairs", &cfg.pairs)?;
    run.input("model", model);
    run.input("pairs", dir);
    Ok((load_pairs(dir)?, DescriptorNet::load(model)?))
}

/// Distractor statistics pooled over pairs.
pub fn distractor_stats(net: &DescriptorNet, pairs: &[TrainingPair], radius: f64) -> Result<Vec<BucketStat>, Error> {
    let buckets = DisplacementBuckets::default();
    let p = net.input_size();
    let per_pair = pairs
        .iter()
        .map(|pair| {
            let da = net.describe_field(&pair.frame1, p)?;
            let db = net.describe_field(&pair.frame2, p)?;
            Ok(count_distractors(&da, &db, &pair.gt, radius, &buckets)?)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(pool_stats(&per_pair))
}

/// Sensitivity statistics pooled over pairs.
pub fn pooled_sensitivity(net: &DescriptorNet, pairs: &[TrainingPair], offset: usize) -> Result<Vec<BucketStat>, Error> {
    let buckets = DisplacementBuckets::sensitivity();
    let p = net.input_size();
    let per_pair = pairs
        .iter()
        .map(|pair| {
            let da = net.describe_field(&pair.frame1, p)?;
            Ok(sensitivity_stats(&da, &pair.gt, offset, &buckets)?)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(pool_stats(&per_pair))
}

fn overall_mean(stats: &[BucketStat]) -> Option<f64> {
    let count: usize = stats.iter().map(|s| s.count).sum();
    let sum: f64 = stats.iter().filter_map(|s| s.mean.map(|m| m * s.count as f64)).sum();
    (count > 0).then(|| sum / count as f64)
}

fn distractors_cmd(cfg: &RunConfig, run: &mut Run<'_>, model: &Path) -> Result<(), Error> {
    let (pairs, net) = describe_pairs(cfg, run, model)?;
    let stats = distractor_stats(&net, &pairs, cfg.distractor_radius)?;
    let mut rows = CsvRow::from_stats("distractors", &stats);
    if let Some(total) = overall_mean(&stats) {
        rows.push(CsvRow::overall("distractors", total));
    }
    run.write_text("distractors.csv", &csv_bytes(&rows))
}

fn sensitivity_cmd(cfg: &RunConfig, run: &mut Run<'_>, model: &Path) -> Result<(), Error> {
    let (pairs, net) = describe_pairs(cfg, run, model)?;
    let profile = sensitivity_ratios(pooled_sensitivity(&net, &pairs, cfg.sensitivity_offset)?)?;
    let mut rows = CsvRow::from_stats("shift_distance", &profile.stats);
    for (s, r) in profile.stats.iter().zip(&profile.ratios) {
        if let Some(value) = r {
            rows.push(CsvRow {
                low: s.low,
                high: s.high,
                metric: "ratio".into(),
                value: *value,
            });
        }
    }
    run.write_text("sensitivity.csv", &csv_bytes(&rows))
}

fn mnist_cmd(cfg: &RunConfig, run: &mut Run<'_>, schedules: &[Schedule]) -> Result<(), Error> {
    let images_path = require_path("mnist_images", &cfg.mnist_images)?;
    let labels_path = require_path("mnist_labels", &cfg.mnist_labels)?;
    run.input("mnist_images", images_path);
    run.input("mnist_labels", labels_path);
    let IdxData::Images(images) = read_idx(images_path)? else {
        return Err(Error::Config(format!("{}: not an image file", images_path.display())));
    };
    let IdxData::Labels(labels) = read_idx(labels_path)? else {
        return Err(Error::Config(format!("{}: not a label file", labels_path.display())));
    };
    let mc = cfg.mnist_config();
    let (train, test) = mnist::prepare(&images, &labels, &mc)?;
    let schedules = if schedules.is_empty() {
        Schedule::ALL.to_vec()
    } else {
        schedules.to_vec()
    };
    let mut results = Vec::new();
    for s in schedules {
        let acc = mnist::run_schedule_experiment(&train, &test, s, &mc)?;
        eprintln!("{s:>16} L {:.2} H {:.2}", acc.l, acc.h);
        results.push((s, acc));
    }
    let mut csv = Vec::new();
    mnist::write_accuracy_csv(&mut csv, &results).expect("writing to memory");
    run.write_text("accuracy.csv", &csv)
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolve_config(&cli)?;
    if cli.dump_config {
        io::stdout()
            .write_all(cfg.to_text().as_bytes())
            .map_err(io_err(Path::new("<stdout>")))?;
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::Config("no command given (see --help)".into()));
    };
    cfg.validate()?;
    let out = match command {
        Command::Synth { out, .. }
        | Command::Train { out, .. }
        | Command::Flow { out, .. }
        | Command::Eval { out, .. }
        | Command::Distractors { out, .. }
        | Command::Sensitivity { out, .. }
        | Command::MnistBench { out, .. } => out,
    };
    let mut run = Run::new(out)?;
    match command {
        Command::Synth { .. } => synth(&cfg, &mut run)?,
        Command::Train { .. } => train_cmd(&cfg, &mut run)?,
        Command::Flow {
            model, frame1, frame2, ..
        } => flow_cmd(&cfg, &mut run, model, frame1, frame2)?,
        Command::Eval { flow, gt, .. } => eval_cmd(&cfg, &mut run, flow, gt)?,
        Command::Distractors { model, .. } => distractors_cmd(&cfg, &mut run, model)?,
        Command::Sensitivity { model, .. } => sensitivity_cmd(&cfg, &mut run, model)?,
        Command::MnistBench { schedules, .. } => mnist_cmd(&cfg, &mut run, schedules)?,
    }
    run.finish(command.name(), &cfg)
}
