//! Command-line harness: train, evaluate, attack, and inspect
//! semi-supervised ladder/VAT models, sweep experiment grids, and emit
//! reproducible run manifests.
//!
//! Every run writes a `manifest.toml` capturing the fully resolved
//! configuration plus checksums of the data it consumed; feeding that file
//! back through `--config` reproduces the run bit for bit. Flags always
//! override config-file values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lvat::attack::{adversarial_error_matrix, error_rate, AttackSpec, Norm};
use lvat::checkpoint;
use lvat::data::synth::{self, SynthKnobs, IMAGE_SIDE, TEST_OFFSET};
use lvat::data::{make_split, write_idx_images, write_idx_labels, Dataset};
use lvat::harness::{
    self, run_matrix, train, MatrixPlan, MetricsRecord, TrainConfig,
};
use lvat::numerics::{RngStream, Scalar};
use lvat::variants::{
    default_config, desk_config, nearest_label_row, VariantConfig, VariantKind, DESK_WIDTHS,
    PAPER_WIDTHS,
};
use lvat::vat::PerturbNorm;
use lvat::{Error, Result};

/// Synthetic corpus sizes when no data directory is given.
const DEFAULT_SYNTH_TRAIN: usize = 6000;
const DEFAULT_SYNTH_TEST: usize = 1500;
/// Default seed for data generation and labeled-subset selection.
const DEFAULT_DATA_SEED: u64 = 7777;

#[derive(Parser)]
#[command(
    name = "lvat",
    version,
    about = "Train, attack, and inspect semi-supervised ladder/VAT models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant; writes manifest, metrics log, and checkpoint.
    Train(CommonArgs),
    /// Print a saved model's clean test error rate.
    Eval(CheckpointArgs),
    /// Attack a saved model with fast-gradient perturbations per norm.
    Attack(CheckpointArgs),
    /// Print a saved model's output-smoothness metric.
    Introspect(CheckpointArgs),
    /// Train a (variant x labels x seed) grid and aggregate mean +/- se.
    Matrix(MatrixArgs),
    /// Print the hyperparameter preset table.
    Presets,
    /// Write the synthetic digit corpus as IDX files.
    SynthData(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Config file (TOML key/value); flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant: supervised | ladder | vat | lvac | lvac-lw | lvan | lvan-lw.
    #[arg(long)]
    variant: Option<String>,
    /// Number of labeled examples (presets exist for 50, 100, 1000).
    #[arg(long)]
    labels: Option<usize>,
    /// Training seed (initialization, batch order, corruption draws).
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for synthetic data and labeled-subset selection.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Use the reduced architecture and schedule.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epoch at which linear learning-rate decay begins.
    #[arg(long)]
    decay_start: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    labeled_batch: Option<usize>,
    #[arg(long)]
    unlabeled_batch: Option<usize>,
    /// Evaluate every this many epochs.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Encoder widths, comma-separated, input first, classes last.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Gaussian corruption scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Reconstruction weights: input layer, first hidden, upper layers.
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Adversarial radii: input layer, first hidden, upper layers.
    #[arg(long)]
    epsilon0: Option<f64>,
    #[arg(long)]
    epsilon1: Option<f64>,
    #[arg(long)]
    epsilon2: Option<f64>,
    /// Adversarial cost weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Power-iteration probe scale.
    #[arg(long)]
    xi: Option<f64>,
    /// Power-iteration count.
    #[arg(long)]
    power_iters: Option<usize>,
    /// Shape of virtual adversarial perturbations: l2 | linf.
    #[arg(long)]
    perturb_norm: Option<String>,
    /// Attack norms to evaluate, comma-separated: l1,l2,linf.
    #[arg(long)]
    norms: Option<String>,
    /// Attack radius per norm (defaults: 10, 2, 0.1).
    #[arg(long)]
    eps_l1: Option<f64>,
    #[arg(long)]
    eps_l2: Option<f64>,
    #[arg(long)]
    eps_linf: Option<f64>,
    /// Radius for the smoothness metric.
    #[arg(long)]
    smoothness_epsilon: Option<f64>,
    /// Directory holding train/t10k IDX files (plain or .gz).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Synthetic corpus sizes when no data directory is given.
    #[arg(long)]
    synth_train: Option<usize>,
    #[arg(long)]
    synth_test: Option<usize>,
    /// Output directory for manifest, metrics, and checkpoint.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Model file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct MatrixArgs {
    /// Variants to sweep, comma-separated.
    #[arg(long)]
    variants: Option<String>,
    /// Label counts to sweep, comma-separated.
    #[arg(long)]
    labels_list: Option<String>,
    /// Training seeds to sweep, comma-separated.
    #[arg(long)]
    seeds: Option<String>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Where to write the four IDX files.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

/// The run manifest: every knob a run resolved, flat key/value, plus the
/// checksums of the data it consumed. A manifest file is itself a valid
/// `--config` input, which is what makes runs reproducible from their own
/// output.
#[derive(Serialize, Deserialize, Clone, Default, Debug)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    artifact_version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    desk_scale: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    decay_start: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labeled_batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unlabeled_batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    widths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    xi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    power_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    perturb_norm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    norms: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_linf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    smoothness_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variants: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels_list: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<String>,
    /// Keyed by data file (or synthetic pool) name; verified on reruns.
    #[serde(skip_serializing_if = "Option::is_none")]
    data_checksums: Option<BTreeMap<String, String>>,
}

macro_rules! overlay_fields {
    ($base:expr, $top:expr; $($field:ident),* $(,)?) => {
        Manifest { $($field: $top.$field.or($base.$field)),* }
    };
}

impl Manifest {
    /// Field-wise overlay: values in `top` win.
    fn overlaid_on(self, base: Manifest) -> Manifest {
        overlay_fields!(base, self;
            command, artifact_version, variant, labels, seed, data_seed,
            desk_scale, epochs, decay_start, base_lr, labeled_batch,
            unlabeled_batch, eval_every, widths, sigma, lambda0, lambda1,
            lambda2, epsilon0, epsilon1, epsilon2, alpha, xi, power_iters,
            perturb_norm, norms, eps_l1, eps_l2, eps_linf,
            smoothness_epsilon, data_dir, synth_train, synth_test, out_dir,
            variants, labels_list, seeds, data_checksums,
        )
    }

    fn from_file(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn flags_manifest(args: &CommonArgs) -> Manifest {
    Manifest {
        variant: args.variant.clone(),
        labels: args.labels,
        seed: args.seed,
        data_seed: args.data_seed,
        desk_scale: if args.desk_scale { Some(true) } else { None },
        epochs: args.epochs,
        decay_start: args.decay_start,
        base_lr: args.base_lr,
        labeled_batch: args.labeled_batch,
        unlabeled_batch: args.unlabeled_batch,
        eval_every: args.eval_every,
        widths: args.widths.clone(),
        sigma: args.sigma,
        lambda0: args.lambda0,
        lambda1: args.lambda1,
        lambda2: args.lambda2,
        epsilon0: args.epsilon0,
        epsilon1: args.epsilon1,
        epsilon2: args.epsilon2,
        alpha: args.alpha,
        xi: args.xi,
        power_iters: args.power_iters,
        perturb_norm: args.perturb_norm.clone(),
        norms: args.norms.clone(),
        eps_l1: args.eps_l1,
        eps_l2: args.eps_l2,
        eps_linf: args.eps_linf,
        smoothness_epsilon: args.smoothness_epsilon,
        data_dir: args.data_dir.clone(),
        synth_train: args.synth_train,
        synth_test: args.synth_test,
        out_dir: args.out_dir.clone(),
        ..Manifest::default()
    }
}

/// Flags overlaid on the config file (when given) overlaid on nothing.
fn merged_manifest(args: &CommonArgs) -> Result<Manifest> {
    let base = match &args.config {
        Some(path) => Manifest::from_file(path)?,
        None => Manifest::default(),
    };
    Ok(flags_manifest(args).overlaid_on(base))
}

fn parse_perturb_norm(name: &str) -> Result<PerturbNorm> {
    match name.trim().to_ascii_lowercase().as_str() {
        "l2" => Ok(PerturbNorm::L2),
        "linf" => Ok(PerturbNorm::LInf),
        other => Err(Error::Config(format!(
            "unknown perturbation norm {other:?}; expected l2 or linf"
        ))),
    }
}

fn perturb_norm_name(norm: PerturbNorm) -> &'static str {
    match norm {
        PerturbNorm::L2 => "l2",
        PerturbNorm::LInf => "linf",
    }
}

/// Builds the variant configuration for `(kind, labels)` from the preset
/// table, then applies any overrides present in the manifest. Generic so
/// the manifest can record exact f64 values while training casts to f32
/// once, from the same numbers.
fn variant_config<T: Scalar>(m: &Manifest, kind: VariantKind, labels: usize) -> Result<VariantConfig<T>> {
    let preset_labels = if matches!(labels, 50 | 100 | 1000) {
        labels
    } else {
        let nearest = nearest_label_row(labels);
        eprintln!("note: no preset for {labels} labels; using the {nearest}-label row");
        nearest
    };
    let desk = m.desk_scale.unwrap_or(false);
    let mut config = if desk {
        desk_config::<T>(kind, preset_labels)?
    } else {
        default_config::<T>(kind, preset_labels)?
    };
    config.widths = match (&m.widths, desk) {
        (Some(w), _) => w.clone(),
        (None, true) => DESK_WIDTHS.to_vec(),
        (None, false) => PAPER_WIDTHS.to_vec(),
    };
    if let Some(s) = m.sigma {
        config.sigma = T::from_f64(s);
    }
    for (slot, over) in config.lambdas.iter_mut().zip([m.lambda0, m.lambda1, m.lambda2]) {
        if let Some(v) = over {
            *slot = T::from_f64(v);
        }
    }
    for (slot, over) in config.vat.epsilon.iter_mut().zip([m.epsilon0, m.epsilon1, m.epsilon2]) {
        if let Some(v) = over {
            *slot = T::from_f64(v);
        }
    }
    if let Some(a) = m.alpha {
        config.vat.alpha = vec![T::from_f64(a)];
    }
    if let Some(xi) = m.xi {
        config.vat.xi = T::from_f64(xi);
    }
    if let Some(k) = m.power_iters {
        config.vat.power_iters = k;
    }
    if let Some(name) = &m.perturb_norm {
        config.vat.norm = parse_perturb_norm(name)?;
    }
    config.validate()?;
    for warning in config.warnings() {
        eprintln!("note: {warning}");
    }
    Ok(config)
}

/// Builds the schedule for `(labels, seed)` from the full or reduced
/// preset, then applies manifest overrides.
fn train_config<T: Scalar>(m: &Manifest, labels: usize, seed: u64) -> Result<TrainConfig<T>> {
    let mut config = if m.desk_scale.unwrap_or(false) {
        TrainConfig::<T>::desk(labels, seed)
    } else {
        TrainConfig::<T>::full(labels, seed)
    };
    if let Some(e) = m.epochs {
        config.epochs = e;
        // Keep the default schedule shape when only --epochs is given:
        // decay over the final fifth, like the presets.
        if m.decay_start.is_none() {
            config.decay_start = e - (e / 5).min(e);
        }
    }
    if let Some(d) = m.decay_start {
        config.decay_start = d;
    }
    if let Some(lr) = m.base_lr {
        config.base_lr = T::from_f64(lr);
    }
    if let Some(b) = m.labeled_batch {
        config.labeled_batch = b;
    }
    if let Some(b) = m.unlabeled_batch {
        config.unlabeled_batch = b;
    }
    if let Some(e) = m.eval_every {
        config.eval_every = e;
    }
    config.validate()?;
    Ok(config)
}

/// Attack settings from `--norms` and the per-norm radius flags.
fn attack_specs(m: &Manifest) -> Result<Vec<AttackSpec<f32>>> {
    let list = m.norms.clone().unwrap_or_else(|| "l1,l2,linf".into());
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|name| {
            let norm = Norm::parse(name)?;
            let over = match norm {
                Norm::L1 => m.eps_l1,
                Norm::L2 => m.eps_l2,
                Norm::LInf => m.eps_linf,
            };
            let mut spec = AttackSpec::<f32>::standard(norm);
            if let Some(e) = over {
                spec.epsilon = e as f32;
            }
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Loads (or synthesizes) the train/test corpus and returns it with the
/// checksums that identify exactly what was consumed.
fn load_corpus(m: &Manifest) -> Result<(Dataset<f32>, Dataset<f32>, BTreeMap<String, String>)> {
    let mut checksums = BTreeMap::new();
    if let Some(dir) = &m.data_dir {
        let find = |stem: &str| -> Result<PathBuf> {
            for name in [stem.to_string(), format!("{stem}.gz")] {
                let path = dir.join(&name);
                if path.exists() {
                    return Ok(path);
                }
            }
            Err(Error::Data(format!(
                "missing {stem}[.gz] in {}",
                dir.display()
            )))
        };
        let paths = [
            find("train-images-idx3-ubyte")?,
            find("train-labels-idx1-ubyte")?,
            find("t10k-images-idx3-ubyte")?,
            find("t10k-labels-idx1-ubyte")?,
        ];
        for path in &paths {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            checksums.insert(name, sha256_hex(&std::fs::read(path)?));
        }
        let train = Dataset::<f32>::load(&paths[0], &paths[1])?;
        let test = Dataset::<f32>::load(&paths[2], &paths[3])?;
        Ok((train, test, checksums))
    } else {
        let n_train = m.synth_train.unwrap_or(DEFAULT_SYNTH_TRAIN);
        let n_test = m.synth_test.unwrap_or(DEFAULT_SYNTH_TEST);
        let data_seed = m.data_seed.unwrap_or(DEFAULT_DATA_SEED);
        let stream = RngStream::new(data_seed);
        let knobs = SynthKnobs::default();
        let (train_px, _) = synth::generate(n_train, 0, &stream, &knobs);
        let (test_px, _) = synth::generate(n_test, TEST_OFFSET, &stream, &knobs);
        checksums.insert(format!("synthetic-train-{n_train}"), sha256_hex(&train_px));
        checksums.insert(format!("synthetic-test-{n_test}"), sha256_hex(&test_px));
        Ok((
            synth::dataset::<f32>(n_train, 0, &stream, &knobs)?,
            synth::dataset::<f32>(n_test, TEST_OFFSET, &stream, &knobs)?,
            checksums,
        ))
    }
}

/// Checks freshly computed data checksums against ones recorded in a
/// manifest being replayed.
fn verify_checksums(recorded: &Option<BTreeMap<String, String>>, got: &BTreeMap<String, String>) -> Result<()> {
    if let Some(recorded) = recorded {
        for (name, sum) in recorded {
            match got.get(name) {
                Some(now) if now == sum => {}
                Some(now) => {
                    return Err(Error::Data(format!(
                        "data checksum mismatch for {name}: manifest has {sum}, files have {now}"
                    )))
                }
                None => {
                    return Err(Error::Data(format!(
                        "manifest records checksum for {name}, which this run did not load"
                    )))
                }
            }
        }
    }
    Ok(())
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Prints to stdout, tolerating a reader that went away (e.g. the output
/// piped through `head`): a broken pipe ends the program quietly instead of
/// panicking mid-write.
fn emit(text: &str) {
    use std::io::Write as _;
    let mut out = std::io::stdout();
    if out.write_all(text.as_bytes()).and_then(|()| out.flush()).is_err() {
        std::process::exit(0);
    }
}

fn print_record(kind: VariantKind, r: &MetricsRecord) {
    emit(&format!(
        "[{kind}] epoch {:>4}  clean {:6.2}%  l1 {:6.2}%  l2 {:6.2}%  linf {:6.2}%  smooth {:.4}  loss {:.4}  ({:.0}s)\n",
        r.epoch, r.clean_aer, r.adv_l1, r.adv_l2, r.adv_linf, r.smoothness, r.total_loss, r.wall_seconds
    ));
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let merged = merged_manifest(args)?;
    let kind = VariantKind::parse(
        merged
            .variant
            .as_deref()
            .ok_or_else(|| Error::Config("train needs --variant (or a config file naming one)".into()))?,
    )?;
    let labels = merged.labels.unwrap_or(100);
    let seed = merged.seed.unwrap_or(1);
    let data_seed = merged.data_seed.unwrap_or(DEFAULT_DATA_SEED);
    let book = variant_config::<f64>(&merged, kind, labels)?;
    let vconfig = variant_config::<f32>(&merged, kind, labels)?;
    let tconfig64 = train_config::<f64>(&merged, labels, seed)?;
    let tconfig = train_config::<f32>(&merged, labels, seed)?;
    let out_dir = merged
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{kind}-{labels}labels-seed{seed}")));
    std::fs::create_dir_all(&out_dir)?;

    let (train_ds, test_ds, checksums) = load_corpus(&merged)?;
    verify_checksums(&merged.data_checksums, &checksums)?;
    let split = make_split(
        &train_ds,
        test_ds,
        labels,
        &RngStream::new(data_seed).substream_indexed("split", seed),
    )?;

    let resolved = Manifest {
        command: Some("train".into()),
        artifact_version: Some(env!("CARGO_PKG_VERSION").into()),
        variant: Some(kind.name().into()),
        labels: Some(labels),
        seed: Some(seed),
        data_seed: Some(data_seed),
        desk_scale: Some(merged.desk_scale.unwrap_or(false)),
        epochs: Some(tconfig64.epochs),
        decay_start: Some(tconfig64.decay_start),
        base_lr: Some(tconfig64.base_lr),
        labeled_batch: Some(tconfig64.labeled_batch),
        unlabeled_batch: Some(tconfig64.unlabeled_batch),
        eval_every: Some(tconfig64.eval_every),
        widths: Some(book.widths.clone()),
        sigma: Some(book.sigma),
        lambda0: Some(book.lambdas[0]),
        lambda1: Some(book.lambdas[1]),
        lambda2: Some(book.lambdas[2]),
        epsilon0: Some(book.vat.epsilon.first().copied().unwrap_or(0.0)),
        epsilon1: Some(book.vat.epsilon.get(1).copied().unwrap_or(0.0)),
        epsilon2: Some(book.vat.epsilon.get(2).copied().unwrap_or(0.0)),
        alpha: Some(book.vat.alpha.first().copied().unwrap_or(1.0)),
        xi: Some(book.vat.xi),
        power_iters: Some(book.vat.power_iters),
        perturb_norm: Some(perturb_norm_name(book.vat.norm).into()),
        data_dir: merged.data_dir.clone(),
        synth_train: merged.data_dir.is_none().then(|| merged.synth_train.unwrap_or(DEFAULT_SYNTH_TRAIN)),
        synth_test: merged.data_dir.is_none().then(|| merged.synth_test.unwrap_or(DEFAULT_SYNTH_TEST)),
        out_dir: Some(out_dir.clone()),
        data_checksums: Some(checksums),
        ..Manifest::default()
    };
    write_manifest(&out_dir.join("manifest.toml"), &resolved)?;

    emit(&format!(
        "training {kind} with {labels} labels, seed {seed}: widths {:?}, {} epochs\n",
        vconfig.widths, tconfig.epochs
    ));
    let metrics_path = out_dir.join("metrics.csv");
    let mut log = File::create(&metrics_path)?;
    writeln!(log, "{}", harness::METRICS_HEADER)?;
    let mut on_record = |r: &MetricsRecord| {
        print_record(kind, r);
        let _ = writeln!(log, "{}", harness::csv_line(r));
        let _ = log.flush();
    };
    let outcome = train(&vconfig, &tconfig, &split, Some(&mut on_record))?;

    let model_path = out_dir.join("model.ckpt");
    checkpoint::save(&model_path, kind, &outcome.params)?;
    let last = outcome.metrics.last().expect("final record");
    emit(&format!(
        "done: clean_aer {:.2}%  checkpoint {}  metrics {}\n",
        last.clean_aer,
        model_path.display(),
        metrics_path.display()
    ));
    Ok(())
}

fn cmd_eval(args: &CheckpointArgs) -> Result<()> {
    let merged = merged_manifest(&args.common)?;
    let loaded = checkpoint::load::<f32>(&args.checkpoint)?;
    let (_, test_ds, checksums) = load_corpus(&merged)?;
    verify_checksums(&merged.data_checksums, &checksums)?;
    let aer = error_rate(&loaded.params, &test_ds.images, &test_ds.labels)?;
    emit(&format!("variant {}\nclean_aer {aer}\n", loaded.kind));
    Ok(())
}

fn cmd_attack(args: &CheckpointArgs) -> Result<()> {
    let merged = merged_manifest(&args.common)?;
    let loaded = checkpoint::load::<f32>(&args.checkpoint)?;
    let specs = attack_specs(&merged)?;
    let (_, test_ds, checksums) = load_corpus(&merged)?;
    verify_checksums(&merged.data_checksums, &checksums)?;
    let clean = error_rate(&loaded.params, &test_ds.images, &test_ds.labels)?;
    let table = adversarial_error_matrix(&loaded.params, &test_ds.images, &test_ds.labels, &specs)?;
    let mut text = String::from("norm,epsilon,adversarial_aer\n");
    text.push_str(&format!("clean,0,{clean}\n"));
    for row in &table {
        text.push_str(&format!("{},{},{}\n", row.norm, row.epsilon, row.error_rate));
    }
    emit(&text);
    if let Some(dir) = &merged.out_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("attacks.csv");
        std::fs::write(&path, text)?;
        eprintln!("note: wrote {}", path.display());
    }
    Ok(())
}

fn cmd_introspect(args: &CheckpointArgs) -> Result<()> {
    let merged = merged_manifest(&args.common)?;
    let loaded = checkpoint::load::<f32>(&args.checkpoint)?;
    let (_, test_ds, checksums) = load_corpus(&merged)?;
    verify_checksums(&merged.data_checksums, &checksums)?;
    let epsilon = merged.smoothness_epsilon.unwrap_or(lvat::attack::SMOOTHNESS_EPSILON);
    let data_seed = merged.data_seed.unwrap_or(DEFAULT_DATA_SEED);
    let value = harness::smoothness_over(
        &loaded.params,
        &test_ds.images,
        epsilon as f32,
        &RngStream::new(data_seed).substream("introspect"),
    )?;
    emit(&format!(
        "variant {}\nsmoothness_epsilon {epsilon}\nsmoothness {value}\n",
        loaded.kind
    ));
    Ok(())
}

fn parse_list<T: std::str::FromStr>(list: &str, what: &str) -> Result<Vec<T>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

fn cmd_matrix(args: &MatrixArgs) -> Result<()> {
    let mut merged = merged_manifest(&args.common)?;
    merged.variants = args.variants.clone().or(merged.variants);
    merged.labels_list = args.labels_list.clone().or(merged.labels_list);
    merged.seeds = args.seeds.clone().or(merged.seeds);

    let kinds: Vec<VariantKind> = merged
        .variants
        .clone()
        .unwrap_or_else(|| "supervised,ladder,vat,lvac,lvac-lw,lvan,lvan-lw".into())
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(VariantKind::parse)
        .collect::<Result<_>>()?;
    let label_counts: Vec<usize> =
        parse_list(&merged.labels_list.clone().unwrap_or_else(|| "100".into()), "label count")?;
    let seeds: Vec<u64> =
        parse_list(&merged.seeds.clone().unwrap_or_else(|| "1,2,3".into()), "seed")?;
    let data_seed = merged.data_seed.unwrap_or(DEFAULT_DATA_SEED);
    let out_dir = merged.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/matrix"));
    std::fs::create_dir_all(&out_dir)?;

    let (train_ds, test_ds, checksums) = load_corpus(&merged)?;
    verify_checksums(&merged.data_checksums, &checksums)?;

    let resolved = Manifest {
        command: Some("matrix".into()),
        artifact_version: Some(env!("CARGO_PKG_VERSION").into()),
        variants: Some(kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")),
        labels_list: Some(label_counts.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")),
        seeds: Some(seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
        data_seed: Some(data_seed),
        out_dir: Some(out_dir.clone()),
        data_checksums: Some(checksums),
        ..merged.clone()
    };
    write_manifest(&out_dir.join("manifest.toml"), &resolved)?;

    let plan = MatrixPlan {
        kinds: &kinds,
        label_counts: &label_counts,
        seeds: &seeds,
        data_seed,
        train: &train_ds,
        test: &test_ds,
    };
    // Surface schedule-override problems once, before the sweep starts;
    // validity does not depend on which cell is being trained.
    train_config::<f32>(&merged, label_counts[0], seeds[0])?;
    let mut on_row = |row: &harness::RunRow| {
        emit(&format!("{} x {} labels, seed {}: ", row.kind, row.n_labels, row.seed));
        print_record(row.kind, &row.final_record);
    };
    let report = run_matrix(
        &plan,
        |kind, labels| variant_config::<f32>(&merged, kind, labels),
        |labels, seed| train_config::<f32>(&merged, labels, seed).expect("validated above"),
        Some(&mut on_row),
    )?;

    std::fs::write(out_dir.join("runs.csv"), harness::matrix_runs_csv(&report))?;
    let summary = harness::matrix_summary_csv(&report);
    std::fs::write(out_dir.join("summary.csv"), &summary)?;
    emit(&summary);
    for cell in &report.cells {
        for (seed, why) in &cell.failed {
            eprintln!("note: {} x {} labels, seed {seed} failed: {why}", cell.kind, cell.n_labels);
        }
    }
    Ok(())
}

fn cmd_presets() -> Result<()> {
    let mut table = String::from(
        "variant,labels,lambda0,lambda1,lambda2,epsilon0,epsilon1,epsilon2,alpha,sigma,xi,power_iters,perturb_norm\n",
    );
    for kind in VariantKind::ALL {
        for labels in [50usize, 100, 1000] {
            let c = default_config::<f64>(kind, labels)?;
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                kind,
                labels,
                c.lambdas[0],
                c.lambdas[1],
                c.lambdas[2],
                c.vat.epsilon[0],
                c.vat.epsilon[1],
                c.vat.epsilon[2],
                c.vat.alpha[0],
                c.sigma,
                c.vat.xi,
                c.vat.power_iters,
                perturb_norm_name(c.vat.norm),
            ));
        }
    }
    emit(&table);
    Ok(())
}

fn cmd_synth_data(args: &SynthArgs) -> Result<()> {
    let n_train = args.n_train.unwrap_or(DEFAULT_SYNTH_TRAIN);
    let n_test = args.n_test.unwrap_or(DEFAULT_SYNTH_TEST);
    let data_seed = args.data_seed.unwrap_or(DEFAULT_DATA_SEED);
    std::fs::create_dir_all(&args.out_dir)?;
    let stream = RngStream::new(data_seed);
    let knobs = SynthKnobs::default();
    let (train_px, train_labels) = synth::generate(n_train, 0, &stream, &knobs);
    let (test_px, test_labels) = synth::generate(n_test, TEST_OFFSET, &stream, &knobs);
    let writes = [
        ("train-images-idx3-ubyte", Some(&train_px), None),
        ("train-labels-idx1-ubyte", None, Some(&train_labels)),
        ("t10k-images-idx3-ubyte", Some(&test_px), None),
        ("t10k-labels-idx1-ubyte", None, Some(&test_labels)),
    ];
    for (name, images, labels) in writes {
        let path = args.out_dir.join(name);
        match (images, labels) {
            (Some(px), _) => write_idx_images(
                &path,
                px,
                px.len() / synth::PIXELS,
                IMAGE_SIDE,
                IMAGE_SIDE,
            )?,
            (_, Some(lb)) => write_idx_labels(&path, lb)?,
            _ => unreachable!(),
        }
        emit(&format!("wrote {}\n", path.display()));
    }
    emit(&format!("seed {data_seed}: {n_train} train and {n_test} test images\n"));
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Dimension { .. } => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Introspect(args) => cmd_introspect(args),
        Command::Matrix(args) => cmd_matrix(args),
        Command::Presets => cmd_presets(),
        Command::SynthData(args) => cmd_synth_data(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
