//! Training orchestration: the Adam optimizer, the learning-rate schedule,
//! the epoch loop with periodic evaluation, and multi-run aggregation with
//! mean ± standard error summaries.
//!
//! Everything here is deterministic in `(configs, data, seed)`: the only
//! randomness flows from one root stream through named substreams, and the
//! only nondeterministic output field is wall-clock time.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::attack::{
    adversarial_error_rate, error_rate, smoothness_metric, AttackSpec, Norm, EVAL_CHUNK,
    SMOOTHNESS_EPSILON,
};
use crate::data::{batch_stream, Dataset, SemiSupervisedSplit};
use crate::error::{Error, Result};
use crate::ladder::LadderParams;
use crate::numerics::{Matrix, ParamSet, RngStream, Scalar};
use crate::variants::{training_step, LossBreakdown, VariantConfig, VariantKind};

/// Adam moment decay rates and the denominator floor.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<T: Scalar> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        AdamConfig {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

impl<T: Scalar> AdamConfig<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= T::zero() && v < T::one()) {
                return Err(Error::Config(format!("adam {name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.eps > T::zero()) {
            return Err(Error::Config(format!("adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter, in place. Consumes
/// the accumulated gradients (they are zeroed afterwards) and advances each
/// parameter's step count.
pub fn adam_step<T: Scalar>(set: &mut ParamSet<T>, lr: T, adam: &AdamConfig<T>) {
    for p in set.iter_mut() {
        p.steps += 1;
        let b1 = adam.beta1;
        let b2 = adam.beta2;
        let correction1 = T::one() - b1.powi(p.steps as i32);
        let correction2 = T::one() - b2.powi(p.steps as i32);
        p.m1 = p.m1.scale(b1).add(&p.grad.scale(T::one() - b1));
        p.m2 = p.m2.scale(b2).add(&p.grad.map(|g| g * g).scale(T::one() - b2));
        let mut value = p.value.clone();
        for ((v, &m), &s) in value
            .as_mut_slice()
            .iter_mut()
            .zip(p.m1.as_slice())
            .zip(p.m2.as_slice())
        {
            let mhat = m / correction1;
            let vhat = s / correction2;
            *v = *v - lr * mhat / (vhat.sqrt() + adam.eps);
        }
        p.value = value;
        p.grad = Matrix::zeros(p.grad.rows(), p.grad.cols());
    }
}

/// Optimization schedule and loop bounds for one training run.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig<T: Scalar> {
    pub epochs: usize,
    /// Epoch at which the linear decay to zero begins.
    pub decay_start: usize,
    pub base_lr: T,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Evaluate every this many epochs (the final epoch always evaluates).
    pub eval_every: usize,
    pub seed: u64,
    pub adam: AdamConfig<T>,
}

/// Labeled batch size rule: 50 when training with 50 labels, 100 otherwise.
pub fn labeled_batch_for(n_labels: usize) -> usize {
    if n_labels == 50 {
        50
    } else {
        100
    }
}

impl<T: Scalar> TrainConfig<T> {
    /// Full-scale schedule: 250 epochs, linear decay from epoch 200,
    /// Adam at 0.002, unlabeled batches of 100.
    pub fn full(n_labels: usize, seed: u64) -> Self {
        TrainConfig {
            epochs: 250,
            decay_start: 200,
            base_lr: T::from_f64(0.002),
            labeled_batch: labeled_batch_for(n_labels),
            unlabeled_batch: 100,
            eval_every: 10,
            seed,
            adam: AdamConfig::default(),
        }
    }

    /// Reduced schedule sized for quick runs on small models: 30 epochs,
    /// decay from epoch 20, otherwise the full-scale settings.
    pub fn desk(n_labels: usize, seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            decay_start: 20,
            ..TrainConfig::full(n_labels, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.decay_start > self.epochs {
            return Err(Error::Config(format!(
                "decay_start ({}) must be <= epochs ({})",
                self.decay_start, self.epochs
            )));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.base_lr >= T::zero()) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        self.adam.validate()
    }
}

/// Learning rate for `epoch` (0-based): the base rate before `decay_start`,
/// then a linear ramp hitting exactly zero at `epochs`.
pub fn lr_schedule<T: Scalar>(config: &TrainConfig<T>, epoch: usize) -> T {
    debug_assert!(epoch <= config.epochs, "epoch {epoch} beyond schedule end {}", config.epochs);
    if epoch < config.decay_start {
        config.base_lr
    } else if epoch >= config.epochs {
        T::zero()
    } else {
        let remaining = (config.epochs - epoch) as f64;
        let span = (config.epochs - config.decay_start) as f64;
        config.base_lr * T::from_f64(remaining / span)
    }
}

/// One evaluation row: error rates in percent, the smoothness metric, and
/// the mean loss components over the steps since the previous row.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRecord {
    /// Completed epochs when this row was measured (1-based).
    pub epoch: usize,
    pub clean_aer: f64,
    pub adv_l1: f64,
    pub adv_l2: f64,
    pub adv_linf: f64,
    pub smoothness: f64,
    pub sup_loss: f64,
    pub recon_loss: f64,
    pub vadv_loss: f64,
    pub total_loss: f64,
    /// Seconds since training started. Excluded from determinism claims.
    pub wall_seconds: f64,
}

impl MetricsRecord {
    /// Field-by-field agreement within `tol`, ignoring wall-clock time.
    pub fn agrees_with(&self, other: &MetricsRecord, tol: f64) -> bool {
        self.epoch == other.epoch
            && [
                (self.clean_aer, other.clean_aer),
                (self.adv_l1, other.adv_l1),
                (self.adv_l2, other.adv_l2),
                (self.adv_linf, other.adv_linf),
                (self.smoothness, other.smoothness),
                (self.sup_loss, other.sup_loss),
                (self.recon_loss, other.recon_loss),
                (self.vadv_loss, other.vadv_loss),
                (self.total_loss, other.total_loss),
            ]
            .iter()
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Model-quality measurements on a test set: clean and per-norm adversarial
/// error rates plus the smoothness metric.
#[derive(Clone, Copy, Debug)]
pub struct EvalMetrics {
    pub clean_aer: f64,
    pub adv_l1: f64,
    pub adv_l2: f64,
    pub adv_linf: f64,
    pub smoothness: f64,
}

/// Smoothness metric over a full dataset, computed in fixed chunks and
/// row-weighted so the chunking never changes the value. Deterministic in
/// `stream`.
pub fn smoothness_over<T: Scalar>(
    params: &LadderParams<T>,
    images: &Matrix<T>,
    epsilon: T,
    stream: &RngStream,
) -> Result<T> {
    if images.rows() == 0 {
        return Err(Error::Argument("smoothness over an empty dataset".into()));
    }
    let mut weighted = T::zero();
    let mut start = 0;
    let mut chunk = 0u64;
    while start < images.rows() {
        let end = (start + EVAL_CHUNK).min(images.rows());
        let mut rng = stream.substream_indexed("smoothness", chunk);
        let value = smoothness_metric(params, &images.slice_rows(start, end), epsilon, &mut rng)?;
        weighted = weighted + value * T::from_f64((end - start) as f64);
        start = end;
        chunk += 1;
    }
    Ok(weighted / T::from_f64(images.rows() as f64))
}

/// Evaluates a model on `test`: clean error, fast-gradient error under each
/// norm at its default radius, and the smoothness metric at its standard
/// radius. `stream` seeds the smoothness power iterations.
pub fn evaluate<T: Scalar>(
    params: &LadderParams<T>,
    test: &Dataset<T>,
    stream: &RngStream,
) -> Result<EvalMetrics> {
    let clean_aer = error_rate(params, &test.images, &test.labels)?;
    let mut per_norm = [0.0f64; 3];
    for (slot, norm) in per_norm.iter_mut().zip(Norm::ALL) {
        let spec = AttackSpec::<T>::standard(norm);
        *slot = adversarial_error_rate(params, &test.images, &test.labels, &spec)?;
    }
    let smoothness =
        smoothness_over(params, &test.images, T::from_f64(SMOOTHNESS_EPSILON), stream)?.as_f64();
    Ok(EvalMetrics {
        clean_aer,
        adv_l1: per_norm[0],
        adv_l2: per_norm[1],
        adv_linf: per_norm[2],
        smoothness,
    })
}

/// A finished training run: the trained model and every metrics row it
/// emitted.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub params: LadderParams<T>,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Default)]
struct LossSums {
    supervised: f64,
    reconstruction: f64,
    vadv: f64,
    total: f64,
    steps: usize,
}

impl LossSums {
    fn add<T: Scalar>(&mut self, b: &LossBreakdown<T>) {
        self.supervised += b.supervised.as_f64();
        self.reconstruction += b.reconstruction.as_f64();
        self.vadv += b.vadv.as_f64();
        self.total += b.total.as_f64();
        self.steps += 1;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            v / self.steps as f64
        }
    }
}

fn check_finite<T: Scalar>(
    b: &LossBreakdown<T>,
    kind: VariantKind,
    epoch: usize,
    step: u64,
) -> Result<()> {
    for (name, v) in [
        ("supervised", b.supervised),
        ("reconstruction", b.reconstruction),
        ("virtual-adversarial", b.vadv),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite {name} cost ({v}) training {kind} at epoch {epoch}, global step {step}"
            )));
        }
    }
    Ok(())
}

/// Trains one model from scratch. Initialization, batch order, corruption
/// draws, and evaluation probes all derive from `tconfig.seed` through
/// named substreams, so repeated calls are bit-identical. Metrics rows are
/// emitted every `eval_every` epochs and always after the final epoch;
/// `progress` (when given) sees each row as it is produced.
pub fn train<T: Scalar>(
    vconfig: &VariantConfig<T>,
    tconfig: &TrainConfig<T>,
    split: &SemiSupervisedSplit<T>,
    mut progress: Option<&mut dyn FnMut(&MetricsRecord)>,
) -> Result<TrainOutcome<T>> {
    vconfig.validate()?;
    tconfig.validate()?;
    if split.labeled.images.cols() != vconfig.widths[0] {
        return Err(Error::dimension(
            "train",
            format!("input width {}", vconfig.widths[0]),
            format!("{} image columns", split.labeled.images.cols()),
        ));
    }
    if split.unlabeled.len() < tconfig.unlabeled_batch {
        return Err(Error::Data(format!(
            "unlabeled pool ({} rows) smaller than one batch ({})",
            split.unlabeled.len(),
            tconfig.unlabeled_batch
        )));
    }
    let started = Instant::now();
    let root = RngStream::new(tconfig.seed);
    let mut params = LadderParams::init(&vconfig.widths, &root.substream("init"))?;
    let batches = root.substream("batches");
    let eval_stream = root.substream("eval");

    let mut metrics = Vec::new();
    let mut sums = LossSums::default();
    let mut global_step = 0u64;
    for epoch in 0..tconfig.epochs {
        let lr = lr_schedule(tconfig, epoch);
        for batch in batch_stream(
            split,
            tconfig.labeled_batch,
            tconfig.unlabeled_batch,
            &batches,
            epoch,
        ) {
            let step_rng = root.substream_indexed("step", global_step);
            let breakdown = training_step(&mut params, vconfig, &batch, &step_rng)?;
            check_finite(&breakdown, vconfig.kind, epoch, global_step)?;
            adam_step(&mut params.set, lr, &tconfig.adam);
            sums.add(&breakdown);
            global_step += 1;
        }
        let completed = epoch + 1;
        if completed == tconfig.epochs || completed % tconfig.eval_every == 0 {
            let eval = evaluate(&params, &split.test, &eval_stream)?;
            let record = MetricsRecord {
                epoch: completed,
                clean_aer: eval.clean_aer,
                adv_l1: eval.adv_l1,
                adv_l2: eval.adv_l2,
                adv_linf: eval.adv_linf,
                smoothness: eval.smoothness,
                sup_loss: sums.mean(sums.supervised),
                recon_loss: sums.mean(sums.reconstruction),
                vadv_loss: sums.mean(sums.vadv),
                total_loss: sums.mean(sums.total),
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            if let Some(cb) = progress.as_deref_mut() {
                cb(&record);
            }
            metrics.push(record);
            sums = LossSums::default();
        }
    }
    Ok(TrainOutcome { params, metrics })
}

/// One completed cell run inside [`run_matrix`].
#[derive(Clone, Debug)]
pub struct RunRow {
    pub kind: VariantKind,
    pub n_labels: usize,
    pub seed: u64,
    pub final_record: MetricsRecord,
}

/// Mean and standard error of one metric across a cell's completed runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub se: f64,
}

impl Aggregate {
    fn over(values: &[f64]) -> Self {
        if values.is_empty() {
            return Aggregate { mean: f64::NAN, se: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Aggregate { mean, se }
    }
}

/// Aggregated results for one `(variant, label count)` cell.
#[derive(Clone, Debug)]
pub struct CellSummary {
    pub kind: VariantKind,
    pub n_labels: usize,
    /// Seeds whose runs completed.
    pub completed: Vec<u64>,
    /// Seeds whose runs failed, with the error text.
    pub failed: Vec<(u64, String)>,
    pub clean_aer: Aggregate,
    pub adv_l1: Aggregate,
    pub adv_l2: Aggregate,
    pub adv_linf: Aggregate,
    pub smoothness: Aggregate,
}

/// All outputs of a matrix sweep: every per-run row plus one summary per
/// cell.
#[derive(Clone, Debug)]
pub struct MatrixReport {
    pub rows: Vec<RunRow>,
    pub cells: Vec<CellSummary>,
}

/// Inputs to [`run_matrix`]: which cells to run and the data they share.
pub struct MatrixPlan<'a, T: Scalar> {
    pub kinds: &'a [VariantKind],
    pub label_counts: &'a [usize],
    pub seeds: &'a [u64],
    /// Base seed for labeled-subset selection. The subset for a given
    /// `(label count, seed)` is fixed across variants so models compete on
    /// identical data.
    pub data_seed: u64,
    pub train: &'a Dataset<T>,
    pub test: &'a Dataset<T>,
}

/// Trains every `(variant, label count, seed)` cell and aggregates each
/// cell's final metrics as mean ± standard error. A run that fails is
/// recorded in its cell and skipped by the aggregation; the sweep
/// continues. Cells run sequentially (they share nothing, so callers with
/// spare cores can shard the plan instead).
pub fn run_matrix<T: Scalar>(
    plan: &MatrixPlan<'_, T>,
    configure: impl Fn(VariantKind, usize) -> Result<VariantConfig<T>>,
    train_config: impl Fn(usize, u64) -> TrainConfig<T>,
    mut progress: Option<&mut dyn FnMut(&RunRow)>,
) -> Result<MatrixReport> {
    if plan.kinds.is_empty() || plan.label_counts.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Argument(
            "matrix plan needs at least one variant, label count, and seed".into(),
        ));
    }
    let split_root = RngStream::new(plan.data_seed);
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &n_labels in plan.label_counts {
        for &kind in plan.kinds {
            let mut completed = Vec::new();
            let mut failed = Vec::new();
            let mut finals: Vec<MetricsRecord> = Vec::new();
            for &seed in plan.seeds {
                let outcome = (|| -> Result<TrainOutcome<T>> {
                    let split = crate::data::make_split(
                        plan.train,
                        plan.test.clone(),
                        n_labels,
                        &split_root.substream_indexed("split", seed),
                    )?;
                    let vconfig = configure(kind, n_labels)?;
                    train(&vconfig, &train_config(n_labels, seed), &split, None)
                })();
                match outcome {
                    Ok(outcome) => {
                        let final_record = *outcome
                            .metrics
                            .last()
                            .expect("train always emits a final record");
                        let row = RunRow { kind, n_labels, seed, final_record };
                        if let Some(cb) = progress.as_deref_mut() {
                            cb(&row);
                        }
                        finals.push(final_record);
                        completed.push(seed);
                        rows.push(row);
                    }
                    Err(err) => failed.push((seed, err.to_string())),
                }
            }
            let field = |f: fn(&MetricsRecord) -> f64| {
                Aggregate::over(&finals.iter().map(f).collect::<Vec<_>>())
            };
            cells.push(CellSummary {
                kind,
                n_labels,
                completed,
                failed,
                clean_aer: field(|r| r.clean_aer),
                adv_l1: field(|r| r.adv_l1),
                adv_l2: field(|r| r.adv_l2),
                adv_linf: field(|r| r.adv_linf),
                smoothness: field(|r| r.smoothness),
            });
        }
    }
    Ok(MatrixReport { rows, cells })
}

/// Header of the per-evaluation metrics log.
pub const METRICS_HEADER: &str =
    "epoch,clean_aer,adv_l1,adv_l2,adv_linf,smoothness,sup_loss,recon_loss,vadv_loss,total_loss,wall_s";

/// One metrics row rendered as a CSV line (no trailing newline), in
/// [`METRICS_HEADER`] column order.
pub fn csv_line(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{:.3}",
        r.epoch,
        r.clean_aer,
        r.adv_l1,
        r.adv_l2,
        r.adv_linf,
        r.smoothness,
        r.sup_loss,
        r.recon_loss,
        r.vadv_loss,
        r.total_loss,
        r.wall_seconds
    )
}

fn push_record(out: &mut String, r: &MetricsRecord) {
    out.push_str(&csv_line(r));
    out.push('\n');
}

/// Renders metrics rows as comma-delimited text with a header.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        push_record(&mut out, r);
    }
    out
}

/// Writes the metrics log for one run.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(records))?;
    Ok(())
}

/// Renders every per-run row of a matrix sweep as comma-delimited text.
pub fn matrix_runs_csv(report: &MatrixReport) -> String {
    let mut out = String::from("variant,labels,seed,");
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in &report.rows {
        let _ = write!(out, "{},{},{},", row.kind, row.n_labels, row.seed);
        push_record(&mut out, &row.final_record);
    }
    out
}

/// Renders the per-cell aggregate table (mean ± standard error) as
/// comma-delimited text.
pub fn matrix_summary_csv(report: &MatrixReport) -> String {
    let mut out = String::from(
        "variant,labels,runs,failures,clean_aer_mean,clean_aer_se,adv_l1_mean,adv_l1_se,\
         adv_l2_mean,adv_l2_se,adv_linf_mean,adv_linf_se,smoothness_mean,smoothness_se\n",
    );
    for cell in &report.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            cell.kind,
            cell.n_labels,
            cell.completed.len(),
            cell.failed.len(),
            cell.clean_aer.mean,
            cell.clean_aer.se,
            cell.adv_l1.mean,
            cell.adv_l1.se,
            cell.adv_l2.mean,
            cell.adv_l2.se,
            cell.adv_linf.mean,
            cell.adv_linf.se,
            cell.smoothness.mean,
            cell.smoothness.se
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{corpus, SynthKnobs};
    use crate::data::make_split;
    use crate::variants::training_loss;
    use approx::assert_relative_eq;

    fn full_config() -> TrainConfig<f64> {
        TrainConfig::full(100, 1)
    }

    #[test]
    fn schedule_holds_then_decays_linearly_to_zero() {
        let config = full_config();
        assert_eq!(lr_schedule(&config, 0), 0.002);
        assert_eq!(lr_schedule(&config, 100), 0.002);
        assert_eq!(lr_schedule(&config, 199), 0.002);
        assert_eq!(lr_schedule(&config, 200), 0.002, "continuous at the decay start");
        assert_relative_eq!(lr_schedule(&config, 225), 0.001, max_relative = 1e-15);
        assert_eq!(lr_schedule(&config, 250), 0.0, "exactly zero at the end");
        let desk = TrainConfig::<f64>::desk(100, 1);
        assert_relative_eq!(lr_schedule(&desk, 25), 0.001, max_relative = 1e-15);
        for e in 0..=config.epochs {
            assert!(lr_schedule(&config, e) <= lr_schedule(&config, e.saturating_sub(1)) + 1e-18);
        }
    }

    #[test]
    fn presets_follow_the_batch_size_rule() {
        assert_eq!(TrainConfig::<f64>::full(50, 0).labeled_batch, 50);
        assert_eq!(TrainConfig::<f64>::full(100, 0).labeled_batch, 100);
        assert_eq!(TrainConfig::<f64>::full(1000, 0).labeled_batch, 100);
        assert_eq!(TrainConfig::<f64>::full(100, 0).unlabeled_batch, 100);
        assert!(TrainConfig::<f64>::full(100, 0).validate().is_ok());
        let mut bad = full_config();
        bad.decay_start = 300;
        assert!(bad.validate().is_err());
        bad = full_config();
        bad.labeled_batch = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_leaves_parameters_alone_when_gradients_are_zero() {
        let mut set = ParamSet::<f64>::new();
        let id = set.add("w", Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]));
        let before = set.get(id).value.clone();
        adam_step(&mut set, 0.01, &AdamConfig::default());
        assert_eq!(set.get(id).value, before);
        assert_eq!(set.get(id).steps, 1);
    }

    #[test]
    fn first_adam_step_moves_each_coordinate_by_about_the_learning_rate() {
        let mut set = ParamSet::<f64>::new();
        let id = set.add("w", Matrix::filled(1, 3, 2.0));
        set.get_mut(id).grad = Matrix::from_vec(1, 3, vec![0.3, -0.7, 5.0]);
        adam_step(&mut set, 0.01, &AdamConfig::default());
        let value = &set.get(id).value;
        for (j, &g) in [0.3f64, -0.7, 5.0].iter().enumerate() {
            let moved = value.get(0, j) - 2.0;
            // Bias correction makes m̂/√v̂ = sign(g) up to the eps floor.
            assert_relative_eq!(moved, -0.01 * g.signum(), max_relative = 1e-6);
        }
        assert_eq!(set.get(id).grad.max_abs(), 0.0, "gradients consumed");
    }

    fn tiny_corpus() -> (Dataset<f64>, Dataset<f64>) {
        corpus(200, 40, &RngStream::new(7777), &SynthKnobs::default()).unwrap()
    }

    fn tiny_split(n_labels: usize) -> SemiSupervisedSplit<f64> {
        let (train_ds, test_ds) = tiny_corpus();
        make_split(&train_ds, test_ds, n_labels, &RngStream::new(5).substream("split")).unwrap()
    }

    fn tiny_ladder_config() -> VariantConfig<f64> {
        let mut config = VariantConfig::bare(VariantKind::Ladder, &[784, 16, 10]);
        config.sigma = 0.3;
        config.lambdas = [1000.0, 10.0, 0.1];
        config
    }

    #[test]
    fn one_epoch_of_supervised_training_reduces_the_loss() {
        let split = tiny_split(100);
        let vconfig = VariantConfig::bare(VariantKind::Supervised, &[784, 16, 10]);
        let tconfig = TrainConfig {
            epochs: 1,
            decay_start: 1,
            base_lr: 0.002,
            labeled_batch: 100,
            unlabeled_batch: 100,
            eval_every: 1,
            seed: 11,
            adam: AdamConfig::default(),
        };
        // The loss train() sees at its first step, recomputed on the same
        // frozen batch before and after the epoch.
        let root = RngStream::new(11);
        let fresh = LadderParams::init(&[784, 16, 10], &root.substream("init")).unwrap();
        let first_batch = batch_stream(&split, 100, 100, &root.substream("batches"), 0)
            .next()
            .unwrap();
        let step0 = root.substream_indexed("step", 0);
        let initial = training_loss(&fresh, &vconfig, &first_batch, &step0).unwrap();
        let outcome = train(&vconfig, &tconfig, &split, None).unwrap();
        let along = training_loss(&outcome.params, &vconfig, &first_batch, &step0).unwrap();
        assert!(
            along.total < initial.total,
            "training did not descend: {} -> {}",
            initial.total,
            along.total
        );
        assert_eq!(outcome.metrics.len(), 1);
        let record = &outcome.metrics[0];
        assert!(record.clean_aer >= 0.0 && record.clean_aer <= 100.0);
        assert!(record.recon_loss == 0.0 && record.vadv_loss == 0.0);
        assert_relative_eq!(record.sup_loss, record.total_loss, max_relative = 1e-12);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let split = tiny_split(100);
        let vconfig = tiny_ladder_config();
        let mut tconfig = TrainConfig::<f64>::desk(100, 23);
        tconfig.epochs = 2;
        tconfig.decay_start = 1;
        tconfig.eval_every = 1;
        let a = train(&vconfig, &tconfig, &split, None).unwrap();
        let b = train(&vconfig, &tconfig, &split, None).unwrap();
        assert_eq!(a.metrics.len(), 2);
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert!(ra.agrees_with(rb, 0.0), "records differ: {ra:?} vs {rb:?}");
        }
        for (pa, pb) in a.params.set.iter().zip(b.params.set.iter()) {
            assert_eq!(pa.value, pb.value, "parameter {} diverged", pa.name);
        }
        for (sa, sb) in a.params.running.iter().zip(&b.params.running) {
            assert_eq!(sa.mean, sb.mean);
            assert_eq!(sa.var, sb.var);
        }
    }

    #[test]
    fn training_rejects_mismatched_input_widths() {
        let split = tiny_split(100);
        let vconfig = VariantConfig::bare(VariantKind::Supervised, &[32, 16, 10]);
        let tconfig = TrainConfig::<f64>::desk(100, 1);
        assert!(train(&vconfig, &tconfig, &split, None).is_err());
    }

    #[test]
    fn matrix_sweep_has_one_row_per_seed_and_reruns_identically() {
        let (train_ds, test_ds) = tiny_corpus();
        let plan = MatrixPlan {
            kinds: &[VariantKind::Supervised],
            label_counts: &[100],
            seeds: &[1, 2, 3],
            data_seed: 99,
            train: &train_ds,
            test: &test_ds,
        };
        let configure =
            |kind: VariantKind, _labels: usize| Ok(VariantConfig::bare(kind, &[784, 16, 10]));
        let train_for = |labels: usize, seed: u64| {
            let mut t = TrainConfig::<f64>::desk(labels, seed);
            t.epochs = 1;
            t.decay_start = 1;
            t.eval_every = 1;
            t
        };
        let first = run_matrix(&plan, configure, train_for, None).unwrap();
        assert_eq!(first.rows.len(), 3);
        assert_eq!(first.cells.len(), 1);
        let cell = &first.cells[0];
        assert_eq!(cell.completed, vec![1, 2, 3]);
        assert!(cell.failed.is_empty());
        assert!(cell.clean_aer.mean.is_finite() && cell.clean_aer.se >= 0.0);

        let second = run_matrix(&plan, configure, train_for, None).unwrap();
        assert_eq!(first.cells[0].clean_aer, second.cells[0].clean_aer);
        assert_eq!(first.cells[0].smoothness, second.cells[0].smoothness);
        for (a, b) in first.rows.iter().zip(&second.rows) {
            assert!(a.final_record.agrees_with(&b.final_record, 0.0));
        }
    }

    #[test]
    fn matrix_sweep_records_failures_and_keeps_going() {
        let (train_ds, test_ds) = tiny_corpus();
        let plan = MatrixPlan {
            kinds: &[VariantKind::Supervised, VariantKind::Ladder],
            label_counts: &[100],
            seeds: &[4, 5],
            data_seed: 99,
            train: &train_ds,
            test: &test_ds,
        };
        // The ladder cell gets widths that cannot match 784-pixel images.
        let configure = |kind: VariantKind, _labels: usize| {
            let widths: &[usize] =
                if kind == VariantKind::Ladder { &[12, 8, 10] } else { &[784, 16, 10] };
            let mut config = VariantConfig::bare(kind, widths);
            if kind == VariantKind::Ladder {
                config.sigma = 0.3;
                config.lambdas = [1000.0, 10.0, 0.1];
            }
            Ok(config)
        };
        let train_for = |labels: usize, seed: u64| {
            let mut t = TrainConfig::<f64>::desk(labels, seed);
            t.epochs = 1;
            t.decay_start = 1;
            t.eval_every = 1;
            t
        };
        let report = run_matrix(&plan, configure, train_for, None).unwrap();
        assert_eq!(report.rows.len(), 2, "only the well-formed cell produces rows");
        let ladder_cell = report
            .cells
            .iter()
            .find(|c| c.kind == VariantKind::Ladder)
            .unwrap();
        assert_eq!(ladder_cell.failed.len(), 2);
        assert!(ladder_cell.completed.is_empty());
        assert!(ladder_cell.clean_aer.mean.is_nan());
        let ok_cell = report
            .cells
            .iter()
            .find(|c| c.kind == VariantKind::Supervised)
            .unwrap();
        assert_eq!(ok_cell.completed.len(), 2);
    }

    #[test]
    fn csv_renderings_round_trip_their_numbers() {
        let record = MetricsRecord {
            epoch: 7,
            clean_aer: 12.5,
            adv_l1: 30.0,
            adv_l2: 45.25,
            adv_linf: 60.125,
            smoothness: 0.0625,
            sup_loss: 1.5,
            recon_loss: 2.25,
            vadv_loss: 0.75,
            total_loss: 4.5,
            wall_seconds: 3.0,
        };
        let text = metrics_csv(&[record]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 11);
        assert_eq!(fields[0], "7");
        assert_eq!(fields[1].parse::<f64>().unwrap(), 12.5);
        assert_eq!(fields[9].parse::<f64>().unwrap(), 4.5);

        let report = MatrixReport {
            rows: vec![RunRow {
                kind: VariantKind::Ladder,
                n_labels: 100,
                seed: 3,
                final_record: record,
            }],
            cells: vec![CellSummary {
                kind: VariantKind::Ladder,
                n_labels: 100,
                completed: vec![3],
                failed: vec![],
                clean_aer: Aggregate { mean: 12.5, se: 0.0 },
                adv_l1: Aggregate { mean: 30.0, se: 0.0 },
                adv_l2: Aggregate { mean: 45.25, se: 0.0 },
                adv_linf: Aggregate { mean: 60.125, se: 0.0 },
                smoothness: Aggregate { mean: 0.0625, se: 0.0 },
            }],
        };
        let runs = matrix_runs_csv(&report);
        assert!(runs.lines().nth(1).unwrap().starts_with("ladder,100,3,7,"));
        let summary = matrix_summary_csv(&report);
        assert!(summary.lines().nth(1).unwrap().starts_with("ladder,100,1,0,12.5,"));
    }

    #[test]
    fn aggregates_use_the_standard_error_of_the_mean() {
        let agg = Aggregate::over(&[1.0, 2.0, 3.0]);
        assert_relative_eq!(agg.mean, 2.0);
        // Sample sd = 1, n = 3.
        assert_relative_eq!(agg.se, 1.0 / 3.0_f64.sqrt(), max_relative = 1e-12);
        assert_eq!(Aggregate::over(&[5.0]).se, 0.0);
        assert!(Aggregate::over(&[]).mean.is_nan());
    }
}
