//! The seven trainable configurations, assembled into one loss contract.
//!
//! Every variant owns the same parameter shape (a full ladder model — the
//! decoder simply sits unused where no reconstruction cost is active) and
//! differs only in which cost terms it evaluates and where virtual
//! adversarial perturbations enter:
//!
//! * `supervised` — cross-entropy on a (possibly corrupted) labeled pass.
//! * `ladder` — supervised cost plus the layer-weighted reconstruction cost
//!   on the unlabeled batch.
//! * `vat` — supervised cost plus a consistency cost: the KL divergence
//!   between the model's prediction and its prediction under the locally
//!   most damaging input perturbation, averaged over labeled and unlabeled
//!   examples alike.
//! * `lvac` / `lvac-lw` — ladder costs plus that consistency cost, at the
//!   corrupted input only (`lvac`) or at every corrupted-encoder layer
//!   (`lvac-lw`).
//! * `lvan` / `lvan-lw` — ladder costs with the adversarial perturbation
//!   *injected* into the corrupted encoder alongside its Gaussian noise —
//!   input only (`lvan`) or every layer (`lvan-lw`) — with no explicit
//!   consistency term.
//!
//! Training steps are split in two phases. [`build_step_plan`] draws every
//! random quantity — Gaussian corruption, adversarial directions, reference
//! distributions — with no gradients involved and freezes them in a
//! [`StepPlan`]. [`loss_on_tape`] then evaluates the variant's objective
//! over the frozen plan as a pure, differentiable function of the
//! parameters. The split is what makes gradient isolation structural
//! (perturbation generation cannot leak into the backward pass) and lets
//! finite differences verify the analytic gradient of the full objective.

use crate::data::StepBatch;
use crate::error::{Error, Result};
use crate::ladder::{
    decode_on, encode_from_on, encode_on, encode_with_plan, reconstruction_cost_on,
    CorruptionPlan, EncoderPass, LadderParams, StatsMode,
};
use crate::numerics::{absorb_gradients, bind, BatchStats, Binding, Matrix, RngStream, Scalar, Tape, Var};
use crate::vat::{vadv_perturbation, PerturbNorm, VatSettings};

/// Encoder widths used for the full-size experiments (28×28 inputs, ten
/// classes).
pub const PAPER_WIDTHS: [usize; 7] = [784, 1000, 500, 250, 250, 250, 10];

/// Default Gaussian corruption scale for the ladder-family variants.
pub const DEFAULT_SIGMA: f64 = 0.3;

/// One of the seven trainable configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    Supervised,
    Ladder,
    Vat,
    Lvac,
    LvacLw,
    Lvan,
    LvanLw,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Supervised,
        VariantKind::Ladder,
        VariantKind::Vat,
        VariantKind::Lvac,
        VariantKind::LvacLw,
        VariantKind::Lvan,
        VariantKind::LvanLw,
    ];

    /// Canonical lowercase name, as accepted on the command line.
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Supervised => "supervised",
            VariantKind::Ladder => "ladder",
            VariantKind::Vat => "vat",
            VariantKind::Lvac => "lvac",
            VariantKind::LvacLw => "lvac-lw",
            VariantKind::Lvan => "lvan",
            VariantKind::LvanLw => "lvan-lw",
        }
    }

    /// Parses a variant name; case-insensitive, `_` and `-` interchangeable.
    pub fn parse(name: &str) -> Result<Self> {
        let norm = name.trim().to_ascii_lowercase().replace('_', "-");
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {name:?}; expected one of {}",
                    VariantKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }

    /// Whether the reconstruction cost (and hence the decoder and the clean
    /// unlabeled pass) is part of the objective.
    pub fn uses_reconstruction(self) -> bool {
        matches!(
            self,
            VariantKind::Ladder
                | VariantKind::Lvac
                | VariantKind::LvacLw
                | VariantKind::Lvan
                | VariantKind::LvanLw
        )
    }

    /// Whether an explicit adversarial consistency (KL) cost is added.
    pub fn uses_vat_cost(self) -> bool {
        matches!(self, VariantKind::Vat | VariantKind::Lvac | VariantKind::LvacLw)
    }

    /// Whether adversarial perturbations are injected into the corrupted
    /// encoder as extra noise instead of costed explicitly.
    pub fn uses_vat_injection(self) -> bool {
        matches!(self, VariantKind::Lvan | VariantKind::LvanLw)
    }

    /// Whether adversarial machinery acts at every layer rather than only
    /// at the input.
    pub fn is_layerwise(self) -> bool {
        matches!(self, VariantKind::LvacLw | VariantKind::LvanLw)
    }

    fn default_sigma(self) -> f64 {
        if self.uses_reconstruction() {
            DEFAULT_SIGMA
        } else {
            0.0
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full description of one trainable configuration.
///
/// `lambdas` and the radii inside `vat` are stored as *schemes*: index 0
/// applies to the input layer, index 1 to the first hidden layer, and the
/// last entry replicates upward through the remaining layers. Expansion to
/// the model's actual depth happens when the objective is assembled.
#[derive(Clone, Debug)]
pub struct VariantConfig<T: Scalar> {
    pub kind: VariantKind,
    /// Encoder widths, input first, classes last.
    pub widths: Vec<usize>,
    /// Gaussian corruption scale for training passes.
    pub sigma: T,
    /// Reconstruction weight scheme (input, first hidden, upper layers).
    pub lambdas: [T; 3],
    /// Adversarial settings; `vat.epsilon` and `vat.alpha` are schemes in
    /// the same layout as `lambdas`.
    pub vat: VatSettings<T>,
}

impl<T: Scalar> VariantConfig<T> {
    /// A configuration with everything inactive: zero noise, zero weights.
    /// Useful as a base to customize in tests.
    pub fn bare(kind: VariantKind, widths: &[usize]) -> Self {
        VariantConfig {
            kind,
            widths: widths.to_vec(),
            sigma: T::zero(),
            lambdas: [T::zero(); 3],
            vat: VatSettings::input_only(T::zero(), PerturbNorm::LInf),
        }
    }

    /// Number of computed layers.
    pub fn layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    /// Reconstruction weights expanded to one entry per layer (input
    /// included).
    pub fn lambdas_expanded(&self) -> Vec<T> {
        expand_scheme(&self.lambdas, self.layers())
    }

    /// Adversarial settings expanded to the model's depth: layerwise kinds
    /// replicate the scheme upward, input-only kinds keep index 0 alone.
    pub fn vat_expanded(&self) -> VatSettings<T> {
        let mut expanded = self.vat.clone();
        if self.kind.is_layerwise() {
            expanded.epsilon = expand_scheme(&self.vat.epsilon, self.layers());
            expanded.alpha = expand_scheme(&self.vat.alpha, self.layers());
        } else {
            expanded.epsilon = vec![self.vat.epsilon_at(0)];
            expanded.alpha = vec![self.vat.alpha_at(0)];
        }
        expanded
    }

    /// Checks internal consistency. Inactive fields are not validated here;
    /// see [`VariantConfig::warnings`] for mismatch diagnostics.
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "variant {} needs at least input and output widths, got {:?}",
                self.kind, self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("zero-width layer in {:?}", self.widths)));
        }
        if self.sigma < T::zero() {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if let Some(bad) = self.lambdas.iter().find(|&&l| l < T::zero()) {
            return Err(Error::Config(format!(
                "reconstruction weights must be >= 0, got {bad}"
            )));
        }
        if self.kind.uses_vat_cost() || self.kind.uses_vat_injection() {
            self.vat.validate()?;
        }
        Ok(())
    }

    /// Human-readable notes about configured-but-ignored fields, e.g. a
    /// supervised run with reconstruction weights set. Ignored fields do not
    /// fail validation; they simply never enter the objective.
    pub fn warnings(&self) -> Vec<String> {
        let mut notes = Vec::new();
        let lambdas_set = self.lambdas.iter().any(|&l| l != T::zero());
        let epsilon_set = self.vat.epsilon.iter().any(|&e| e != T::zero());
        if lambdas_set && !self.kind.uses_reconstruction() {
            notes.push(format!(
                "variant {} has no reconstruction cost; lambdas {:?} are ignored",
                self.kind,
                self.lambdas.map(|l| l.as_f64())
            ));
        }
        if epsilon_set && !(self.kind.uses_vat_cost() || self.kind.uses_vat_injection()) {
            notes.push(format!(
                "variant {} has no adversarial term; epsilon values are ignored",
                self.kind
            ));
        }
        if !self.kind.is_layerwise()
            && self.vat.epsilon.iter().skip(1).any(|&e| e != T::zero())
            && (self.kind.uses_vat_cost() || self.kind.uses_vat_injection())
        {
            notes.push(format!(
                "variant {} acts at the input only; upper-layer epsilon values are ignored",
                self.kind
            ));
        }
        notes
    }
}

/// Expands a scheme (input, first hidden, upper-layers...) to `layers + 1`
/// entries: entry `l` takes the scheme value at `min(l, len - 1)`. An empty
/// scheme expands to zeros.
pub fn expand_scheme<T: Scalar>(scheme: &[T], layers: usize) -> Vec<T> {
    if scheme.is_empty() {
        return vec![T::zero(); layers + 1];
    }
    (0..=layers)
        .map(|l| scheme[l.min(scheme.len() - 1)])
        .collect()
}

/// Published hyperparameter row for `(kind, n_labels)`: the reconstruction
/// weight scheme and the radius scheme. Only 50, 100, and 1000 labels have
/// rows.
fn preset_row(kind: VariantKind, n_labels: usize) -> Result<([f64; 3], [f64; 3])> {
    let lambdas = match n_labels {
        50 => [1504.0, 16.15, 0.0381],
        100 => [1966.0, 14.20, 0.1563],
        1000 => [3883.0, 12.35, 0.0539],
        other => {
            return Err(Error::Config(format!(
                "no preset for {other} labels; presets exist for 50, 100, and 1000"
            )))
        }
    };
    let zero = [0.0; 3];
    Ok(match kind {
        VariantKind::Supervised => (zero, zero),
        VariantKind::Ladder => (lambdas, zero),
        VariantKind::Vat => {
            let eps = match n_labels {
                50 | 100 => 5.0,
                _ => 2.5,
            };
            (zero, [eps, 0.0, 0.0])
        }
        VariantKind::Lvac | VariantKind::Lvan => {
            let eps = match n_labels {
                50 => 0.0733,
                100 => 0.0731,
                _ => 2.5206,
            };
            (lambdas, [eps, 0.0, 0.0])
        }
        VariantKind::LvacLw => match n_labels {
            50 => ([1000.0, 10.00, 0.1000], [1.0000, 0.1000, 1.00e-3]),
            100 => (lambdas, [0.0731, 0.4822, 1.402e-3]),
            _ => (lambdas, [2.5206, 0.0143, 6.002e-4]),
        },
        VariantKind::LvanLw => match n_labels {
            50 => (lambdas, [0.0733, 0.3897, 8.372e-2]),
            100 => (lambdas, [0.0731, 0.4822, 1.402e-3]),
            _ => (lambdas, [2.5206, 0.0143, 6.002e-4]),
        },
    })
}

/// The published configuration for `kind` trained with `n_labels` labeled
/// examples (50, 100, or 1000), at the full experiment widths. Adversarial
/// perturbations use the max-norm shape; xi 1e-6; one power iteration;
/// unit cost weights.
pub fn default_config<T: Scalar>(kind: VariantKind, n_labels: usize) -> Result<VariantConfig<T>> {
    let (lambdas, epsilons) = preset_row(kind, n_labels)?;
    Ok(VariantConfig {
        kind,
        widths: PAPER_WIDTHS.to_vec(),
        sigma: T::from_f64(kind.default_sigma()),
        lambdas: lambdas.map(T::from_f64),
        vat: VatSettings {
            epsilon: epsilons.map(T::from_f64).to_vec(),
            alpha: vec![T::one()],
            xi: T::from_f64(1e-6),
            power_iters: 1,
            norm: PerturbNorm::LInf,
        },
    })
}

/// Encoder widths for quick runs on a single CPU core: one hidden stack of
/// 256 and 128 units between the image and the ten classes.
pub const DESK_WIDTHS: [usize; 4] = [784, 256, 128, 10];

/// The desk-scale configuration for `kind`: the same label-row presets as
/// [`default_config`], shrunk to [`DESK_WIDTHS`] and re-tuned for the short
/// schedule that accompanies them (30 epochs instead of 250).
///
/// Two adjustments make the small regime behave like the full one:
///
/// * Perturbations use the Euclidean ball rather than the max-norm box. A
///   max-norm radius perturbs every coordinate at once, so its Euclidean
///   length grows with layer width; the radii below are single lengths that
///   mean the same thing at every width.
/// * The noise-injecting variants get radii sized for the short schedule.
///   Injected adversarial noise slows convergence roughly in proportion to
///   its radius, and a 30-epoch run has no time to absorb radii that a
///   250-epoch run tolerates. The explicit-cost variants keep larger radii
///   (the KL penalty tolerates them), and the layer-wise noise variant
///   spreads a smaller budget across layers.
pub fn desk_config<T: Scalar>(kind: VariantKind, n_labels: usize) -> Result<VariantConfig<T>> {
    let mut config = default_config::<T>(kind, n_labels)?;
    config.widths = DESK_WIDTHS.to_vec();
    config.vat.norm = PerturbNorm::L2;
    let epsilons: [f64; 3] = match kind {
        VariantKind::Supervised | VariantKind::Ladder => [0.0; 3],
        VariantKind::Vat => [5.0, 0.0, 0.0],
        VariantKind::Lvac | VariantKind::Lvan => [1.0, 0.0, 0.0],
        VariantKind::LvacLw => [1.0, 0.5, 0.05],
        VariantKind::LvanLw => [0.0731, 0.05, 0.005],
    };
    config.vat.epsilon = epsilons.map(T::from_f64).to_vec();
    Ok(config)
}

/// The preset label count nearest to `n_labels`, for runs at label counts
/// the published table does not cover.
pub fn nearest_label_row(n_labels: usize) -> usize {
    if n_labels < 75 {
        50
    } else if n_labels < 550 {
        100
    } else {
        1000
    }
}

/// Diagnostic decomposition of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T: Scalar> {
    /// Mean cross-entropy on the labeled batch.
    pub supervised: T,
    /// Weighted reconstruction cost (zero where inactive).
    pub reconstruction: T,
    /// Weighted adversarial consistency cost (zero where inactive).
    pub vadv: T,
    /// Sum of the three components, as optimized.
    pub total: T,
}

/// Which batch a frozen adversarial term applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Labeled,
    Unlabeled,
}

/// One frozen adversarial consistency term: a perturbation `r` to add at
/// `layer` of the pool's corrupted pass, compared against the frozen
/// reference distribution `p_ref`.
#[derive(Clone, Debug)]
pub struct VatTermPlan<T: Scalar> {
    pub pool: Pool,
    pub layer: usize,
    /// Cost weight: the layer's alpha times the pool's share of all rows.
    pub weight: T,
    pub r: Matrix<T>,
    pub p_ref: Matrix<T>,
}

/// Every random quantity of one training step, frozen. Evaluating a loss
/// over a fixed plan is a deterministic, differentiable function of the
/// parameters alone.
#[derive(Clone, Debug)]
pub struct StepPlan<T: Scalar> {
    /// Corruption for the labeled pass (includes injections for the
    /// noise-variants).
    pub labeled: CorruptionPlan<T>,
    /// Corruption for the unlabeled pass; absent when the variant never
    /// looks at unlabeled data.
    pub unlabeled: Option<CorruptionPlan<T>>,
    /// Frozen adversarial consistency terms (explicit-cost variants only).
    pub vat_terms: Vec<VatTermPlan<T>>,
}

fn pool_stream_label(pool: Pool) -> &'static str {
    match pool {
        Pool::Labeled => "vadv-labeled",
        Pool::Unlabeled => "vadv-unlabeled",
    }
}

/// Draws and freezes every stochastic ingredient of one training step:
/// Gaussian corruption for both pools, and — depending on the variant —
/// adversarial perturbations as explicit cost terms or as extra corruption.
/// Adversarial generation sees the model only through value-level passes,
/// so no gradient can flow from it.
///
/// All randomness is drawn from named substreams of `rng` ("noise-labeled",
/// "noise-unlabeled", "vadv-labeled"/"vadv-unlabeled" indexed by layer), so
/// variants that skip a stream leave the others untouched: a fused variant
/// with all radii zero draws exactly what its base variant draws.
pub fn build_step_plan<T: Scalar>(
    params: &LadderParams<T>,
    config: &VariantConfig<T>,
    batch: &StepBatch<T>,
    rng: &RngStream,
) -> Result<StepPlan<T>> {
    config.validate()?;
    if config.widths != params.widths() {
        return Err(Error::Config(format!(
            "config widths {:?} do not match model widths {:?}",
            config.widths,
            params.widths()
        )));
    }
    let n_labeled = batch.x_labeled.rows();
    if n_labeled == 0 {
        return Err(Error::Argument("labeled batch is empty".into()));
    }
    if batch.labels.len() != n_labeled {
        return Err(Error::dimension(
            "training step",
            format!("{} labels", batch.labels.len()),
            format!("{n_labeled} labeled rows"),
        ));
    }

    let kind = config.kind;
    let needs_unlabeled = kind != VariantKind::Supervised;
    let n_unlabeled = batch.x_unlabeled.rows();
    if needs_unlabeled && n_unlabeled == 0 {
        return Err(Error::Argument(format!(
            "variant {kind} requires an unlabeled batch"
        )));
    }

    let mut labeled_plan = CorruptionPlan::sample(
        params.widths(),
        n_labeled,
        config.sigma,
        &mut rng.substream("noise-labeled"),
    )?;
    let mut unlabeled_plan = if needs_unlabeled {
        Some(CorruptionPlan::sample(
            params.widths(),
            n_unlabeled,
            config.sigma,
            &mut rng.substream("noise-unlabeled"),
        )?)
    } else {
        None
    };

    let mut vat_terms = Vec::new();
    if kind.uses_vat_cost() || kind.uses_vat_injection() {
        let settings = config.vat_expanded();
        let total_rows = T::from_f64((n_labeled + n_unlabeled) as f64);
        let pools = [
            (Pool::Labeled, &batch.x_labeled, &mut labeled_plan),
            (
                Pool::Unlabeled,
                &batch.x_unlabeled,
                unlabeled_plan.as_mut().expect("required above"),
            ),
        ];
        for (pool, x, plan) in pools {
            let base = encode_with_plan(params, x, plan, StatsMode::TrainingBatch)?;
            let share = T::from_f64(x.rows() as f64) / total_rows;
            let mut injections = vec![None; params.layers() + 1];
            for layer in 0..=params.layers() {
                let epsilon = settings.epsilon_at(layer);
                let alpha = settings.alpha_at(layer);
                let costed = kind.uses_vat_cost() && epsilon > T::zero() && alpha > T::zero();
                let injected = kind.uses_vat_injection() && epsilon > T::zero();
                if !costed && !injected {
                    continue;
                }
                let mut stream = rng.substream_indexed(pool_stream_label(pool), layer as u64);
                let result = vadv_perturbation(
                    params,
                    layer,
                    &base.z[layer],
                    &base.probs,
                    plan,
                    StatsMode::TrainingBatch,
                    &settings,
                    &mut stream,
                )?;
                if costed {
                    vat_terms.push(VatTermPlan {
                        pool,
                        layer,
                        weight: alpha * share,
                        r: result.r_vadv,
                        p_ref: base.probs.clone(),
                    });
                } else {
                    injections[layer] = Some(result.r_vadv);
                }
            }
            for (layer, injection) in injections.into_iter().enumerate() {
                if injection.is_some() {
                    plan.inject[layer] = injection;
                }
            }
        }
    }

    Ok(StepPlan {
        labeled: labeled_plan,
        unlabeled: unlabeled_plan,
        vat_terms,
    })
}

/// The objective's variables on a live tape, plus the batch statistics the
/// caller should fold into the running averages (the clean pass's where one
/// runs, otherwise the labeled pass's).
pub struct PlannedLoss<T: Scalar> {
    pub total: Var,
    pub supervised: Var,
    pub reconstruction: Option<Var>,
    pub vadv: Option<Var>,
    pub stats: Vec<BatchStats<T>>,
}

/// Assembles the variant's objective over a frozen plan. Binding decides
/// whether parameters are tracked; everything else on the tape is constant.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    params: &LadderParams<T>,
    config: &VariantConfig<T>,
    batch: &StepBatch<T>,
    plan: &StepPlan<T>,
) -> Result<PlannedLoss<T>> {
    let x_labeled = tape.constant(batch.x_labeled.clone());
    let labeled =
        encode_on(tape, binding, params, x_labeled, &plan.labeled, StatsMode::TrainingBatch)?;
    let supervised = tape.cross_entropy_mean(labeled.probs, &batch.labels);

    let unlabeled: Option<EncoderPass<T>> = match &plan.unlabeled {
        Some(uplan) => {
            let x_unlabeled = tape.constant(batch.x_unlabeled.clone());
            Some(encode_on(tape, binding, params, x_unlabeled, uplan, StatsMode::TrainingBatch)?)
        }
        None => None,
    };

    let mut stats = labeled.stats.clone();
    let reconstruction = if config.kind.uses_reconstruction() {
        let noisy = unlabeled.as_ref().ok_or_else(|| {
            Error::Argument(format!(
                "variant {} needs an unlabeled plan for its reconstruction cost",
                config.kind
            ))
        })?;
        let x_clean = tape.constant(batch.x_unlabeled.clone());
        let clean_plan = CorruptionPlan::clean(params.layers());
        let clean =
            encode_on(tape, binding, params, x_clean, &clean_plan, StatsMode::TrainingBatch)?;
        let decoder = decode_on(tape, binding, params, noisy);
        let cost =
            reconstruction_cost_on(tape, &decoder, &clean, &config.lambdas_expanded())?;
        stats = clean.stats.clone();
        Some(cost)
    } else {
        None
    };

    let mut vadv: Option<Var> = None;
    for term in &plan.vat_terms {
        let (base, pool_plan) = match term.pool {
            Pool::Labeled => (&labeled, &plan.labeled),
            Pool::Unlabeled => (
                unlabeled.as_ref().expect("vat term on a pool without a pass"),
                plan.unlabeled.as_ref().expect("checked with the pass"),
            ),
        };
        let start = tape.add_const(base.z[term.layer], &term.r);
        let probs = encode_from_on(
            tape,
            binding,
            params,
            term.layer,
            start,
            pool_plan,
            StatsMode::TrainingBatch,
        )?;
        let kl = tape.kl_mean(&term.p_ref, probs);
        let weighted = tape.scale(kl, term.weight);
        vadv = Some(match vadv {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }

    let mut total = supervised;
    if let Some(recon) = reconstruction {
        total = tape.add(total, recon);
    }
    if let Some(v) = vadv {
        total = tape.add(total, v);
    }

    Ok(PlannedLoss {
        total,
        supervised,
        reconstruction,
        vadv,
        stats,
    })
}

fn read_breakdown<T: Scalar>(tape: &Tape<T>, loss: &PlannedLoss<T>) -> LossBreakdown<T> {
    let scalar = |v: Var| tape.value(v).get(0, 0);
    LossBreakdown {
        supervised: scalar(loss.supervised),
        reconstruction: loss.reconstruction.map(&scalar).unwrap_or_else(T::zero),
        vadv: loss.vadv.map(&scalar).unwrap_or_else(T::zero),
        total: scalar(loss.total),
    }
}

/// Evaluates the objective over an existing plan without touching gradients
/// or statistics. Pure in the parameters — the finite-difference oracle for
/// [`training_step`]'s analytic gradients.
pub fn loss_from_plan<T: Scalar>(
    params: &LadderParams<T>,
    config: &VariantConfig<T>,
    batch: &StepBatch<T>,
    plan: &StepPlan<T>,
) -> Result<LossBreakdown<T>> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, &params.set, false);
    let loss = loss_on_tape(&mut tape, &binding, params, config, batch, plan)?;
    Ok(read_breakdown(&tape, &loss))
}

/// Draws a fresh plan and evaluates the objective, without mutating the
/// model. Deterministic in `(config, params, batch, rng seed)`.
pub fn training_loss<T: Scalar>(
    params: &LadderParams<T>,
    config: &VariantConfig<T>,
    batch: &StepBatch<T>,
    rng: &RngStream,
) -> Result<LossBreakdown<T>> {
    let plan = build_step_plan(params, config, batch, rng)?;
    loss_from_plan(params, config, batch, &plan)
}

/// One full training step minus the optimizer: plans the step's randomness,
/// evaluates the objective, accumulates parameter gradients into
/// `params.set`, and folds the appropriate pass's batch statistics into the
/// running averages. Returns the loss decomposition. The caller owns the
/// optimizer update (and should `zero_grads` once applied).
pub fn training_step<T: Scalar>(
    params: &mut LadderParams<T>,
    config: &VariantConfig<T>,
    batch: &StepBatch<T>,
    rng: &RngStream,
) -> Result<LossBreakdown<T>> {
    let plan = build_step_plan(params, config, batch, rng)?;
    let mut tape = Tape::new();
    let binding = bind(&mut tape, &params.set, true);
    let loss = loss_on_tape(&mut tape, &binding, params, config, batch, &plan)?;
    let breakdown = read_breakdown(&tape, &loss);
    let stats = loss.stats.clone();
    let total = loss.total;
    let mut grads = tape.backward(total);
    absorb_gradients(&mut params.set, &binding, &mut grads);
    params.update_running(&stats);
    Ok(breakdown)
}

/// Class probabilities on the clean evaluation path (no corruption, running
/// statistics).
pub fn predict<T: Scalar>(
    config: &VariantConfig<T>,
    params: &LadderParams<T>,
    x: &Matrix<T>,
) -> Result<Matrix<T>> {
    if config.widths != params.widths() {
        return Err(Error::Config(format!(
            "config widths {:?} do not match model widths {:?}",
            config.widths,
            params.widths()
        )));
    }
    crate::ladder::predict(params, x)
}
