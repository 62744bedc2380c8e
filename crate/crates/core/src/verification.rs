//! Experiment harnesses: gradient and target-equivalence sweeps, evaluation
//! metrics, and the sample-efficiency ladder comparing full-response DPO with
//! target-restricted training.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, PreferenceExample, SyntheticTaskConfig, Vocab};
use crate::error::{Error, Result};
use crate::losses::{margin_u, value_and_grad, value_of, LossConfig, PreferencePair};
use crate::model::{snapshot_reference, GridImage, ModelConfig, PolicyModel, ReferenceModel, Token};
use crate::targeting::{label_mask, noisy_mask_features, SpanAnnotation, TargetSpan};
use crate::training::{id_key, mix_seed, train, Objective, TrainConfig};

// ---------------------------------------------------------------------------
// Target equivalence

/// Checks that a masked pair is in the regime where the target margin must
/// equal the full margin: every zero-weight token belongs to a prefix that
/// both responses share token for token, and every token after that prefix
/// carries weight 1 (so nothing follows the last target).
///
/// Returns the shared prefix length.
pub fn shared_prefix_regime(pair: &PreferencePair) -> std::result::Result<usize, String> {
    let (Some(mw), Some(ml)) = (&pair.mask_w, &pair.mask_l) else {
        return Err("pair carries no target masks".into());
    };
    if mw.len() != pair.y_w.len() || ml.len() != pair.y_l.len() {
        return Err("mask length differs from its response".into());
    }
    let prefix = |m: &[f64]| -> std::result::Result<usize, String> {
        let p = m.iter().take_while(|&&w| w == 0.0).count();
        if m[p..].iter().any(|&w| w != 1.0) {
            return Err("a non-target token follows a target token".into());
        }
        Ok(p)
    };
    let pw = prefix(mw)?;
    let pl = prefix(ml)?;
    if pw != pl {
        return Err(format!("non-target prefixes differ in length ({pw} vs {pl})"));
    }
    if pair.y_w[..pw] != pair.y_l[..pl] {
        return Err("responses differ outside their target spans".into());
    }
    Ok(pw)
}

/// `|u_full − u_target|` for a pair without checking the regime.
pub fn target_equivalence_discrepancy(
    policy: &PolicyModel,
    reference: &ReferenceModel,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    let mut full = pair.clone();
    full.mask_w = None;
    full.mask_l = None;
    let u_full = margin_u(policy, reference, &full, beta)?;
    let u_target = margin_u(policy, reference, pair, beta)?;
    Ok((u_full - u_target).abs())
}

/// `|u_full − u_target|` for a target-restricted pair, where `u_full` scores
/// the same (truncated) responses with all-ones weights.
///
/// Refuses pairs outside the shared-prefix regime: there, non-target tokens
/// after a target are conditioned on different contexts on the two sides and
/// no equality is claimed.
pub fn check_target_equivalence(
    policy: &PolicyModel,
    reference: &ReferenceModel,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    shared_prefix_regime(pair)
        .map_err(|why| Error::Contract(format!("target equivalence does not apply: {why}")))?;
    target_equivalence_discrepancy(policy, reference, pair, beta)
}

/// Small task/model pair used by the random sweeps.
fn sweep_task(seed: u64) -> SyntheticTaskConfig {
    SyntheticTaskConfig {
        grid_size: 2,
        object_classes: 3,
        attributes: 3,
        vocab_size: 19,
        dataset_size: 1,
        distractor_count: 2,
        seed,
    }
}

/// A reference with the policy's architecture but independently drawn
/// weights, which keeps both sides of every margin away from zero.
fn other_reference(policy: &PolicyModel, seed: u64) -> Result<ReferenceModel> {
    Ok(snapshot_reference(&PolicyModel::new_randomized(ModelConfig {
        seed,
        ..policy.config().clone()
    })?))
}

/// Model shape matching [`sweep_task`].
pub fn sweep_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 19,
        object_classes: 3,
        attributes: 3,
        grid_size: 2,
        d_model: 8,
        layers: 2,
        heads: 1,
        d_ff: 0,
        max_len: 24,
        init_scale: 0.5,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceSweepConfig {
    pub models: usize,
    pub pairs_per_model: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for EquivalenceSweepConfig {
    fn default() -> Self {
        Self {
            models: 200,
            pairs_per_model: 50,
            beta: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceSweepReport {
    pub pairs: usize,
    pub max_discrepancy: f64,
    /// Largest `|u_full|` seen, to show the margins were not trivially zero.
    pub max_abs_margin: f64,
}

/// A random pair in the shared-prefix regime: common prefix, then one
/// target chunk per side, truncated after it.
fn random_prefix_pair(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<PreferencePair> {
    let vocab = cfg.vocab_size as Token;
    let cells = (0..cfg.grid_size * cfg.grid_size)
        .map(|_| crate::model::Cell {
            obj: rng.random_range(0..cfg.object_classes as u32),
            attr: rng.random_range(0..cfg.attributes as u32),
        })
        .collect();
    let image = GridImage::new(cfg.grid_size, cells)?;
    let tokens = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Token> {
        (0..n).map(|_| rng.random_range(0..vocab)).collect()
    };
    let question = tokens(rng, 4);
    let prefix_len = rng.random_range(0..6);
    let prefix = tokens(rng, prefix_len);
    let tw_len = rng.random_range(1..4);
    let tw = tokens(rng, tw_len);
    // An empty dispreferred chunk at position 0 would leave nothing to score.
    let tl_len = rng.random_range(if prefix_len == 0 { 1 } else { 0 }..4);
    let tl = tokens(rng, tl_len);
    let suffix_len = rng.random_range(0..3);
    let suffix = tokens(rng, suffix_len);

    let y_r: Vec<Token> = [&prefix[..], &tw, &suffix].concat();
    let y_h: Vec<Token> = [&prefix[..], &tl, &suffix].concat();
    let annotation = SpanAnnotation {
        spans_h: vec![TargetSpan::new(prefix_len, prefix_len + tl_len)],
        spans_r: vec![TargetSpan::new(prefix_len, prefix_len + tw_len)],
    };
    PreferencePair::target_restricted(image, question, &y_r, &y_h, &annotation, None)
}

/// Random models × pairs in the shared-prefix regime. Half the pairs come
/// from the synthetic generator, half are random token sequences.
pub fn equivalence_sweep(cfg: &EquivalenceSweepConfig) -> Result<EquivalenceSweepReport> {
    if cfg.models == 0 || cfg.pairs_per_model == 0 {
        return Err(Error::config("models", "sweep needs at least one model and one pair"));
    }
    let per_model: Vec<Result<(f64, f64)>> = (0..cfg.models)
        .into_par_iter()
        .map(|m| {
            let seed = mix_seed(&[cfg.seed, m as u64, 0x4551]);
            let policy = PolicyModel::new_randomized(sweep_model_config(seed))?;
            let reference = other_reference(&policy, seed ^ 1)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let synthetic = generate_synthetic(&SyntheticTaskConfig {
                dataset_size: cfg.pairs_per_model / 2,
                ..sweep_task(seed)
            })?;
            let mut pairs = synthetic
                .iter()
                .map(PreferenceExample::target_pair)
                .collect::<Result<Vec<_>>>()?;
            while pairs.len() < cfg.pairs_per_model {
                pairs.push(random_prefix_pair(&mut rng, policy.config())?);
            }
            let mut worst: f64 = 0.0;
            let mut biggest: f64 = 0.0;
            for pair in &pairs {
                worst = worst.max(check_target_equivalence(&policy, &reference, pair, cfg.beta)?);
                biggest = biggest.max(margin_u(&policy, &reference, pair, cfg.beta)?.abs());
            }
            Ok((worst, biggest))
        })
        .collect();
    let mut report = EquivalenceSweepReport {
        pairs: cfg.models * cfg.pairs_per_model,
        max_discrepancy: 0.0,
        max_abs_margin: 0.0,
    };
    for r in per_model {
        let (worst, biggest) = r?;
        report.max_discrepancy = report.max_discrepancy.max(worst);
        report.max_abs_margin = report.max_abs_margin.max(biggest);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient checks of the loss family

/// The losses covered by [`gradient_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dpo,
    TargetGeneration,
    TargetCondition,
    TlDpo,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Dpo,
        LossKind::TargetGeneration,
        LossKind::TargetCondition,
        LossKind::TlDpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo_loss",
            LossKind::TargetGeneration => "target_generation_loss",
            LossKind::TargetCondition => "target_condition_loss",
            LossKind::TlDpo => "tl_dpo_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientSweepConfig {
    /// Random (model, example) draws.
    pub draws: usize,
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per draw and loss, sampled uniformly.
    pub uniform_coords: usize,
    /// Extra coordinates sampled among those with a nonzero analytic
    /// gradient.
    pub active_coords: usize,
    pub seed: u64,
}

impl Default for GradientSweepConfig {
    fn default() -> Self {
        Self {
            draws: 100,
            step: 1e-5,
            uniform_coords: 24,
            active_coords: 16,
            seed: 0,
        }
    }
}

/// Relative error with a floor on the denominator, so coordinates whose true
/// gradient vanishes are judged on absolute error `< tol·floor`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSweepReport {
    /// Worst relative error per loss, in [`LossKind::ALL`] order.
    pub worst: Vec<(LossKind, f64)>,
    pub coordinates_checked: usize,
}

impl GradientSweepReport {
    pub fn max_error(&self) -> f64 {
        self.worst.iter().map(|&(_, e)| e).fold(0.0, f64::max)
    }
}

fn loss_value(
    kind: LossKind,
    policy: &PolicyModel,
    reference: &ReferenceModel,
    ex: &PreferenceExample,
    masked: &crate::numerics::Tensor,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(f64, Vec<crate::numerics::Tensor>)> {
    let target = ex.target_pair()?;
    let full = ex.full_pair();
    let build = |s: &crate::losses::Scorer<'_>, g: &mut crate::numerics::Graph| match kind {
        LossKind::Dpo => s.dpo_loss(g, std::slice::from_ref(&full)),
        LossKind::TargetGeneration => s.target_generation_loss(g, &target),
        LossKind::TargetCondition => {
            let f = policy.features(&ex.image)?;
            s.target_condition_loss(g, &f, masked, &target.question, &target.y_w)
        }
        LossKind::TlDpo => Ok(s.tl_dpo_loss(g, &target, masked, cfg)?.total),
    };
    if with_grad {
        value_and_grad(policy, reference, cfg.beta, build)
    } else {
        Ok((value_of(policy, reference, cfg.beta, build)?, Vec::new()))
    }
}

/// Compares analytic gradients of every loss against central differences on
/// random small models and random synthetic examples.
pub fn gradient_sweep(cfg: &GradientSweepConfig) -> Result<GradientSweepReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::config("step", "must be > 0"));
    }
    let loss_cfg = LossConfig {
        w_t: 0.7,
        w_c: 1.3,
        ..LossConfig::default()
    };
    let per_draw: Vec<Result<Vec<f64>>> = (0..cfg.draws)
        .into_par_iter()
        .map(|d| {
            let seed = mix_seed(&[cfg.seed, d as u64, 0x4752]);
            let policy = PolicyModel::new_randomized(sweep_model_config(seed))?;
            let reference = other_reference(&policy, seed ^ 1)?;
            let ex = generate_synthetic(&sweep_task(seed))?.remove(0);
            let features = policy.features(&ex.image)?;
            let masked = noisy_mask_features(&features, ex.image.g, &ex.bbox, 1.0, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            let mut worst = Vec::with_capacity(LossKind::ALL.len());
            for kind in LossKind::ALL {
                let (_, grads) = loss_value(kind, &policy, &reference, &ex, &masked, &loss_cfg, true)?;
                let all: Vec<(usize, usize)> = grads
                    .iter()
                    .enumerate()
                    .flat_map(|(t, g)| (0..g.len()).map(move |i| (t, i)))
                    .collect();
                let active: Vec<(usize, usize)> =
                    all.iter().copied().filter(|&(t, i)| grads[t].data()[i] != 0.0).collect();
                let mut coords: Vec<(usize, usize)> = (0..cfg.uniform_coords)
                    .map(|_| all[rng.random_range(0..all.len())])
                    .collect();
                if !active.is_empty() {
                    coords.extend(
                        (0..cfg.active_coords).map(|_| active[rng.random_range(0..active.len())]),
                    );
                }
                let mut w: f64 = 0.0;
                for (t, i) in coords {
                    let at = |delta: f64| -> Result<f64> {
                        let mut m = policy.clone();
                        m.params_mut()[t].data_mut()[i] += delta;
                        Ok(loss_value(kind, &m, &reference, &ex, &masked, &loss_cfg, false)?.0)
                    };
                    let numeric = (at(cfg.step)? - at(-cfg.step)?) / (2.0 * cfg.step);
                    w = w.max(relative_error(grads[t].data()[i], numeric));
                }
                worst.push(w);
            }
            Ok(worst)
        })
        .collect();
    let mut worst = vec![0.0f64; LossKind::ALL.len()];
    for r in per_draw {
        for (acc, v) in worst.iter_mut().zip(r?) {
            *acc = acc.max(v);
        }
    }
    Ok(GradientSweepReport {
        worst: LossKind::ALL.iter().copied().zip(worst).collect(),
        coordinates_checked: cfg.draws * LossKind::ALL.len() * (cfg.uniform_coords + cfg.active_coords),
    })
}

// ---------------------------------------------------------------------------
// Metrics

/// Fraction of pairs with `u > 0`; exact ties count one half.
pub fn preference_accuracy(
    policy: &PolicyModel,
    reference: &ReferenceModel,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("preference accuracy needs a nonempty held-out set".into()));
    }
    let margins: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|p| margin_u(policy, reference, p, beta))
        .collect();
    let mut score = 0.0;
    for u in margins {
        let u = u?;
        if u > 0.0 {
            score += 1.0;
        } else if u == 0.0 {
            score += 0.5;
        }
    }
    Ok(score / pairs.len() as f64)
}

/// The attribute the model states for an example: the answer template is
/// teacher-forced up to the attribute slot and the most likely attribute
/// token is read off there (ties go to the lowest attribute index).
pub fn decoded_attribute(model: &PolicyModel, vocab: &Vocab, ex: &PreferenceExample) -> Result<u32> {
    let slot = Vocab::ANSWER_ATTR_POS;
    if ex.y_r.len() <= slot {
        return Err(Error::Input(format!("example {}: response too short for the answer template", ex.id)));
    }
    let mut context = ex.question.clone();
    context.extend_from_slice(&ex.y_r[..slot]);
    let lp = model.next_token_log_probs(&model.features(&ex.image)?, &context)?;
    let mut best = 0u32;
    for a in 1..vocab.attributes as u32 {
        if lp[vocab.attribute(a) as usize] > lp[vocab.attribute(best) as usize] {
            best = a;
        }
    }
    Ok(best)
}

/// Fraction of examples whose decoded attribute differs from the image's
/// true attribute.
pub fn hallucination_rate(model: &PolicyModel, vocab: &Vocab, dataset: &[PreferenceExample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("hallucination rate needs a nonempty dataset".into()));
    }
    let wrong: Vec<Result<bool>> = dataset
        .par_iter()
        .map(|ex| {
            let truth = ex.gt_attr.ok_or_else(|| {
                Error::Input(format!("example {} has no ground-truth attribute", ex.id))
            })?;
            Ok(decoded_attribute(model, vocab, ex)? != truth)
        })
        .collect();
    let mut n = 0usize;
    for w in wrong {
        if w? {
            n += 1;
        }
    }
    Ok(n as f64 / dataset.len() as f64)
}

/// Mean over examples of `log P(y_r^t | m) − log P(y_r^t | m̃)` on the
/// revised response's target tokens, with the target box noise-masked.
/// Noise for each example is keyed by `(seed, example id)`.
pub fn masked_dependency_margin(
    model: &PolicyModel,
    dataset: &[PreferenceExample],
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("masked-dependency margin needs a nonempty dataset".into()));
    }
    let margins: Vec<Result<f64>> = dataset
        .par_iter()
        .map(|ex| {
            let mut weights = label_mask(ex.y_r.len(), &ex.annotation.spans_r)?.weights;
            weights.resize(ex.y_r.len(), 0.0);
            let features = model.features(&ex.image)?;
            let masked = noisy_mask_features(
                &features,
                ex.image.g,
                &ex.bbox,
                sigma,
                mix_seed(&[seed, id_key(&ex.id)]),
            )?;
            let clean = model.masked_sequence_log_prob_features(&features, &ex.question, &ex.y_r, &weights)?;
            let noisy = model.masked_sequence_log_prob_features(&masked, &ex.question, &ex.y_r, &weights)?;
            Ok(clean - noisy)
        })
        .collect();
    let mut sum = 0.0;
    for m in margins {
        sum += m?;
    }
    Ok(sum / dataset.len() as f64)
}

// ---------------------------------------------------------------------------
// Sample-efficiency ladder

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// DPO on the full responses.
    FullDpo,
    /// Target-restricted training (generation + condition terms).
    TlDpo,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::FullDpo, Method::TlDpo];

    pub fn objective(self) -> Objective {
        match self {
            Method::FullDpo => Objective::Dpo,
            Method::TlDpo => Objective::TlDpo,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::FullDpo => "full-dpo",
            Method::TlDpo => "tl-dpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfficiencyExperimentConfig {
    /// Training-set sizes, strictly increasing.
    pub ladder: Vec<usize>,
    /// Held-out preference accuracy a size must reach.
    pub eps_acc: f64,
    pub seeds: usize,
    /// Optimizer steps per training run, whatever the size.
    pub step_budget: usize,
    pub heldout_size: usize,
    pub task: SyntheticTaskConfig,
    pub model: ModelConfig,
    /// Template for every run; `epochs`, `max_steps`, `objective` and `seed`
    /// are set per cell.
    pub train: TrainConfig,
}

impl Default for EfficiencyExperimentConfig {
    /// A 2×2 task with three classes and three attributes, and a training
    /// template under which both methods can generalize within the budget
    /// (at the loss defaults of the main task neither leaves chance level).
    fn default() -> Self {
        Self {
            ladder: vec![32, 64, 128, 256, 512, 1024],
            eps_acc: 0.9,
            seeds: 5,
            step_budget: 1000,
            heldout_size: 256,
            task: SyntheticTaskConfig {
                grid_size: 2,
                object_classes: 3,
                attributes: 3,
                vocab_size: 19,
                dataset_size: 1024,
                distractor_count: 2,
                seed: 0,
            },
            model: ModelConfig {
                vocab_size: 19,
                object_classes: 3,
                attributes: 3,
                grid_size: 2,
                d_model: 16,
                layers: 2,
                max_len: 24,
                init_scale: 0.3,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 8,
                learning_rate: 3e-3,
                loss: LossConfig {
                    beta: 1.0,
                    ..LossConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

impl EfficiencyExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ladder.is_empty() || self.ladder[0] == 0 {
            return Err(Error::config("ladder", "must be nonempty with sizes >= 1"));
        }
        if self.ladder.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("ladder", "must be strictly increasing"));
        }
        if !(self.eps_acc > 0.0 && self.eps_acc < 1.0) {
            return Err(Error::config("eps_acc", "must lie in (0, 1)"));
        }
        if self.seeds < 3 {
            return Err(Error::config("seeds", "must be >= 3"));
        }
        if self.step_budget == 0 {
            return Err(Error::config("step_budget", "must be >= 1"));
        }
        if self.heldout_size == 0 {
            return Err(Error::config("heldout_size", "must be >= 1"));
        }
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Training pool for one seed; every size uses a prefix of it, so both
    /// methods see identical examples at every size.
    pub fn pool(&self, seed: usize) -> Result<Vec<PreferenceExample>> {
        generate_synthetic(&SyntheticTaskConfig {
            dataset_size: *self.ladder.last().expect("validated"),
            seed: mix_seed(&[self.task.seed, seed as u64, 0x504f]),
            ..self.task.clone()
        })
    }

    /// The held-out set, shared by every cell.
    pub fn heldout(&self) -> Result<Vec<PreferenceExample>> {
        generate_synthetic(&SyntheticTaskConfig {
            dataset_size: self.heldout_size,
            seed: mix_seed(&[self.task.seed, 0x4845_4c44]),
            ..self.task.clone()
        })
    }

    /// Initial model for one seed, shared by both methods.
    pub fn initial_model(&self, seed: usize) -> Result<PolicyModel> {
        PolicyModel::new(ModelConfig {
            seed: mix_seed(&[self.model.seed, seed as u64]),
            ..self.model.clone()
        })
    }

    /// Training configuration of one run.
    pub fn run_config(&self, method: Method, seed: usize, size: usize) -> TrainConfig {
        let per_epoch = self.train.steps_per_epoch(size);
        TrainConfig {
            epochs: self.step_budget.div_ceil(per_epoch),
            max_steps: self.step_budget,
            objective: method.objective(),
            seed: mix_seed(&[self.train.seed, seed as u64]),
            eval_every: 0,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub size: usize,
    pub accuracy: f64,
}

/// One (method, seed) cell of the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub method: Method,
    pub seed: usize,
    /// Smallest size reaching the threshold; `None` when no size did.
    pub samples_to_threshold: Option<usize>,
    pub trace: Vec<LadderPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTable {
    pub eps_acc: f64,
    pub max_size: usize,
    pub rows: Vec<EfficiencyRow>,
}

impl EfficiencyTable {
    /// Median samples-to-threshold over seeds, with "never reached" ranked
    /// above every size. `None` means the median is above the ladder.
    pub fn median(&self, method: Method) -> Option<f64> {
        let mut ms: Vec<Option<usize>> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.samples_to_threshold)
            .collect();
        if ms.is_empty() {
            return None;
        }
        // None sorts below Some; map to a key that puts it last.
        ms.sort_by_key(|m| m.map_or(usize::MAX, |v| v));
        let n = ms.len();
        if n % 2 == 1 {
            ms[n / 2].map(|v| v as f64)
        } else {
            match (ms[n / 2 - 1], ms[n / 2]) {
                (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
                _ => None,
            }
        }
    }

    /// Target-restricted training needs no more samples than full DPO, with
    /// a defined target-restricted median.
    pub fn tl_not_worse(&self) -> bool {
        match (self.median(Method::TlDpo), self.median(Method::FullDpo)) {
            (Some(tl), Some(pl)) => tl <= pl,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }

    pub fn tl_strictly_better(&self) -> bool {
        match (self.median(Method::TlDpo), self.median(Method::FullDpo)) {
            (Some(tl), Some(pl)) => tl < pl,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }

    fn show(&self, m: Option<f64>) -> String {
        match m {
            Some(v) => format!("{v}"),
            None => format!("> {}", self.max_size),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("samples to held-out preference accuracy >= {}\n", self.eps_acc);
        let _ = writeln!(s, "{:<10} {:>5} {:>10}  trace (size:accuracy)", "method", "seed", "m");
        for r in &self.rows {
            let m = r.samples_to_threshold.map(|v| v as f64);
            let trace: Vec<String> = r.trace.iter().map(|p| format!("{}:{:.3}", p.size, p.accuracy)).collect();
            let _ = writeln!(s, "{:<10} {:>5} {:>10}  {}", r.method.name(), r.seed, self.show(m), trace.join(" "));
        }
        for method in Method::ALL {
            let _ = writeln!(s, "median m ({}): {}", method.name(), self.show(self.median(method)));
        }
        s
    }
}

fn run_cell(
    cfg: &EfficiencyExperimentConfig,
    method: Method,
    seed: usize,
    pool: &[PreferenceExample],
    heldout: &[PreferencePair],
) -> Result<EfficiencyRow> {
    let init = cfg.initial_model(seed)?;
    let reference = snapshot_reference(&init);
    let mut trace = Vec::new();
    let mut reached = None;
    for &size in &cfg.ladder {
        let (trained, _) = train(init.clone(), &reference, &pool[..size], &cfg.run_config(method, seed, size))?;
        let accuracy = preference_accuracy(&trained, &reference, heldout, cfg.train.loss.beta)?;
        trace.push(LadderPoint { size, accuracy });
        if accuracy >= cfg.eps_acc {
            reached = Some(size);
            break;
        }
    }
    Ok(EfficiencyRow {
        method,
        seed,
        samples_to_threshold: reached,
        trace,
    })
}

/// Runs the ladder for both methods over every seed. Cells run in parallel;
/// each is deterministic, and rows come back in (seed, method) order.
pub fn sample_efficiency_experiment(cfg: &EfficiencyExperimentConfig) -> Result<EfficiencyTable> {
    cfg.validate()?;
    let heldout = cfg
        .heldout()?
        .iter()
        .map(PreferenceExample::target_pair)
        .collect::<Result<Vec<_>>>()?;
    let pools = (0..cfg.seeds).map(|s| cfg.pool(s)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, Method)> = (0..cfg.seeds)
        .flat_map(|s| Method::ALL.into_iter().map(move |m| (s, m)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(seed, method)| run_cell(cfg, method, seed, &pools[seed], &heldout))
        .collect::<Result<Vec<_>>>()?;
    Ok(EfficiencyTable {
        eps_acc: cfg.eps_acc,
        max_size: *cfg.ladder.last().expect("validated"),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Reports

/// Held-out evaluation of one model, optionally with an efficiency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: usize,
    pub hallucination_rate: f64,
    pub preference_accuracy: f64,
    pub masked_dependency_margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<EfficiencyTable>,
}

impl MetricReport {
    /// One JSON object per line: the metrics, then one line per efficiency
    /// row and one per method median.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&serde_json::json!({
            "kind": "metrics",
            "examples": self.examples,
            "hallucination_rate": self.hallucination_rate,
            "preference_accuracy": self.preference_accuracy,
            "masked_dependency_margin": self.masked_dependency_margin,
        }))?;
        out.push('\n');
        if let Some(t) = &self.efficiency {
            for r in &t.rows {
                let mut v = serde_json::to_value(r)?;
                v["kind"] = "efficiency_row".into();
                out += &serde_json::to_string(&v)?;
                out.push('\n');
            }
            for m in Method::ALL {
                out += &serde_json::to_string(&serde_json::json!({
                    "kind": "efficiency_median",
                    "method": m,
                    "median": t.median(m),
                    "max_size": t.max_size,
                }))?;
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "examples                  {}\nhallucination rate        {:.4}\npreference accuracy       {:.4}\nmasked-dependency margin  {:.6}\n",
            self.examples, self.hallucination_rate, self.preference_accuracy, self.masked_dependency_margin
        );
        if let Some(t) = &self.efficiency {
            s.push('\n');
            s += &t.to_table();
        }
        s
    }
}

/// Computes the three metrics of `policy` on `dataset`.
pub fn evaluate(
    policy: &PolicyModel,
    reference: &ReferenceModel,
    vocab: &Vocab,
    dataset: &[PreferenceExample],
    loss: &LossConfig,
    seed: u64,
) -> Result<MetricReport> {
    let pairs = dataset
        .iter()
        .map(PreferenceExample::target_pair)
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        examples: dataset.len(),
        hallucination_rate: hallucination_rate(policy, vocab, dataset)?,
        preference_accuracy: preference_accuracy(policy, reference, &pairs, loss.beta)?,
        masked_dependency_margin: masked_dependency_margin(policy, dataset, loss.noise_sigma, seed)?,
        efficiency: None,
    })
}

/// One asserted bound of a verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("< {bound:e}"),
            passed: value < bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("suite {}\n", self.suite);
        for c in &self.checks {
            let _ = writeln!(
                s,
                "  [{}] {}: {:.3e} (bound {})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.bound
            );
        }
        if let Some(n) = &self.notes {
            for line in n.lines() {
                let _ = writeln!(s, "  {line}");
            }
        }
        s
    }
}

/// Gradient tolerance asserted by [`gradient_suite`].
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Margin-discrepancy tolerance asserted by [`equivalence_suite`].
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;

pub fn gradient_suite(cfg: &GradientSweepConfig) -> Result<SuiteReport> {
    let r = gradient_sweep(cfg)?;
    Ok(SuiteReport {
        suite: "gradients".into(),
        checks: r
            .worst
            .iter()
            .map(|&(k, e)| Check::below(format!("{} max relative error", k.name()), e, GRADIENT_TOLERANCE))
            .collect(),
        notes: Some(format!("{} draws, {} coordinates", cfg.draws, r.coordinates_checked)),
    })
}

pub fn equivalence_suite(cfg: &EquivalenceSweepConfig) -> Result<SuiteReport> {
    let r = equivalence_sweep(cfg)?;
    Ok(SuiteReport {
        suite: "equivalence".into(),
        checks: vec![Check::below("max |u_full - u_target|", r.max_discrepancy, EQUIVALENCE_TOLERANCE)],
        notes: Some(format!("{} pairs, largest |u| {:.4}", r.pairs, r.max_abs_margin)),
    })
}

pub fn efficiency_suite(cfg: &EfficiencyExperimentConfig) -> Result<(SuiteReport, EfficiencyTable)> {
    let t = sample_efficiency_experiment(cfg)?;
    let tl = t.median(Method::TlDpo);
    let pl = t.median(Method::FullDpo);
    let check = Check {
        name: "median m_tl <= median m_pl".into(),
        // "Never reached" is reported as +inf.
        value: tl.unwrap_or(f64::INFINITY),
        bound: format!("defined and <= median m_pl = {}", t.show(pl)),
        passed: t.tl_not_worse(),
    };
    let notes = format!(
        "{}strict: {}",
        t.to_table(),
        if t.tl_strictly_better() { "yes" } else { "no" }
    );
    Ok((
        SuiteReport {
            suite: "efficiency".into(),
            checks: vec![check],
            notes: Some(notes),
        },
        t,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;

    fn small_set(n: usize, seed: u64) -> Vec<PreferenceExample> {
        generate_synthetic(&SyntheticTaskConfig {
            dataset_size: n,
            ..sweep_task(seed)
        })
        .unwrap()
    }

    #[test]
    fn equivalence_is_zero_at_reference() {
        let m = PolicyModel::new_randomized(sweep_model_config(1)).unwrap();
        let r = snapshot_reference(&m);
        for ex in small_set(5, 2) {
            let d = check_target_equivalence(&m, &r, &ex.target_pair().unwrap(), 0.1).unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn equivalence_refuses_outside_regime() {
        let m = PolicyModel::new_randomized(sweep_model_config(1)).unwrap();
        let r = snapshot_reference(&m);
        let ex = &small_set(1, 3)[0];
        // Untruncated pair: the EOS after the target breaks the regime.
        let mut pair = ex.full_pair();
        pair.mask_w = Some(label_mask_full(&ex.y_r, &ex.annotation.spans_r));
        pair.mask_l = Some(label_mask_full(&ex.y_h, &ex.annotation.spans_h));
        assert!(matches!(check_target_equivalence(&m, &r, &pair, 0.1), Err(Error::Contract(_))));
        // No masks at all.
        assert!(matches!(check_target_equivalence(&m, &r, &ex.full_pair(), 0.1), Err(Error::Contract(_))));
    }

    fn label_mask_full(y: &[Token], spans: &[TargetSpan]) -> Vec<f64> {
        let mut w = label_mask(y.len(), spans).unwrap().weights;
        w.resize(y.len(), 0.0);
        w
    }

    #[test]
    fn prefix_regime_detects_differing_prefix() {
        let img = GridImage::filled(1, crate::model::Cell { obj: 0, attr: 0 });
        let mut pair = PreferencePair::new(img, vec![1], vec![3, 4], vec![5, 6]);
        pair.mask_w = Some(vec![0.0, 1.0]);
        pair.mask_l = Some(vec![0.0, 1.0]);
        assert!(shared_prefix_regime(&pair).unwrap_err().contains("outside"));
        pair.y_l[0] = 3;
        assert_eq!(shared_prefix_regime(&pair), Ok(1));
    }

    #[test]
    fn accuracy_is_half_at_reference() {
        let m = PolicyModel::new_randomized(sweep_model_config(4)).unwrap();
        let r = snapshot_reference(&m);
        let pairs: Vec<_> = small_set(10, 5).iter().map(|e| e.target_pair().unwrap()).collect();
        assert_eq!(preference_accuracy(&m, &r, &pairs, 0.1).unwrap(), 0.5);
        assert!(preference_accuracy(&m, &r, &[], 0.1).is_err());
    }

    #[test]
    fn uniform_model_reads_lowest_attribute() {
        let task = SyntheticTaskConfig::default();
        let model = PolicyModel::new(ModelConfig::default()).unwrap();
        let data = generate_synthetic(&SyntheticTaskConfig {
            dataset_size: 50,
            ..task.clone()
        })
        .unwrap();
        let vocab = task.vocab();
        for ex in &data {
            assert_eq!(decoded_attribute(&model, &vocab, ex).unwrap(), 0);
        }
        let expected = data.iter().filter(|e| e.gt_attr != Some(0)).count() as f64 / 50.0;
        assert_eq!(hallucination_rate(&model, &vocab, &data).unwrap(), expected);
    }

    #[test]
    fn blind_model_has_zero_margin() {
        let mut m = PolicyModel::new_randomized(sweep_model_config(6)).unwrap();
        // img_proj and img_bias are the first two tensors.
        for t in &mut m.params_mut()[..2] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let margin = masked_dependency_margin(&m, &small_set(20, 7), 1.0, 3).unwrap();
        assert!(margin.abs() < 1e-9, "{margin}");
    }

    #[test]
    fn efficiency_config_validation() {
        let mut cfg = EfficiencyExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.ladder = vec![64, 32];
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "ladder"));
        cfg = EfficiencyExperimentConfig {
            seeds: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn medians_rank_unreached_last() {
        let row = |method, seed, m| EfficiencyRow {
            method,
            seed,
            samples_to_threshold: m,
            trace: vec![],
        };
        let t = EfficiencyTable {
            eps_acc: 0.9,
            max_size: 128,
            rows: vec![
                row(Method::TlDpo, 0, Some(32)),
                row(Method::TlDpo, 1, None),
                row(Method::TlDpo, 2, Some(64)),
                row(Method::FullDpo, 0, None),
                row(Method::FullDpo, 1, None),
                row(Method::FullDpo, 2, Some(32)),
            ],
        };
        assert_eq!(t.median(Method::TlDpo), Some(64.0));
        assert_eq!(t.median(Method::FullDpo), None);
        assert!(t.tl_not_worse());
        assert!(t.tl_strictly_better());
        assert!(t.to_table().contains("> 128"));
    }

    #[test]
    fn vocab_defaults_fit_model_defaults() {
        let v = SyntheticTaskConfig::default().vocab();
        assert!(v.size() <= ModelConfig::default().vocab_size);
        let _ = Vocab::ANSWER_ATTR_POS;
    }
}
