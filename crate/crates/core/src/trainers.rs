//! Training methods: the supervised baselines, single-pair adaptation
//! ("normal"), sequential adaptation with pseudo-labels ("step-by-step"), and
//! the end-to-end two-stage objective over source, intermediate and target.
//!
//! Every adaptation method reduces to the same inner loop: a labeled batch
//! drives the task loss, and a list of [`AlignTerm`]s names which pairs of
//! domain batches feed a domain loss. The backend decides what that domain
//! loss is.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{self, CyclingBatcher, DomainTriplet, LabeledSet, UdaView};
use crate::error::{Error, Result};
use crate::losses::{self, JdotWeights};
use crate::nn::{init_network, Activation, Binding, LayerSpec, Network, OptimizerKind, OptimizerState};
use crate::ot;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TrainOnTarget,
    WithoutAdapt,
    Normal,
    StepByStep,
    TwoStage,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::TrainOnTarget,
        Method::TwoStage,
        Method::StepByStep,
        Method::Normal,
        Method::WithoutAdapt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TrainOnTarget => "train_on_target",
            Method::WithoutAdapt => "without_adapt",
            Method::Normal => "normal",
            Method::StepByStep => "step_by_step",
            Method::TwoStage => "two_stage",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Dann,
    Coral,
    Jdot,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Dann, Backend::Coral, Backend::Jdot];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Dann => "dann",
            Backend::Coral => "coral",
            Backend::Jdot => "jdot",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Backend::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown backend {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    #[default]
    Constant,
    /// `lambda * (2 / (1 + exp(-10 p)) - 1)` with `p` the fraction of steps done.
    Anneal,
}

/// Which representation the CoRAL loss aligns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoralOn {
    #[default]
    Logits,
    Features,
}

/// Labels used in the label-loss part of a JDOT term whose first side is unlabeled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JdotLabels {
    /// Each sample takes the label of the source sample an earlier plan moved onto it.
    #[default]
    Transported,
    /// The source batch labels, matched by row index.
    Literal,
}

/// Layer widths of the feature extractor, task classifier and domain discriminators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Relu layers of the feature extractor; the last width is the feature dimension.
    pub feature_dims: Vec<usize>,
    pub classes: usize,
    /// Relu hidden layers of each discriminator, followed by a sigmoid unit.
    pub discriminator_dims: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 2,
            feature_dims: vec![16],
            classes: 2,
            discriminator_dims: vec![8],
        }
    }
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        self.feature_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn feature_spec(&self) -> Vec<LayerSpec> {
        let mut prev = self.input_dim;
        self.feature_dims
            .iter()
            .map(|&d| {
                let l = LayerSpec::new(prev, d, Activation::Relu);
                prev = d;
                l
            })
            .collect()
    }

    pub fn classifier_spec(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::new(self.feature_dim(), self.classes, Activation::Softmax)]
    }

    pub fn discriminator_spec(&self) -> Vec<LayerSpec> {
        let mut prev = self.feature_dim();
        let mut out: Vec<LayerSpec> = self
            .discriminator_dims
            .iter()
            .map(|&d| {
                let l = LayerSpec::new(prev, d, Activation::Relu);
                prev = d;
                l
            })
            .collect();
        out.push(LayerSpec::new(prev, 1, Activation::Sigmoid));
        out
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 || self.feature_dims.is_empty() {
            return Err(Error::invalid("architecture needs input_dim >= 1, classes >= 2 and a feature layer"));
        }
        if self.feature_dims.iter().chain(&self.discriminator_dims).any(|&d| d == 0) {
            return Err(Error::invalid("architecture layer widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub backend: Backend,
    pub learning_rate: f64,
    pub lambda: f64,
    pub lambda_schedule: LambdaSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pseudo_label_threshold: f64,
    pub optimizer: OptimizerKind,
    pub architecture: Architecture,
    pub jdot: JdotWeights,
    pub coral_on: CoralOn,
    pub jdot_labels: JdotLabels,
    /// When false the two-stage objective keeps only its first domain term.
    pub second_domain_term: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::TwoStage,
            backend: Backend::Dann,
            learning_rate: 0.05,
            lambda: 1.0,
            lambda_schedule: LambdaSchedule::Constant,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            pseudo_label_threshold: 0.8,
            optimizer: OptimizerKind::Sgd,
            architecture: Architecture::default(),
            jdot: JdotWeights::default(),
            coral_on: CoralOn::Logits,
            jdot_labels: JdotLabels::Transported,
            second_domain_term: true,
        }
    }
}

impl TrainConfig {
    /// Settings tuned for the rotated two-moons benchmark with standardized inputs.
    pub fn two_moons_preset(backend: Backend) -> TrainConfig {
        let base = TrainConfig {
            backend,
            learning_rate: 0.2,
            ..TrainConfig::default()
        };
        match backend {
            Backend::Dann => base,
            Backend::Coral => TrainConfig {
                learning_rate: 0.05,
                ..base
            },
            Backend::Jdot => TrainConfig {
                lambda: 0.3,
                batch_size: 64,
                jdot: JdotWeights { alpha: 0.1, beta: 0.3 },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.5..1.0).contains(&self.pseudo_label_threshold) {
            return Err(Error::invalid(format!(
                "pseudo_label_threshold must be in [0.5, 1), got {}",
                self.pseudo_label_threshold
            )));
        }
        if self.jdot.alpha < 0.0 || self.jdot.beta < 0.0 {
            return Err(Error::invalid("jdot weights must be >= 0"));
        }
        self.architecture.validate()
    }

    pub fn with_method(&self, method: Method, backend: Backend) -> TrainConfig {
        TrainConfig {
            method,
            backend,
            ..self.clone()
        }
    }
}

/// Failure of a single training run.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged (non-finite value) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty pseudo-label set: no intermediate sample reached the confidence threshold")]
    EmptyPseudoLabels,
    #[error(transparent)]
    Invalid(#[from] Error),
}

impl TrainError {
    fn at_epoch(err: Error, epoch: usize) -> TrainError {
        match err {
            Error::NonFinite { .. } => TrainError::Diverged { epoch },
            other => TrainError::Invalid(other),
        }
    }
}

/// Feature extractor followed by the task classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub feature: Network,
    pub classifier: Network,
}

impl Model {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Model> {
        arch.validate()?;
        Ok(Model {
            feature: init_network(&arch.feature_spec(), data::sub_seed(seed, &[10]))?,
            classifier: init_network(&arch.classifier_spec(), data::sub_seed(seed, &[11]))?,
        })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.feature.apply(x)
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.apply(&self.feature.apply(x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.argmax_rows())
    }

    pub fn is_finite(&self) -> bool {
        self.feature.is_finite() && self.classifier.is_finite()
    }
}

/// Fraction of argmax predictions equal to the labels.
pub fn evaluate_accuracy(model: &Model, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("evaluate_accuracy"));
    }
    let pred = model.predict(test.x())?;
    let hits = pred.iter().zip(test.y()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Mean cross entropy of the model's predictions against the labels.
pub fn evaluate_cross_entropy(model: &Model, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("evaluate_cross_entropy"));
    }
    losses::value::cross_entropy(&model.predict_proba(test.x())?, test.y())
}

/// Which batch a side of an alignment term reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainSlot {
    Source,
    Unlabeled(usize),
}

/// A pair of domains whose representations the domain loss pulls together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignTerm {
    pub first: DomainSlot,
    pub second: DomainSlot,
}

impl AlignTerm {
    pub const fn new(first: DomainSlot, second: DomainSlot) -> Self {
        AlignTerm { first, second }
    }
}

/// Alignment terms of the two-stage objective for `backend`, with `[intermediate, target]` as unlabeled slots.
pub fn two_stage_terms(backend: Backend, second_term: bool) -> Vec<AlignTerm> {
    use DomainSlot::*;
    let first = AlignTerm::new(Source, Unlabeled(0));
    if !second_term {
        return vec![first];
    }
    let second = match backend {
        // CoRAL aligns source with target directly instead of intermediate with target.
        Backend::Coral => AlignTerm::new(Source, Unlabeled(1)),
        Backend::Dann | Backend::Jdot => AlignTerm::new(Unlabeled(0), Unlabeled(1)),
    };
    vec![first, second]
}

/// One step's batches: the labeled batch and one batch per unlabeled domain, all with equal row counts.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub unlabeled: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub task: f64,
    pub domain: Vec<f64>,
    pub lambda: f64,
    /// `task + lambda * sum(domain)`.
    pub total: f64,
}

/// Networks and optimizer state carried across steps.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub model: Model,
    pub discriminators: Vec<Network>,
    opt_feature: OptimizerState,
    opt_classifier: OptimizerState,
    opt_discriminators: Vec<OptimizerState>,
}

impl AdaptState {
    /// Wraps `model` with fresh optimizers, plus one discriminator per term when the backend is DANN.
    pub fn new(model: Model, cfg: &TrainConfig, n_terms: usize, seed: u64) -> Result<AdaptState> {
        let discriminators = if cfg.backend == Backend::Dann {
            (0..n_terms)
                .map(|k| init_network(&cfg.architecture.discriminator_spec(), data::sub_seed(seed, &[12 + k as u64])))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let opt = || OptimizerState::new(cfg.optimizer, cfg.learning_rate);
        Ok(AdaptState {
            opt_feature: opt()?,
            opt_classifier: opt()?,
            opt_discriminators: discriminators.iter().map(|_| opt()).collect::<Result<Vec<_>>>()?,
            model,
            discriminators,
        })
    }
}

struct DomainOutputs {
    features: Var,
    logits: Option<Var>,
    probs: Option<Var>,
}

fn domain_outputs(
    tape: &mut Tape,
    model: &Model,
    fb: &Binding,
    cb: &Binding,
    x: &Tensor,
    need_classifier: bool,
) -> Result<DomainOutputs> {
    let xv = tape.leaf(x.clone());
    let features = model.feature.forward(fb, xv, tape)?;
    if need_classifier {
        let (logits, probs) = model.classifier.forward_with_logits(cb, features, tape)?;
        Ok(DomainOutputs {
            features,
            logits: Some(logits),
            probs: Some(probs),
        })
    } else {
        Ok(DomainOutputs {
            features,
            logits: None,
            probs: None,
        })
    }
}

/// One optimization step over `batch`.
///
/// DANN routes each term through a gradient-reversal node scaled by `lambda`
/// into its own discriminator, so a single backward pass gives the
/// discriminators `dL_dom/dtheta_d` and the feature extractor
/// `dL_task/dtheta_f - lambda dL_dom/dtheta_f`. CoRAL and JDOT minimise
/// `L_task + lambda * sum(L_dom)` over both the extractor and the classifier.
pub fn adaptation_step(
    state: &mut AdaptState,
    batch: &StepBatch,
    terms: &[AlignTerm],
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let model = &state.model;
    let fb = model.feature.bind(&mut tape);
    let cb = model.classifier.bind(&mut tape);

    let xs = tape.leaf(batch.source_x.clone());
    let fs = model.feature.forward(&fb, xs, &mut tape)?;
    let (ls, ps) = model.classifier.forward_with_logits(&cb, fs, &mut tape)?;
    let task = losses::cross_entropy(&mut tape, ps, &batch.source_y)?;

    let need_classifier = cfg.backend != Backend::Dann;
    let mut outputs: Vec<Option<DomainOutputs>> = (0..batch.unlabeled.len()).map(|_| None).collect();
    let source_out = DomainOutputs {
        features: fs,
        logits: Some(ls),
        probs: Some(ps),
    };

    let mut disc_bindings = Vec::new();
    // Labels each unlabeled batch inherits through an earlier JDOT plan.
    let mut transported: Vec<Option<Vec<usize>>> = vec![None; batch.unlabeled.len()];
    let mut domain_vars = Vec::with_capacity(terms.len());
    for (k, term) in terms.iter().enumerate() {
        for slot in [term.first, term.second] {
            if let DomainSlot::Unlabeled(i) = slot {
                let x = batch
                    .unlabeled
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("alignment term refers to missing domain {i}")))?;
                if outputs[i].is_none() {
                    outputs[i] = Some(domain_outputs(&mut tape, model, &fb, &cb, x, need_classifier)?);
                }
            }
        }
        let get = |slot: DomainSlot| -> &DomainOutputs {
            match slot {
                DomainSlot::Source => &source_out,
                DomainSlot::Unlabeled(i) => outputs[i].as_ref().expect("populated above"),
            }
        };
        let (a, b) = (get(term.first), get(term.second));
        let (fa, fb_) = (a.features, b.features);
        let l = match cfg.backend {
            Backend::Dann => {
                let disc = &state.discriminators[k];
                let db = disc.bind(&mut tape);
                let ra = tape.gradient_reversal(fa, lambda)?;
                let rb = tape.gradient_reversal(fb_, lambda)?;
                let pa = disc.forward(&db, ra, &mut tape)?;
                let pb = disc.forward(&db, rb, &mut tape)?;
                let la = losses::binary_cross_entropy_const(&mut tape, pa, 0.0)?;
                let lb = losses::binary_cross_entropy_const(&mut tape, pb, 1.0)?;
                disc_bindings.push(db);
                tape.add(la, lb)?
            }
            Backend::Coral => {
                let (xa, xb) = match cfg.coral_on {
                    CoralOn::Logits => (a.logits.expect("classifier outputs"), b.logits.expect("classifier outputs")),
                    CoralOn::Features => (fa, fb_),
                };
                losses::coral_loss(&mut tape, xa, xb)?
            }
            Backend::Jdot => {
                let probs_b = b.probs.expect("classifier outputs");
                let labels_a = match term.first {
                    DomainSlot::Unlabeled(i) if cfg.jdot_labels == JdotLabels::Transported => transported[i]
                        .clone()
                        .ok_or_else(|| Error::invalid(format!("no transported labels for domain {i}")))?,
                    _ => batch.source_y.clone(),
                };
                let cost = losses::jdot_cost_matrix(tape.value(fa), tape.value(fb_), &labels_a, tape.value(probs_b), cfg.jdot)?;
                let plan = ot::solve_exact_uniform(&cost)?;
                if let DomainSlot::Unlabeled(j) = term.second {
                    let mut carried = vec![0; labels_a.len()];
                    for (row, &col) in plan.assignment().iter().enumerate() {
                        carried[col] = labels_a[row];
                    }
                    transported[j] = Some(carried);
                }
                losses::jdot_plan_loss(&mut tape, fa, fb_, probs_b, &labels_a, plan.tensor(), cfg.jdot)?
            }
        };
        domain_vars.push(l);
    }

    let mut objective = task;
    for &l in &domain_vars {
        objective = match cfg.backend {
            Backend::Dann => tape.add(objective, l)?,
            _ => {
                let scaled = tape.mul_scalar(l, lambda)?;
                tape.add(objective, scaled)?
            }
        };
    }

    let task_value = tape.value(task).item();
    let domain: Vec<f64> = domain_vars.iter().map(|&v| tape.value(v).item()).collect();
    let total = task_value + lambda * domain.iter().sum::<f64>();
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "adaptation_step" });
    }

    let grads = tape.backward(objective)?;
    let g_feature = fb.gradients(&grads)?;
    let g_classifier = cb.gradients(&grads)?;
    let g_disc = disc_bindings.iter().map(|b| b.gradients(&grads)).collect::<Result<Vec<_>>>()?;

    state.opt_feature.step(&mut state.model.feature, &g_feature)?;
    state.opt_classifier.step(&mut state.model.classifier, &g_classifier)?;
    for ((net, opt), g) in state
        .discriminators
        .iter_mut()
        .zip(state.opt_discriminators.iter_mut())
        .zip(&g_disc)
    {
        opt.step(net, g)?;
    }

    Ok(StepLosses {
        task: task_value,
        domain,
        lambda,
        total,
    })
}

/// Per-epoch means of the step losses, plus the observer's evaluation if any.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub l_task: f64,
    pub l_domain: Vec<f64>,
    pub l_total: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<EpochTrace>,
    /// Every step's losses, in order.
    pub steps: Vec<StepLosses>,
}

/// Called after every epoch with the current model; the returned value lands in `EpochTrace::eval_acc`.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &Model) -> Option<f64>;

/// Stops when the validation cross entropy has not improved for `patience` epochs, and restores the best model.
#[derive(Clone, Copy, Debug)]
pub struct EarlyStopping<'a> {
    pub validation: &'a LabeledSet,
    pub patience: usize,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub observer: Option<Observer<'a>>,
    pub early_stopping: Option<EarlyStopping<'a>>,
}

fn lambda_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    match cfg.lambda_schedule {
        LambdaSchedule::Constant => cfg.lambda,
        LambdaSchedule::Anneal => {
            let p = step as f64 / total_steps.max(1) as f64;
            cfg.lambda * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
        }
    }
}

/// Generic training loop over a labeled set and zero or more unlabeled domains.
///
/// Each step draws one batch from every domain; an epoch is as many steps as
/// the largest domain yields full batches, and smaller domains cycle.
pub fn fit(
    cfg: &TrainConfig,
    model: Model,
    labeled: &LabeledSet,
    unlabeled: &[&Tensor],
    terms: &[AlignTerm],
    seed: u64,
    mut options: FitOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let min_n = unlabeled.iter().map(|t| t.rows()).chain([labeled.len()]).min().unwrap_or(0);
    let max_n = unlabeled.iter().map(|t| t.rows()).chain([labeled.len()]).max().unwrap_or(0);
    if min_n == 0 {
        return Err(Error::Empty("training set").into());
    }
    let batch_size = cfg.batch_size.min(min_n);
    let steps_per_epoch = max_n / batch_size;
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut state = AdaptState::new(model, cfg, terms.len(), seed)?;
    let mut source_batches = CyclingBatcher::new(labeled.len(), batch_size, data::sub_seed(seed, &[20]))?;
    let mut other_batches = unlabeled
        .iter()
        .enumerate()
        .map(|(i, t)| CyclingBatcher::new(t.rows(), batch_size, data::sub_seed(seed, &[21 + i as u64])))
        .collect::<Result<Vec<_>>>()?;

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut sums = (0.0, vec![0.0; terms.len()], 0.0);
        for s in 0..steps_per_epoch {
            let idx = source_batches.next_batch();
            let batch = StepBatch {
                source_x: labeled.x().select_rows(idx),
                source_y: idx.iter().map(|&i| labeled.y()[i]).collect(),
                unlabeled: unlabeled
                    .iter()
                    .zip(other_batches.iter_mut())
                    .map(|(t, b)| t.select_rows(b.next_batch()))
                    .collect(),
            };
            let lambda = lambda_at(cfg, epoch * steps_per_epoch + s, total_steps);
            let losses = adaptation_step(&mut state, &batch, terms, cfg, lambda)
                .map_err(|e| TrainError::at_epoch(e, epoch))?;
            sums.0 += losses.task;
            for (acc, d) in sums.1.iter_mut().zip(&losses.domain) {
                *acc += d;
            }
            sums.2 += losses.total;
            steps.push(losses);
        }
        let n = steps_per_epoch as f64;
        let eval_acc = options.observer.as_mut().and_then(|obs| obs(epoch, &state.model));
        trace.push(EpochTrace {
            epoch,
            l_task: sums.0 / n,
            l_domain: sums.1.iter().map(|v| v / n).collect(),
            l_total: sums.2 / n,
            eval_acc,
        });

        if let Some(es) = options.early_stopping {
            let val = evaluate_cross_entropy(&state.model, es.validation).map_err(|e| TrainError::at_epoch(e, epoch))?;
            match &best {
                Some((b, _)) if val >= *b => since_best += 1,
                _ => {
                    best = Some((val, state.model.clone()));
                    since_best = 0;
                }
            }
            if since_best >= es.patience {
                break;
            }
        }
    }

    let model = match best {
        Some((_, m)) => m,
        None => state.model,
    };
    Ok(TrainOutcome { model, trace, steps })
}

fn seed_of(cfg: &TrainConfig) -> u64 {
    cfg.seed
}

/// Supervised training on the source only.
pub fn train_without_adapt(cfg: &TrainConfig, view: UdaView<'_>) -> Result<TrainOutcome, TrainError> {
    train_supervised(cfg, view.source, FitOptions::default())
}

/// Supervised training on an arbitrary labeled set.
pub fn train_supervised(cfg: &TrainConfig, labeled: &LabeledSet, options: FitOptions<'_>) -> Result<TrainOutcome, TrainError> {
    let model = Model::init(&cfg.architecture, seed_of(cfg))?;
    fit(cfg, model, labeled, &[], &[], seed_of(cfg), options)
}

/// Upper-bound baseline: supervised training on target-train with its revealed labels.
pub fn train_on_target(cfg: &TrainConfig, target_labeled: &LabeledSet) -> Result<TrainOutcome, TrainError> {
    train_supervised(cfg, target_labeled, FitOptions::default())
}

/// Single-pair adaptation between the labeled source and the unlabeled target.
pub fn train_normal(
    cfg: &TrainConfig,
    source: &LabeledSet,
    target_train: &Tensor,
    options: FitOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    let model = Model::init(&cfg.architecture, seed_of(cfg))?;
    let terms = [AlignTerm::new(DomainSlot::Source, DomainSlot::Unlabeled(0))];
    fit(cfg, model, source, &[target_train], &terms, seed_of(cfg), options)
}

/// Labels `x` by argmax, keeping rows whose top probability is at least `threshold`.
pub fn pseudo_label(model: &Model, x: &Tensor, threshold: f64) -> Result<LabeledSet> {
    let probs = model.predict_proba(x)?;
    let labels = probs.argmax_rows();
    let keep: Vec<usize> = (0..x.rows())
        .filter(|&r| probs.get(r, labels[r]) >= threshold)
        .collect();
    LabeledSet::new(x.select_rows(&keep), keep.iter().map(|&r| labels[r]).collect())
}

/// Adapts source to intermediate, pseudo-labels the intermediate, then adapts that to the target.
///
/// The second stage starts from the first stage's extractor and classifier
/// with a fresh discriminator and fresh optimizer state.
pub fn train_step_by_step(cfg: &TrainConfig, view: UdaView<'_>, options: FitOptions<'_>) -> Result<TrainOutcome, TrainError> {
    let seed = seed_of(cfg);
    let terms = [AlignTerm::new(DomainSlot::Source, DomainSlot::Unlabeled(0))];
    let model = Model::init(&cfg.architecture, seed)?;
    let stage1 = fit(cfg, model, view.source, &[view.intermediate.x()], &terms, seed, FitOptions::default())?;

    let pseudo = pseudo_label(&stage1.model, view.intermediate.x(), cfg.pseudo_label_threshold)?;
    if pseudo.is_empty() {
        return Err(TrainError::EmptyPseudoLabels);
    }
    let stage2 = fit(
        cfg,
        stage1.model,
        &pseudo,
        &[view.target_train.x()],
        &terms,
        data::sub_seed(seed, &[30]),
        options,
    )?;
    let mut trace = stage1.trace;
    let offset = trace.len();
    trace.extend(stage2.trace.into_iter().map(|mut t| {
        t.epoch += offset;
        t
    }));
    let mut steps = stage1.steps;
    steps.extend(stage2.steps);
    Ok(TrainOutcome {
        model: stage2.model,
        trace,
        steps,
    })
}

/// End-to-end training with the source-intermediate and intermediate-target domain terms.
pub fn train_two_stage(cfg: &TrainConfig, view: UdaView<'_>, options: FitOptions<'_>) -> Result<TrainOutcome, TrainError> {
    let model = Model::init(&cfg.architecture, seed_of(cfg))?;
    let terms = two_stage_terms(cfg.backend, cfg.second_domain_term);
    fit(
        cfg,
        model,
        view.source,
        &[view.intermediate.x(), view.target_train.x()],
        &terms,
        seed_of(cfg),
        options,
    )
}

/// Runs any method that does not need target labels. `TrainOnTarget` is rejected here.
pub fn train_uda(cfg: &TrainConfig, view: UdaView<'_>, options: FitOptions<'_>) -> Result<TrainOutcome, TrainError> {
    match cfg.method {
        Method::WithoutAdapt => train_supervised(cfg, view.source, options),
        Method::Normal => train_normal(cfg, view.source, view.target_train.x(), options),
        Method::StepByStep => train_step_by_step(cfg, view, options),
        Method::TwoStage => train_two_stage(cfg, view, options),
        Method::TrainOnTarget => Err(Error::invalid("train_on_target needs revealed target labels").into()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialFailure {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrialReport {
    pub seeds: Vec<u64>,
    /// Accuracy per seed; `None` where the trial failed.
    pub accuracies: Vec<Option<f64>>,
    pub failures: Vec<TrialFailure>,
    /// Mean over successful trials (NaN when none succeeded).
    pub mean: f64,
    /// Population standard deviation over successful trials.
    pub std: f64,
    pub traces: Vec<Vec<EpochTrace>>,
}

impl TrialReport {
    pub fn from_results(seeds: Vec<u64>, results: Vec<Result<(f64, Vec<EpochTrace>), String>>) -> TrialReport {
        let mut accuracies = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        let mut traces = Vec::with_capacity(results.len());
        for (&seed, r) in seeds.iter().zip(results) {
            match r {
                Ok((acc, trace)) => {
                    accuracies.push(Some(acc));
                    traces.push(trace);
                }
                Err(reason) => {
                    accuracies.push(None);
                    traces.push(Vec::new());
                    failures.push(TrialFailure { seed, reason });
                }
            }
        }
        let ok: Vec<f64> = accuracies.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&ok);
        TrialReport {
            seeds,
            accuracies,
            failures,
            mean,
            std,
            traces,
        }
    }

    pub fn n_failed(&self) -> usize {
        self.failures.len()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains and evaluates one trial on `triplet`; only `TrainOnTarget` unlocks target labels for training.
pub fn run_single(cfg: &TrainConfig, triplet: &DomainTriplet, record_eval: bool) -> Result<(f64, Vec<EpochTrace>), TrainError> {
    let mut observer = |_: usize, m: &Model| evaluate_accuracy(m, triplet.target_test()).ok();
    let options = FitOptions {
        observer: if record_eval { Some(&mut observer) } else { None },
        early_stopping: None,
    };
    let outcome = match cfg.method {
        Method::TrainOnTarget => {
            let labeled = triplet.oracle_target_train();
            train_supervised(cfg, &labeled, options)?
        }
        _ => train_uda(cfg, triplet.uda_view(), options)?,
    };
    let acc = evaluate_accuracy(&outcome.model, triplet.target_test())?;
    Ok((acc, outcome.trace))
}

/// Runs one trial per seed (each builds its own triplet) on up to `workers` threads.
pub fn run_trials_with_seeds<F>(
    cfg: &TrainConfig,
    factory: &F,
    seeds: &[u64],
    workers: usize,
    record_eval: bool,
) -> Result<TrialReport>
where
    F: Fn(u64) -> Result<DomainTriplet> + Sync,
{
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    let one = |&seed: &u64| -> Result<(f64, Vec<EpochTrace>), String> {
        let triplet = factory(seed).map_err(|e| e.to_string())?;
        let trial_cfg = TrainConfig { seed, ..cfg.clone() };
        run_single(&trial_cfg, &triplet, record_eval).map_err(|e| e.to_string())
    };
    let results: Vec<_> = if workers <= 1 {
        seeds.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?;
        pool.install(|| seeds.par_iter().map(one).collect())
    };
    Ok(TrialReport::from_results(seeds.to_vec(), results))
}

/// Seeds for `n_trials` trials derived from `base`.
pub fn trial_seeds(base: u64, n_trials: usize) -> Vec<u64> {
    (0..n_trials as u64).map(|i| data::sub_seed(base, &[i])).collect()
}

pub fn run_trials<F>(cfg: &TrainConfig, factory: &F, n_trials: usize, workers: usize) -> Result<TrialReport>
where
    F: Fn(u64) -> Result<DomainTriplet> + Sync,
{
    run_trials_with_seeds(cfg, factory, &trial_seeds(cfg.seed, n_trials), workers, true)
}

/// Empirical H-divergence `2 (1 - (err_a + err_b))` from a shallow domain classifier.
///
/// Each side is split 50/50; the classifier (one relu hidden layer, sigmoid
/// output, Adam) trains on the first halves and the errors are measured on
/// the held-out halves. Inputs are standardized with training-half statistics.
pub fn proxy_a_distance(features_a: &Tensor, features_b: &Tensor, seed: u64) -> Result<f64> {
    const EPOCHS: usize = 60;
    const HIDDEN: usize = 16;
    if features_a.rows() < 4 || features_b.rows() < 4 {
        return Err(Error::invalid("proxy_a_distance needs at least 4 samples per side"));
    }
    if features_a.cols() != features_b.cols() || features_a.cols() == 0 {
        return Err(Error::ShapeMismatch {
            op: "proxy_a_distance",
            left: features_a.shape(),
            right: features_b.shape(),
        });
    }
    let mut rng = data::rng_from(seed);
    let mut split = |t: &Tensor| {
        let mut idx: Vec<usize> = (0..t.rows()).collect();
        idx.shuffle(&mut rng);
        let half = t.rows() / 2;
        (t.select_rows(&idx[..half]), t.select_rows(&idx[half..]))
    };
    let (train_a, test_a) = split(features_a);
    let (train_b, test_b) = split(features_b);
    let st = data::Standardizer::fit(&[&train_a, &train_b])?;
    let train_x = Tensor::concat_rows(&[&st.apply(&train_a)?, &st.apply(&train_b)?])?;
    let train_d: Vec<f64> = std::iter::repeat(0.0)
        .take(train_a.rows())
        .chain(std::iter::repeat(1.0).take(train_b.rows()))
        .collect();

    let k = features_a.cols();
    let spec = [
        LayerSpec::new(k, HIDDEN, Activation::Relu),
        LayerSpec::new(HIDDEN, 1, Activation::Sigmoid),
    ];
    let mut net = init_network(&spec, data::sub_seed(seed, &[1]))?;
    let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.01)?;
    let batch = 32.min(train_x.rows());
    for _ in 0..EPOCHS {
        let mut idx: Vec<usize> = (0..train_x.rows()).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks_exact(batch) {
            let mut tape = Tape::new();
            let x = tape.leaf(train_x.select_rows(chunk));
            let binding = net.bind(&mut tape);
            let p = net.forward(&binding, x, &mut tape)?;
            let d: Vec<f64> = chunk.iter().map(|&i| train_d[i]).collect();
            let loss = losses::binary_cross_entropy(&mut tape, p, &d)?;
            let grads = tape.backward(loss)?;
            opt.step(&mut net, &binding.gradients(&grads)?)?;
        }
    }
    let err = |x: &Tensor, label_is_b: bool| -> Result<f64> {
        let p = net.apply(&st.apply(x)?)?;
        let wrong = p.data().iter().filter(|&&v| (v >= 0.5) != label_is_b).count();
        Ok(wrong as f64 / x.rows() as f64)
    };
    let total_err = err(&test_a, false)? + err(&test_b, true)?;
    Ok((2.0 * (1.0 - total_err)).clamp(0.0, 2.0))
}
