//! Reverse validation: scoring a training configuration without target labels.
//!
//! A forward model is trained source → target, its argmax predictions on the
//! target become labels for a reverse model trained target → source with the
//! same learner, and the reverse model's cross entropy on held-out source
//! labels is the indicator. Lower is better.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::data::{self, DomainTriplet, LabeledSet, UdaView, UnlabeledSet};
use crate::error::{Error, Result};
use crate::trainers::{
    self, evaluate_cross_entropy, EarlyStopping, FitOptions, Method, Model, TrainConfig, TrainError, TrainOutcome,
};

/// Fraction of each source class held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;
pub const PATIENCE: usize = 10;

/// Stratified split of `set` into (train, validation), deterministic given `seed`.
pub fn stratified_split(set: &LabeledSet, val_fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("validation fraction must be in [0, 1), got {val_fraction}")));
    }
    let classes = set.y().iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = data::rng_from(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.y()[i] == c).collect();
        idx.shuffle(&mut rng);
        let mut n_val = (idx.len() as f64 * val_fraction).round() as usize;
        if n_val == 0 && idx.len() >= 2 && val_fraction > 0.0 {
            n_val = 1;
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("source set too small to split for reverse validation"));
    }
    Ok((set.subset(&train), set.subset(&val)))
}

fn train_with(
    cfg: &TrainConfig,
    source: &LabeledSet,
    intermediate: &UnlabeledSet,
    target: &UnlabeledSet,
    options: FitOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    let view = UdaView {
        source,
        intermediate,
        target_train: target,
    };
    match cfg.method {
        Method::TwoStage | Method::Normal => trainers::train_uda(cfg, view, options),
        other => Err(Error::invalid(format!("reverse validation supports two_stage and normal, not {other}")).into()),
    }
}

#[derive(Clone, Debug)]
pub struct RvOutcome {
    /// `+inf` when either model diverged.
    pub rv_loss: f64,
    /// The forward model, absent when it diverged.
    pub forward: Option<Model>,
}

/// Runs the reverse-validation procedure for one configuration.
pub fn rv_indicator(cfg: &TrainConfig, view: UdaView<'_>) -> Result<RvOutcome> {
    cfg.validate()?;
    let (s_train, s_val) = stratified_split(view.source, VALIDATION_FRACTION, data::sub_seed(cfg.seed, &[40]))?;
    let forward_opts = FitOptions {
        observer: None,
        early_stopping: Some(EarlyStopping {
            validation: &s_val,
            patience: PATIENCE,
        }),
    };
    let forward = match train_with(cfg, &s_train, view.intermediate, view.target_train, forward_opts) {
        Ok(out) => out.model,
        Err(TrainError::Diverged { .. }) => return Ok(RvOutcome { rv_loss: f64::INFINITY, forward: None }),
        Err(TrainError::EmptyPseudoLabels) => unreachable!("only step_by_step pseudo-labels"),
        Err(TrainError::Invalid(e)) => return Err(e),
    };
    if !forward.is_finite() {
        return Ok(RvOutcome { rv_loss: f64::INFINITY, forward: None });
    }

    let target_x = view.target_train.x();
    let pseudo = LabeledSet::new(target_x.clone(), forward.predict(target_x)?)?;
    let source_as_target = s_train.unlabeled();
    let reverse_cfg = TrainConfig {
        seed: data::sub_seed(cfg.seed, &[41]),
        ..cfg.clone()
    };
    let rv_loss = match train_with(&reverse_cfg, &pseudo, view.intermediate, &source_as_target, FitOptions::default()) {
        Ok(out) => evaluate_cross_entropy(&out.model, &s_val).unwrap_or(f64::INFINITY),
        Err(TrainError::Diverged { .. }) => f64::INFINITY,
        Err(TrainError::EmptyPseudoLabels) => unreachable!("only step_by_step pseudo-labels"),
        Err(TrainError::Invalid(e)) => return Err(e),
    };
    Ok(RvOutcome {
        rv_loss,
        forward: Some(forward),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub learning_rate: f64,
    pub rv_loss: f64,
    pub ground_truth_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvReport {
    pub candidates: Vec<Candidate>,
    /// Index into `candidates` of the selected rate.
    pub chosen: usize,
}

impl RvReport {
    pub fn chosen_rate(&self) -> f64 {
        self.candidates[self.chosen].learning_rate
    }

    /// Pearson correlation of rv loss against ground-truth loss over candidates where both are finite.
    pub fn correlation(&self) -> Result<Correlation> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .candidates
            .iter()
            .filter_map(|c| c.ground_truth_loss.map(|g| (c.rv_loss, g)))
            .filter(|(r, g)| r.is_finite() && g.is_finite())
            .unzip();
        if self.candidates.iter().all(|c| c.ground_truth_loss.is_none()) {
            return Err(Error::invalid("ground truth was not unlocked for this report"));
        }
        Ok(Correlation {
            pearson: pearson_correlation(&xs, &ys)?,
            n_points: xs.len(),
            underpowered: xs.len() <= 2,
        })
    }

    /// Writes `learning_rate,rv_loss,ground_truth_loss,chosen`; absent ground truth is an empty field.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["learning_rate", "rv_loss", "ground_truth_loss", "chosen"]).map_err(io)?;
        for (i, c) in self.candidates.iter().enumerate() {
            w.write_record([
                format!("{:e}", c.learning_rate),
                format!("{:.6}", c.rv_loss),
                c.ground_truth_loss.map(|g| format!("{g:.6}")).unwrap_or_default(),
                (i == self.chosen).to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("io: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub pearson: f64,
    pub n_points: usize,
    /// Two points always correlate at ±1.
    pub underpowered: bool,
}

fn select(candidates: &[Candidate]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if !c.rv_loss.is_finite() {
            continue;
        }
        best = match best {
            Some(b) => {
                let cb = &candidates[b];
                let better = c.rv_loss < cb.rv_loss || (c.rv_loss == cb.rv_loss && c.learning_rate < cb.learning_rate);
                Some(if better { i } else { b })
            }
            None => Some(i),
        };
    }
    best.ok_or_else(|| Error::invalid("no viable rate: every candidate diverged"))
}

fn run_grid(template: &TrainConfig, view: UdaView<'_>, grid: &[f64], mut gt: impl FnMut(&Model) -> Result<f64>) -> Result<RvReport> {
    if grid.is_empty() {
        return Err(Error::invalid("rate grid must not be empty"));
    }
    let mut candidates = Vec::with_capacity(grid.len());
    for &lr in grid {
        let cfg = TrainConfig {
            learning_rate: lr,
            ..template.clone()
        };
        let out = rv_indicator(&cfg, view)?;
        let ground_truth_loss = match &out.forward {
            Some(m) => Some(gt(m)?),
            None => Some(f64::INFINITY),
        };
        candidates.push(Candidate {
            learning_rate: lr,
            rv_loss: out.rv_loss,
            ground_truth_loss,
        });
    }
    let chosen = select(&candidates)?;
    Ok(RvReport { candidates, chosen })
}

/// Scores every rate by reverse validation and picks the minimum, ties toward the smaller rate.
pub fn sweep(template: &TrainConfig, view: UdaView<'_>, grid: &[f64]) -> Result<RvReport> {
    let mut report = run_grid(template, view, grid, |_| Ok(0.0))?;
    for c in &mut report.candidates {
        c.ground_truth_loss = None;
    }
    Ok(report)
}

/// Like [`sweep`], additionally recording each forward model's cross entropy on the labeled target test set.
///
/// This unlocks target labels and is meant for the correlation study only.
pub fn sweep_with_ground_truth(template: &TrainConfig, triplet: &DomainTriplet, grid: &[f64]) -> Result<RvReport> {
    run_grid(template, triplet.uda_view(), grid, |m| {
        Ok(evaluate_cross_entropy(m, triplet.target_test()).unwrap_or(f64::INFINITY))
    })
}

/// Product-moment correlation. Rejects length < 2, length mismatch and zero variance.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("pearson: lengths differ ({} vs {})", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("pearson: need at least two points"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "pearson_correlation" });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson: zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug)]
pub struct PatternCorrelation {
    pub a_degrees: f64,
    pub report: RvReport,
    /// Err when the pattern had zero variance or too few finite points.
    pub correlation: Result<Correlation>,
}

/// Runs [`sweep_with_ground_truth`] for every pattern's triplet.
pub fn correlation_study<F>(template: &TrainConfig, patterns: &[f64], grid: &[f64], triplet_for: F) -> Result<Vec<PatternCorrelation>>
where
    F: Fn(f64) -> Result<DomainTriplet>,
{
    patterns
        .iter()
        .map(|&a| {
            let triplet = triplet_for(a)?;
            let report = sweep_with_ground_truth(template, &triplet, grid)?;
            let correlation = report.correlation();
            Ok(PatternCorrelation {
                a_degrees: a,
                report,
                correlation,
            })
        })
        .collect()
}
