//! Task and domain losses recorded on a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_FLOOR, PROB_CEIL]` before any log.
pub const PROB_FLOOR: f64 = 1e-12;
pub const PROB_CEIL: f64 = 1.0 - 1e-12;

const ROW_SUM_TOL: f64 = 1e-6;

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "labels",
            left: (rows, classes),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    Ok(())
}

/// Mean of `-ln p(correct class)` over the batch.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let p = tape.value(probs);
    let (n, k) = p.shape();
    if n == 0 {
        return Err(Error::Empty("cross_entropy"));
    }
    check_labels(labels, n, k)?;
    for r in 0..n {
        let s: f64 = p.row(r).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!("cross_entropy: row {r} sums to {s}")));
        }
    }
    let onehot = tape.leaf(Tensor::one_hot(labels, k)?);
    let clamped = tape.clamp(probs, PROB_FLOOR, PROB_CEIL)?;
    let logp = tape.log(clamped)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum_all(picked)?;
    tape.mul_scalar(total, -1.0 / n as f64)
}

/// Mean of `-[d ln p + (1 - d) ln(1 - p)]` for an `n x 1` probability column.
pub fn binary_cross_entropy(tape: &mut Tape, p: Var, d: &[f64]) -> Result<Var> {
    let (n, k) = tape.value(p).shape();
    if k != 1 || d.len() != n {
        return Err(Error::ShapeMismatch {
            op: "binary_cross_entropy",
            left: (n, k),
            right: (d.len(), 1),
        });
    }
    if n == 0 {
        return Err(Error::Empty("binary_cross_entropy"));
    }
    let ones = tape.leaf(Tensor::full(n, 1, 1.0));
    let dv = tape.leaf(Tensor::new(n, 1, d.to_vec())?);
    let not_d = tape.leaf(Tensor::from_raw(n, 1, d.iter().map(|v| 1.0 - v).collect()));
    let pc = tape.clamp(p, PROB_FLOOR, PROB_CEIL)?;
    let log_p = tape.log(pc)?;
    let q = tape.sub(ones, pc)?;
    let log_q = tape.log(q)?;
    let a = tape.mul(dv, log_p)?;
    let b = tape.mul(not_d, log_q)?;
    let s = tape.add(a, b)?;
    let total = tape.sum_all(s)?;
    tape.mul_scalar(total, -1.0 / n as f64)
}

/// BCE against a single domain label shared by every row.
pub fn binary_cross_entropy_const(tape: &mut Tape, p: Var, label: f64) -> Result<Var> {
    let n = tape.value(p).rows();
    binary_cross_entropy(tape, p, &vec![label; n])
}

/// Unbiased sample covariance (divisor `n - 1`) of the rows of `x`.
pub fn covariance(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    if n < 2 {
        return Err(Error::invalid(format!("covariance needs at least 2 rows, got {n}")));
    }
    let mean = tape.mean_rows(x)?;
    let neg_mean = tape.mul_scalar(mean, -1.0)?;
    let centred = tape.add_row_bias(x, neg_mean)?;
    let ct = tape.transpose(centred)?;
    let scatter = tape.matmul(ct, centred)?;
    tape.mul_scalar(scatter, 1.0 / (n - 1) as f64)
}

/// Mean squared entrywise difference between the two `k x k` covariance matrices.
pub fn coral_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (ka, kb) = (tape.value(a).cols(), tape.value(b).cols());
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "coral_loss",
            left: tape.value(a).shape(),
            right: tape.value(b).shape(),
        });
    }
    let ca = covariance(tape, a)?;
    let cb = covariance(tape, b)?;
    let diff = tape.sub(ca, cb)?;
    let sq = tape.square(diff)?;
    tape.mean_all(sq)
}

/// Multipliers on the feature-distance and label-loss parts of the JDOT cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JdotWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for JdotWeights {
    fn default() -> Self {
        JdotWeights { alpha: 1.0, beta: 1.0 }
    }
}

/// Square matrix of nonnegative, finite pairwise costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Tensor);

impl CostMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rows() != t.cols() {
            return Err(Error::ShapeMismatch {
                op: "cost_matrix",
                left: t.shape(),
                right: (t.rows(), t.rows()),
            });
        }
        if t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("cost matrix has negative entries"));
        }
        Ok(CostMatrix(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }
}

/// Entry `(i, j)`: `alpha * ||f_src_i - f_tgt_j||^2 + beta * CE(p_tgt_j, y_src_i)`.
pub fn jdot_cost_matrix(
    feat_src: &Tensor,
    feat_tgt: &Tensor,
    y_src: &[usize],
    probs_tgt: &Tensor,
    weights: JdotWeights,
) -> Result<CostMatrix> {
    let n = feat_src.rows();
    if feat_tgt.rows() != n || probs_tgt.rows() != n || feat_src.cols() != feat_tgt.cols() {
        return Err(Error::ShapeMismatch {
            op: "jdot_cost_matrix",
            left: feat_src.shape(),
            right: feat_tgt.shape(),
        });
    }
    check_labels(y_src, n, probs_tgt.cols())?;
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        let fi = feat_src.row(i);
        for j in 0..n {
            let dist: f64 = fi.iter().zip(feat_tgt.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let ce = -probs_tgt.get(j, y_src[i]).clamp(PROB_FLOOR, PROB_CEIL).ln();
            out.set(i, j, weights.alpha * dist + weights.beta * ce);
        }
    }
    out.ensure_finite("jdot_cost_matrix")?;
    CostMatrix::new(out)
}

/// Differentiable `sum_ij plan_ij * cost_ij` with the plan held constant.
///
/// Expands the squared distance as `|f_i|^2 + |g_j|^2 - 2 f_i.g_j` weighted by
/// the plan's row and column masses, and folds the label term into
/// `-sum(log p_tgt * plan^T onehot(y_src))`.
pub fn jdot_plan_loss(
    tape: &mut Tape,
    feat_src: Var,
    feat_tgt: Var,
    probs_tgt: Var,
    y_src: &[usize],
    plan: &Tensor,
    weights: JdotWeights,
) -> Result<Var> {
    let (n, k) = tape.value(feat_src).shape();
    let classes = tape.value(probs_tgt).cols();
    if plan.shape() != (n, n) || tape.value(feat_tgt).shape() != (n, k) || tape.value(probs_tgt).rows() != n {
        return Err(Error::ShapeMismatch {
            op: "jdot_plan_loss",
            left: plan.shape(),
            right: tape.value(feat_tgt).shape(),
        });
    }
    check_labels(y_src, n, classes)?;

    let row_mass: Vec<f64> = (0..n).map(|i| plan.row(i).iter().sum()).collect();
    let col_mass = plan.sum_rows();
    let row_w = Tensor::from_raw(n, k, row_mass.iter().flat_map(|&m| std::iter::repeat(m).take(k)).collect());
    let col_w = Tensor::from_raw(n, k, col_mass.data().iter().flat_map(|&m| std::iter::repeat(m).take(k)).collect());

    let plan_v = tape.leaf(plan.clone());
    let row_wv = tape.leaf(row_w);
    let col_wv = tape.leaf(col_w);

    let fs2 = tape.square(feat_src)?;
    let fs2w = tape.mul(fs2, row_wv)?;
    let a = tape.sum_all(fs2w)?;
    let ft2 = tape.square(feat_tgt)?;
    let ft2w = tape.mul(ft2, col_wv)?;
    let b = tape.sum_all(ft2w)?;
    let ftt = tape.transpose(feat_tgt)?;
    let cross = tape.matmul(feat_src, ftt)?;
    let cross_w = tape.mul(cross, plan_v)?;
    let c = tape.sum_all(cross_w)?;
    let c2 = tape.mul_scalar(c, -2.0)?;
    let ab = tape.add(a, b)?;
    let dist = tape.add(ab, c2)?;
    let dist = tape.mul_scalar(dist, weights.alpha)?;

    let label_mass = plan.transpose().matmul(&Tensor::one_hot(y_src, classes)?)?;
    let label_mass_v = tape.leaf(label_mass);
    let pc = tape.clamp(probs_tgt, PROB_FLOOR, PROB_CEIL)?;
    let logp = tape.log(pc)?;
    let weighted = tape.mul(logp, label_mass_v)?;
    let s = tape.sum_all(weighted)?;
    let ce = tape.mul_scalar(s, -weights.beta)?;
    tape.add(dist, ce)
}

/// Tape-free evaluations of the losses, for reporting and tests.
pub mod value {
    use super::*;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        Ok(tape.value(v).item())
    }

    pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
        eval(|t| {
            let p = t.leaf(probs.clone());
            super::cross_entropy(t, p, labels)
        })
    }

    pub fn binary_cross_entropy(p: &Tensor, d: &[f64]) -> Result<f64> {
        eval(|t| {
            let pv = t.leaf(p.clone());
            super::binary_cross_entropy(t, pv, d)
        })
    }

    pub fn coral_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
        eval(|t| {
            let av = t.leaf(a.clone());
            let bv = t.leaf(b.clone());
            super::coral_loss(t, av, bv)
        })
    }
}
