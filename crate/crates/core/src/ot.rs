//! Exact optimal transport between two uniform empirical measures of equal size.
//!
//! With uniform marginals on an `n x n` cost, an optimal plan exists at a
//! vertex of the Birkhoff polytope, i.e. a permutation matrix scaled by `1/n`.
//! The permutation is found with the O(n^3) shortest-augmenting-path Hungarian
//! method using row/column potentials.

use crate::error::{Error, Result};
use crate::losses::CostMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    plan: Tensor,
    assignment: Vec<usize>,
}

impl TransportPlan {
    pub fn from_assignment(assignment: Vec<usize>) -> Self {
        let n = assignment.len();
        let mut plan = Tensor::zeros(n, n);
        let mass = 1.0 / n as f64;
        for (i, &j) in assignment.iter().enumerate() {
            plan.set(i, j, mass);
        }
        TransportPlan { plan, assignment }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.plan
    }

    /// Column matched to each row.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Largest deviation of any row or column sum from `1/n`.
    pub fn marginal_error(&self) -> f64 {
        let n = self.n();
        let target = 1.0 / n as f64;
        let rows = (0..n).map(|i| (self.plan.row(i).iter().sum::<f64>() - target).abs());
        let cols = self.plan.sum_rows().into_data().into_iter().map(|c| (c - target).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Minimum-cost plan under uniform marginals.
pub fn solve_exact_uniform(cost: &CostMatrix) -> Result<TransportPlan> {
    let t = cost.tensor();
    if t.rows() != t.cols() {
        return Err(Error::ShapeMismatch {
            op: "solve_exact_uniform",
            left: t.shape(),
            right: (t.rows(), t.rows()),
        });
    }
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "solve_exact_uniform" });
    }
    if t.rows() == 0 {
        return Err(Error::Empty("solve_exact_uniform"));
    }
    Ok(TransportPlan::from_assignment(hungarian(t)))
}

/// Row-to-column assignment minimising total cost.
///
/// Rows are inserted in index order and columns scanned in index order with
/// strict comparisons, so ties resolve toward lower indices deterministically.
pub fn hungarian(cost: &Tensor) -> Vec<usize> {
    let n = cost.rows();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // col_owner[j] = row (1-based) matched to column j (1-based); 0 = free.
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Frobenius inner product of plan and cost.
pub fn plan_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    plan.tensor()
        .check_same_shape(cost.tensor(), "plan_cost")?;
    Ok(plan.tensor().hadamard(cost.tensor())?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn zero_cost_matching_found() {
        let c = cm(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let p = solve_exact_uniform(&c).unwrap();
        assert_eq!(p.tensor().data(), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(plan_cost(&p, &c).unwrap(), 0.0);
    }

    #[test]
    fn anti_diagonal_optimum() {
        let c = cm(&[&[5.0, 1.0], &[1.0, 5.0]]);
        let p = solve_exact_uniform(&c).unwrap();
        assert_eq!(p.assignment(), &[1, 0]);
        assert_eq!(plan_cost(&p, &c).unwrap(), 1.0);
    }

    #[test]
    fn constant_cost_objective_is_constant() {
        let c = CostMatrix::new(Tensor::full(5, 5, 2.5)).unwrap();
        let p = solve_exact_uniform(&c).unwrap();
        assert!((plan_cost(&p, &c).unwrap() - 2.5).abs() < 1e-12);
        assert!(p.marginal_error() < 1e-12);
    }

    #[test]
    fn identity_plan_cost_is_mean_diagonal() {
        let c = cm(&[&[1.0, 9.0, 9.0], &[9.0, 2.0, 9.0], &[9.0, 9.0, 3.0]]);
        let p = TransportPlan::from_assignment(vec![0, 1, 2]);
        assert!((plan_cost(&p, &c).unwrap() - 2.0).abs() < 1e-12);
        let zero = CostMatrix::new(Tensor::zeros(3, 3)).unwrap();
        assert_eq!(plan_cost(&p, &zero).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_costs() {
        assert!(CostMatrix::new(Tensor::zeros(2, 3)).is_err());
        assert!(CostMatrix::new(Tensor::from_rows(&[[-1.0]]).unwrap()).is_err());
        let p = TransportPlan::from_assignment(vec![0, 1]);
        assert!(plan_cost(&p, &CostMatrix::new(Tensor::zeros(3, 3)).unwrap()).is_err());
    }
}
