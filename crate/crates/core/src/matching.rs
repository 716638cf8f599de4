//! Bipartite matching between learned predictions and ground truth.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::{giou_1d, l1_1d, Span};

/// Loss and matching weights. The matcher reads only `lambda_l1` and
/// `lambda_giou`; `lambda_loc` scales the localization loss alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    pub lambda_saliency: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Hinge margin of the saliency term.
    #[serde(default = "default_margin")]
    pub saliency_margin: f64,
    /// Cross-entropy weight of background targets.
    #[serde(default = "default_eos")]
    pub eos_coef: f64,
    #[serde(default = "default_gamma")]
    pub focal_gamma: f64,
    #[serde(default = "default_alpha")]
    pub focal_alpha: f64,
}

fn default_margin() -> f64 {
    0.2
}
fn default_eos() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    2.0
}
fn default_alpha() -> f64 {
    0.25
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_loc: 1.0,
            lambda_cls: 4.0,
            lambda_saliency: 1.0,
            lambda_l1: 10.0,
            lambda_giou: 1.0,
            saliency_margin: default_margin(),
            eos_coef: default_eos(),
            focal_gamma: default_gamma(),
            focal_alpha: default_alpha(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_loc,
            self.lambda_cls,
            self.lambda_saliency,
            self.lambda_l1,
            self.lambda_giou,
            self.saliency_margin,
            self.eos_coef,
            self.focal_gamma,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::InvalidArgument("focal_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One `(prediction, ground truth)` pair per ground-truth span, ordered by
/// ground-truth index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    /// Ground-truth index matched to each prediction, if any.
    pub fn by_prediction(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }

    pub fn total_cost(&self, cost: &Array2<f64>) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[[p, g]]).sum()
    }
}

/// Matching cost `[N × M]`: `−class_prob[i, n] + λ_L1·L1 + λ_gIoU·(1 − gIoU)`.
/// `class_prob[i, n]` is prediction `i`'s probability for ground truth `n`'s
/// class (the foreground probability in grounding mode).
pub fn cost_matrix(pred: &[Span], class_prob: &Array2<f64>, gt: &[Span], w: &LossWeights) -> Array2<f64> {
    Array2::from_shape_fn((pred.len(), gt.len()), |(i, n)| {
        -class_prob[[i, n]] + w.lambda_l1 * l1_1d(&pred[i], &gt[n]) + w.lambda_giou * (1.0 - giou_1d(&pred[i], &gt[n]))
    })
}

/// Minimum-cost assignment of every column to a distinct row.
///
/// Among optimal assignments the one whose prediction indices, listed in
/// ground-truth order, are lexicographically smallest is returned.
pub fn hungarian_assign(cost: &Array2<f64>) -> Result<MatchAssignment> {
    let (rows, cols) = cost.dim();
    if rows < cols {
        return Err(Error::Infeasible(format!(
            "{rows} predictions cannot cover {cols} ground-truth spans"
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    if cols == 0 {
        return Ok(MatchAssignment { pairs: Vec::new() });
    }
    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let (best, _) = solve(cost, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut used = vec![false; rows];
    let mut fixed = 0.0;
    let mut pairs = Vec::with_capacity(cols);
    for c in 0..cols {
        let rest_cols: Vec<usize> = (c + 1..cols).collect();
        let mut chosen = None;
        for r in 0..rows {
            if used[r] {
                continue;
            }
            let rest_rows: Vec<usize> = (0..rows).filter(|&x| !used[x] && x != r).collect();
            let sub = if rest_cols.is_empty() {
                0.0
            } else {
                solve(cost, &rest_rows, &rest_cols).0
            };
            if fixed + cost[[r, c]] + sub <= best + tol {
                chosen = Some(r);
                break;
            }
        }
        let r = chosen.expect("an optimal completion always exists");
        used[r] = true;
        fixed += cost[[r, c]];
        pairs.push((r, c));
    }
    Ok(MatchAssignment { pairs })
}

/// Shortest-augmenting-path Hungarian algorithm on the submatrix
/// `cost[rows, cols]` with `cols.len() <= rows.len()`. Returns the optimal
/// total (summed in column order) and the row chosen for each column.
fn solve(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    // Work on the transpose: each column ("worker") gets a distinct row ("job").
    let n = cols.len();
    let m = rows.len();
    let a = |i: usize, j: usize| cost[[rows[j - 1], cols[i - 1]]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_of_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_of_col[p[j] - 1] = rows[j - 1];
        }
    }
    let total = row_of_col.iter().enumerate().map(|(c, &r)| cost[[r, cols[c]]]).sum();
    (total, row_of_col)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sp(a: f64, b: f64) -> Span {
        Span::new(a, b).unwrap()
    }

    /// Exhaustive minimum over injective column→row maps.
    fn brute_force(cost: &Array2<f64>) -> f64 {
        fn rec(cost: &Array2<f64>, c: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if c == cost.ncols() {
                *best = best.min(acc);
                return;
            }
            for r in 0..cost.nrows() {
                if !used[r] {
                    used[r] = true;
                    rec(cost, c + 1, used, acc + cost[[r, c]], best);
                    used[r] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.nrows()], 0.0, &mut best);
        best
    }

    #[test]
    fn small_examples() {
        let a = hungarian_assign(&array![[1.0, 2.0], [3.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&array![[1.0, 2.0], [3.0, 0.0]]), 1.0);
        let id = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        assert_eq!(hungarian_assign(&id).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(matches!(hungarian_assign(&Array2::zeros((2, 3))), Err(Error::Infeasible(_))));
    }

    #[test]
    fn ties_break_lexicographically() {
        let flat = Array2::from_elem((4, 2), 1.0);
        assert_eq!(hungarian_assign(&flat).unwrap().pairs, vec![(0, 0), (1, 1)]);
        let c = array![[5.0, 0.0], [0.0, 5.0], [0.0, 0.0]];
        assert_eq!(hungarian_assign(&c).unwrap().pairs, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let rows = rng.gen_range(1..7);
            let cols = rng.gen_range(1..=rows);
            let cost = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-2.0..2.0));
            let a = hungarian_assign(&cost).unwrap();
            assert_eq!(a.total_cost(&cost), brute_force(&cost));
            let mut seen: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), cols);
        }
    }

    #[test]
    fn column_shift_keeps_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let cost = Array2::from_shape_fn((5, 3), |_| rng.gen_range(0.0..1.0));
            let a = hungarian_assign(&cost).unwrap();
            let mut shifted = cost.clone();
            shifted.column_mut(1).mapv_inplace(|v| v + 3.25);
            assert_eq!(hungarian_assign(&shifted).unwrap().pairs, a.pairs);
        }
    }

    #[test]
    fn cost_examples() {
        let w = LossWeights::default();
        let c = cost_matrix(&[sp(0.2, 0.5)], &array![[1.0]], &[sp(0.2, 0.5)], &w);
        assert_eq!(c[[0, 0]], -1.0);
        let w0 = LossWeights {
            lambda_l1: 0.0,
            lambda_giou: 0.0,
            ..w.clone()
        };
        let c = cost_matrix(&[sp(0.1, 0.3), sp(0.6, 0.9)], &array![[0.3], [0.8]], &[sp(0.5, 0.7)], &w0);
        assert_eq!(c, array![[-0.3], [-0.8]]);
        let w1 = LossWeights {
            lambda_l1: 1.0,
            lambda_giou: 1.0,
            ..w
        };
        let c = cost_matrix(&[sp(0.1, 0.5)], &array![[0.5]], &[sp(0.3, 0.7)], &w1);
        assert_abs_diff_eq!(c[[0, 0]], -0.5 + 0.4 + (1.0 - 1.0 / 3.0), epsilon = 1e-12);
        assert_abs_diff_eq!(c[[0, 0]], 0.5667, epsilon = 1e-4);
    }
}
