//! Hungarian assignment of unified-query predictions to ground truth, and
//! re-matching of the leftover predictions against pseudo masks.

use crate::error::{Error, Result};
use crate::numerics::tape::{dice_parts, sigmoid};
use crate::numerics::Tensor;

pub const DICE_WEIGHT: f64 = 1.0;
pub const CE_WEIGHT: f64 = 1.0;
/// Pseudo masks overlapping some ground-truth mask at least this much are
/// not used for supervision.
pub const PSEUDO_IOU_LIMIT: f64 = 0.5;
const CE_FLOOR: f64 = 1e-12;

/// A supervision target over the sampled superpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    /// Binary membership per sampled superpoint.
    pub mask: Vec<f64>,
    /// Row index into the class embeddings.
    pub class: usize,
}

fn dice_cost(logits: &[f64], target: &[f64]) -> f64 {
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let (num, den) = dice_parts(&p, target);
    1.0 - num / den
}

/// `preds x targets` matrix of weighted Dice plus cross-entropy costs.
pub fn assignment_cost(
    mask_logits: &Tensor,
    cls_prob: &Tensor,
    targets: &[Target],
) -> Result<Tensor> {
    if mask_logits.rows() != cls_prob.rows() {
        return Err(Error::shape(
            "assignment_cost",
            "mask and class rows differ",
        ));
    }
    for (j, t) in targets.iter().enumerate() {
        if t.mask.len() != mask_logits.cols() {
            return Err(Error::shape(
                "assignment_cost",
                format!(
                    "target {j} has {} entries, predictions {}",
                    t.mask.len(),
                    mask_logits.cols()
                ),
            ));
        }
        if t.mask.iter().all(|&v| v == 0.0) {
            return Err(Error::contract(format!("target {j} has an empty mask")));
        }
        if t.class >= cls_prob.cols() {
            return Err(Error::contract(format!(
                "target {j} class {} out of range",
                t.class
            )));
        }
    }
    Ok(Tensor::from_fn(
        mask_logits.rows(),
        targets.len(),
        |i, j| {
            let t = &targets[j];
            let ce = -cls_prob.get(i, t.class).max(CE_FLOOR).ln();
            DICE_WEIGHT * dice_cost(mask_logits.row_slice(i), &t.mask) + CE_WEIGHT * ce
        },
    ))
}

/// Dice-only cost, `preds x masks`.
pub fn dice_cost_matrix(mask_logits: &Tensor, rows: &[usize], masks: &[Vec<f64>]) -> Tensor {
    Tensor::from_fn(rows.len(), masks.len(), |i, j| {
        dice_cost(mask_logits.row_slice(rows[i]), &masks[j])
    })
}

/// Minimum-cost assignment of every column to a distinct row, as
/// `(row, col)` pairs sorted by row. When there are fewer rows than columns,
/// the surplus columns stay unassigned.
pub fn hungarian(cost: &Tensor) -> Result<Vec<(usize, usize)>> {
    if !cost.is_finite() {
        return Err(Error::contract("cost matrix has non-finite entries"));
    }
    let (rows, cols) = (cost.rows(), cost.cols());
    if cols == 0 || rows == 0 {
        return Ok(Vec::new());
    }
    // Columns are the side that must be covered; pad rows with dummies.
    let n_right = rows.max(cols);
    let pad = 2.0 * cost.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0;
    let c = |col: usize, row: usize| if row < rows { cost.get(row, col) } else { pad };

    // Potentials method on a cols x n_right matrix, 1-based with a sentinel.
    let n = cols;
    let m = n_right;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut owner = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0 && j - 1 < rows)
        .map(|j| (j - 1, owner[j] - 1))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

pub fn total_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
}

/// Outcome of matching one scene's unified predictions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(pred, target)` pairs.
    pub assignment: Vec<(usize, usize)>,
    pub positives: Vec<usize>,
    /// Unified predictions without a target, sorted.
    pub negatives: Vec<usize>,
    /// `(pred, pseudo mask)` pairs; these rows get mask supervision only.
    pub pseudo_pairs: Vec<(usize, usize)>,
    /// Negatives without a pseudo mask.
    pub free_negatives: Vec<usize>,
}

impl MatchResult {
    /// Target matched to prediction `pred`, if any.
    pub fn target_of(&self, pred: usize) -> Option<usize> {
        self.assignment.iter().find(|p| p.0 == pred).map(|p| p.1)
    }

    /// Prediction matched to target `target`, if any.
    pub fn pred_of(&self, target: usize) -> Option<usize> {
        self.assignment.iter().find(|p| p.1 == target).map(|p| p.0)
    }
}

pub fn mask_iou(a: &[f64], b: &[f64]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x.min(*y)).sum();
    let union: f64 = a.iter().zip(b).map(|(x, y)| x.max(*y)).sum();
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pseudo masks that are non-empty and overlap every ground-truth mask with
/// IoU below [`PSEUDO_IOU_LIMIT`], as indices into `pseudo`.
pub fn admissible_pseudo(pseudo: &[Vec<f64>], gt: &[Vec<f64>]) -> Vec<usize> {
    (0..pseudo.len())
        .filter(|&k| {
            pseudo[k].iter().any(|&v| v > 0.0)
                && gt
                    .iter()
                    .all(|g| mask_iou(&pseudo[k], g) < PSEUDO_IOU_LIMIT)
        })
        .collect()
}

/// Splits unified predictions into positives and negatives, then matches the
/// negatives to admissible pseudo masks by Dice cost.
pub fn split_and_rematch(
    assignment: &[(usize, usize)],
    mask_logits: &Tensor,
    gt_masks: &[Vec<f64>],
    pseudo: &[Vec<f64>],
) -> Result<MatchResult> {
    let num_preds = mask_logits.rows();
    let mut is_pos = vec![false; num_preds];
    for &(p, _) in assignment {
        if p >= num_preds || is_pos[p] {
            return Err(Error::contract(format!(
                "assignment row {p} invalid or repeated"
            )));
        }
        is_pos[p] = true;
    }
    let positives: Vec<usize> = assignment.iter().map(|p| p.0).collect();
    let negatives: Vec<usize> = (0..num_preds).filter(|&p| !is_pos[p]).collect();
    let admissible = admissible_pseudo(pseudo, gt_masks);
    let mut pseudo_pairs = Vec::new();
    if !negatives.is_empty() && !admissible.is_empty() {
        let masks: Vec<Vec<f64>> = admissible.iter().map(|&k| pseudo[k].clone()).collect();
        let cost = dice_cost_matrix(mask_logits, &negatives, &masks);
        for (r, c) in hungarian(&cost)? {
            pseudo_pairs.push((negatives[r], admissible[c]));
        }
    }
    let free_negatives = negatives
        .iter()
        .copied()
        .filter(|n| !pseudo_pairs.iter().any(|p| p.0 == *n))
        .collect();
    Ok(MatchResult {
        assignment: assignment.to_vec(),
        positives,
        negatives,
        pseudo_pairs,
        free_negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use itertools::Itertools;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force(cost: &Tensor) -> f64 {
        let (r, c) = (cost.rows(), cost.cols());
        (0..r)
            .permutations(c)
            .map(|rows| {
                rows.iter()
                    .enumerate()
                    .map(|(j, &i)| cost.get(i, j))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn small_examples() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert_eq!(total_cost(&c, &a), 2.0);
        assert_eq!(hungarian(&Tensor::scalar(5.0)).unwrap(), vec![(0, 0)]);
        let bad = Tensor::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(hungarian(&bad).is_err());
    }

    #[test]
    fn fewer_rows_than_columns_leaves_columns_open() {
        let c = Tensor::from_rows(&[vec![3.0, 1.0, 2.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn matches_brute_force_on_rectangles() {
        let mut r = rng::stream(5, 0);
        for _ in 0..200 {
            let cols = r.random_range(1..=4);
            let rows = r.random_range(cols..=6);
            let c = Tensor::from_fn(rows, cols, |_, _| r.random_range(0.0..10.0));
            let a = hungarian(&c).unwrap();
            assert_eq!(a.len(), cols);
            assert!((total_cost(&c, &a) - brute_force(&c)).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_examples() {
        let logits =
            Tensor::from_rows(&[vec![40.0, 40.0, -40.0], vec![-40.0, -40.0, 40.0]]).unwrap();
        let prob = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = Target {
            mask: vec![1.0, 1.0, 0.0],
            class: 0,
        };
        let c = assignment_cost(&logits, &prob, &[t]).unwrap();
        assert!(c.get(0, 0).abs() < 1e-12);
        // Disjoint masks: Dice cost 1; class prob 0 gives the CE floor.
        assert!((c.get(1, 0) - 1.0 - (-CE_FLOOR.ln())).abs() < 1e-9);
        let empty = Target {
            mask: vec![0.0; 3],
            class: 0,
        };
        assert!(matches!(
            assignment_cost(&logits, &prob, &[empty]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rematch_examples() {
        // 3 preds, 1 gt, 1 admissible pseudo mask.
        let logits = Tensor::from_rows(&[
            vec![9.0, 9.0, -9.0, -9.0],
            vec![-9.0, -9.0, 9.0, -9.0],
            vec![-9.0, -9.0, -9.0, -9.0],
        ])
        .unwrap();
        let gt = vec![vec![1.0, 1.0, 0.0, 0.0]];
        let pseudo = vec![vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]];
        let m = split_and_rematch(&[(0, 0)], &logits, &gt, &pseudo).unwrap();
        assert_eq!(m.positives, vec![0]);
        assert_eq!(m.pseudo_pairs, vec![(1, 0)]);
        assert_eq!(m.free_negatives, vec![2]);

        let none = split_and_rematch(&[(0, 0)], &logits, &gt, &[]).unwrap();
        assert!(none.pseudo_pairs.is_empty());
        let overlapping = split_and_rematch(&[(0, 0)], &logits, &gt, &pseudo[1..]).unwrap();
        assert!(overlapping.pseudo_pairs.is_empty());
        assert_eq!(overlapping.free_negatives, vec![1, 2]);
    }

    proptest! {
        #[test]
        fn scaling_costs_keeps_the_assignment(
            vals in prop::collection::vec(0.0f64..10.0, 20),
            scale in 0.01f64..100.0,
        ) {
            let c = Tensor::new(5, 4, vals).unwrap();
            let a = hungarian(&c).unwrap();
            let b = hungarian(&c.scale(scale)).unwrap();
            prop_assert_eq!(a.len(), 4);
            prop_assert_eq!(a, b);
        }
    }
}
