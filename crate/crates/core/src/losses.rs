//! Training objectives: the base mask/class loss, the contrastive and ranking
//! losses over paired click/expression features, the two distillation losses
//! from click predictions, and their weighted total.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_TOP_K_PERCENT: f64 = 10.0;

/// Mask supervision of one prediction row.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTerm {
    pub row: usize,
    pub target: Vec<f64>,
}

/// Class supervision of one prediction row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTerm {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

/// Mean over `masks` of `BCE + (1 - Dice)` on sigmoid mask logits, plus the
/// weighted mean cross-entropy over `classes`. Either group may be empty.
pub fn base_loss(
    tape: &mut Tape,
    mask_logits: Var,
    cls_logits: Var,
    masks: &[MaskTerm],
    classes: &[ClassTerm],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    if !masks.is_empty() {
        let rows: Vec<usize> = masks.iter().map(|t| t.row).collect();
        let target_rows: Vec<Vec<f64>> = masks.iter().map(|t| t.target.clone()).collect();
        let logits = tape.gather_rows(mask_logits, &rows)?;
        let p = tape.sigmoid(logits)?;
        let t = tape.constant(Tensor::from_rows(&target_rows)?);
        let bce = tape.bce(p, t)?;
        let bce = tape.mean(bce)?;
        let dice = tape.dice_rows(p, t)?;
        let dice = tape.mean(dice)?;
        let dice_loss = tape.scale(dice, -1.0)?;
        let dice_loss = tape.add_const(dice_loss, 1.0)?;
        parts.push(tape.add(bce, dice_loss)?);
    }
    let total_weight: f64 = classes.iter().map(|c| c.weight).sum();
    if !classes.is_empty() && total_weight > 0.0 {
        let logp = tape.log_softmax_rows(cls_logits)?;
        let idx: Vec<(usize, usize)> = classes.iter().map(|c| (c.row, c.class)).collect();
        let picked = tape.gather_elems(logp, &idx)?;
        let w = tape.constant(Tensor::row(classes.iter().map(|c| c.weight).collect()));
        let weighted = tape.mul(picked, w)?;
        let s = tape.sum(weighted)?;
        parts.push(tape.scale(s, -1.0 / total_weight)?);
    }
    match parts.as_slice() {
        [] => Ok(tape.constant(Tensor::scalar(0.0))),
        [one] => Ok(*one),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    }
}

/// `B x B` cosine similarities between paired vision and text features.
pub fn similarity(tape: &mut Tape, vision: Var, text: Var) -> Result<Var> {
    let v = tape.l2_normalize_rows(vision)?;
    let t = tape.l2_normalize_rows(text)?;
    tape.matmul_t(v, t)
}

fn check_square(tape: &Tape, s: Var, op: &'static str) -> Result<usize> {
    let [r, c] = tape.shape(s);
    if r != c {
        return Err(Error::shape(op, format!("similarity matrix is {r}x{c}")));
    }
    if r == 0 {
        return Err(Error::contract(format!("{op} needs at least one pair")));
    }
    Ok(r)
}

fn diagonal(tape: &mut Tape, s: Var, b: usize) -> Result<Var> {
    let idx: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    tape.gather_elems(s, &idx)
}

/// Symmetric InfoNCE with temperature `exp(log_tau)`: the mean over pairs of
/// the vision-to-text term plus the mean of the text-to-vision term.
pub fn contrastive_loss(tape: &mut Tape, s: Var, log_tau: Var) -> Result<Var> {
    let (v, t) = contrastive_terms(tape, s, log_tau)?;
    tape.add(v, t)
}

/// The vision-to-text and text-to-vision halves of [`contrastive_loss`].
pub fn contrastive_terms(tape: &mut Tape, s: Var, log_tau: Var) -> Result<(Var, Var)> {
    let b = check_square(tape, s, "contrastive_loss")?;
    let neg = tape.scale(log_tau, -1.0)?;
    let inv_tau = tape.exp(neg)?;
    let logits = tape.mul_scalar(s, inv_tau)?;
    let mut terms = Vec::with_capacity(2);
    for dir in [logits, tape.transpose(logits)?] {
        let lp = tape.log_softmax_rows(dir)?;
        let d = diagonal(tape, lp, b)?;
        let m = tape.mean(d)?;
        terms.push(tape.scale(m, -1.0)?);
    }
    Ok((terms[0], terms[1]))
}

/// `(1/B) sum_i sum_j max(0, s_ij - s_ii)`.
pub fn ranking_loss(tape: &mut Tape, s: Var) -> Result<Var> {
    let b = check_square(tape, s, "ranking_loss")?;
    let d = diagonal(tape, s, b)?;
    let d = tape.transpose(d)?;
    let neg_d = tape.scale(d, -1.0)?;
    let gap = tape.add_col(s, neg_d)?;
    let hinge = tape.relu(gap)?;
    let total = tape.sum(hinge)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Size of the distillation region for `m` mask entries.
pub fn region_size(m: usize, k_percent: f64) -> usize {
    ((k_percent / 100.0 * m as f64).floor() as usize).max(1)
}

/// Per row, the indices of the `region_size` largest values (ties to the
/// lower index).
pub fn top_k_region(teacher: &Tensor, k_percent: f64) -> Vec<Vec<usize>> {
    let r = region_size(teacher.cols(), k_percent).min(teacher.cols());
    (0..teacher.rows())
        .map(|i| {
            let row = teacher.row_slice(i);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(r);
            idx
        })
        .collect()
}

/// BCE between student and teacher mask probabilities on the teacher's
/// top-k% region. The teacher is detached.
pub fn distill_v_to_g(tape: &mut Tape, student: Var, teacher: Var, k_percent: f64) -> Result<Var> {
    let [rows, m] = tape.shape(teacher);
    if tape.shape(student) != [rows, m] {
        return Err(Error::shape(
            "distill_v_to_g",
            format!(
                "student {:?} vs teacher {:?}",
                tape.shape(student),
                [rows, m]
            ),
        ));
    }
    if m == 0 {
        return Err(Error::contract("distillation over zero mask entries"));
    }
    let teacher = tape.detach(teacher)?;
    let region = top_k_region(tape.value(teacher), k_percent);
    let idx: Vec<(usize, usize)> = region
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().map(move |&j| (i, j)))
        .collect();
    let s = tape.gather_elems(student, &idx)?;
    let t = tape.gather_elems(teacher, &idx)?;
    let ps = tape.sigmoid(s)?;
    let pt = tape.sigmoid(t)?;
    let l = tape.bce(ps, pt)?;
    tape.mean(l)
}

/// BCE between sigmoid student class logits and sigmoid detached teacher
/// class logits, averaged over entries.
pub fn distill_v_to_r(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::shape(
            "distill_v_to_r",
            "student and teacher shapes differ",
        ));
    }
    let teacher = tape.detach(teacher)?;
    let ps = tape.sigmoid(student)?;
    let pt = tape.sigmoid(teacher)?;
    let l = tape.bce(ps, pt)?;
    tape.mean(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub distill: bool,
    pub contrastive: bool,
    pub rank: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        distill: true,
        contrastive: true,
        rank: true,
    };
    pub const NONE: Toggles = Toggles {
        distill: false,
        contrastive: false,
        rank: false,
    };
}

/// Loss terms of one batch; inter-task terms are absent when the batch has
/// no pairs to compute them on.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub base: Var,
    pub v_to_g: Option<Var>,
    pub v_to_r: Option<Var>,
    pub contrastive: Option<Var>,
    pub rank: Option<Var>,
}

/// `L_base + lambda * (enabled inter-task terms)`.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossParts,
    toggles: Toggles,
    lambda: f64,
) -> Result<Var> {
    let enabled = [
        (toggles.distill, parts.v_to_g),
        (toggles.distill, parts.v_to_r),
        (toggles.contrastive, parts.contrastive),
        (toggles.rank, parts.rank),
    ];
    let mut inter: Option<Var> = None;
    for (on, term) in enabled {
        if let (true, Some(t)) = (on, term) {
            inter = Some(match inter {
                None => t,
                Some(acc) => tape.add(acc, t)?,
            });
        }
    }
    match inter {
        None => Ok(parts.base),
        Some(i) => {
            let w = tape.scale(i, lambda)?;
            tape.add(parts.base, w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::{rng, ParamStore};
    use proptest::prelude::*;

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn sim(rows: &[Vec<f64>]) -> (Tape, Var) {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(rows).unwrap());
        (tape, s)
    }

    #[test]
    fn contrastive_closed_forms() {
        let (mut tape, s) = sim(&[vec![0.3]]);
        let lt = tape.constant(Tensor::scalar(0.07f64.ln()));
        let l = contrastive_loss(&mut tape, s, lt).unwrap();
        assert_eq!(value(&tape, l), 0.0);

        let (mut tape, s) = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let lt = tape.constant(Tensor::scalar(0.0));
        let l = contrastive_loss(&mut tape, s, lt).unwrap();
        let e = 1f64.exp();
        assert!((value(&tape, l) + 2.0 * (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((value(&tape, l) - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn contrastive_symmetric_matrix_has_equal_directions() {
        let rows = vec![
            vec![0.9, 0.2, -0.1],
            vec![0.2, 0.5, 0.3],
            vec![-0.1, 0.3, 0.7],
        ];
        let (mut tape, s) = sim(&rows);
        let lt = tape.constant(Tensor::scalar(0.1f64.ln()));
        let (v, t) = contrastive_terms(&mut tape, s, lt).unwrap();
        assert_eq!(value(&tape, v), value(&tape, t));
    }

    #[test]
    fn ranking_closed_forms() {
        let (mut tape, s) = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = ranking_loss(&mut tape, s).unwrap();
        assert_eq!(value(&tape, l), 0.0);
        let (mut tape, s) = sim(&[vec![0.2, 0.7], vec![0.1, 0.9]]);
        let l = ranking_loss(&mut tape, s).unwrap();
        assert!((value(&tape, l) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn distill_v_to_g_closed_forms() {
        assert_eq!(region_size(100, 10.0), 10);
        assert_eq!(region_size(5, 10.0), 1);
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::row(vec![40.0, -40.0, 40.0, -40.0]));
        let s = tape.param(Tensor::row(vec![40.0, -40.0, 40.0, -40.0]));
        let l = distill_v_to_g(&mut tape, s, t, 50.0).unwrap();
        assert_eq!(value(&tape, l), 0.0);
        let z = tape.param(Tensor::row(vec![0.0; 4]));
        let l = distill_v_to_g(&mut tape, z, t, 50.0).unwrap();
        assert!((value(&tape, l) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn distill_v_to_r_closed_forms_and_detachment() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::zeros(2, 3));
        let t = tape.param(Tensor::zeros(2, 3));
        let l = distill_v_to_r(&mut tape, s, t).unwrap();
        assert!((value(&tape, l) - 2f64.ln()).abs() < 1e-12);
        let moved = tape.param(Tensor::full(2, 3, 1.0));
        let l2 = distill_v_to_r(&mut tape, moved, t).unwrap();
        let g = tape.backward(l2).unwrap();
        assert!(g.get(t).data().iter().all(|&v| v == 0.0));
        assert!(g.get(moved).data().iter().all(|&v| v > 0.0));

        let mut tape = Tape::new();
        let s = tape.param(Tensor::full(1, 2, 20.0));
        let t = tape.param(Tensor::full(1, 2, 20.0));
        let l = distill_v_to_r(&mut tape, s, t).unwrap();
        assert!(value(&tape, l) <= 1e-6);
    }

    #[test]
    fn base_loss_examples() {
        let mut tape = Tape::new();
        let masks = tape.param(Tensor::from_rows(&[vec![30.0, -30.0], vec![0.0, 0.0]]).unwrap());
        let cls = tape.param(Tensor::from_rows(&[vec![40.0, -40.0], vec![0.0, 0.0]]).unwrap());
        let perfect = base_loss(
            &mut tape,
            masks,
            cls,
            &[MaskTerm {
                row: 0,
                target: vec![1.0, 0.0],
            }],
            &[ClassTerm {
                row: 0,
                class: 0,
                weight: 1.0,
            }],
        )
        .unwrap();
        assert!(value(&tape, perfect) < 1e-12);

        // Logit 0 against a half-ones target: BCE ln 2 and Dice 2*0.5/(1+1).
        let half = base_loss(
            &mut tape,
            masks,
            cls,
            &[MaskTerm {
                row: 1,
                target: vec![1.0, 0.0],
            }],
            &[],
        )
        .unwrap();
        assert!((value(&tape, half) - (2f64.ln() + 0.5)).abs() < 1e-9);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let base = tape.constant(Tensor::scalar(2.0));
        let one = tape.constant(Tensor::scalar(1.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let parts = LossParts {
            base,
            v_to_g: Some(one),
            v_to_r: Some(zero),
            contrastive: Some(zero),
            rank: Some(zero),
        };
        let t = total_loss(&mut tape, &parts, Toggles::ALL, 0.1).unwrap();
        assert!((value(&tape, t) - 2.1).abs() < 1e-12);
        let t = total_loss(&mut tape, &parts, Toggles::NONE, 0.1).unwrap();
        assert_eq!(value(&tape, t), 2.0);
    }

    #[test]
    fn inter_task_losses_pass_gradient_checks() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, 0);
        store.insert("v", Tensor::randn(3, 5, &mut r));
        store.insert("t", Tensor::randn(3, 5, &mut r));
        store.insert("log_tau", Tensor::scalar(0.2f64.ln()));
        store.insert("student", Tensor::randn(2, 12, &mut r));
        store.insert("teacher", Tensor::randn(2, 12, &mut r));
        let report = check_gradients(&store, 1e-5, 40, |tape, b| {
            let s = similarity(tape, b.var("v")?, b.var("t")?)?;
            let c = contrastive_loss(tape, s, b.var("log_tau")?)?;
            let rk = ranking_loss(tape, s)?;
            let g = distill_v_to_g(tape, b.var("student")?, b.var("teacher")?, 25.0)?;
            let rr = distill_v_to_r(tape, b.var("student")?, b.var("teacher")?)?;
            let parts = LossParts {
                base: g,
                v_to_g: Some(g),
                v_to_r: Some(rr),
                contrastive: Some(c),
                rank: Some(rk),
            };
            total_loss(tape, &parts, Toggles::ALL, 0.7)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(vals in prop::collection::vec(-1.0f64..1.0, 9), lt in -4.0f64..0.0) {
            let rows: Vec<Vec<f64>> = vals.chunks(3).map(<[f64]>::to_vec).collect();
            let (mut tape, s) = sim(&rows);
            let log_tau = tape.constant(Tensor::scalar(lt));
            let c = contrastive_loss(&mut tape, s, log_tau).unwrap();
            let r = ranking_loss(&mut tape, s).unwrap();
            prop_assert!(value(&tape, c) >= 0.0);
            prop_assert!(value(&tape, r) >= 0.0);
        }

        #[test]
        fn diagonal_dominance_zeroes_ranking(vals in prop::collection::vec(-1.0f64..1.0, 16)) {
            let mut rows: Vec<Vec<f64>> = vals.chunks(4).map(<[f64]>::to_vec).collect();
            for (i, row) in rows.iter_mut().enumerate() {
                row[i] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            let (mut tape, s) = sim(&rows);
            let r = ranking_loss(&mut tape, s).unwrap();
            prop_assert_eq!(value(&tape, r), 0.0);
        }
    }
}
