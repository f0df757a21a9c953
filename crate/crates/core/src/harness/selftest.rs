//! Quick invariant suite run by the `selftest` subcommand.

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{generate_split, prepare_all, Vocabulary};
use super::train::{batch_loss, sample_batch};
use crate::decoder::sample_exact;
use crate::error::Result;
use crate::losses::{self, Toggles};
use crate::matching::{hungarian, total_cost};
use crate::model::{Model, PromptInputs};
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::{rng, AdamW, OptimizerState, Schedule, Tape, Tensor};
use crate::scene::{read_scene, write_scene};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn min_permutation_cost(cost: &Tensor, row: usize, used: &mut Vec<bool>) -> f64 {
    if row == cost.rows() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for c in 0..cost.cols() {
        if !used[c] {
            used[c] = true;
            best = best.min(cost.get(row, c) + min_permutation_cost(cost, row + 1, used));
            used[c] = false;
        }
    }
    best
}

fn defaults() -> Check {
    let c = TrainConfig::default();
    let ok = c.lr0 == 1e-4
        && c.weight_decay == 0.05
        && c.lambda == 0.1
        && c.top_k_percent == 10.0
        && c.layers == 6
        && c.d_in == 32
        && c.d_out == 256
        && c.eval_period == 16
        && c.finetune_factor == 1e-3
        && c.finetune_epochs == 40;
    check("config defaults", ok, "")
}

fn hungarian_oracle() -> Result<Check> {
    let mut r = rng::stream(1, 0);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = r.random_range(1..=5);
        let cost = Tensor::uniform(n, n, 1.0, &mut r).map(f64::abs);
        let got = total_cost(&cost, &hungarian(&cost)?);
        let want = min_permutation_cost(&cost, 0, &mut vec![false; n]);
        if (got - want).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    Ok(check(
        "hungarian vs exhaustive search",
        mismatches == 0,
        format!("{mismatches} mismatches"),
    ))
}

fn closed_forms() -> Result<Check> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(&[vec![0.2, 0.7], vec![0.1, 0.9]])?);
    let rank = losses::ranking_loss(&mut tape, s)?;
    let rank = tape.value(rank).get(0, 0);
    let one = tape.constant(Tensor::scalar(0.3));
    let tau = tape.constant(Tensor::scalar(0.07f64.ln()));
    let con = losses::contrastive_loss(&mut tape, one, tau)?;
    let con = tape.value(con).get(0, 0);
    let ok = (rank - 0.25).abs() < 1e-9 && con.abs() < 1e-9;
    Ok(check(
        "closed-form losses",
        ok,
        format!("rank {rank}, contrastive {con}"),
    ))
}

fn tiny() -> Result<(TrainConfig, Vec<super::data::PreparedScene>, Vocabulary)> {
    let cfg = TrainConfig {
        d_in: 8,
        d_out: 8,
        layers: 1,
        heads: 2,
        k_v: 2,
        k_t: 2,
        ..TrainConfig::default()
    };
    let (scenes, _) = generate_split(2, 1, 0, 240)?;
    let vocab = Vocabulary::new(&scenes, &cfg.novel_classes, cfg.d_out)?;
    let prepared = prepare_all(scenes, &vocab, 0)?;
    Ok((cfg, prepared, vocab))
}

fn leakage() -> Result<Check> {
    let (cfg, prepared, vocab) = tiny()?;
    let model = Model::new(cfg.decoder(), 1)?;
    let prep = &prepared[0];
    let batch = sample_batch(&prepared, &[0], &cfg, 0)?;
    let prompts = PromptInputs::from_prompt_set(&prep.scene, &batch[0].prompts)?;
    let other = PromptInputs {
        vision: prompts
            .vision
            .iter()
            .map(|v| (v + 1) % prep.scene.num_superpoints())
            .collect(),
        text: Tensor::randn(
            prompts.text.rows(),
            prompts.text.cols(),
            &mut rng::stream(3, 0),
        ),
    };
    let a = model.infer(&prep.ctx, &prompts, &vocab.closed.matrix)?;
    let b = model.infer(&prep.ctx, &other, &vocab.closed.matrix)?;
    let m = a.m();
    let rows: Vec<usize> = (0..m).collect();
    let same = a.f_out.select_rows(&rows) == b.f_out.select_rows(&rows)
        && a.mask_logits.select_rows(&rows) == b.mask_logits.select_rows(&rows)
        && a.cls_prob.select_rows(&rows) == b.cls_prob.select_rows(&rows);
    Ok(check(
        "prompt leakage",
        same,
        format!("{m} unified rows compared"),
    ))
}

/// Finite-difference check of the whole training objective on a tiny model
/// with at most eight queries.
pub fn grad_check() -> Result<Check> {
    let (cfg, prepared, vocab) = tiny()?;
    let model = Model::new(cfg.decoder(), 2)?;
    let mut batch = sample_batch(&prepared, &[0], &cfg, 1)?;
    let big_m = prepared[0].scene.num_superpoints();
    batch[0].sampled = sample_exact(big_m, big_m.min(8), 5)?;
    let report = check_gradients(&model.params, 1e-5, 3, |tape, p| {
        Ok(batch_loss(
            tape,
            p,
            &model.config,
            &prepared,
            &vocab,
            &batch,
            &cfg,
            Toggles::ALL,
        )?
        .0)
    })?;
    Ok(check(
        "total loss gradients",
        report.passes(1e-4),
        format!(
            "max relative error {:.2e} at {}",
            report.max_rel_error, report.worst_entry
        ),
    ))
}

fn round_trips() -> Result<Check> {
    let (cfg, prepared, _) = tiny()?;
    let scene = &prepared[0].scene;
    let scene_ok = read_scene(&write_scene(scene))? == *scene;
    let model = Model::new(cfg.decoder(), 4)?;
    let optimizer = OptimizerState::new(AdamW::new(1e-4, 0.05, Schedule::poly(10)), &model.params);
    let ckpt = Checkpoint {
        model,
        optimizer,
        epoch: 0,
        best_overall: None,
    };
    let ckpt_ok = Checkpoint::from_text(&ckpt.to_text())? == ckpt;
    Ok(check("file round trips", scene_ok && ckpt_ok, ""))
}

/// Every check; an `Err` means a check could not run at all.
pub fn run_selftest() -> Result<Vec<Check>> {
    Ok(vec![
        defaults(),
        hungarian_oracle()?,
        closed_forms()?,
        leakage()?,
        grad_check()?,
        round_trips()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        for c in run_selftest().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
