//! Training: batch construction, the per-batch objective, the optimisation
//! loop and the low-learning-rate fine-tuning stage.

use rand::seq::SliceRandom;
use rand::Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{PreparedScene, Vocabulary};
use super::evaluate::{evaluate, Protocol};
use crate::decoder::{sample_exact, DecoderConfig};
use crate::error::{Error, Result};
use crate::losses::{self, ClassTerm, LossParts, MaskTerm, Toggles};
use crate::matching::{assignment_cost, hungarian, split_and_rematch, Target};
use crate::metrics::MetricsReport;
use crate::model::{forward, Model, PromptInputs, LOG_TAU};
use crate::numerics::{rng, AdamW, Bound, OptimizerState, Schedule, Tape, Var};
use crate::scene::{make_text_expression, ClickStrategy, PromptSet};

/// One scene's share of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene: usize,
    pub sampled: Vec<usize>,
    pub prompts: PromptSet,
}

/// Number of sampled superpoints for a scene with `big_m` of them.
fn query_count(big_m: usize, cfg: &TrainConfig, r: &mut impl Rng) -> usize {
    if big_m == 0 {
        return 0;
    }
    let lo = ((big_m as f64 * cfg.min_query_fraction).ceil() as usize).clamp(1, big_m);
    r.random_range(lo..=big_m).min(cfg.max_queries)
}

/// Samples queries and prompts for `scenes`. Prompts target base thing
/// instances that keep at least one sampled superpoint; each gets a random
/// click and, while expressions remain, a paired expression.
pub fn sample_batch(
    prepared: &[PreparedScene],
    scenes: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<SceneSample>> {
    let mut pairs_left = cfg.max_pairs;
    let mut out = Vec::with_capacity(scenes.len());
    for (b, &si) in scenes.iter().enumerate() {
        let prep = &prepared[si];
        let s = rng::split(seed, b as u64);
        let mut r = rng::stream(s, 0);
        let big_m = prep.scene.num_superpoints();
        let sampled = sample_exact(big_m, query_count(big_m, cfg, &mut r), s)?;
        let mut candidates: Vec<i32> = prep
            .segments
            .iter()
            .filter(|g| {
                g.instance.is_some() && sampled.iter().any(|&j| g.superpoint_share[j] > 0.0)
            })
            .filter_map(|g| g.instance)
            .collect();
        candidates.shuffle(&mut r);
        candidates.truncate(cfg.k_v);
        let mut prompts = PromptSet::default();
        for (i, &t) in candidates.iter().enumerate() {
            let ps = rng::split(s, 100 + i as u64);
            let click =
                crate::scene::sample_vision_prompt(&prep.scene, t, ClickStrategy::Random, ps)?;
            prompts.clicks.push(crate::scene::Click {
                point: click,
                target: t,
            });
            if prompts.expressions.len() < cfg.k_t && pairs_left > 0 {
                match make_text_expression(&prep.scene, t, ps) {
                    Ok(tokens) => {
                        prompts
                            .expressions
                            .push(crate::scene::Expression { tokens, target: t });
                        prompts.pairing.push((i, prompts.expressions.len() - 1));
                        pairs_left -= 1;
                    }
                    Err(Error::Ambiguity(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        out.push(SceneSample {
            scene: si,
            sampled,
            prompts,
        });
    }
    Ok(out)
}

/// Values of the loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub base: f64,
    pub v_to_g: f64,
    pub v_to_r: f64,
    pub contrastive: f64,
    pub rank: f64,
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / vars.len() as f64)?))
}

fn column_mask(share: &[f64], sampled: &[usize]) -> Vec<f64> {
    sampled.iter().map(|&s| share[s]).collect()
}

/// Builds the objective of one batch on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &mut Tape,
    p: &Bound,
    dec: &DecoderConfig,
    prepared: &[PreparedScene],
    vocab: &Vocabulary,
    batch: &[SceneSample],
    cfg: &TrainConfig,
    toggles: Toggles,
) -> Result<(Var, LossParts)> {
    let no_object = vocab.closed.no_object();
    let (mut bases, mut v_to_g, mut v_to_r) = (Vec::new(), Vec::new(), Vec::new());
    let (mut vis_feats, mut txt_feats) = (Vec::new(), Vec::new());
    for sample in batch {
        let prep = &prepared[sample.scene];
        let sampled = &sample.sampled;
        let m = sampled.len();
        let inputs = PromptInputs::from_prompt_set(&prep.scene, &sample.prompts)?;
        let fwd = forward(
            tape,
            p,
            dec,
            &prep.ctx,
            &inputs,
            &vocab.closed.matrix,
            sampled,
        )?;
        let k_v = fwd.queries.k_v;
        let vars = fwd.vars;

        let unified: Vec<usize> = (0..m).collect();
        let mask_u = tape.value(vars.mask_logits).select_rows(&unified);
        let prob_u = tape.value(vars.cls_prob).select_rows(&unified);
        let present: Vec<usize> = (0..prep.segments.len())
            .filter(|&g| {
                sampled
                    .iter()
                    .any(|&j| prep.segments[g].superpoint_share[j] > 0.0)
            })
            .collect();
        let targets: Vec<Target> = present
            .iter()
            .map(|&g| {
                let seg = &prep.segments[g];
                let class = vocab
                    .closed_index(seg.class)
                    .expect("segments carry base classes");
                Target {
                    mask: column_mask(&seg.superpoint_share, sampled),
                    class,
                }
            })
            .collect();
        let assignment = if targets.is_empty() || m == 0 {
            Vec::new()
        } else {
            hungarian(&assignment_cost(&mask_u, &prob_u, &targets)?)?
        };
        let gt_masks: Vec<Vec<f64>> = targets.iter().map(|t| t.mask.clone()).collect();
        let pseudo: Vec<Vec<f64>> = prep
            .pseudo
            .iter()
            .map(|share| {
                column_mask(share, sampled)
                    .iter()
                    .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
                    .collect::<Vec<f64>>()
            })
            .filter(|mask| mask.iter().any(|&v| v > 0.0))
            .collect();
        let matched = split_and_rematch(&assignment, &mask_u, &gt_masks, &pseudo)?;

        let mut masks = Vec::new();
        let mut classes = Vec::new();
        for &(row, t) in &matched.assignment {
            masks.push(MaskTerm {
                row,
                target: targets[t].mask.clone(),
            });
            classes.push(ClassTerm {
                row,
                class: targets[t].class,
                weight: 1.0,
            });
        }
        for &(row, k) in &matched.pseudo_pairs {
            masks.push(MaskTerm {
                row,
                target: pseudo[k].clone(),
            });
        }
        for &row in &matched.free_negatives {
            classes.push(ClassTerm {
                row,
                class: no_object,
                weight: cfg.no_object_weight,
            });
        }
        let target_of_instance = |id: i32| -> Result<(usize, Vec<f64>)> {
            let seg = prep.segment_of_instance(id).ok_or_else(|| {
                Error::contract(format!("prompt targets unlabelled instance {id}"))
            })?;
            let class = vocab
                .closed_index(seg.class)
                .expect("segments carry base classes");
            Ok((class, column_mask(&seg.superpoint_share, sampled)))
        };
        for (i, c) in sample.prompts.clicks.iter().enumerate() {
            let (class, mask) = target_of_instance(c.target)?;
            masks.push(MaskTerm {
                row: m + i,
                target: mask,
            });
            classes.push(ClassTerm {
                row: m + i,
                class,
                weight: 1.0,
            });
        }
        for (i, e) in sample.prompts.expressions.iter().enumerate() {
            let (class, mask) = target_of_instance(e.target)?;
            masks.push(MaskTerm {
                row: m + k_v + i,
                target: mask,
            });
            classes.push(ClassTerm {
                row: m + k_v + i,
                class,
                weight: 1.0,
            });
        }
        bases.push(losses::base_loss(
            tape,
            vars.mask_logits,
            vars.cls_logits,
            &masks,
            &classes,
        )?);

        // Click rows teach the unified rows matched to the same instance.
        let mut teacher_rows = Vec::new();
        let mut student_rows = Vec::new();
        for (i, c) in sample.prompts.clicks.iter().enumerate() {
            let Some(g) = prep
                .segments
                .iter()
                .position(|s| s.instance == Some(c.target))
            else {
                continue;
            };
            let Some(t) = present.iter().position(|&x| x == g) else {
                continue;
            };
            if let Some(row) = matched.pred_of(t) {
                teacher_rows.push(m + i);
                student_rows.push(row);
            }
        }
        if !teacher_rows.is_empty() && m > 0 {
            let teacher = tape.gather_rows(vars.mask_logits, &teacher_rows)?;
            let student = tape.gather_rows(vars.mask_logits, &student_rows)?;
            v_to_g.push(losses::distill_v_to_g(
                tape,
                student,
                teacher,
                cfg.top_k_percent,
            )?);
        }
        if !sample.prompts.pairing.is_empty() {
            let vis: Vec<usize> = sample.prompts.pairing.iter().map(|&(c, _)| m + c).collect();
            let txt: Vec<usize> = sample
                .prompts
                .pairing
                .iter()
                .map(|&(_, e)| m + k_v + e)
                .collect();
            let teacher = tape.gather_rows(vars.cls_logits, &vis)?;
            let student = tape.gather_rows(vars.cls_logits, &txt)?;
            v_to_r.push(losses::distill_v_to_r(tape, student, teacher)?);
            vis_feats.push(tape.gather_rows(vars.f_out, &vis)?);
            txt_feats.push(tape.gather_rows(vars.f_out, &txt)?);
        }
    }
    let base = mean_of(tape, &bases)?.ok_or_else(|| Error::contract("empty batch"))?;
    let (contrastive, rank) = if vis_feats.is_empty() {
        (None, None)
    } else {
        let v = tape.concat_rows(&vis_feats)?;
        let t = tape.concat_rows(&txt_feats)?;
        let s = losses::similarity(tape, v, t)?;
        let log_tau = p.var(LOG_TAU)?;
        (
            Some(losses::contrastive_loss(tape, s, log_tau)?),
            Some(losses::ranking_loss(tape, s)?),
        )
    };
    let parts = LossParts {
        base,
        v_to_g: mean_of(tape, &v_to_g)?,
        v_to_r: mean_of(tape, &v_to_r)?,
        contrastive,
        rank,
    };
    let total = losses::total_loss(tape, &parts, toggles, cfg.lambda)?;
    Ok((total, parts))
}

pub fn loss_values(tape: &Tape, total: Var, parts: &LossParts) -> LossValues {
    let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).get(0, 0));
    LossValues {
        total: tape.value(total).get(0, 0),
        base: tape.value(parts.base).get(0, 0),
        v_to_g: v(parts.v_to_g),
        v_to_r: v(parts.v_to_r),
        contrastive: v(parts.contrastive),
        rank: v(parts.rank),
    }
}

/// Loss values of `batch` under the current weights, without updating them.
pub fn evaluate_batch_loss(
    model: &Model,
    prepared: &[PreparedScene],
    vocab: &Vocabulary,
    batch: &[SceneSample],
    cfg: &TrainConfig,
    toggles: Toggles,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let (total, parts) = batch_loss(
        &mut tape,
        &p,
        &model.config,
        prepared,
        vocab,
        batch,
        cfg,
        toggles,
    )?;
    Ok(loss_values(&tape, total, &parts))
}

/// One optimisation step on `batch`.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    prepared: &[PreparedScene],
    vocab: &Vocabulary,
    batch: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let (total, parts) = batch_loss(
        &mut tape,
        &p,
        &model.config,
        prepared,
        vocab,
        batch,
        cfg,
        cfg.toggles(),
    )?;
    let values = loss_values(&tape, total, &parts);
    if !values.total.is_finite() {
        return Err(Error::NonFinite {
            op: format!("training loss at step {} ({values:?})", opt.step),
        });
    }
    let grads = p.gradients(&tape.backward(total)?);
    opt.step(&mut model.params, &grads)?;
    model.clamp_temperature()?;
    Ok(values)
}

pub fn steps_per_epoch(num_scenes: usize, batch_size: usize) -> usize {
    num_scenes.div_ceil(batch_size)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the last epoch.
    pub last: Checkpoint,
    /// State at the best validation Overall; equal to `last` without
    /// validation scenes.
    pub best: Checkpoint,
    /// Total loss of every step.
    pub losses: Vec<f64>,
    /// `(epoch, report)` of every validation pass.
    pub history: Vec<(usize, MetricsReport)>,
}

/// Runs `epochs` epochs from `start`, evaluating on `val` every
/// `eval_period` epochs and after the last one.
fn run_epochs(
    mut ckpt: Checkpoint,
    epochs: usize,
    prepared: &[PreparedScene],
    val: &[PreparedScene],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut losses = Vec::new();
    let mut history = Vec::new();
    let mut best = ckpt.clone();
    let first_epoch = ckpt.epoch;
    for e in 0..epochs {
        let epoch = first_epoch + e;
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng::stream(rng::split(cfg.seed, 0xe90c), epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let step_seed = rng::split(rng::split(cfg.seed, 0x57e9), ckpt.optimizer.step);
            let batch = sample_batch(prepared, chunk, cfg, step_seed)?;
            let v = train_step(
                &mut ckpt.model,
                &mut ckpt.optimizer,
                prepared,
                vocab,
                &batch,
                cfg,
            )?;
            losses.push(v.total);
        }
        ckpt.epoch = epoch + 1;
        let done = e + 1;
        if !val.is_empty() && (done % cfg.eval_period == 0 || done == epochs) {
            let report = evaluate(&ckpt.model, val, vocab, &Protocol::default())?.report;
            history.push((ckpt.epoch, report));
            if ckpt.best_overall.is_none_or(|b| report.overall > b) {
                ckpt.best_overall = Some(report.overall);
                best = ckpt.clone();
            }
        }
    }
    if val.is_empty() {
        best = ckpt.clone();
    } else {
        best.best_overall = ckpt.best_overall;
    }
    Ok(TrainOutcome {
        last: ckpt,
        best,
        losses,
        history,
    })
}

/// Trains a fresh model; the learning rate decays polynomially to zero over
/// all steps.
pub fn train(
    cfg: &TrainConfig,
    prepared: &[PreparedScene],
    val: &[PreparedScene],
    vocab: &Vocabulary,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if prepared.is_empty() {
        return Err(Error::contract("no training scenes"));
    }
    let model = Model::new(cfg.decoder(), cfg.seed)?;
    let total_steps = (cfg.epochs * steps_per_epoch(prepared.len(), cfg.batch_size)) as u64;
    let hyper = AdamW::new(cfg.lr0, cfg.weight_decay, Schedule::poly(total_steps));
    let optimizer = OptimizerState::new(hyper, &model.params);
    let ckpt = Checkpoint {
        model,
        optimizer,
        epoch: 0,
        best_overall: None,
    };
    run_epochs(ckpt, cfg.epochs, prepared, val, vocab, cfg)
}

/// Optimiser settings of the fine-tuning stage: learning rate and weight
/// decay scaled down, constant schedule. Moments and step count carry over.
pub fn finetune_hyper(cfg: &TrainConfig) -> AdamW {
    AdamW::new(
        cfg.lr0 * cfg.finetune_factor,
        cfg.weight_decay * cfg.finetune_factor,
        Schedule::Constant,
    )
}

/// Continues training from `ckpt` for `finetune_epochs` epochs.
pub fn finetune_trick(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    prepared: &[PreparedScene],
    val: &[PreparedScene],
    vocab: &Vocabulary,
) -> Result<TrainOutcome> {
    let mut start = ckpt.clone();
    if cfg.finetune_epochs == 0 {
        return Ok(TrainOutcome {
            last: start.clone(),
            best: start,
            losses: Vec::new(),
            history: Vec::new(),
        });
    }
    start.optimizer.hyper = finetune_hyper(cfg);
    start.best_overall = None;
    run_epochs(start, cfg.finetune_epochs, prepared, val, vocab, cfg)
}

/// Fixed-shape helper for tests: a tiny model and config.
#[cfg(test)]
pub(crate) fn tiny_setup(n_scenes: usize) -> (TrainConfig, Vec<PreparedScene>, Vocabulary) {
    let cfg = TrainConfig {
        d_in: 8,
        d_out: 16,
        layers: 1,
        heads: 2,
        epochs: 2,
        points_per_scene: 400,
        eval_period: 1,
        ..TrainConfig::default()
    };
    let (scenes, _) = super::data::generate_split(11, n_scenes, 0, cfg.points_per_scene).unwrap();
    let vocab = Vocabulary::new(&scenes, &cfg.novel_classes, cfg.d_out).unwrap();
    let prepared = super::data::prepare_all(scenes, &vocab, 1).unwrap();
    (cfg, prepared, vocab)
}
