//! Evaluation: one forward pass per scene with every superpoint as a query,
//! all six pipelines on its predictions, metrics reduced over scenes in
//! scene order.

use rayon::prelude::*;

use super::data::{PreparedScene, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{
    interactive_metrics, point_iou, referring_metrics, ApFamily, ClickResult, MetricsReport,
    PqAccumulator, ScoredMask, Segment, SemanticAccumulator,
};
use crate::model::{Model, PromptInputs};
use crate::numerics::rng;
use crate::scene::{
    make_text_expression, sample_vision_prompt, Click, ClickStrategy, Expression, PromptSet,
};
use crate::tasks::{run_all, TaskOutputs, TaskThresholds};

/// How evaluation prompts are placed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Protocol {
    pub click: ClickStrategy,
    pub seed: u64,
    pub thresholds: TaskThresholds,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            click: ClickStrategy::Center,
            seed: 0,
            thresholds: TaskThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Mean over thing instances of the best IoU of any predicted instance
    /// mask, in percent.
    pub instance_miou: f64,
    pub outputs: Vec<TaskOutputs>,
    pub prompts: Vec<PromptSet>,
}

/// Clicks on every thing instance and expressions for every labelled thing
/// instance that has an unambiguous one.
pub fn evaluation_prompts(
    prep: &PreparedScene,
    protocol: &Protocol,
    scene_index: usize,
) -> Result<PromptSet> {
    let seed = rng::split(protocol.seed, scene_index as u64);
    let mut set = PromptSet::default();
    for (i, inst) in prep.things.iter().enumerate() {
        let s = rng::split(seed, i as u64);
        let point = sample_vision_prompt(&prep.scene, inst.id, protocol.click, s)?;
        set.clicks.push(Click {
            point,
            target: inst.id,
        });
    }
    for seg in &prep.segments {
        let Some(id) = seg.instance else { continue };
        match make_text_expression(&prep.scene, id, rng::split(seed, 1 << 20 | id as u64)) {
            Ok(tokens) => set.expressions.push(Expression { tokens, target: id }),
            Err(Error::Ambiguity(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(set)
}

fn infer_scene(
    model: &Model,
    prep: &PreparedScene,
    vocab: &Vocabulary,
    protocol: &Protocol,
    index: usize,
) -> Result<(TaskOutputs, PromptSet)> {
    let prompts = evaluation_prompts(prep, protocol, index)?;
    let inputs = PromptInputs::from_prompt_set(&prep.scene, &prompts)?;
    let preds = model.infer(&prep.ctx, &inputs, &vocab.closed.matrix)?;
    let outputs = run_all(
        &preds,
        &prep.scene,
        &vocab.closed,
        &vocab.open,
        &protocol.thresholds,
    )?;
    Ok((outputs, prompts))
}

/// Runs inference on all scenes in parallel and reduces the metrics
/// sequentially, so the report does not depend on thread scheduling.
pub fn evaluate(
    model: &Model,
    scenes: &[PreparedScene],
    vocab: &Vocabulary,
    protocol: &Protocol,
) -> Result<Evaluation> {
    let results: Vec<(TaskOutputs, PromptSet)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, prep)| infer_scene(model, prep, vocab, protocol, i))
        .collect::<Result<_>>()?;

    let mut pq = PqAccumulator::default();
    let mut sem = SemanticAccumulator::default();
    let mut inst = ApFamily::default();
    let mut ov = ApFamily::default();
    let mut clicks = Vec::new();
    let mut ref_ious = Vec::new();
    let mut best_ious = Vec::new();
    let mut max_points = 0;
    for (prep, (out, prompts)) in scenes.iter().zip(&results) {
        let scene = &prep.scene;
        let n = scene.len();
        max_points = max_points.max(n);
        let all_valid = vec![true; n];
        let gt_segments: Vec<Segment> = prep
            .segments
            .iter()
            .map(|s| Segment {
                points: s.points.clone(),
                class: s.class,
            })
            .collect();

        let pan: Vec<Segment> = out
            .panoptic
            .segment_points()
            .into_iter()
            .zip(&out.panoptic.segments)
            .map(|(points, &(class, _))| Segment { points, class })
            .collect();
        pq.add(&pan, &gt_segments, n)?;

        let sem_gt: Vec<Option<u32>> = (0..n)
            .map(|p| prep.base_points[p].then_some(scene.semantic_id[p]))
            .collect();
        sem.add(&out.semantic, &sem_gt)?;

        let thing_gt: Vec<Segment> = prep
            .segments
            .iter()
            .filter(|s| s.instance.is_some())
            .map(|s| Segment {
                points: s.points.clone(),
                class: s.class,
            })
            .collect();
        let inst_pred: Vec<ScoredMask> = out
            .instances
            .iter()
            .filter(|i| !scene.stuff_flags[i.class as usize])
            .map(|i| ScoredMask {
                points: i.points.clone(),
                class: i.class,
                score: i.score,
            })
            .collect();
        inst.add(&inst_pred, &thing_gt, &prep.base_points)?;

        let novel_gt: Vec<Segment> = prep
            .things
            .iter()
            .filter(|t| vocab.split.is_novel(t.class))
            .map(|t| Segment {
                points: t.points.clone(),
                class: t.class,
            })
            .collect();
        let ov_pred: Vec<ScoredMask> = out
            .openvocab
            .iter()
            .filter(|i| vocab.split.is_novel(i.class))
            .map(|i| ScoredMask {
                points: i.points.clone(),
                class: i.class,
                score: i.score,
            })
            .collect();
        ov.add(&ov_pred, &novel_gt, &all_valid)?;

        for (click, (pred, score)) in prompts.clicks.iter().zip(&out.interactive) {
            let target = prep
                .things
                .iter()
                .find(|t| t.id == click.target)
                .expect("clicks target things");
            clicks.push(ClickResult {
                pred: pred.clone(),
                score: *score,
                target: target.points.clone(),
            });
        }
        for (expr, (pred, _)) in prompts.expressions.iter().zip(&out.referring) {
            let target = prep
                .things
                .iter()
                .find(|t| t.id == expr.target)
                .expect("expressions target things");
            ref_ious.push(point_iou(pred, &target.points, &all_valid));
        }
        for t in &prep.things {
            let best = out
                .instances
                .iter()
                .map(|i| point_iou(&i.points, &t.points, &all_valid))
                .fold(0.0, f64::max);
            best_ious.push(best);
        }
    }
    // Each click is scored only against its own target, so pooling clicks
    // from different scenes in one index space is sound.
    let (inter, inter_miou) = interactive_metrics(&clicks, max_points)?;
    let (ref_miou, ref_acc25, ref_acc50) = referring_metrics(&ref_ious);
    let inst_s = inst.summary();
    let report = MetricsReport {
        pq: pq.value(),
        sem_miou: sem.value(),
        inst_map: inst_s.map,
        inst_ap50: inst_s.ap50,
        inst_ap25: inst_s.ap25,
        inter_ap: inter.map,
        inter_ap50: inter.ap50,
        inter_ap25: inter.ap25,
        inter_miou,
        ref_miou,
        ref_acc25,
        ref_acc50,
        ov_ap: ov.summary().map,
        overall: 0.0,
    }
    .with_overall();
    let instance_miou = if best_ious.is_empty() {
        0.0
    } else {
        100.0 * best_ious.iter().sum::<f64>() / best_ious.len() as f64
    };
    let (outputs, prompts) = results.into_iter().unzip();
    Ok(Evaluation {
        report,
        instance_miou,
        outputs,
        prompts,
    })
}
