//! The six inference pipelines. All of them read one shared
//! [`PredictionSet`]; none runs the network.

use std::fmt::Write as _;

use crate::decoder::PredictionSet;
use crate::error::{Error, Result};
use crate::numerics::tape::{sigmoid, softmax_rows};
use crate::numerics::tensor::argmax;
use crate::numerics::Tensor;
use crate::prompts::ClassEmbeddings;
use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskThresholds {
    /// Mask probability above which a point is in a mask.
    pub binarize: f64,
    /// Instances scoring below this are dropped.
    pub score_floor: f64,
    /// Panoptic thing segments left with fewer points are dropped.
    pub min_points: usize,
}

impl Default for TaskThresholds {
    fn default() -> Self {
        Self {
            binarize: 0.5,
            score_floor: 0.1,
            min_points: 25,
        }
    }
}

/// A predicted instance in point space.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub points: Vec<usize>,
    /// Scene class id.
    pub class: u32,
    pub score: f64,
    /// Unified query that produced it.
    pub query: usize,
}

/// Scene class id for each embedding row except the trailing no-object row.
pub fn class_ids(scene: &Scene, e_cls: &ClassEmbeddings) -> Result<Vec<u32>> {
    e_cls
        .names
        .iter()
        .map(|n| {
            scene
                .class_names
                .iter()
                .position(|c| c == n)
                .map(|i| i as u32)
                .ok_or_else(|| Error::Lookup(format!("class {n} not in scene table")))
        })
        .collect()
}

/// Per-point mask probabilities of prediction row `row`.
pub fn point_probabilities(preds: &PredictionSet, scene: &Scene, row: usize) -> Vec<f64> {
    let sp = preds
        .superpoint_logits(row)
        .iter()
        .map(|&l| sigmoid(l))
        .collect::<Vec<_>>();
    scene
        .superpoint_id
        .iter()
        .map(|&s| sp[s as usize])
        .collect()
}

fn binarize(probs: &[f64], thr: f64) -> Vec<usize> {
    (0..probs.len()).filter(|&p| probs[p] > thr).collect()
}

/// Instances from unified rows given class probabilities over
/// `class_ids.len() + 1` columns (last is no-object).
fn instances_from(
    preds: &PredictionSet,
    scene: &Scene,
    cls_prob: &Tensor,
    class_ids: &[u32],
    th: &TaskThresholds,
) -> Result<Vec<Instance>> {
    if cls_prob.cols() != class_ids.len() + 1 {
        return Err(Error::shape(
            "infer_instances",
            "class columns do not match the vocabulary",
        ));
    }
    let no_object = class_ids.len();
    let mut out = Vec::new();
    for q in 0..preds.m() {
        let row = cls_prob.row_slice(q);
        if argmax(row) == no_object {
            continue;
        }
        let c = argmax(&row[..no_object]);
        let probs = point_probabilities(preds, scene, q);
        let points = binarize(&probs, th.binarize);
        if points.is_empty() {
            continue;
        }
        let quality = points.iter().map(|&p| probs[p]).sum::<f64>() / points.len() as f64;
        let score = row[c] * quality;
        if score < th.score_floor {
            continue;
        }
        out.push(Instance {
            points,
            class: class_ids[c],
            score,
            query: q,
        });
    }
    Ok(out)
}

pub fn infer_instances(
    preds: &PredictionSet,
    scene: &Scene,
    e_cls: &ClassEmbeddings,
    th: &TaskThresholds,
) -> Result<Vec<Instance>> {
    instances_from(preds, scene, &preds.cls_prob, &class_ids(scene, e_cls)?, th)
}

/// Per point: `argmax_c sum_i sigmoid(mask_i) * cls_i(c)` over unified rows,
/// excluding no-object.
pub fn infer_semantic(
    preds: &PredictionSet,
    scene: &Scene,
    e_cls: &ClassEmbeddings,
) -> Result<Vec<u32>> {
    let ids = class_ids(scene, e_cls)?;
    let k = ids.len();
    let mut per_sp = vec![vec![0.0; k]; preds.num_superpoints];
    for q in 0..preds.m() {
        let cls = &preds.cls_prob.row_slice(q)[..k];
        for (j, &s) in preds.sampled.iter().enumerate() {
            let w = sigmoid(preds.mask_logits.get(q, j));
            for c in 0..k {
                per_sp[s][c] += w * cls[c];
            }
        }
    }
    let sp_class: Vec<u32> = per_sp.iter().map(|v| ids[argmax(v)]).collect();
    Ok(scene
        .superpoint_id
        .iter()
        .map(|&s| sp_class[s as usize])
        .collect())
}

/// Disjoint segments covering the scene; uncovered points are void.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    /// Segment index per point.
    pub segment: Vec<Option<usize>>,
    /// `(class, is_thing)` per segment.
    pub segments: Vec<(u32, bool)>,
}

impl PanopticMap {
    pub fn segment_points(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.segments.len()];
        for (p, s) in self.segment.iter().enumerate() {
            if let Some(s) = s {
                out[*s].push(p);
            }
        }
        out
    }
}

/// Things claim points in descending score (ties to the lower query);
/// things left with fewer than `min_points` are dropped; remaining points
/// take their semantic label if it is a stuff class, else stay void.
pub fn infer_panoptic(
    instances: &[Instance],
    semantic: &[u32],
    stuff_flags: &[bool],
    th: &TaskThresholds,
) -> Result<PanopticMap> {
    let n = semantic.len();
    let mut order: Vec<&Instance> = instances
        .iter()
        .filter(|i| !stuff_flags.get(i.class as usize).copied().unwrap_or(true))
        .collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
    let mut segment = vec![None; n];
    let mut segments = Vec::new();
    for inst in order {
        let free: Vec<usize> = inst
            .points
            .iter()
            .copied()
            .filter(|&p| segment[p].is_none())
            .collect();
        if free.len() < th.min_points {
            continue;
        }
        for p in free {
            segment[p] = Some(segments.len());
        }
        segments.push((inst.class, true));
    }
    let mut stuff_segment: Vec<Option<usize>> = vec![None; stuff_flags.len()];
    for p in 0..n {
        if segment[p].is_some() {
            continue;
        }
        let c = semantic[p] as usize;
        if !stuff_flags.get(c).copied().unwrap_or(false) {
            continue;
        }
        let id = *stuff_segment[c].get_or_insert_with(|| {
            segments.push((c as u32, false));
            segments.len() - 1
        });
        segment[p] = Some(id);
    }
    Ok(PanopticMap { segment, segments })
}

/// Point mask of each click's row.
pub fn infer_interactive(
    preds: &PredictionSet,
    scene: &Scene,
    th: &TaskThresholds,
) -> Vec<(Vec<usize>, f64)> {
    (0..preds.k_v)
        .map(|i| prompt_mask(preds, scene, preds.vision_row(i), th))
        .collect()
}

/// Point mask of each expression's row.
pub fn infer_referring(
    preds: &PredictionSet,
    scene: &Scene,
    th: &TaskThresholds,
) -> Vec<(Vec<usize>, f64)> {
    (0..preds.k_t)
        .map(|i| prompt_mask(preds, scene, preds.text_row(i), th))
        .collect()
}

/// Binary mask and its mean probability over predicted positives.
fn prompt_mask(
    preds: &PredictionSet,
    scene: &Scene,
    row: usize,
    th: &TaskThresholds,
) -> (Vec<usize>, f64) {
    let probs = point_probabilities(preds, scene, row);
    let points = binarize(&probs, th.binarize);
    let score = if points.is_empty() {
        0.0
    } else {
        points.iter().map(|&p| probs[p]).sum::<f64>() / points.len() as f64
    };
    (points, score)
}

/// Instances classified against an arbitrary vocabulary by similarity to
/// its name embeddings.
pub fn infer_openvocab(
    preds: &PredictionSet,
    scene: &Scene,
    e_open: &ClassEmbeddings,
    th: &TaskThresholds,
) -> Result<Vec<Instance>> {
    let unified = preds.f_out.select_rows(&(0..preds.m()).collect::<Vec<_>>());
    let prob = softmax_rows(&unified.matmul_t(&e_open.matrix)?);
    instances_from(preds, scene, &prob, &class_ids(scene, e_open)?, th)
}

/// Outputs of all six tasks for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutputs {
    pub panoptic: PanopticMap,
    pub semantic: Vec<u32>,
    pub instances: Vec<Instance>,
    pub interactive: Vec<(Vec<usize>, f64)>,
    pub referring: Vec<(Vec<usize>, f64)>,
    pub openvocab: Vec<Instance>,
}

/// Runs every pipeline on the same prediction set.
pub fn run_all(
    preds: &PredictionSet,
    scene: &Scene,
    e_cls: &ClassEmbeddings,
    e_open: &ClassEmbeddings,
    th: &TaskThresholds,
) -> Result<TaskOutputs> {
    let instances = infer_instances(preds, scene, e_cls, th)?;
    let semantic = infer_semantic(preds, scene, e_cls)?;
    let panoptic = infer_panoptic(&instances, &semantic, &scene.stuff_flags, th)?;
    Ok(TaskOutputs {
        panoptic,
        interactive: infer_interactive(preds, scene, th),
        referring: infer_referring(preds, scene, th),
        openvocab: infer_openvocab(preds, scene, e_open, th)?,
        semantic,
        instances,
    })
}

fn write_points(out: &mut String, points: &[usize]) {
    for p in points {
        write!(out, " {p}").unwrap();
    }
    out.push('\n');
}

impl TaskOutputs {
    /// Line-oriented export; see `docs/formats.md`.
    pub fn to_text(&self, scene: &Scene) -> String {
        let name = |c: u32| scene.class_names[c as usize].as_str();
        let mut out = String::from("uniseg3d-tasks\nversion 1\n");
        writeln!(out, "points {}", self.semantic.len()).unwrap();
        for (p, &s) in self.semantic.iter().enumerate() {
            let seg = self.panoptic.segment[p].map_or(-1, |s| s as i64);
            writeln!(out, "{s} {seg}").unwrap();
        }
        writeln!(out, "segments {}", self.panoptic.segments.len()).unwrap();
        for &(c, thing) in &self.panoptic.segments {
            writeln!(out, "{} {}", u8::from(thing), name(c)).unwrap();
        }
        for (label, list) in [
            ("instances", &self.instances),
            ("openvocab", &self.openvocab),
        ] {
            writeln!(out, "{label} {}", list.len()).unwrap();
            for i in list {
                write!(
                    out,
                    "{} {} {}",
                    name(i.class),
                    crate::textio::fmt_f64(i.score),
                    i.points.len()
                )
                .unwrap();
                write_points(&mut out, &i.points);
            }
        }
        for (label, list) in [
            ("interactive", &self.interactive),
            ("referring", &self.referring),
        ] {
            writeln!(out, "{label} {}", list.len()).unwrap();
            for (points, score) in list {
                write!(out, "{} {}", crate::textio::fmt_f64(*score), points.len()).unwrap();
                write_points(&mut out, points);
            }
        }
        out.push_str("end\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::embed_class_names;

    /// Four superpoints of two points each.
    fn scene() -> Scene {
        Scene {
            points: (0..8).map(|i| [i as f64, 0.0, 0.0]).collect(),
            colors: vec![[0.5; 3]; 8],
            instance_id: vec![-1, -1, 0, 0, 1, 1, -1, -1],
            semantic_id: vec![0, 0, 1, 1, 1, 1, 0, 0],
            superpoint_id: vec![0, 0, 1, 1, 2, 2, 3, 3],
            class_names: vec!["floor".into(), "chair".into()],
            stuff_flags: vec![true, false],
        }
    }

    /// Unified rows are padded with empty no-object rows up to one query
    /// per superpoint; the last `k_v` given rows are click rows.
    fn preds(mask_rows: &[Vec<f64>], cls_rows: &[Vec<f64>], k_v: usize) -> PredictionSet {
        let split = mask_rows.len() - k_v;
        let mut masks = mask_rows[..split].to_vec();
        let mut cls = cls_rows[..split].to_vec();
        while masks.len() < 4 {
            masks.push(vec![-HI; 4]);
            cls.push(vec![0.0, 0.0, 1.0]);
        }
        masks.extend_from_slice(&mask_rows[split..]);
        cls.extend_from_slice(&cls_rows[split..]);
        let n = masks.len();
        PredictionSet {
            f_out: Tensor::zeros(n, 16),
            mask_logits: Tensor::from_rows(&masks).unwrap(),
            cls_logits: Tensor::zeros(n, 3),
            cls_prob: Tensor::from_rows(&cls).unwrap(),
            sampled: vec![0, 1, 2, 3],
            num_superpoints: 4,
            k_v,
            k_t: 0,
        }
    }

    fn e_cls() -> ClassEmbeddings {
        embed_class_names(&["floor", "chair"], 16).unwrap()
    }

    const HI: f64 = 30.0;

    #[test]
    fn no_object_rows_are_dropped_and_duplicates_kept() {
        let p = preds(
            &[
                vec![-HI, HI, -HI, -HI],
                vec![-HI, HI, -HI, -HI],
                vec![-HI, -HI, HI, -HI],
            ],
            &[
                vec![0.0, 0.9, 0.1],
                vec![0.0, 0.9, 0.1],
                vec![0.0, 0.2, 0.8],
            ],
            0,
        );
        let inst = infer_instances(&p, &scene(), &e_cls(), &TaskThresholds::default()).unwrap();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].points, vec![2, 3]);
        assert_eq!(inst[0].points, inst[1].points);
        assert_eq!(inst[0].class, 1);
    }

    #[test]
    fn semantic_examples() {
        let all = preds(&[vec![HI; 4]], &[vec![0.0, 1.0, 0.0]], 0);
        assert_eq!(
            infer_semantic(&all, &scene(), &e_cls()).unwrap(),
            vec![1; 8]
        );
        let split = preds(
            &[vec![HI, -HI, -HI, HI], vec![-HI, HI, HI, -HI]],
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            0,
        );
        assert_eq!(
            infer_semantic(&split, &scene(), &e_cls()).unwrap(),
            vec![0, 0, 1, 1, 1, 1, 0, 0]
        );
    }

    #[test]
    fn panoptic_rules() {
        let th = TaskThresholds {
            min_points: 1,
            ..Default::default()
        };
        let stuff = [true, false];
        let semantic = vec![0, 0, 1, 1, 1, 1, 0, 0];
        let empty = infer_panoptic(&[], &semantic, &stuff, &th).unwrap();
        assert_eq!(empty.segments, vec![(0, false)]);
        assert_eq!(
            empty.segment,
            vec![Some(0), Some(0), None, None, None, None, Some(0), Some(0)]
        );

        let a = Instance {
            points: vec![2, 3, 4],
            class: 1,
            score: 0.6,
            query: 0,
        };
        let b = Instance {
            points: vec![4, 5],
            class: 1,
            score: 0.9,
            query: 1,
        };
        let pan = infer_panoptic(&[a, b], &semantic, &stuff, &th).unwrap();
        assert_eq!(pan.segment[4], Some(0));
        assert_eq!(pan.segments[0], (1, true));
        assert_eq!(pan.segment_points()[1], vec![2, 3]);

        let strict = TaskThresholds::default();
        let small = Instance {
            points: vec![2, 3],
            class: 1,
            score: 0.9,
            query: 0,
        };
        let pan = infer_panoptic(&[small], &semantic, &stuff, &strict).unwrap();
        assert!(pan.segments.iter().all(|s| !s.1));
    }

    #[test]
    fn prompt_rows_give_independent_masks() {
        let p = preds(
            &[
                vec![-HI; 4],
                vec![-HI, HI, -HI, -HI],
                vec![-HI, HI, -HI, -HI],
            ],
            &vec![vec![0.0, 0.0, 1.0]; 3],
            2,
        );
        let masks = infer_interactive(&p, &scene(), &TaskThresholds::default());
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0].0, vec![2, 3]);
        assert_eq!(masks[0], masks[1]);
        assert!(masks.iter().all(|m| m.0.iter().all(|&i| i < 8)));
    }

    #[test]
    fn open_vocabulary_equal_to_training_vocabulary_agrees() {
        let e = e_cls();
        let mut p = preds(
            &[vec![-HI, HI, -HI, -HI], vec![HI, -HI, -HI, HI]],
            &vec![vec![0.0; 3]; 2],
            0,
        );
        let no_obj = e.matrix.row_to_vec(2);
        p.f_out = Tensor::from_rows(&[
            e.matrix.row_to_vec(1),
            e.matrix.row_to_vec(0),
            no_obj.clone(),
            no_obj,
        ])
        .unwrap()
        .scale(20.0);
        p.cls_prob = softmax_rows(&p.f_out.matmul_t(&e.matrix).unwrap());
        let th = TaskThresholds::default();
        let closed = infer_instances(&p, &scene(), &e, &th).unwrap();
        let open = infer_openvocab(&p, &scene(), &e, &th).unwrap();
        assert_eq!(closed, open);
        assert_eq!(closed.len(), 2);
    }
}
