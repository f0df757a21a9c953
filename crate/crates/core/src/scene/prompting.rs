use rand::seq::SliceRandom;
use rand::Rng;

use super::{dist2, InstanceInfo, Scene};
use crate::error::{Error, Result};
use crate::numerics::rng;

/// Where a simulated click lands on its instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClickStrategy {
    /// Point nearest the instance centroid.
    Center,
    /// The `floor(r_d * n)`-th nearest point to the centroid (1-based,
    /// clamped to `[1, n]`).
    Quantile(f64),
    /// Uniform over the instance's points.
    Random,
}

/// Index of the clicked point.
pub fn sample_vision_prompt(
    scene: &Scene,
    instance: i32,
    strategy: ClickStrategy,
    seed: u64,
) -> Result<usize> {
    let info = scene.instance(instance)?;
    Ok(click_on(scene, &info, strategy, seed))
}

pub(crate) fn click_on(
    scene: &Scene,
    info: &InstanceInfo,
    strategy: ClickStrategy,
    seed: u64,
) -> usize {
    let n = info.points.len();
    match strategy {
        ClickStrategy::Random => {
            let mut r = rng::stream(seed, 0xc11c);
            info.points[r.random_range(0..n)]
        }
        ClickStrategy::Center => nearest_to_centroid(scene, info, 1),
        ClickStrategy::Quantile(rd) => {
            let rank = ((rd * n as f64).floor() as usize).clamp(1, n);
            nearest_to_centroid(scene, info, rank)
        }
    }
}

fn nearest_to_centroid(scene: &Scene, info: &InstanceInfo, rank: usize) -> usize {
    let mut order: Vec<(f64, usize)> = info
        .points
        .iter()
        .map(|&p| (dist2(&scene.points[p], &info.centroid), p))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order[rank - 1].1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    NearestTo,
}

impl Relation {
    const ALL: [Relation; 5] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::InFrontOf,
        Relation::Behind,
        Relation::NearestTo,
    ];

    fn tokens(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::InFrontOf => &["in", "front", "of"],
            Relation::Behind => &["behind"],
            Relation::NearestTo => &["nearest", "to"],
        }
    }

    /// The single candidate this relation picks out relative to `anchor`.
    fn resolve<'a>(
        self,
        candidates: &[&'a InstanceInfo],
        anchor: &InstanceInfo,
    ) -> Option<&'a InstanceInfo> {
        let a = anchor.centroid;
        let side = |f: &dyn Fn(&[f64; 3]) -> bool| {
            let hits: Vec<_> = candidates.iter().filter(|c| f(&c.centroid)).collect();
            (hits.len() == 1).then(|| *hits[0])
        };
        match self {
            Relation::LeftOf => side(&|c| c[0] < a[0]),
            Relation::RightOf => side(&|c| c[0] > a[0]),
            Relation::InFrontOf => side(&|c| c[1] < a[1]),
            Relation::Behind => side(&|c| c[1] > a[1]),
            Relation::NearestTo => {
                let mut d: Vec<(f64, &InstanceInfo)> = candidates
                    .iter()
                    .map(|c| (dist2(&c.centroid, &a), *c))
                    .collect();
                d.sort_by(|x, y| x.0.total_cmp(&y.0));
                match d.as_slice() {
                    [only] => Some(only.1),
                    [first, second, ..] if second.0 - first.0 > 1e-6 => Some(first.1),
                    _ => None,
                }
            }
        }
    }
}

/// Template expression that singles out `instance`:
/// `the <class>` when its class is unique in the scene, otherwise
/// `the <class> <relation> the <anchor>` with a uniquely named anchor.
pub fn make_text_expression(scene: &Scene, instance: i32, seed: u64) -> Result<Vec<String>> {
    let all = scene.instances();
    let target = all
        .iter()
        .find(|i| i.id == instance)
        .ok_or_else(|| Error::Lookup(format!("instance {instance}")))?;
    let class_name = &scene.class_names[target.class as usize];
    let same: Vec<&InstanceInfo> = all.iter().filter(|i| i.class == target.class).collect();
    if same.len() == 1 {
        return Ok(vec!["the".into(), class_name.clone()]);
    }
    let mut anchors: Vec<&InstanceInfo> = all
        .iter()
        .filter(|a| {
            a.class != target.class && all.iter().filter(|b| b.class == a.class).count() == 1
        })
        .collect();
    let mut relations = Relation::ALL.to_vec();
    let mut r = rng::stream(seed, 0x7e47);
    anchors.shuffle(&mut r);
    relations.shuffle(&mut r);
    for anchor in anchors {
        for &rel in &relations {
            if rel.resolve(&same, anchor).map(|c| c.id) == Some(instance) {
                let mut tokens = vec!["the".to_string(), class_name.clone()];
                tokens.extend(rel.tokens().iter().map(|t| t.to_string()));
                tokens.push("the".into());
                tokens.push(scene.class_names[anchor.class as usize].clone());
                return Ok(tokens);
            }
        }
    }
    Err(Error::Ambiguity(instance))
}

/// Interprets a template expression against `scene`; `None` when it does not
/// parse or does not pick out exactly one instance.
pub fn resolve_expression(scene: &Scene, tokens: &[String]) -> Option<i32> {
    let all = scene.instances();
    let class_of = |name: &str| {
        scene
            .class_names
            .iter()
            .position(|c| c == name)
            .map(|c| c as u32)
    };
    let [the, class, rest @ ..] = tokens else {
        return None;
    };
    if the != "the" {
        return None;
    }
    let class = class_of(class)?;
    let same: Vec<&InstanceInfo> = all.iter().filter(|i| i.class == class).collect();
    if rest.is_empty() {
        return (same.len() == 1).then(|| same[0].id);
    }
    let rel_len = rest.len().checked_sub(2)?;
    let (rel_tokens, tail) = rest.split_at(rel_len);
    let rel = Relation::ALL.into_iter().find(|r| {
        r.tokens()
            .iter()
            .copied()
            .eq(rel_tokens.iter().map(String::as_str))
    })?;
    if tail[0] != "the" {
        return None;
    }
    let anchor_class = class_of(&tail[1])?;
    let anchors: Vec<&InstanceInfo> = all.iter().filter(|i| i.class == anchor_class).collect();
    if anchors.len() != 1 {
        return None;
    }
    rel.resolve(&same, anchors[0]).map(|c| c.id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Click {
    pub point: usize,
    pub target: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    pub tokens: Vec<String>,
    pub target: i32,
}

/// Clicks and expressions for one scene, paired by target instance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptSet {
    pub clicks: Vec<Click>,
    pub expressions: Vec<Expression>,
    /// `(click index, expression index)` pairs with equal targets.
    pub pairing: Vec<(usize, usize)>,
}

impl PromptSet {
    /// One click and one expression per instance in `targets`, paired in
    /// order.
    pub fn for_instances(
        scene: &Scene,
        targets: &[i32],
        strategy: ClickStrategy,
        seed: u64,
    ) -> Result<Self> {
        let mut set = PromptSet::default();
        for (i, &t) in targets.iter().enumerate() {
            let s = rng::split(seed, i as u64);
            set.clicks.push(Click {
                point: sample_vision_prompt(scene, t, strategy, s)?,
                target: t,
            });
            set.expressions.push(Expression {
                tokens: make_text_expression(scene, t, s)?,
                target: t,
            });
            set.pairing.push((i, i));
        }
        Ok(set)
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        for c in &self.clicks {
            if scene.instance_id.get(c.point) != Some(&c.target) {
                return Err(Error::contract(format!(
                    "click on point {} does not hit instance {}",
                    c.point, c.target
                )));
            }
        }
        for &(c, e) in &self.pairing {
            let (Some(click), Some(expr)) = (self.clicks.get(c), self.expressions.get(e)) else {
                return Err(Error::contract("pairing index out of range"));
            };
            if click.target != expr.target {
                return Err(Error::contract("paired prompts target different instances"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneRecipe};
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    /// Hand-built scene: one table at the origin and chairs at given x.
    fn row_scene(chairs: &[(f64, f64)]) -> Scene {
        let mut s = Scene {
            points: vec![],
            colors: vec![],
            instance_id: vec![],
            semantic_id: vec![],
            superpoint_id: vec![],
            class_names: super::super::CATALOGUE
                .iter()
                .map(|c| c.name.to_string())
                .collect(),
            stuff_flags: super::super::CATALOGUE.iter().map(|c| c.stuff).collect(),
        };
        let mut add = |x: f64, y: f64, inst: i32, class: u32| {
            for dx in [-0.1, 0.1] {
                for dy in [-0.1, 0.1] {
                    s.points.push([x + dx, y + dy, 0.5]);
                    s.colors.push([0.5; 3]);
                    s.instance_id.push(inst);
                    s.semantic_id.push(class);
                    s.superpoint_id.push(inst as u32);
                }
            }
        };
        add(0.0, 0.0, 0, 3);
        for (i, &(x, y)) in chairs.iter().enumerate() {
            add(x, y, i as i32 + 1, 2);
        }
        s
    }

    #[test]
    fn chair_right_of_the_table() {
        let scene = row_scene(&[(-1.0, 0.0), (1.0, 0.3)]);
        let mut found = false;
        for seed in 0..20 {
            let t = make_text_expression(&scene, 2, seed).unwrap();
            assert_eq!(resolve_expression(&scene, &t), Some(2));
            found |= t == toks("the chair right of the table");
        }
        assert!(found);
    }

    #[test]
    fn unique_class_is_named_directly() {
        let scene = row_scene(&[(-1.0, 0.0), (1.0, 0.3)]);
        assert_eq!(
            make_text_expression(&scene, 0, 3).unwrap(),
            toks("the table")
        );
    }

    #[test]
    fn unresolvable_target_is_ambiguity_error() {
        // two chairs stacked at the same spot: no relation separates them
        let scene = row_scene(&[(1.0, 0.5), (1.0, 0.5)]);
        assert!(matches!(
            make_text_expression(&scene, 2, 0),
            Err(Error::Ambiguity(2))
        ));
    }

    #[test]
    fn generated_expressions_resolve_to_their_target() {
        let recipe = SceneRecipe::default().with_objects(&[
            ("chair", 3),
            ("table", 1),
            ("cabinet", 2),
            ("sofa", 1),
        ]);
        for seed in 0..6 {
            let scene = generate_scene(seed, &recipe).unwrap();
            for inst in scene.instances() {
                if let Ok(t) = make_text_expression(&scene, inst.id, seed) {
                    assert_eq!(resolve_expression(&scene, &t), Some(inst.id), "{t:?}");
                }
            }
        }
    }

    #[test]
    fn center_click_on_symmetric_cube_prefers_low_index() {
        let scene = row_scene(&[(1.0, 0.0)]);
        // four symmetric points around the table centroid, all equidistant
        assert_eq!(
            sample_vision_prompt(&scene, 0, ClickStrategy::Center, 0).unwrap(),
            0
        );
        assert_eq!(
            sample_vision_prompt(&scene, 0, ClickStrategy::Quantile(0.0), 0).unwrap(),
            0
        );
    }

    #[test]
    fn quantile_one_is_the_farthest_point() {
        let scene = generate_scene(1, &SceneRecipe::default()).unwrap();
        let info = scene.instance(0).unwrap();
        let p = sample_vision_prompt(&scene, 0, ClickStrategy::Quantile(1.0), 0).unwrap();
        let d = dist2(&scene.points[p], &info.centroid);
        assert!(info
            .points
            .iter()
            .all(|&q| dist2(&scene.points[q], &info.centroid) <= d));
    }

    #[test]
    fn random_click_is_seeded_and_on_target() {
        let scene = generate_scene(1, &SceneRecipe::default()).unwrap();
        let a = sample_vision_prompt(&scene, 1, ClickStrategy::Random, 5).unwrap();
        assert_eq!(
            a,
            sample_vision_prompt(&scene, 1, ClickStrategy::Random, 5).unwrap()
        );
        assert_eq!(scene.instance_id[a], 1);
        assert!(matches!(
            sample_vision_prompt(&scene, 99, ClickStrategy::Random, 5),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn prompt_sets_satisfy_pairing_invariants() {
        let scene = generate_scene(2, &SceneRecipe::default()).unwrap();
        let ids: Vec<i32> = scene.instances().iter().map(|i| i.id).collect();
        let set = PromptSet::for_instances(&scene, &ids, ClickStrategy::Random, 1).unwrap();
        set.validate(&scene).unwrap();
        assert_eq!(set.pairing.len(), ids.len());
    }
}
