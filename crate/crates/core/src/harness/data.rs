//! Scene sets and the per-scene data derived once before training or
//! evaluation.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::backbone::SceneContext;
use crate::error::{Error, Result};
use crate::numerics::rng;
use crate::prompts::{embed_class_names, ClassEmbeddings};
use crate::scene::{
    generate_pseudo_masks, generate_scene, load_scene, save_scene, InstanceInfo, Scene,
    SceneRecipe, VocabularySplit,
};

const PLACEMENT_RETRIES: u64 = 16;

/// A furnished room whose contents vary with the seed.
pub fn recipe_for(seed: u64, num_points: usize) -> SceneRecipe {
    let mut r = rng::stream(seed, 0x5ce);
    let mut objects = vec![("chair", r.random_range(1..=2usize))];
    for (class, p) in [
        ("table", 0.6),
        ("cabinet", 0.6),
        ("sofa", 0.5),
        ("bookshelf", 0.5),
        ("bed", 0.25),
        ("lamp", 0.6),
        ("bin", 0.4),
    ] {
        if r.random_bool(p) {
            objects.push((class, 1));
        }
    }
    SceneRecipe {
        num_points,
        ..SceneRecipe::default()
    }
    .with_objects(&objects)
}

/// Scene `index` of a set; placement failures retry with a derived seed.
pub fn generate_set_scene(seed: u64, index: u64, num_points: usize) -> Result<Scene> {
    let mut last = None;
    for attempt in 0..PLACEMENT_RETRIES {
        let s = rng::split(rng::split(seed, index), attempt);
        match generate_scene(s, &recipe_for(s, num_points)) {
            Ok(scene) => return Ok(scene),
            Err(e @ Error::Placement(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Train scenes use indices `0..n_train`, validation scenes continue after a
/// gap so the two sets never share a seed.
pub fn generate_split(
    seed: u64,
    n_train: usize,
    n_val: usize,
    num_points: usize,
) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let train = (0..n_train as u64)
        .map(|i| generate_set_scene(seed, i, num_points))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..n_val as u64)
        .map(|i| generate_set_scene(seed, 1 << 32 | i, num_points))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

pub fn scene_file(dir: &Path, split: &str, i: usize) -> PathBuf {
    dir.join(format!("{split}_{i:03}.scene"))
}

pub fn save_split(dir: &Path, train: &[Scene], val: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (split, scenes) in [("train", train), ("val", val)] {
        for (i, s) in scenes.iter().enumerate() {
            save_scene(s, &scene_file(dir, split, i))?;
        }
    }
    Ok(())
}

/// All `<split>_NNN.scene` files in `dir`, in index order.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    loop {
        let path = scene_file(dir, split, out.len());
        if !path.exists() {
            return Ok(out);
        }
        out.push(load_scene(&path)?);
    }
}

/// Base (closed-set) and full (open) vocabularies of a scene set.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub class_names: Vec<String>,
    pub stuff_flags: Vec<bool>,
    pub split: VocabularySplit,
    pub closed: ClassEmbeddings,
    pub open: ClassEmbeddings,
}

impl Vocabulary {
    pub fn new(scenes: &[Scene], novel: &[String], d_out: usize) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::contract("empty scene set"))?;
        if scenes
            .iter()
            .any(|s| s.class_names != first.class_names || s.stuff_flags != first.stuff_flags)
        {
            return Err(Error::contract("scenes disagree on the class table"));
        }
        let novel: Vec<&str> = novel.iter().map(String::as_str).collect();
        let split = VocabularySplit::new(&first.class_names, &novel)?;
        let names = |ids: &[u32]| {
            ids.iter()
                .map(|&c| first.class_names[c as usize].clone())
                .collect::<Vec<_>>()
        };
        let closed = embed_class_names(&names(&split.base), d_out)?;
        let open = embed_class_names(&first.class_names, d_out)?;
        Ok(Self {
            class_names: first.class_names.clone(),
            stuff_flags: first.stuff_flags.clone(),
            split,
            closed,
            open,
        })
    }

    /// Row of `class` in the closed embedding, if it is a base class.
    pub fn closed_index(&self, class: u32) -> Option<usize> {
        self.split.base.iter().position(|&c| c == class)
    }
}

/// A labelled segment: a base thing instance or all points of a base stuff
/// class.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSegment {
    pub instance: Option<i32>,
    pub class: u32,
    pub points: Vec<usize>,
    /// Share of each superpoint's points inside the segment.
    pub superpoint_share: Vec<f64>,
}

/// Per-scene data shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    pub ctx: SceneContext,
    /// Thing instances of every class, novel included.
    pub things: Vec<InstanceInfo>,
    /// Base thing instances followed by base stuff segments.
    pub segments: Vec<GtSegment>,
    /// Unsupervised masks as superpoint shares.
    pub pseudo: Vec<Vec<f64>>,
    /// `false` on points of novel classes.
    pub base_points: Vec<bool>,
}

fn superpoint_share(scene: &Scene, points: &[usize]) -> Vec<f64> {
    let m = scene.num_superpoints();
    let mut hit = vec![0.0; m];
    let mut size = vec![0.0; m];
    for &s in &scene.superpoint_id {
        size[s as usize] += 1.0;
    }
    for &p in points {
        hit[scene.superpoint_id[p] as usize] += 1.0;
    }
    hit.iter()
        .zip(&size)
        .map(|(h, s)| if *s > 0.0 { h / s } else { 0.0 })
        .collect()
}

impl PreparedScene {
    pub fn new(scene: Scene, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        scene.validate()?;
        let ctx = SceneContext::new(&scene)?;
        let things: Vec<InstanceInfo> = scene
            .instances()
            .into_iter()
            .filter(|i| !scene.stuff_flags[i.class as usize])
            .collect();
        let mut segments: Vec<GtSegment> = things
            .iter()
            .filter(|i| !vocab.split.is_novel(i.class))
            .map(|i| GtSegment {
                instance: Some(i.id),
                class: i.class,
                superpoint_share: superpoint_share(&scene, &i.points),
                points: i.points.clone(),
            })
            .collect();
        for c in 0..scene.num_classes() as u32 {
            if !scene.stuff_flags[c as usize] || vocab.split.is_novel(c) {
                continue;
            }
            let points: Vec<usize> = (0..scene.len())
                .filter(|&p| scene.semantic_id[p] == c)
                .collect();
            if !points.is_empty() {
                segments.push(GtSegment {
                    instance: None,
                    class: c,
                    superpoint_share: superpoint_share(&scene, &points),
                    points,
                });
            }
        }
        let pseudo = generate_pseudo_masks(&scene, seed)
            .masks
            .iter()
            .map(|m| superpoint_share(&scene, m))
            .collect();
        let base_points = scene
            .semantic_id
            .iter()
            .map(|&c| !vocab.split.is_novel(c))
            .collect();
        Ok(Self {
            scene,
            ctx,
            things,
            segments,
            pseudo,
            base_points,
        })
    }

    pub fn segment_of_instance(&self, id: i32) -> Option<&GtSegment> {
        self.segments.iter().find(|s| s.instance == Some(id))
    }
}

pub fn prepare_all(
    scenes: Vec<Scene>,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<PreparedScene>> {
    scenes
        .into_iter()
        .enumerate()
        .map(|(i, s)| PreparedScene::new(s, vocab, rng::split(seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_sets_are_reproducible_and_disjoint() {
        let (a, va) = generate_split(3, 2, 1, 512).unwrap();
        let (b, _) = generate_split(3, 2, 1, 512).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_ne!(a[0], va[0]);
    }

    #[test]
    fn split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val) = generate_split(4, 2, 1, 300).unwrap();
        save_split(dir.path(), &train, &val).unwrap();
        assert_eq!(load_split(dir.path(), "train").unwrap(), train);
        assert_eq!(load_split(dir.path(), "val").unwrap(), val);
        assert!(load_split(dir.path(), "test").unwrap().is_empty());
    }

    #[test]
    fn segments_cover_base_points_once() {
        let (train, _) = generate_split(5, 1, 0, 1024).unwrap();
        let vocab = Vocabulary::new(&train, &["lamp".into(), "bin".into()], 16).unwrap();
        let prep = PreparedScene::new(train[0].clone(), &vocab, 1).unwrap();
        let mut count = vec![0; prep.scene.len()];
        for s in &prep.segments {
            for &p in &s.points {
                count[p] += 1;
            }
            let total: f64 = s.superpoint_share.iter().sum();
            assert!(total > 0.0);
        }
        for (c, &base) in count.iter().zip(&prep.base_points) {
            assert_eq!(*c, usize::from(base));
        }
        assert_eq!(vocab.closed.num_classes(), 8);
        assert_eq!(vocab.open.num_classes(), 10);
    }
}
