//! Synthetic labelled point-cloud rooms and everything derived from them:
//! superpoints, unsupervised pseudo masks, click and text prompts, file IO.

mod generate;
mod io;
pub mod knn;
mod prompting;
mod pseudo;
mod superpoints;

use std::collections::BTreeMap;

pub use generate::{generate_scene, ObjectSpec, SceneRecipe};
pub use io::{load_scene, read_scene, save_scene, write_scene, SCENE_FORMAT_VERSION};
pub use prompting::{
    make_text_expression, resolve_expression, sample_vision_prompt, Click, ClickStrategy,
    Expression, PromptSet,
};
pub use pseudo::{generate_pseudo_masks, PseudoMaskSet};
pub use superpoints::compute_superpoints;

use crate::error::{Error, Result};

/// Fixed class catalogue shared by every generated scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct ClassDef {
    pub name: &'static str,
    pub stuff: bool,
    pub color: [f64; 3],
    pub shape: Option<Shape>,
}

pub const CATALOGUE: &[ClassDef] = &[
    ClassDef {
        name: "floor",
        stuff: true,
        color: [0.55, 0.45, 0.35],
        shape: None,
    },
    ClassDef {
        name: "wall",
        stuff: true,
        color: [0.85, 0.85, 0.80],
        shape: None,
    },
    ClassDef {
        name: "chair",
        stuff: false,
        color: [0.80, 0.20, 0.20],
        shape: Some(Shape::Box {
            size: [0.5, 0.5, 0.9],
        }),
    },
    ClassDef {
        name: "table",
        stuff: false,
        color: [0.60, 0.40, 0.15],
        shape: Some(Shape::Box {
            size: [1.2, 0.8, 0.75],
        }),
    },
    ClassDef {
        name: "cabinet",
        stuff: false,
        color: [0.25, 0.45, 0.85],
        shape: Some(Shape::Box {
            size: [0.6, 0.5, 1.1],
        }),
    },
    ClassDef {
        name: "sofa",
        stuff: false,
        color: [0.25, 0.70, 0.30],
        shape: Some(Shape::Box {
            size: [1.6, 0.8, 0.8],
        }),
    },
    ClassDef {
        name: "bed",
        stuff: false,
        color: [0.85, 0.70, 0.30],
        shape: Some(Shape::Box {
            size: [2.0, 1.4, 0.55],
        }),
    },
    ClassDef {
        name: "bookshelf",
        stuff: false,
        color: [0.50, 0.25, 0.60],
        shape: Some(Shape::Box {
            size: [1.0, 0.35, 1.6],
        }),
    },
    ClassDef {
        name: "lamp",
        stuff: false,
        color: [0.95, 0.95, 0.30],
        shape: Some(Shape::Cylinder {
            radius: 0.18,
            height: 1.5,
        }),
    },
    ClassDef {
        name: "bin",
        stuff: false,
        color: [0.15, 0.15, 0.15],
        shape: Some(Shape::Cylinder {
            radius: 0.2,
            height: 0.5,
        }),
    },
];

/// Catalogue classes held out of training for open-vocabulary evaluation.
pub const DEFAULT_NOVEL: &[&str] = &["lamp", "bin"];

pub fn catalogue_index(name: &str) -> Option<usize> {
    CATALOGUE.iter().position(|c| c.name == name)
}

/// A labelled point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    /// `-1` for stuff points.
    pub instance_id: Vec<i32>,
    pub semantic_id: Vec<u32>,
    pub superpoint_id: Vec<u32>,
    pub class_names: Vec<String>,
    pub stuff_flags: Vec<bool>,
}

/// One thing instance of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceInfo {
    pub id: i32,
    pub class: u32,
    pub points: Vec<usize>,
    pub centroid: [f64; 3],
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_superpoints(&self) -> usize {
        self.superpoint_id
            .iter()
            .map(|&s| s as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Point indices per superpoint.
    pub fn superpoint_members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_superpoints()];
        for (p, &s) in self.superpoint_id.iter().enumerate() {
            groups[s as usize].push(p);
        }
        groups
    }

    /// Thing instances in ascending id order.
    pub fn instances(&self) -> Vec<InstanceInfo> {
        let mut by_id: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (p, &id) in self.instance_id.iter().enumerate() {
            if id >= 0 {
                by_id.entry(id).or_default().push(p);
            }
        }
        by_id
            .into_iter()
            .map(|(id, points)| {
                let class = self.semantic_id[points[0]];
                let centroid = centroid(&self.points, &points);
                InstanceInfo {
                    id,
                    class,
                    points,
                    centroid,
                }
            })
            .collect()
    }

    pub fn instance(&self, id: i32) -> Result<InstanceInfo> {
        self.instances()
            .into_iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Lookup(format!("instance {id}")))
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.colors.len() != n
            || self.instance_id.len() != n
            || self.semantic_id.len() != n
            || self.superpoint_id.len() != n
        {
            return Err(Error::contract("per-point arrays differ in length"));
        }
        if self.class_names.len() != self.stuff_flags.len() {
            return Err(Error::contract(
                "class table and stuff flags differ in length",
            ));
        }
        let k = self.class_names.len() as u32;
        if let Some(p) = self.semantic_id.iter().position(|&s| s >= k) {
            return Err(Error::contract(format!(
                "point {p} has semantic id out of range"
            )));
        }
        let m = self.num_superpoints();
        let mut seen = vec![false; m];
        for &s in &self.superpoint_id {
            seen[s as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("superpoint ids are not contiguous"));
        }
        let mut inst_class: BTreeMap<i32, u32> = BTreeMap::new();
        for p in 0..n {
            let (inst, sem) = (self.instance_id[p], self.semantic_id[p]);
            if inst < 0 {
                continue;
            }
            if self.stuff_flags[sem as usize] {
                return Err(Error::contract(format!(
                    "stuff point {p} carries instance {inst}"
                )));
            }
            if *inst_class.entry(inst).or_insert(sem) != sem {
                return Err(Error::contract(format!("instance {inst} mixes classes")));
            }
        }
        Ok(())
    }
}

pub(crate) fn centroid(points: &[[f64; 3]], idx: &[usize]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for &i in idx {
        for d in 0..3 {
            c[d] += points[i][d];
        }
    }
    let n = idx.len().max(1) as f64;
    c.map(|v| v / n)
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

/// Base/novel partition of a class table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabularySplit {
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
}

impl VocabularySplit {
    pub fn new(class_names: &[String], novel_names: &[&str]) -> Result<Self> {
        for n in novel_names {
            if !class_names.iter().any(|c| c == n) {
                return Err(Error::Lookup(format!("novel class {n}")));
            }
        }
        let (novel, base): (Vec<u32>, Vec<u32>) = (0..class_names.len() as u32)
            .partition(|&c| novel_names.contains(&class_names[c as usize].as_str()));
        Ok(Self { base, novel })
    }

    pub fn is_novel(&self, class: u32) -> bool {
        self.novel.contains(&class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_split_partitions_classes() {
        let names: Vec<String> = CATALOGUE.iter().map(|c| c.name.to_string()).collect();
        let split = VocabularySplit::new(&names, DEFAULT_NOVEL).unwrap();
        assert_eq!(split.base.len() + split.novel.len(), names.len());
        assert!(split.base.iter().all(|b| !split.novel.contains(b)));
        assert!(VocabularySplit::new(&names, &["unicorn"]).is_err());
    }
}
