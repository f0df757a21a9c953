use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{catalogue_index, compute_superpoints, Scene, Shape, CATALOGUE};
use crate::error::{Error, Result};
use crate::numerics::rng;

const PLACEMENT_RETRIES: usize = 200;
const PLACEMENT_GAP: f64 = 0.15;
const WALL_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub class: String,
    pub count: usize,
}

/// What to put in a generated room.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    /// Room extent along x and y, meters.
    pub room: [f64; 2],
    pub wall_height: f64,
    pub num_points: usize,
    pub objects: Vec<ObjectSpec>,
    /// Share of the point budget spent on floor and walls.
    pub stuff_fraction: f64,
    pub color_noise: f64,
    pub superpoint_target: usize,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            room: [5.0, 4.0],
            wall_height: 1.2,
            num_points: 2048,
            objects: [
                ("chair", 2),
                ("table", 1),
                ("cabinet", 1),
                ("sofa", 1),
                ("lamp", 1),
            ]
            .into_iter()
            .map(|(c, n)| ObjectSpec {
                class: c.into(),
                count: n,
            })
            .collect(),
            stuff_fraction: 0.35,
            color_noise: 0.03,
            superpoint_target: 48,
        }
    }
}

impl SceneRecipe {
    pub fn with_objects(mut self, objects: &[(&str, usize)]) -> Self {
        self.objects = objects
            .iter()
            .map(|&(c, n)| ObjectSpec {
                class: c.into(),
                count: n,
            })
            .collect();
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    class: usize,
    min: [f64; 2],
    max: [f64; 2],
    shape: Shape,
    /// Box footprint after an optional quarter turn.
    size: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    Floor,
    Wall { axis: usize, at: f64 },
    BoxTop(usize),
    BoxSide { obj: usize, axis: usize, high: bool },
    CylSide(usize),
    CylTop(usize),
}

/// Builds a furnished room. Pure function of `(seed, recipe)`.
pub fn generate_scene(seed: u64, recipe: &SceneRecipe) -> Result<Scene> {
    if recipe.num_points == 0 {
        return Err(Error::contract("point budget must be positive"));
    }
    let mut layout_rng = rng::stream(seed, 1);
    let placed = place_objects(recipe, &mut layout_rng)?;

    let [room_x, room_y] = recipe.room;
    let h = recipe.wall_height;
    let mut stuff: Vec<(Surface, f64)> = vec![(Surface::Floor, room_x * room_y)];
    for (axis, len) in [(0, room_y), (1, room_x)] {
        let far = if axis == 0 { room_x } else { room_y };
        stuff.push((Surface::Wall { axis, at: 0.0 }, len * h));
        stuff.push((Surface::Wall { axis, at: far }, len * h));
    }
    let mut things: Vec<(Surface, f64)> = Vec::new();
    for (o, p) in placed.iter().enumerate() {
        match p.shape {
            Shape::Box { .. } => {
                let [sx, sy, sz] = p.size;
                things.push((Surface::BoxTop(o), sx * sy));
                for high in [false, true] {
                    things.push((
                        Surface::BoxSide {
                            obj: o,
                            axis: 0,
                            high,
                        },
                        sy * sz,
                    ));
                    things.push((
                        Surface::BoxSide {
                            obj: o,
                            axis: 1,
                            high,
                        },
                        sx * sz,
                    ));
                }
            }
            Shape::Cylinder { radius, height } => {
                things.push((Surface::CylSide(o), 2.0 * PI * radius * height));
                things.push((Surface::CylTop(o), PI * radius * radius));
            }
        }
    }

    let n = recipe.num_points;
    let stuff_budget = if things.is_empty() {
        n
    } else {
        ((n as f64) * recipe.stuff_fraction).round() as usize
    };
    let mut counts = apportion(stuff_budget, &stuff.iter().map(|s| s.1).collect::<Vec<_>>());
    counts.extend(apportion(
        n - stuff_budget,
        &things.iter().map(|s| s.1).collect::<Vec<_>>(),
    ));

    let floor_class = catalogue_index("floor").expect("catalogue has floor") as u32;
    let wall_class = catalogue_index("wall").expect("catalogue has wall") as u32;
    let mut sample_rng = rng::stream(seed, 2);
    let noise = Normal::new(0.0, recipe.color_noise.max(0.0))
        .map_err(|e| Error::contract(format!("color noise: {e}")))?;

    let mut scene = Scene {
        points: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        instance_id: Vec::with_capacity(n),
        semantic_id: Vec::with_capacity(n),
        superpoint_id: Vec::new(),
        class_names: CATALOGUE.iter().map(|c| c.name.to_string()).collect(),
        stuff_flags: CATALOGUE.iter().map(|c| c.stuff).collect(),
    };

    for ((surface, _), count) in stuff.iter().chain(&things).zip(counts) {
        let (class, instance) = match *surface {
            Surface::Floor => (floor_class, -1),
            Surface::Wall { .. } => (wall_class, -1),
            Surface::BoxTop(o)
            | Surface::BoxSide { obj: o, .. }
            | Surface::CylSide(o)
            | Surface::CylTop(o) => (placed[o].class as u32, o as i32),
        };
        let base = CATALOGUE[class as usize].color;
        for _ in 0..count {
            let p = sample_surface(*surface, &placed, recipe, &mut sample_rng);
            let c = base.map(|v| (v + noise.sample(&mut sample_rng)).clamp(0.0, 1.0));
            scene.points.push(p);
            scene.colors.push(c);
            scene.instance_id.push(instance);
            scene.semantic_id.push(class);
        }
    }

    let target = recipe.superpoint_target.clamp(1, n);
    scene.superpoint_id = compute_superpoints(&scene, target)?;
    Ok(scene)
}

fn place_objects(recipe: &SceneRecipe, rng: &mut impl Rng) -> Result<Vec<Placed>> {
    let mut placed: Vec<Placed> = Vec::new();
    for spec in &recipe.objects {
        let class = catalogue_index(&spec.class)
            .ok_or_else(|| Error::Lookup(format!("class {}", spec.class)))?;
        let def = &CATALOGUE[class];
        let shape = def
            .shape
            .ok_or_else(|| Error::contract(format!("{} is a stuff class", spec.class)))?;
        for _ in 0..spec.count {
            let mut done = false;
            for _ in 0..PLACEMENT_RETRIES {
                let jitter: f64 = rng.random_range(0.9..1.1);
                let (size, shape) = match shape {
                    Shape::Box { size } => {
                        let mut s = size.map(|v| v * jitter);
                        if rng.random_bool(0.5) {
                            s.swap(0, 1);
                        }
                        (s, Shape::Box { size: s })
                    }
                    Shape::Cylinder { radius, height } => {
                        let (r, h) = (radius * jitter, height * jitter);
                        (
                            [2.0 * r, 2.0 * r, h],
                            Shape::Cylinder {
                                radius: r,
                                height: h,
                            },
                        )
                    }
                };
                let lo = [WALL_MARGIN, WALL_MARGIN];
                let hi = [
                    recipe.room[0] - WALL_MARGIN - size[0],
                    recipe.room[1] - WALL_MARGIN - size[1],
                ];
                if hi[0] <= lo[0] || hi[1] <= lo[1] {
                    continue;
                }
                let min = [
                    rng.random_range(lo[0]..hi[0]),
                    rng.random_range(lo[1]..hi[1]),
                ];
                let max = [min[0] + size[0], min[1] + size[1]];
                let clear = placed.iter().all(|q| {
                    min[0] >= q.max[0] + PLACEMENT_GAP
                        || q.min[0] >= max[0] + PLACEMENT_GAP
                        || min[1] >= q.max[1] + PLACEMENT_GAP
                        || q.min[1] >= max[1] + PLACEMENT_GAP
                });
                if clear {
                    placed.push(Placed {
                        class,
                        min,
                        max,
                        shape,
                        size,
                    });
                    done = true;
                    break;
                }
            }
            if !done {
                return Err(Error::Placement(spec.class.clone()));
            }
        }
    }
    Ok(placed)
}

fn sample_surface(
    s: Surface,
    placed: &[Placed],
    recipe: &SceneRecipe,
    rng: &mut impl Rng,
) -> [f64; 3] {
    let [rx, ry] = recipe.room;
    match s {
        Surface::Floor => {
            // Resample points that would fall under furniture.
            let mut p = [0.0; 3];
            for _ in 0..100 {
                p = [rng.random_range(0.0..rx), rng.random_range(0.0..ry), 0.0];
                let covered = placed.iter().any(|q| {
                    p[0] > q.min[0] && p[0] < q.max[0] && p[1] > q.min[1] && p[1] < q.max[1]
                });
                if !covered {
                    break;
                }
            }
            p
        }
        Surface::Wall { axis, at } => {
            let z = rng.random_range(0.0..recipe.wall_height);
            if axis == 0 {
                [at, rng.random_range(0.0..ry), z]
            } else {
                [rng.random_range(0.0..rx), at, z]
            }
        }
        Surface::BoxTop(o) => {
            let q = &placed[o];
            [
                rng.random_range(q.min[0]..q.max[0]),
                rng.random_range(q.min[1]..q.max[1]),
                q.size[2],
            ]
        }
        Surface::BoxSide { obj, axis, high } => {
            let q = &placed[obj];
            let z = rng.random_range(0.0..q.size[2]);
            let other = 1 - axis;
            let mut p = [0.0, 0.0, z];
            p[axis] = if high { q.max[axis] } else { q.min[axis] };
            p[other] = rng.random_range(q.min[other]..q.max[other]);
            p
        }
        Surface::CylSide(o) => {
            let q = &placed[o];
            let Shape::Cylinder { radius, height } = q.shape else {
                unreachable!()
            };
            let (cx, cy) = ((q.min[0] + q.max[0]) / 2.0, (q.min[1] + q.max[1]) / 2.0);
            let a = rng.random_range(0.0..2.0 * PI);
            [
                cx + radius * a.cos(),
                cy + radius * a.sin(),
                rng.random_range(0.0..height),
            ]
        }
        Surface::CylTop(o) => {
            let q = &placed[o];
            let Shape::Cylinder { radius, height } = q.shape else {
                unreachable!()
            };
            let (cx, cy) = ((q.min[0] + q.max[0]) / 2.0, (q.min[1] + q.max[1]) / 2.0);
            let a = rng.random_range(0.0..2.0 * PI);
            let r = radius * rng.random::<f64>().sqrt();
            [cx + r * a.cos(), cy + r * a.sin(), height]
        }
    }
}

/// Largest-remainder split of `total` proportional to `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}
