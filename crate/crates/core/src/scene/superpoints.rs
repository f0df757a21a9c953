use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use super::knn::{knn, symmetric};
use super::{dist2, Scene};
use crate::error::{Error, Result};

const NEIGHBOURS: usize = 8;
/// Meters of path length charged per unit of RGB distance.
const COLOR_WEIGHT: f64 = 1.0;

/// Oversegments `scene` into roughly `target` superpoints.
///
/// Points are grouped by instance (things) or class (stuff); each connected
/// piece of a group on the 8-NN graph receives a share of the target
/// proportional to its size (at least one), seeds are spread by farthest-point
/// sampling and every point joins the seed with the shortest spatial+color
/// path inside its piece. Superpoints are therefore connected and never cross
/// an instance boundary. Returned ids are numbered in order of first point.
pub fn compute_superpoints(scene: &Scene, target: usize) -> Result<Vec<u32>> {
    let n = scene.len();
    if target == 0 {
        return Err(Error::contract("superpoint target must be at least 1"));
    }
    if target > n {
        return Err(Error::contract(format!(
            "superpoint target {target} exceeds {n} points"
        )));
    }
    let k = NEIGHBOURS.min(n.saturating_sub(1));
    let group = |p: usize| -> (bool, i64) {
        let inst = scene.instance_id[p];
        if inst >= 0 {
            (true, i64::from(inst))
        } else {
            (false, i64::from(scene.semantic_id[p]))
        }
    };
    let adj: Vec<Vec<usize>> = symmetric(&knn(&scene.points, k))
        .into_iter()
        .enumerate()
        .map(|(i, ns)| ns.into_iter().filter(|&j| group(j) == group(i)).collect())
        .collect();

    // Connected pieces, discovered in point order.
    let mut piece = vec![usize::MAX; n];
    let mut pieces: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if piece[start] != usize::MAX {
            continue;
        }
        let id = pieces.len();
        let mut members = vec![start];
        piece[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &adj[p] {
                if piece[q] == usize::MAX {
                    piece[q] = id;
                    members.push(q);
                    queue.push_back(q);
                }
            }
        }
        members.sort_unstable();
        pieces.push(members);
    }

    let quotas = seed_quotas(target, &pieces.iter().map(Vec::len).collect::<Vec<_>>());

    let mut label = vec![u32::MAX; n];
    let mut next = 0u32;
    for (members, quota) in pieces.iter().zip(quotas) {
        let seeds = farthest_point_seeds(scene, members, quota);
        grow(scene, &adj, &seeds, next, &mut label);
        next += seeds.len() as u32;
    }

    // Renumber by first appearance.
    let mut remap = vec![u32::MAX; next as usize];
    let mut fresh = 0u32;
    for l in &mut label {
        let r = &mut remap[*l as usize];
        if *r == u32::MAX {
            *r = fresh;
            fresh += 1;
        }
        *l = *r;
    }
    Ok(label)
}

fn seed_quotas(target: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if sizes.len() >= target {
        return vec![1; sizes.len()];
    }
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 / total as f64 * target as f64)
        .collect();
    let mut quota: Vec<usize> = exact
        .iter()
        .zip(sizes)
        .map(|(e, &s)| (e.floor() as usize).clamp(1, s))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - quota[a] as f64, exact[b] - quota[b] as f64);
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut assigned: usize = quota.iter().sum();
    let mut progress = true;
    while assigned < target && progress {
        progress = false;
        for &i in &order {
            if assigned == target {
                break;
            }
            if quota[i] < sizes[i] {
                quota[i] += 1;
                assigned += 1;
                progress = true;
            }
        }
    }
    quota
}

fn farthest_point_seeds(scene: &Scene, members: &[usize], count: usize) -> Vec<usize> {
    let count = count.clamp(1, members.len());
    let mut seeds = vec![members[0]];
    let mut best: Vec<f64> = members
        .iter()
        .map(|&p| dist2(&scene.points[p], &scene.points[members[0]]))
        .collect();
    while seeds.len() < count {
        let mut far = 0;
        for i in 1..members.len() {
            if best[i] > best[far] {
                far = i;
            }
        }
        let s = members[far];
        seeds.push(s);
        for (i, &p) in members.iter().enumerate() {
            best[i] = best[i].min(dist2(&scene.points[p], &scene.points[s]));
        }
    }
    seeds
}

#[derive(PartialEq)]
struct Front {
    cost: f64,
    seed: u32,
    point: usize,
}

impl Eq for Front {}

impl Ord for Front {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.seed.cmp(&self.seed))
            .then(other.point.cmp(&self.point))
    }
}

impl PartialOrd for Front {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn grow(scene: &Scene, adj: &[Vec<usize>], seeds: &[usize], first: u32, label: &mut [u32]) {
    let mut heap = BinaryHeap::new();
    for (i, &s) in seeds.iter().enumerate() {
        heap.push(Front {
            cost: 0.0,
            seed: first + i as u32,
            point: s,
        });
    }
    while let Some(Front { cost, seed, point }) = heap.pop() {
        if label[point] != u32::MAX {
            continue;
        }
        label[point] = seed;
        for &q in &adj[point] {
            if label[q] == u32::MAX {
                let step = dist2(&scene.points[point], &scene.points[q]).sqrt()
                    + COLOR_WEIGHT * dist2(&scene.colors[point], &scene.colors[q]).sqrt();
                heap.push(Front {
                    cost: cost + step,
                    seed,
                    point: q,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneRecipe};
    use super::*;
    use crate::numerics::rng;
    use rand::Rng;

    pub(crate) fn cube_scene(n: usize, seed: u64) -> Scene {
        let mut r = rng::stream(seed, 0);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let face = r.random_range(0..6);
            let (a, b): (f64, f64) = (r.random(), r.random());
            let fixed = if face % 2 == 0 { 0.0 } else { 1.0 };
            points.push(match face / 2 {
                0 => [fixed, a, b],
                1 => [a, fixed, b],
                _ => [a, b, fixed],
            });
        }
        Scene {
            colors: vec![[0.5; 3]; n],
            instance_id: vec![0; n],
            semantic_id: vec![2; n],
            superpoint_id: vec![0; n],
            class_names: super::super::CATALOGUE
                .iter()
                .map(|c| c.name.to_string())
                .collect(),
            stuff_flags: super::super::CATALOGUE.iter().map(|c| c.stuff).collect(),
            points,
        }
    }

    #[test]
    fn single_cube_with_target_one_is_one_superpoint() {
        let scene = cube_scene(600, 4);
        let sp = compute_superpoints(&scene, 1).unwrap();
        assert!(sp.iter().all(|&s| s == 0));
    }

    #[test]
    fn target_above_point_count_is_rejected() {
        let scene = cube_scene(20, 1);
        assert!(compute_superpoints(&scene, 21).is_err());
        assert!(compute_superpoints(&scene, 0).is_err());
    }

    #[test]
    fn superpoints_partition_and_stay_instance_pure() {
        let recipe =
            SceneRecipe::default().with_objects(&[("chair", 2), ("table", 1), ("sofa", 1)]);
        let scene = generate_scene(5, &recipe).unwrap();
        let sp = compute_superpoints(&scene, 64).unwrap();
        let m = sp.iter().max().unwrap() + 1;
        assert!((32..=128).contains(&m), "M = {m}");
        let mut owner: Vec<Option<(i32, u32)>> = vec![None; m as usize];
        for p in 0..scene.len() {
            let key = (scene.instance_id[p], scene.semantic_id[p]);
            let slot = &mut owner[sp[p] as usize];
            assert!(
                slot.is_none() || *slot == Some(key),
                "superpoint {} mixes labels",
                sp[p]
            );
            *slot = Some(key);
        }
        assert!(owner.iter().all(Option::is_some));
    }

    #[test]
    fn superpoints_are_connected_in_the_knn_graph() {
        let scene = generate_scene(9, &SceneRecipe::default()).unwrap();
        let sp = &scene.superpoint_id;
        let adj = symmetric(&knn(&scene.points, NEIGHBOURS));
        for members in scene.superpoint_members() {
            let mut seen = vec![false; scene.len()];
            let mut stack = vec![members[0]];
            seen[members[0]] = true;
            let mut reached = 0;
            while let Some(p) = stack.pop() {
                reached += 1;
                for &q in &adj[p] {
                    if !seen[q] && sp[q] == sp[p] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            assert_eq!(reached, members.len());
        }
    }
}
