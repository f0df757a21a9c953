use rand::Rng;

use super::knn::knn;
use super::{dist2, Scene};
use crate::numerics::rng;

const NEIGHBOURS: usize = 8;
const COLOR_THRESHOLD: f64 = 0.2;
/// Links longer than this multiple of the local nearest-neighbour spacing are
/// cut, so sparse and dense surfaces are treated alike.
const SPATIAL_FACTOR: f64 = 4.0;

/// Class-agnostic masks found without reading any label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PseudoMaskSet {
    /// Sorted point indices per mask.
    pub masks: Vec<Vec<usize>>,
}

impl PseudoMaskSet {
    pub fn coverage(&self, num_points: usize) -> f64 {
        let covered: usize = self.masks.iter().map(Vec::len).sum();
        covered as f64 / num_points.max(1) as f64
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Region growing on coordinates and colors: neighbouring points whose color
/// distance is under a seed-jittered threshold are merged; components smaller
/// than `max(5, N/200)` points are discarded.
pub fn generate_pseudo_masks(scene: &Scene, seed: u64) -> PseudoMaskSet {
    let n = scene.len();
    if n < 2 {
        return PseudoMaskSet {
            masks: if n == 1 { vec![vec![0]] } else { vec![] },
        };
    }
    let mut r = rng::stream(seed, 0x5eed);
    let color_thr = COLOR_THRESHOLD * (1.0 + 0.1 * r.random_range(-1.0..=1.0));

    let nn = knn(&scene.points, NEIGHBOURS.min(n - 1));
    let nearest: Vec<f64> = nn
        .iter()
        .enumerate()
        .map(|(i, ns)| {
            dist2(&scene.points[i], &scene.points[ns[0]])
                .sqrt()
                .max(1e-9)
        })
        .collect();

    let mut uf = UnionFind((0..n).collect());
    for (i, ns) in nn.iter().enumerate() {
        for &j in ns {
            let d = dist2(&scene.points[i], &scene.points[j]).sqrt();
            let c = dist2(&scene.colors[i], &scene.colors[j]).sqrt();
            if d <= SPATIAL_FACTOR * nearest[i].max(nearest[j]) && c <= color_thr {
                uf.union(i, j);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for p in 0..n {
        let root = uf.find(p);
        groups.entry(root).or_default().push(p);
    }
    let min_size = (n / 200).max(5);
    PseudoMaskSet {
        masks: groups
            .into_values()
            .filter(|g| g.len() >= min_size)
            .collect(),
    }
}
