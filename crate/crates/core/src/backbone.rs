//! Per-point features and superpoint pooling.
//!
//! A small stand-in for a sparse-convolution U-Net: a point-wise MLP on
//! normalized coordinates and colors, then two rounds of neighbourhood mean
//! aggregation over the 8-NN graph with a residual connection and layer norm.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Bound, ParamStore, RowMix, Tape, Tensor, Var};
use crate::scene::{knn::knn, Scene};

pub const NEIGHBOURS: usize = 8;
pub const AGGREGATION_ROUNDS: usize = 2;
const INPUT_DIM: usize = 6;

/// Everything the backbone needs from a scene, computed once per scene.
#[derive(Debug, Clone)]
pub struct SceneContext {
    /// `N x 6`: coordinates mapped to `[-1, 1]` per bounding-box axis, then
    /// colors.
    pub input: Tensor,
    pub neighbour_mean: Arc<RowMix>,
    pub pool: Arc<RowMix>,
}

impl SceneContext {
    pub fn new(scene: &Scene) -> Result<Self> {
        let n = scene.len();
        if n <= NEIGHBOURS {
            return Err(Error::contract(format!(
                "backbone needs more than {NEIGHBOURS} points, scene has {n}"
            )));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &scene.points {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let input = Tensor::from_fn(n, INPUT_DIM, |i, c| {
            if c < 3 {
                let extent = (hi[c] - lo[c]).max(1e-9);
                2.0 * (scene.points[i][c] - lo[c]) / extent - 1.0
            } else {
                scene.colors[i][c - 3]
            }
        });
        let neighbour_mean = RowMix::mean_groups(n, &knn(&scene.points, NEIGHBOURS))?;
        let pool = superpoint_pooling(&scene.superpoint_id, scene.num_superpoints())?;
        Ok(Self {
            input,
            neighbour_mean: Arc::new(neighbour_mean),
            pool: Arc::new(pool),
        })
    }

    pub fn num_points(&self) -> usize {
        self.input.rows()
    }

    pub fn num_superpoints(&self) -> usize {
        self.pool.rows.len()
    }
}

/// Mean-pooling operator for a partition with `m` parts.
pub fn superpoint_pooling(partition: &[u32], m: usize) -> Result<RowMix> {
    let mut groups = vec![Vec::new(); m];
    for (p, &s) in partition.iter().enumerate() {
        let s = s as usize;
        if s >= m {
            return Err(Error::contract(format!(
                "point {p} has superpoint {s} >= {m}"
            )));
        }
        groups[s].push(p);
    }
    RowMix::mean_groups(partition.len(), &groups)
        .map_err(|_| Error::contract("empty superpoint in partition"))
}

pub fn init_backbone(store: &mut ParamStore, d_in: usize, rng: &mut impl Rng) {
    nn::init_mlp2(store, "backbone.in", [INPUT_DIM, d_in, d_in], rng);
    for r in 0..AGGREGATION_ROUNDS {
        nn::init_linear(store, &format!("backbone.agg{r}"), d_in, d_in, rng);
        nn::init_layer_norm(store, &format!("backbone.norm{r}"), d_in);
    }
}

/// `N x d_in` point features.
pub fn extract_point_features(tape: &mut Tape, p: &Bound, ctx: &SceneContext) -> Result<Var> {
    let x = tape.constant(ctx.input.clone());
    let mut h = nn::mlp2(tape, p, "backbone.in", x)?;
    for r in 0..AGGREGATION_ROUNDS {
        let nbr = tape.row_mix(h, &ctx.neighbour_mean)?;
        let msg = nn::linear(tape, p, &format!("backbone.agg{r}"), nbr)?;
        let msg = tape.relu(msg)?;
        let sum = tape.add(h, msg)?;
        h = nn::layer_norm(tape, p, &format!("backbone.norm{r}"), sum)?;
    }
    Ok(h)
}

/// `M x d` superpoint features: the mean of each superpoint's rows.
pub fn pool_superpoints(tape: &mut Tape, f: Var, pool: &Arc<RowMix>) -> Result<Var> {
    tape.row_mix(f, pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::rng;
    use crate::scene::{generate_scene, SceneRecipe};
    use proptest::prelude::*;

    fn small_scene(seed: u64) -> Scene {
        let recipe = SceneRecipe {
            num_points: 200,
            superpoint_target: 8,
            ..SceneRecipe::default().with_objects(&[("chair", 1), ("table", 1)])
        };
        generate_scene(seed, &recipe).unwrap()
    }

    fn weights(d: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_backbone(&mut store, d, &mut rng::stream(seed, 0));
        store
    }

    fn features(scene: &Scene, store: &ParamStore) -> Tensor {
        let ctx = SceneContext::new(scene).unwrap();
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let f = extract_point_features(&mut tape, &b, &ctx).unwrap();
        tape.value(f).clone()
    }

    fn pool_values(rows: &[Vec<f64>], partition: &[u32], m: usize) -> Tensor {
        let mix = Arc::new(superpoint_pooling(partition, m).unwrap());
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_rows(rows).unwrap());
        let out = pool_superpoints(&mut tape, f, &mix).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn pooling_examples() {
        let p = pool_values(&[vec![1.0, 3.0], vec![5.0, 7.0]], &[0, 0], 1);
        assert_eq!(p.data(), &[3.0, 5.0]);
        let rows = vec![vec![1.0, 2.0], vec![-3.0, 4.0], vec![0.5, 0.0]];
        let ident = pool_values(&rows, &[0, 1, 2], 3);
        assert_eq!(ident, Tensor::from_rows(&rows).unwrap());
        assert!(superpoint_pooling(&[0, 2], 3).is_err());
    }

    #[test]
    fn too_few_points_is_a_contract_error() {
        let mut scene = small_scene(1);
        scene.points.truncate(8);
        scene.colors.truncate(8);
        assert!(matches!(SceneContext::new(&scene), Err(Error::Contract(_))));
    }

    #[test]
    fn permuting_points_permutes_features() {
        let scene = small_scene(3);
        let store = weights(8, 1);
        let n = scene.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
        let mut permuted = scene.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted.points[new] = scene.points[old];
            permuted.colors[new] = scene.colors[old];
            permuted.superpoint_id[new] = scene.superpoint_id[old];
        }
        let a = features(&scene, &store);
        let b = features(&permuted, &store);
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..a.cols() {
                assert!((a.get(old, c) - b.get(new, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_points_get_identical_features() {
        let mut scene = small_scene(4);
        scene.points[7] = scene.points[3];
        scene.colors[7] = scene.colors[3];
        let f = features(&scene, &weights(8, 2));
        assert_eq!(f.row_slice(3), f.row_slice(7));
    }

    #[test]
    fn mean_feature_gradient_matches_finite_differences() {
        let scene = small_scene(5);
        let ctx = SceneContext::new(&scene).unwrap();
        let store = weights(6, 3);
        let report = check_gradients(&store, 1e-5, 12, |tape, b| {
            let f = extract_point_features(tape, b, &ctx)?;
            let sp = pool_superpoints(tape, f, &ctx.pool)?;
            let sq = tape.mul(sp, sp)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    proptest! {
        #[test]
        fn pooling_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            f in prop::collection::vec(-1.0f64..1.0, 12),
            g in prop::collection::vec(-1.0f64..1.0, 12),
        ) {
            let partition = [0u32, 1, 0, 2, 1, 2];
            let rows = |v: &[f64]| v.chunks(2).map(<[f64]>::to_vec).collect::<Vec<_>>();
            let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
            let lhs = pool_values(&rows(&combo), &partition, 3);
            let pf = pool_values(&rows(&f), &partition, 3);
            let pg = pool_values(&rows(&g), &partition, 3);
            for i in 0..lhs.len() {
                let rhs = a * pf.data()[i] + b * pg.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-12);
            }
        }
    }
}
