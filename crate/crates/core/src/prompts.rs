//! Prompt encoders: clicks become superpoint feature rows, token sequences
//! go through a frozen hash embedder and a trainable projection, and class
//! names become frozen unit-norm class embeddings.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{rng, Bound, ParamStore, Tape, Tensor, Var};
use crate::scene::{dist2, Scene};

/// Width of the frozen text embedding.
pub const TEXT_DIM: usize = 64;
/// Reserved name of the trailing no-object class row.
pub const NO_OBJECT: &str = "<no-object>";
const LIFT_SEED: u64 = 0x11f7_5eed;

fn unit_gaussian(seed: u64, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, 0);
    let mut v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Frozen, position-sensitive, open-vocabulary text embedding of unit norm.
pub fn embed_text<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::contract("cannot embed an empty token sequence"));
    }
    let mut acc = vec![0.0; TEXT_DIM];
    for (pos, tok) in tokens.iter().enumerate() {
        let seed = rng::split(rng::hash_bytes(tok.as_ref().as_bytes()), pos as u64);
        for (a, g) in acc.iter_mut().zip(unit_gaussian(seed, TEXT_DIM)) {
            *a += g;
        }
    }
    normalize(&mut acc);
    Ok(acc)
}

/// `K x TEXT_DIM` matrix of frozen embeddings, one row per sequence.
pub fn embed_texts<S: AsRef<str>>(sequences: &[Vec<S>]) -> Result<Tensor> {
    let rows = sequences
        .iter()
        .map(|s| embed_text(s))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, TEXT_DIM));
    }
    Tensor::from_rows(&rows)
}

pub fn init_text_projection(store: &mut ParamStore, d_in: usize, rng: &mut impl Rng) {
    nn::init_mlp2(store, "text.proj", [TEXT_DIM, d_in, d_in], rng);
}

/// Two linear layers with a relu between them, `TEXT_DIM -> d_in`.
pub fn project_text(tape: &mut Tape, p: &Bound, text: Var) -> Result<Var> {
    nn::mlp2(tape, p, "text.proj", text)
}

/// Seeded `TEXT_DIM x d_out` map whose shorter side is orthonormal, so it
/// preserves norms when `d_out >= TEXT_DIM`.
pub fn class_lift(d_out: usize) -> Tensor {
    let (short, long) = (TEXT_DIM.min(d_out), TEXT_DIM.max(d_out));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    for i in 0..short {
        let mut v = unit_gaussian(rng::split(LIFT_SEED, i as u64), long);
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        normalize(&mut v);
        basis.push(v);
    }
    if TEXT_DIM <= d_out {
        Tensor::from_fn(TEXT_DIM, d_out, |r, c| basis[r][c])
    } else {
        Tensor::from_fn(TEXT_DIM, d_out, |r, c| basis[c][r])
    }
}

/// Frozen class embeddings; the last row is the no-object class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    pub names: Vec<String>,
    /// `(names.len() + 1) x d_out`, unit-norm rows.
    pub matrix: Tensor,
}

impl ClassEmbeddings {
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn no_object(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Works for any names, including ones never seen in training.
pub fn embed_class_names<S: AsRef<str>>(names: &[S], d_out: usize) -> Result<ClassEmbeddings> {
    if names.is_empty() {
        return Err(Error::contract("class name list is empty"));
    }
    let mut owned: Vec<String> = Vec::with_capacity(names.len());
    for n in names {
        let n = n.as_ref();
        if n == NO_OBJECT {
            return Err(Error::contract(format!("{NO_OBJECT} is reserved")));
        }
        if owned.iter().any(|o| o == n) {
            return Err(Error::contract(format!("duplicate class name {n:?}")));
        }
        owned.push(n.to_string());
    }
    let mut seqs: Vec<Vec<&str>> = owned
        .iter()
        .map(|n| n.split_whitespace().collect())
        .collect();
    seqs.push(vec![NO_OBJECT]);
    let lifted = embed_texts(&seqs)?.matmul(&class_lift(d_out))?;
    let mut rows: Vec<Vec<f64>> = (0..lifted.rows()).map(|r| lifted.row_to_vec(r)).collect();
    rows.iter_mut().for_each(|r| normalize(r));
    Ok(ClassEmbeddings {
        names: owned,
        matrix: Tensor::from_rows(&rows)?,
    })
}

/// Where a user clicked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClickLocation {
    Point(usize),
    Coordinate([f64; 3]),
}

/// A click's prompt feature: a row of the superpoint features, unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionPromptFeature {
    pub superpoint: usize,
    pub feature: Vec<f64>,
}

/// Superpoint the click falls in, via the nearest point (lowest index on
/// ties).
pub fn click_superpoint(scene: &Scene, click: ClickLocation) -> Result<usize> {
    if scene.is_empty() {
        return Err(Error::contract("click on an empty scene"));
    }
    let point = match click {
        ClickLocation::Point(p) if p < scene.len() => p,
        ClickLocation::Point(p) => {
            return Err(Error::contract(format!("click point {p} out of range")))
        }
        ClickLocation::Coordinate(c) => {
            let mut best = (f64::INFINITY, 0);
            for (i, p) in scene.points.iter().enumerate() {
                let d = dist2(p, &c);
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        }
    };
    Ok(scene.superpoint_id[point] as usize)
}

pub fn encode_vision_prompt(
    scene: &Scene,
    click: ClickLocation,
    f_s: &Tensor,
) -> Result<VisionPromptFeature> {
    let superpoint = click_superpoint(scene, click)?;
    if superpoint >= f_s.rows() {
        return Err(Error::shape(
            "encode_vision_prompt",
            format!(
                "superpoint {superpoint} but only {} feature rows",
                f_s.rows()
            ),
        ));
    }
    Ok(VisionPromptFeature {
        superpoint,
        feature: f_s.row_to_vec(superpoint),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn text_embedding_is_deterministic_unit_and_order_sensitive() {
        let a = embed_text(&toks("the chair left of the table")).unwrap();
        let b = embed_text(&toks("the chair left of the table")).unwrap();
        let c = embed_text(&toks("the table left of the chair")).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert_ne!(a, c);
        assert!(embed_text::<String>(&[]).is_err());
    }

    #[test]
    fn zero_projection_weights_give_zero_output() {
        let mut store = ParamStore::new();
        init_text_projection(&mut store, 8, &mut rng::stream(0, 0));
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(embed_texts(&[toks("the bed")]).unwrap());
        let y = project_text(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        init_text_projection(&mut store, 6, &mut rng::stream(1, 0));
        let text = embed_texts(&[toks("the sofa"), toks("the chair behind the table")]).unwrap();
        let report = check_gradients(&store, 1e-5, 40, |tape, b| {
            let x = tape.constant(text.clone());
            let y = project_text(tape, b, x)?;
            let s = tape.sigmoid(y)?;
            tape.mean(s)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn class_lift_preserves_norms() {
        let lift = class_lift(256);
        let gram = lift.matmul_t(&lift).unwrap();
        for r in 0..TEXT_DIM {
            for c in 0..TEXT_DIM {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((gram.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_embeddings_shape_and_openness() {
        let e = embed_class_names(&["floor", "wall", "chair"], 256).unwrap();
        assert_eq!(e.matrix.shape(), [4, 256]);
        assert_eq!(e.no_object(), 3);
        for r in 0..4 {
            let n: f64 = e.matrix.row_slice(r).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
        let again = embed_class_names(&["chair"], 256).unwrap();
        assert_eq!(again.matrix.row_slice(0), e.matrix.row_slice(2));
        assert!(embed_class_names(&["hovercraft"], 256).is_ok());
        assert!(embed_class_names(&["chair", "chair"], 256).is_err());
        assert!(embed_class_names::<&str>(&[], 256).is_err());
    }

    fn tiny_scene() -> Scene {
        Scene {
            points: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
            ],
            colors: vec![[0.5; 3]; 4],
            instance_id: vec![-1; 4],
            semantic_id: vec![0; 4],
            superpoint_id: vec![0, 0, 1, 1],
            class_names: vec!["floor".into()],
            stuff_flags: vec![true],
        }
    }

    #[test]
    fn vision_prompt_is_the_superpoint_row() {
        let scene = tiny_scene();
        let f_s = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        let a = encode_vision_prompt(&scene, ClickLocation::Point(2), &f_s).unwrap();
        let b = encode_vision_prompt(&scene, ClickLocation::Point(3), &f_s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.feature, f_s.row_to_vec(1));
        let tie =
            encode_vision_prompt(&scene, ClickLocation::Coordinate([1.5, 0.0, 0.0]), &f_s).unwrap();
        assert_eq!(tie.superpoint, 0);
        let empty = Scene {
            points: vec![],
            colors: vec![],
            instance_id: vec![],
            semantic_id: vec![],
            superpoint_id: vec![],
            ..scene
        };
        assert!(encode_vision_prompt(&empty, ClickLocation::Point(0), &f_s).is_err());
    }
}
