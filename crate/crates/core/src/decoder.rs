//! Query assembly, the mask decoder, and the mask/class heads.
//!
//! Unified queries are sampled superpoint features. Prompt queries (clicks
//! and expressions) join them for cross-attention and the feed-forward blocks
//! but never take part in self-attention, so unified-query outputs cannot
//! depend on prompts.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{rng, Bound, ParamStore, Tape, Tensor, Var};

/// Upper limit on the number of unified queries.
pub const MAX_QUERIES: usize = 3500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_out: 256,
            layers: 6,
            heads: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_in.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_in {} is not divisible by {} heads",
                self.d_in, self.heads
            )));
        }
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// `m` drawn uniformly from `[ceil(M/2), M]`, capped at [`MAX_QUERIES`].
    Train,
    /// `m = min(M, MAX_QUERIES)`.
    Inference,
}

/// Sorted superpoint indices that become unified queries.
pub fn sample_superpoints(num_superpoints: usize, mode: SamplingMode, seed: u64) -> Vec<usize> {
    let big_m = num_superpoints;
    let m = match mode {
        SamplingMode::Inference => big_m.min(MAX_QUERIES),
        SamplingMode::Train => {
            let lo = big_m.div_ceil(2);
            let m = if big_m == 0 {
                0
            } else {
                rng::stream(seed, 1).random_range(lo..=big_m)
            };
            m.min(MAX_QUERIES)
        }
    };
    sample_exact(big_m, m, seed).expect("m <= M by construction")
}

/// `m` distinct sorted indices out of `num_superpoints`; all of them when
/// `m == num_superpoints`.
pub fn sample_exact(num_superpoints: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > num_superpoints {
        return Err(Error::contract(format!(
            "cannot sample {m} of {num_superpoints} superpoints"
        )));
    }
    if m == num_superpoints {
        return Ok((0..m).collect());
    }
    let mut idx = index::sample(&mut rng::stream(seed, 2), num_superpoints, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut impl Rng) {
    let d = cfg.d_in;
    for e in ["e_u", "e_v", "e_t"] {
        store.insert(format!("dec.{e}"), Tensor::randn(1, d, rng).scale(0.02));
    }
    for l in 0..cfg.layers {
        for block in ["ca", "sa"] {
            for proj in ["q", "k", "v", "o"] {
                nn::init_linear(store, &format!("dec.l{l}.{block}.{proj}"), d, d, rng);
            }
            nn::init_layer_norm(store, &format!("dec.l{l}.{block}.norm"), d);
        }
        nn::init_mlp2(store, &format!("dec.l{l}.ffn"), [d, 4 * d, d], rng);
        nn::init_layer_norm(store, &format!("dec.l{l}.ffn.norm"), d);
    }
    nn::init_layer_norm(store, "dec.out.norm", d);
    nn::init_mlp2(store, "dec.head", [d, d, cfg.d_out], rng);
    nn::init_mlp2(store, "dec.key", [d, d, cfg.d_out], rng);
}

/// The three query groups stacked as rows `[unified; vision; text]`.
#[derive(Debug, Clone)]
pub struct QueryBundle {
    pub queries: Var,
    pub sampled: Vec<usize>,
    pub k_v: usize,
    pub k_t: usize,
}

impl QueryBundle {
    pub fn m(&self) -> usize {
        self.sampled.len()
    }

    pub fn rows(&self) -> usize {
        self.m() + self.k_v + self.k_t
    }
}

/// Adds the task embeddings: sampled superpoint rows get `e_u`, clicked
/// superpoint rows get `e_v`, projected text rows get `e_t`.
pub fn assemble_queries(
    tape: &mut Tape,
    p: &Bound,
    f_s: Var,
    sampled: &[usize],
    vision_superpoints: &[usize],
    text: Option<Var>,
) -> Result<QueryBundle> {
    let big_m = tape.shape(f_s)[0];
    if sampled.is_empty() || sampled.len() > big_m.min(MAX_QUERIES) {
        return Err(Error::contract(format!(
            "{} unified queries for {big_m} superpoints",
            sampled.len()
        )));
    }
    let mut groups = Vec::with_capacity(3);
    let u = tape.gather_rows(f_s, sampled)?;
    groups.push(tape.add_row(u, p.var("dec.e_u")?)?);
    if !vision_superpoints.is_empty() {
        let v = tape.gather_rows(f_s, vision_superpoints)?;
        groups.push(tape.add_row(v, p.var("dec.e_v")?)?);
    }
    let mut k_t = 0;
    if let Some(t) = text {
        k_t = tape.shape(t)[0];
        if k_t > 0 {
            groups.push(tape.add_row(t, p.var("dec.e_t")?)?);
        }
    }
    let queries = if groups.len() == 1 {
        groups[0]
    } else {
        tape.concat_rows(&groups)?
    };
    Ok(QueryBundle {
        queries,
        sampled: sampled.to_vec(),
        k_v: vision_superpoints.len(),
        k_t,
    })
}

fn attention(
    tape: &mut Tape,
    p: &Bound,
    name: &str,
    heads: usize,
    x: Var,
    memory: Var,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let q = nn::linear(tape, p, &format!("{name}.q"), x)?;
    let k = nn::linear(tape, p, &format!("{name}.k"), memory)?;
    let v = nn::linear(tape, p, &format!("{name}.v"), memory)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, a, b)?;
        let kh = tape.slice_cols(k, a, b)?;
        let vh = tape.slice_cols(v, a, b)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    nn::linear(tape, p, &format!("{name}.o"), joined)
}

/// `(m + K_v + K_t) x d_out` output features.
pub fn decode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &DecoderConfig,
    q: &QueryBundle,
    f_s: Var,
) -> Result<Var> {
    let m = q.m();
    let total = q.rows();
    let mut x = q.queries;
    for l in 0..cfg.layers {
        let pre = format!("dec.l{l}");

        let h = nn::layer_norm(tape, p, &format!("{pre}.ca.norm"), x)?;
        let h = attention(tape, p, &format!("{pre}.ca"), cfg.heads, h, f_s)?;
        x = tape.add(x, h)?;

        let u = if total > m {
            tape.slice_rows(x, 0, m)?
        } else {
            x
        };
        let h = nn::layer_norm(tape, p, &format!("{pre}.sa.norm"), u)?;
        let h = attention(tape, p, &format!("{pre}.sa"), cfg.heads, h, h)?;
        let u = tape.add(u, h)?;
        x = if total > m {
            let prompts = tape.slice_rows(x, m, total)?;
            tape.concat_rows(&[u, prompts])?
        } else {
            u
        };

        let h = nn::layer_norm(tape, p, &format!("{pre}.ffn.norm"), x)?;
        let h = nn::mlp2(tape, p, &format!("{pre}.ffn"), h)?;
        x = tape.add(x, h)?;
    }
    let x = nn::layer_norm(tape, p, "dec.out.norm", x)?;
    nn::mlp2(tape, p, "dec.head", x)
}

/// Tape handles of one prediction.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    pub f_out: Var,
    pub mask_logits: Var,
    pub cls_logits: Var,
    pub cls_prob: Var,
}

/// Mask logits against the mask keys of the sampled superpoints, and class
/// probabilities against the class embeddings.
pub fn predict(
    tape: &mut Tape,
    p: &Bound,
    f_out: Var,
    f_s: Var,
    sampled: &[usize],
    e_cls: &Tensor,
) -> Result<PredictionVars> {
    let fs = tape.gather_rows(f_s, sampled)?;
    let keys = nn::mlp2(tape, p, "dec.key", fs)?;
    let mask_logits = tape.matmul_t(f_out, keys)?;
    let e = tape.constant(e_cls.clone());
    let cls_logits = tape.matmul_t(f_out, e)?;
    let cls_prob = tape.softmax_rows(cls_logits)?;
    Ok(PredictionVars {
        f_out,
        mask_logits,
        cls_logits,
        cls_prob,
    })
}

/// Values of one forward pass, rows ordered `[unified; vision; text]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub f_out: Tensor,
    /// Logits over the sampled superpoints.
    pub mask_logits: Tensor,
    pub cls_logits: Tensor,
    pub cls_prob: Tensor,
    pub sampled: Vec<usize>,
    pub num_superpoints: usize,
    pub k_v: usize,
    pub k_t: usize,
}

impl PredictionSet {
    pub fn from_vars(
        tape: &Tape,
        v: &PredictionVars,
        q: &QueryBundle,
        num_superpoints: usize,
    ) -> Self {
        Self {
            f_out: tape.value(v.f_out).clone(),
            mask_logits: tape.value(v.mask_logits).clone(),
            cls_logits: tape.value(v.cls_logits).clone(),
            cls_prob: tape.value(v.cls_prob).clone(),
            sampled: q.sampled.clone(),
            num_superpoints,
            k_v: q.k_v,
            k_t: q.k_t,
        }
    }

    pub fn m(&self) -> usize {
        self.sampled.len()
    }

    pub fn vision_row(&self, i: usize) -> usize {
        self.m() + i
    }

    pub fn text_row(&self, i: usize) -> usize {
        self.m() + self.k_v + i
    }

    /// Logits of row `r` over all superpoints; unsampled ones are `-inf`.
    pub fn superpoint_logits(&self, r: usize) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.num_superpoints];
        for (j, &s) in self.sampled.iter().enumerate() {
            out[s] = self.mask_logits.get(r, j);
        }
        out
    }
}

/// Each point takes its superpoint's value; points of unsampled superpoints
/// get `-inf`.
pub fn superpoint_to_point(
    values: &[f64],
    partition: &[u32],
    sampled: &[usize],
    num_superpoints: usize,
) -> Result<Vec<f64>> {
    if values.len() != sampled.len() {
        return Err(Error::shape(
            "superpoint_to_point",
            format!(
                "{} values for {} sampled superpoints",
                values.len(),
                sampled.len()
            ),
        ));
    }
    let mut per_sp = vec![f64::NEG_INFINITY; num_superpoints];
    for (&s, &v) in sampled.iter().zip(values) {
        if s >= num_superpoints {
            return Err(Error::contract(format!(
                "sampled superpoint {s} out of range"
            )));
        }
        per_sp[s] = v;
    }
    partition
        .iter()
        .map(|&s| {
            per_sp
                .get(s as usize)
                .copied()
                .ok_or_else(|| Error::contract(format!("superpoint {s} out of range")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            d_in: 8,
            d_out: 6,
            layers: 2,
            heads: 2,
        }
    }

    fn store(cfg: &DecoderConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_decoder(&mut s, cfg, &mut rng::stream(seed, 0));
        s
    }

    #[test]
    fn inference_sampling_takes_everything_up_to_the_cap() {
        assert_eq!(
            sample_superpoints(40, SamplingMode::Inference, 1),
            (0..40).collect::<Vec<_>>()
        );
        let big = sample_superpoints(5000, SamplingMode::Inference, 1);
        assert_eq!(big.len(), 3500);
        assert!(big.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_exact(4, 5, 0).is_err());
    }

    #[test]
    fn training_sampling_stays_in_range() {
        for seed in 0..50 {
            let s = sample_superpoints(41, SamplingMode::Train, seed);
            assert!((21..=41).contains(&s.len()));
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(s, sample_superpoints(41, SamplingMode::Train, seed));
        }
    }

    #[test]
    fn zero_task_embeddings_leave_raw_features() {
        let cfg = small_cfg();
        let mut s = store(&cfg, 0);
        for e in ["dec.e_u", "dec.e_v", "dec.e_t"] {
            s.get_mut(e).unwrap().data_mut().fill(0.0);
        }
        let f = Tensor::from_fn(5, 8, |r, c| (r * 8 + c) as f64 * 0.01);
        let t = Tensor::from_fn(1, 8, |_, c| c as f64);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let fs = tape.constant(f.clone());
        let tv = tape.constant(t.clone());
        let q = assemble_queries(&mut tape, &b, fs, &[0, 3], &[4], Some(tv)).unwrap();
        let got = tape.value(q.queries);
        assert_eq!(got.row_slice(0), f.row_slice(0));
        assert_eq!(got.row_slice(1), f.row_slice(3));
        assert_eq!(got.row_slice(2), f.row_slice(4));
        assert_eq!(got.row_slice(3), t.row_slice(0));
    }

    fn run(
        s: &ParamStore,
        cfg: &DecoderConfig,
        f: &Tensor,
        sampled: &[usize],
        vision: &[usize],
        text: Option<&Tensor>,
    ) -> PredictionSet {
        let e_cls = Tensor::from_fn(3, cfg.d_out, |r, c| if r == c { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let fs = tape.constant(f.clone());
        let tv = text.map(|t| tape.constant(t.clone()));
        let q = assemble_queries(&mut tape, &b, fs, sampled, vision, tv).unwrap();
        let out = decode(&mut tape, &b, cfg, &q, fs).unwrap();
        let v = predict(&mut tape, &b, out, fs, sampled, &e_cls).unwrap();
        PredictionSet::from_vars(&tape, &v, &q, f.rows())
    }

    fn head(t: &Tensor, rows: usize) -> Vec<f64> {
        t.data()[..rows * t.cols()].to_vec()
    }

    #[test]
    fn unified_rows_ignore_prompts_exactly() {
        let cfg = small_cfg();
        let s = store(&cfg, 3);
        let f = Tensor::randn(7, 8, &mut rng::stream(9, 0));
        let sampled = [0, 2, 3, 6];
        let bare = run(&s, &cfg, &f, &sampled, &[], None);
        assert_eq!(bare.mask_logits.shape(), [4, 4]);
        let text = Tensor::randn(3, 8, &mut rng::stream(10, 0));
        let full = run(&s, &cfg, &f, &sampled, &[1, 5], Some(&text));
        assert_eq!(full.mask_logits.shape(), [9, 4]);
        for (a, b) in [
            (&bare.f_out, &full.f_out),
            (&bare.mask_logits, &full.mask_logits),
            (&bare.cls_prob, &full.cls_prob),
        ] {
            assert_eq!(head(a, 4), head(b, 4));
        }
    }

    #[test]
    fn swapping_prompts_swaps_their_rows() {
        let cfg = small_cfg();
        let s = store(&cfg, 4);
        let f = Tensor::randn(6, 8, &mut rng::stream(2, 0));
        let a = run(&s, &cfg, &f, &[0, 1, 4], &[2, 5], None);
        let b = run(&s, &cfg, &f, &[0, 1, 4], &[5, 2], None);
        assert_eq!(a.f_out.row_slice(3), b.f_out.row_slice(4));
        assert_eq!(a.f_out.row_slice(4), b.f_out.row_slice(3));
    }

    #[test]
    fn class_rows_are_distributions() {
        let cfg = small_cfg();
        let p = run(
            &store(&cfg, 5),
            &cfg,
            &Tensor::randn(5, 8, &mut rng::stream(1, 0)),
            &[0, 1, 2, 3, 4],
            &[1],
            None,
        );
        for r in 0..p.cls_prob.rows() {
            let row = p.cls_prob.row_slice(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_class_embedding_wins() {
        let e = Tensor::identity(4);
        let mut tape = Tape::new();
        let f_out = tape.constant(e.select_rows(&[2]).scale(10.0));
        let emb = tape.constant(e.clone());
        let logits = tape.matmul_t(f_out, emb).unwrap();
        let prob = tape.softmax_rows(logits).unwrap();
        assert_eq!(tape.value(prob).argmax_row(0), 2);
    }

    #[test]
    fn superpoint_to_point_mapping() {
        let partition = [0u32, 1, 1, 2, 0];
        assert_eq!(
            superpoint_to_point(&[1.0, 1.0, 1.0], &partition, &[0, 1, 2], 3).unwrap(),
            vec![1.0; 5]
        );
        let one_hot = superpoint_to_point(&[0.0, 1.0, 0.0], &partition, &[0, 1, 2], 3).unwrap();
        assert_eq!(one_hot, vec![0.0, 1.0, 1.0, 0.0, 0.0]);
        let partial = superpoint_to_point(&[2.0], &partition, &[1], 3).unwrap();
        assert_eq!(partial[0], f64::NEG_INFINITY);
        assert_eq!(partial[1], 2.0);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let s = store(&cfg, 6);
        let f = Tensor::randn(6, 8, &mut rng::stream(3, 0));
        let text = Tensor::randn(1, 8, &mut rng::stream(4, 0));
        let e_cls = Tensor::randn(3, cfg.d_out, &mut rng::stream(5, 0));
        let report = check_gradients(&s, 1e-5, 10, |tape, b| {
            let fs = tape.constant(f.clone());
            let tv = tape.constant(text.clone());
            let q = assemble_queries(tape, b, fs, &[0, 2, 3, 5], &[1], Some(tv))?;
            let out = decode(tape, b, &cfg, &q, fs)?;
            let v = predict(tape, b, out, fs, &q.sampled, &e_cls)?;
            let sig = tape.sigmoid(v.mask_logits)?;
            let a = tape.mean(sig)?;
            let lp = tape.log(v.cls_prob)?;
            let c = tape.mean(lp)?;
            tape.sub(a, c)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
