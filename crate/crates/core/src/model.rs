//! The full network: backbone, prompt encoders and decoder sharing one
//! parameter store.

use crate::backbone::{self, SceneContext};
use crate::decoder::{
    self, DecoderConfig, PredictionSet, PredictionVars, QueryBundle, SamplingMode,
};
use crate::error::{Error, Result};
use crate::numerics::{rng, Bound, ParamStore, Tape, Tensor, Var};
use crate::prompts::{self, ClickLocation, TEXT_DIM};
use crate::scene::{PromptSet, Scene};

/// Name of the log-temperature of the contrastive loss.
pub const LOG_TAU: &str = "loss.log_tau";
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: DecoderConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        backbone::init_backbone(&mut params, config.d_in, &mut rng::stream(seed, 10));
        prompts::init_text_projection(&mut params, config.d_in, &mut rng::stream(seed, 11));
        decoder::init_decoder(&mut params, &config, &mut rng::stream(seed, 12));
        params.insert_with(LOG_TAU, Tensor::scalar(TAU_INIT.ln()), false);
        Ok(Self { config, params })
    }

    /// Keeps the temperature inside `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_temperature(&mut self) -> Result<()> {
        let t = self.params.get_mut(LOG_TAU)?;
        let v = t.get(0, 0).clamp(TAU_MIN.ln(), TAU_MAX.ln());
        t.set(0, 0, v);
        Ok(())
    }

    /// Inference forward pass with every superpoint as a unified query (up to
    /// the cap).
    pub fn infer(
        &self,
        ctx: &SceneContext,
        prompts: &PromptInputs,
        e_cls: &Tensor,
    ) -> Result<PredictionSet> {
        let sampled =
            decoder::sample_superpoints(ctx.num_superpoints(), SamplingMode::Inference, 0);
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let fwd = forward(&mut tape, &p, &self.config, ctx, prompts, e_cls, &sampled)?;
        Ok(PredictionSet::from_vars(
            &tape,
            &fwd.vars,
            &fwd.queries,
            ctx.num_superpoints(),
        ))
    }
}

/// Prompts as the decoder consumes them.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInputs {
    /// Superpoint of each click.
    pub vision: Vec<usize>,
    /// `K_t x TEXT_DIM` frozen text embeddings.
    pub text: Tensor,
}

impl PromptInputs {
    pub fn none() -> Self {
        Self {
            vision: Vec::new(),
            text: Tensor::zeros(0, TEXT_DIM),
        }
    }

    pub fn from_prompt_set(scene: &Scene, set: &PromptSet) -> Result<Self> {
        let vision = set
            .clicks
            .iter()
            .map(|c| prompts::click_superpoint(scene, ClickLocation::Point(c.point)))
            .collect::<Result<Vec<_>>>()?;
        let seqs: Vec<Vec<String>> = set.expressions.iter().map(|e| e.tokens.clone()).collect();
        Ok(Self {
            vision,
            text: prompts::embed_texts(&seqs)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub f_s: Var,
    pub queries: QueryBundle,
    pub vars: PredictionVars,
}

pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &DecoderConfig,
    ctx: &SceneContext,
    prompts_in: &PromptInputs,
    e_cls: &Tensor,
    sampled: &[usize],
) -> Result<Forward> {
    if prompts_in.text.cols() != TEXT_DIM {
        return Err(Error::shape(
            "forward",
            format!("text width {}", prompts_in.text.cols()),
        ));
    }
    let f = backbone::extract_point_features(tape, p, ctx)?;
    let f_s = backbone::pool_superpoints(tape, f, &ctx.pool)?;
    let text = if prompts_in.text.rows() > 0 {
        let t = tape.constant(prompts_in.text.clone());
        Some(prompts::project_text(tape, p, t)?)
    } else {
        None
    };
    let queries = decoder::assemble_queries(tape, p, f_s, sampled, &prompts_in.vision, text)?;
    let f_out = decoder::decode(tape, p, cfg, &queries, f_s)?;
    let vars = decoder::predict(tape, p, f_out, f_s, sampled, e_cls)?;
    Ok(Forward { f_s, queries, vars })
}
