//! The compact convolutional transformer and its patch-based ablations.
//!
//! Parameters live in a [`ModelParams`] map keyed by dotted path. A forward
//! pass binds them onto a [`Tape`] and runs tokenizer → positions → encoder
//! blocks → final norm → SeqPool (or class token) → linear head.

mod checkpoint;
mod config;
mod layers;
mod params;
mod tokenizer;


pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{CctConfig, Pooling, PositionalEmbedding, TokenizerKind, Variant, PRESET_NAMES};
pub use layers::{classify_tokens, embed_tokens, encoder_block, forward, mhsa, seq_pool, sinusoidal_positions};
pub use params::{
    block_param_count, count_params, has_zero_gradient, init_params, param_specs, BoundParams, InitKind, ModelParams, ParamSpec, INIT_STD,
};
pub use tokenizer::{channel_schedule, patch_embed, plan_tokenizer, tokenize, StageRecord, TokenizerPlan};

use crate::error::Result;
use crate::numerics::{Element, Tape, Tensor, Var};
use crate::rng::RngStream;

/// A validated config together with its tokenizer plan and parameter layout.
#[derive(Debug, Clone)]
pub struct CctModel {
    config: CctConfig,
    plan: TokenizerPlan,
    specs: Vec<ParamSpec>,
}

impl CctModel {
    pub fn new(config: CctConfig) -> Result<Self> {
        let plan = config.validate()?;
        let specs = param_specs(&config, &plan);
        Ok(CctModel { config, plan, specs })
    }

    pub fn config(&self) -> &CctConfig {
        &self.config
    }

    pub fn plan(&self) -> &TokenizerPlan {
        &self.plan
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn init_params<T: Element>(&self, rng: &RngStream) -> Result<ModelParams<T>> {
        init_params(&self.config, rng)
    }

    pub fn check_params<T: Element>(&self, params: &ModelParams<T>) -> Result<()> {
        params.check_against(&self.specs)
    }

    /// Trace a forward pass on `tape` with already-bound parameters.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        images: Var,
        params: &BoundParams,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Var> {
        forward(tape, images, params, &self.config, &self.plan, rng, training)
    }

    /// Inference logits `[N,num_classes]`, dropout off.
    pub fn logits<T: Element>(&self, params: &ModelParams<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let mut rng = RngStream::new(0);
        let out = self.forward(&mut tape, x, &bound, &mut rng, false)?;
        Ok(tape.value(out).clone())
    }
}
