//! Transformer encoder-decoder with constraint-aware attention and a gated
//! plug-in output distribution.

mod config;
mod forward;
mod infer;
mod layout;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::numerics::{sinusoidal_positions, ParamGroup, ParamStore, Tensor};

pub use config::ModelConfig;
pub use forward::{BatchKv, CrossMemory, EncodedBatch, Example, OutputTerms, TeacherForced};
pub use infer::{EncodedSource, Inference};
pub use layout::{
    AdaptIds, AttnIds, DecLayerIds, EncLayerIds, FfnIds, GateIds, Layout, NormIds,
};

/// Per-call state for stochastic layers. `eval` disables dropout.
pub struct Ctx<'r> {
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Ctx { rng: None }
    }

    pub fn train(rng: &'r mut dyn RngCore) -> Self {
        Ctx { rng: Some(rng) }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, seed);
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Ok(Model {
            config,
            layout,
            params,
            positions,
        })
    }

    /// Builds a model for `config` and fills it from `params` by name.
    /// Every tensor must be present with the expected shape.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            let name = m.params.name(id).to_string();
            let src = params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            m.params.replace(id, params.get(src).clone())?;
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// A copy of this model with its tensors replaced by `params`, which
    /// must share this model's layout.
    pub fn with_params(&self, params: ParamStore) -> Self {
        assert_eq!(params.len(), self.params.len(), "parameter layout mismatch");
        Model {
            params,
            ..self.clone()
        }
    }

    /// Changes which constraint paths are active without touching weights.
    pub fn set_integration(&mut self, attn: bool, output: bool) {
        self.config.attn_integration = attn;
        self.config.output_integration = output;
    }

    pub fn num_params(&self, group: ParamGroup) -> usize {
        self.params
            .ids_in(group)
            .map(|id| self.params.get(id).numel())
            .sum()
    }
}
