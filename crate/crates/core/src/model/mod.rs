mod config;
mod forward;
mod lora;
mod weights;

pub use config::ModelConfig;
pub(crate) use forward::{bind, check_capacity, collect_trace, forward_graph, BoundModel, Trainable};
pub use forward::{
    forward_full, forward_incremental, greedy_generate, greedy_next_token, prefill, DecodeCache, PREFILL_CHUNK,
    ForwardOutput, HiddenStateTrace, NORM_EPS,
};
pub use lora::{lora_merge, LoraAdapterSet, LoraConfig, LoraPair};
pub use weights::{init_model, LayerWeights, ModelWeights, Projection, INIT_STD};

#[cfg(test)]
mod tests;
