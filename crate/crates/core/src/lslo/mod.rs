//! Language-specific low-rank adapters.
//!
//! Every adapted site carries one `(A, B)` factor pair per language. A
//! forward pass activates exactly one pair, picked by the source or the
//! target language of the batch, or, while learning the index strategy, a
//! softmax-weighted mix of the source and target pairs that is shared by all
//! sites of a layer.

mod adapter;
mod lora;
mod policy;
mod strategy;

pub use adapter::{build_adapter_stack, trainable_param_count, AdapterStack, LangFactors, LsloAdapter, Routing};
pub use lora::{lora_forward, LoraStack};
pub use policy::{LanguageSpec, Placement, RankPolicy, ResourceType};
pub use strategy::{resolve_index_strategy, IndexStrategy, Indexing, WeightLearningState};
