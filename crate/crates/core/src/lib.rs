//! Rectified sparse attention (ReSA) decoding on a desk-scale GQA transformer.
//!
//! Decoding attends to a query-selected subset of key blocks and periodically
//! re-encodes the newest tokens with dense attention, overwriting their
//! cached keys and values so that approximation error cannot accumulate.
//! Every sparse path here has a dense oracle it can be checked against.

pub mod attention;
pub mod block_index;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod kv_store;
pub mod model;
pub mod rng;

pub use attention::{
    combine_partials, dense_attention, group_block_sparse_attention, partial_attention, BlockMask, PagedKv,
    PartialAttnResult,
};
pub use block_index::{
    build_descriptors, score_block, select_blocks, update_descriptor, BlockDescriptor, SparsityConfig,
};
pub use decoder::{decode, DecodeMode, DecodeOutput, DecodeState, DriftEntry, DriftOracle, DriftTrace, ProbeSchedule};
pub use error::{ResaError, Result};
pub use kv_store::{charge_and_report, predicted_ratio, MemCounters, MemReport, PagedKvCache};
pub use model::{generate_weights, Model, ModelConfig, ModelWeights};
