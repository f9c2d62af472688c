//! Block-sparse attention prefill on the CPU.
//!
//! The pipeline has three stages:
//!
//! 1. [`discovery`] estimates a normalized block-importance map from queries
//!    and mean-pooled keys without materializing token-level scores.
//! 2. [`selection`] turns the map into an active-block mask (max-threshold
//!    with sink and window retention, or top-k / top-p baselines) and compacts
//!    it into a per-row index list.
//! 3. [`attention`] runs causal attention over the listed blocks only, with a
//!    base-2 online softmax.
//!
//! [`workloads`] generates seeded inputs with planted structure. Tensors move
//! in and out through the little-endian container in [`tensor`].
//!
//! With the default `parallel` feature the per-row work runs on rayon;
//! without it the same loops run sequentially.

pub mod attention;
pub mod config;
pub mod discovery;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod par;
pub mod selection;
pub mod tensor;
pub mod workloads;

pub use attention::{block_sparse_attention, block_sparse_attention_counted, dense_attention, visit_count, AttentionOutput};
pub use config::{default_scale, PipelineConfig, DEFAULT_EPSILON};
pub use discovery::{
    discover, discover_exact, discover_pool_both, pool_keys, BlockScoreMap, DiscoveryMethod, MapShape,
};
pub use error::{Error, Result};
pub use grid::{make_block_grid, BlockGrid};
pub use selection::{
    compress_indices, density, max_threshold_mask, topk_select, topp_select, ActiveMask, PlanShape, Retention,
    SelectionRule, SparseBlockPlan,
};
pub use tensor::{load_tensor, save_tensor, BatchShape, Role, SequenceBatch};
pub use workloads::{generate_heavy_tail_row, generate_planted, Pattern, PlantedSpec, PlantedWorkload};
