//! Feature-domain style transfer by usage-constrained feature reshuffling.
//!
//! Style features are rearranged to follow the content layout: a PatchMatch
//! search pairs every content patch with a style patch while penalizing
//! repeated use of the same style pixels, the matched patches are voted back
//! into a feature map, and the result is blended with the content features.
//! This runs as an EM loop per layer and coarse-to-fine over layers 4, 3, 2.
//!
//! The crate also carries the loss functionals used to measure results:
//! content loss, Gram-matrix (global) style loss, and the patch-based local
//! and reshuffle losses.

pub mod decoder;
pub mod error;
pub mod field;
pub mod losses;
pub mod npy;
pub mod optimizer;
pub mod patchmatch;
pub mod pipeline;
pub mod pyramid;
pub mod selfcheck;
pub mod study;
pub mod synth;
pub mod tensor;

pub use decoder::{builtin_test_decode, BuiltinTestDecoder, Decoder, ExternalDecoder};
pub use error::{Error, Result};
pub use field::{NNField, UsageMap};
pub use losses::{
    content_loss, global_style_loss, gram, local_style_loss, nn_field_bruteforce, reshuffle_loss,
    GramMatrix, LossReport,
};
pub use npy::{load_tensor, save_tensor};
pub use optimizer::{optimize_layer, warp_vote, DecoderBinding, PipelineConfig};
pub use patchmatch::{
    bruteforce_nnc_frozen, nnc_search, recompute_usage, score, MatchConfig, UsageMode,
};
pub use pipeline::{run_pipeline, run_pipeline_with, PipelineOptions};
pub use pyramid::FeaturePyramid;
pub use tensor::{FeatureMap, PatchGeometry, Pos};
