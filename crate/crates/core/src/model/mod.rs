//! Learned components: the proposal/mask generator and the mask-conditioned
//! query reconstructor.

pub mod generator;
pub mod nn;
pub mod reconstructor;

pub use generator::{
    aggregate_masks, build_gaussian_masks, gaussian_weight, gaussian_weight_grad, mine_negatives,
    GeneratorOutput, MaskGenerator, MaskMatrix, QueryInput, WIDTH_FLOOR,
};
pub use nn::ParamStore;
pub use reconstructor::{
    mask_inverse_query, mask_query, masked_count, reverse_query, Direction, MaskedQuery,
    MaskedQueryBatch, Reconstructor,
};
