//! Deterministic float64 forward reference of the dual-branch
//! cross-attention segmentation network.

mod attention;
mod model;
mod ops;
mod params;
mod tensor;

pub use attention::{attention_weights, cross_attention_fuse, fusion_terms, register_fusion, scaled_dot_attention, FUSION_PROJECTIONS};
pub use model::{
    activation, check_input_extent, cnn_encoder_forward, conv_layer, decoder_forward, global_encoder_forward, register_cnn_encoder,
    register_conv, register_decoder, register_residual_block, residual_block, BranchMode, DecoderOutput, DecoderPlan, EncoderPyramid,
    GlobalEncoder, InfiltrNet, ModelConfig, StridedConvGlobal, AUX_FACTORS, CNN_FACTORS, GLOBAL_FACTORS, INPUT_MULTIPLE, NUM_CLASSES,
};
pub use ops::{add, conv3d, conv_out_len, conv_transpose3d_k2s2, instance_norm, leaky_relu, leaky_relu_inplace, softmax_channels};
pub use params::{fnv1a64, splitmix64, ParamStore, Tensor};
pub use tensor::{FeatureMap, Matrix};
