//! The deraining network: inner-scale connection blocks, dense
//! encoder/decoder pairs at several input scales, GRU fusion across scales
//! and a residual rain head.

pub mod config;
pub mod forward;
pub mod params;

pub use config::NetConfig;
pub use forward::{
    cross_scale_fuse, dcsfn_forward, decoder_forward, derain, encoder_forward, inner_scale_block,
    inner_scale_block_trace, DerainOutput, InnerBlockActivations,
};
pub use params::{param_count, BlockParams, DcsfnParams, HeadParams, LayerParams, SubnetParams};
