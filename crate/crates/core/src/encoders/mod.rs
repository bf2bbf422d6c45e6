//! The three encoders: radar spatiotemporal features, rain-front boundary
//! dynamics, and the gauge graph.

mod aws;
mod radar;
mod rainfront;

pub use aws::{
    aws_encode, aws_input_embed, gat_gru_layer, init_aws_encoder, interpolate_virtual_nodes, AwsDims, NodeFeatures,
    NodeInputs,
};
pub use radar::{
    add_spacetime_embeddings, init_radar_encoder, multiscale_inception, radar_encode, radar_input, stsc_forward,
    FeatureVolume, RadarDims,
};
pub use rainfront::{convlstm_forward, init_convlstm, laplacian_boundaries, BoundaryFeatures, BoundarySequence};
