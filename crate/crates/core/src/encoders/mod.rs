//! Unimodal encoders producing `R_T`, `R_V` and `R_G`.

pub mod gat;
pub mod graph;
pub mod records;
pub mod text;
pub mod visual;

pub use gat::{
    extract_social, gat_full_graph, init_gat_params, signed_gat_layer, social_batch, GatConfig,
};
pub use graph::{build_social_graph, Edge, GraphConfig, GraphNode, NodeKind, SocialGraph};
pub use records::{real_length, CommentRecord, PostRecord, UserRecord, PAD_TOKEN};
pub use text::{encode_text, encode_text_batch, init_text_params, TextEncoderConfig, WordVectors};
pub use visual::{init_visual_params, project_visual, project_visual_batch};
