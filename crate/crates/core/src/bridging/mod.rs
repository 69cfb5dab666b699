//! Bridging the intrinsic (text, image) and social modalities.

pub mod attention;
pub mod contrastive;
pub mod mutual;

pub use attention::{
    attend, co_attention, init_co_attention, init_output, init_qkv, init_self_attention,
    intrinsic_rep, lift, self_attention, AttentionConfig, Modality,
};
pub use contrastive::{cmca_loss, scl_loss, ContrastiveConfig, SclLoss};
pub use mutual::{
    init_mutual_params, kl_divergence, kl_divergence_values, label_distributions,
    mutual_learning_loss, project_common,
};
