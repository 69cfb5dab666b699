use serde::{Deserialize, Serialize};

/// Token id reserved for padding; its word vector is all zeros.
pub const PAD_TOKEN: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostRecord {
    pub id: String,
    pub tokens: Vec<usize>,
    pub visual_feat: Vec<f64>,
    pub user_id: String,
    #[serde(default)]
    pub comment_ids: Vec<String>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommentRecord {
    pub id: String,
    pub tokens: Vec<usize>,
    pub user_id: String,
    pub post_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: String,
}

/// Number of tokens up to and including the last non-padding one.
pub fn real_length(tokens: &[usize]) -> usize {
    tokens
        .iter()
        .rposition(|&t| t != PAD_TOKEN)
        .map_or(0, |p| p + 1)
}
