//! Signed multi-head graph attention.
//!
//! Per head the raw score `e_ij = leaky(a_selfᵀ W h_i + a_nbrᵀ W h_j)` is
//! turned into `α_ij = sign(e_ij) · softmax_j |e_ij|`, so negative scores push
//! a node away from a neighbour while `Σ_j |α_ij| = 1` still holds. Heads are
//! squashed with tanh, then concatenated and projected back to `d`.

use std::sync::Arc;

use crate::autodiff::{Adjacency, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::graph::SocialGraph;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatConfig {
    pub heads: usize,
    pub layers: usize,
    pub similarity_threshold: f64,
    pub leaky_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            layers: 2,
            similarity_threshold: 0.5,
            leaky_slope: 0.2,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("GAT needs at least one head".into()));
        }
        if !(0.0..1.0).contains(&self.similarity_threshold) {
            return Err(Error::Config(format!(
                "similarity threshold {} outside [0, 1)",
                self.similarity_threshold
            )));
        }
        Ok(())
    }

    /// Per-head width for embedding dim `d`.
    pub fn head_dim(&self, d: usize) -> usize {
        d.div_ceil(self.heads)
    }
}

pub fn init_gat_params(store: &mut ParamStore, cfg: &GatConfig, d: usize) -> Result<()> {
    let dh = cfg.head_dim(d);
    let width = cfg.heads * dh;
    for l in 0..cfg.layers {
        store.init_uniform(&format!("gat.{l}.w"), d, width)?;
        store.init_uniform(&format!("gat.{l}.a_self"), cfg.heads, dh)?;
        store.init_uniform(&format!("gat.{l}.a_nbr"), cfg.heads, dh)?;
        store.init_uniform(&format!("gat.{l}.proj.w"), width, d)?;
        store.init_zeros(&format!("gat.{l}.proj.b"), &[1, d])?;
    }
    Ok(())
}

/// One signed GAT layer over `h: [N × d]`.
pub fn signed_gat_layer(
    tape: &Tape,
    h: Var,
    adj: &Arc<Adjacency>,
    params: &Bound,
    layer: usize,
    cfg: &GatConfig,
) -> Result<Var> {
    let wh = tape.matmul(h, params.get(&format!("gat.{layer}.w"))?)?;
    let agg = tape.signed_gat(
        wh,
        params.get(&format!("gat.{layer}.a_self"))?,
        params.get(&format!("gat.{layer}.a_nbr"))?,
        Arc::clone(adj),
        cfg.leaky_slope,
    )?;
    let act = tape.tanh(agg);
    let out = tape.matmul(act, params.get(&format!("gat.{layer}.proj.w"))?)?;
    tape.add_row(out, params.get(&format!("gat.{layer}.proj.b"))?)
}

/// Runs every layer over `features: [N × d]` on `adj`.
pub fn gat_forward(
    tape: &Tape,
    features: Var,
    adj: &Arc<Adjacency>,
    params: &Bound,
    cfg: &GatConfig,
) -> Result<Var> {
    let mut h = features;
    for l in 0..cfg.layers {
        h = signed_gat_layer(tape, h, adj, params, l, cfg)?;
    }
    Ok(h)
}

/// `R_G` rows for `post_ids`, computed on the receptive field of those posts.
///
/// Only nodes within `layers` hops can influence a post after `layers`
/// rounds of message passing, so the induced subgraph gives the same rows
/// as running on the full graph.
pub fn social_batch(
    tape: &Tape,
    graph: &SocialGraph,
    post_ids: &[&str],
    params: &Bound,
    cfg: &GatConfig,
) -> Result<Var> {
    let seeds = post_ids
        .iter()
        .map(|id| graph.post_node(id))
        .collect::<Result<Vec<_>>>()?;
    let field = graph.receptive_field(&seeds, cfg.layers);
    let (adj, feats) = graph.induced(&field);
    let x = tape.constant(feats);
    let h = gat_forward(tape, x, &adj, params, cfg)?;
    let local: Vec<usize> = seeds
        .iter()
        .map(|s| {
            field
                .binary_search(s)
                .expect("seed inside its receptive field")
        })
        .collect();
    tape.gather_rows(h, &local)
}

/// Updated embeddings of the whole graph, `[N × d]`.
pub fn gat_full_graph(graph: &SocialGraph, params: &ParamStore, cfg: &GatConfig) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let x = tape.constant(graph.features());
    let out = gat_forward(&tape, x, &graph.adjacency(), &bound, cfg)?;
    Ok(tape.value(out))
}

/// Final social representation `R_G` of one post, shape `[1, d]`.
pub fn extract_social(
    graph: &SocialGraph,
    post_id: &str,
    params: &ParamStore,
    cfg: &GatConfig,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = social_batch(&tape, graph, &[post_id], &bound, cfg)?;
    Ok(tape.value(out))
}
