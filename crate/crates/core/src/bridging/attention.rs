//! Token-lifted multi-head attention over per-post feature vectors.
//!
//! A `d`-vector is zero-padded to `lift_tokens · ⌈d / lift_tokens⌉` entries and
//! reshaped into `lift_tokens` tokens. Tokens are projected to queries, keys
//! and values of width `d' = H · ⌈d / H⌉`, attended per head with scale
//! `1/√(d'/H)`, mapped back to `d` by an output projection and mean-pooled
//! over tokens.

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
    pub lift_tokens: usize,
}

impl AttentionConfig {
    pub fn new(d: usize, heads: usize, lift_tokens: usize) -> Result<Self> {
        if d == 0 || heads == 0 || lift_tokens == 0 {
            return Err(Error::Config(
                "attention needs positive d, heads and lift_tokens".into(),
            ));
        }
        if lift_tokens > d {
            return Err(Error::Config(format!(
                "cannot lift a {d}-vector into {lift_tokens} tokens"
            )));
        }
        Ok(Self {
            d,
            heads,
            lift_tokens,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.d.div_ceil(self.lift_tokens)
    }

    /// Inner attention width `d'`, divisible by the head count.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.d.div_ceil(self.heads)
    }
}

/// Query/key/value projections under `{prefix}.{q,k,v}.w` with biases
/// `{prefix}.q.b` and `{prefix}.v.b`.
///
/// Keys carry no bias: a key bias adds the same `q·b` to every score of a
/// query and cancels in the softmax.
pub fn init_qkv(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig) -> Result<()> {
    for m in ["q", "k", "v"] {
        store.init_uniform(&format!("{prefix}.{m}.w"), cfg.token_dim(), cfg.inner_dim())?;
        if m != "k" {
            store.init_zeros(&format!("{prefix}.{m}.b"), &[1, cfg.inner_dim()])?;
        }
    }
    Ok(())
}

/// Output projection `{name}.{w,b}`, `d' → d`.
pub fn init_output(store: &mut ParamStore, name: &str, cfg: &AttentionConfig) -> Result<()> {
    store.init_uniform(&format!("{name}.w"), cfg.inner_dim(), cfg.d)?;
    store.init_zeros(&format!("{name}.b"), &[1, cfg.d])
}

/// Self-attention projections for modality `m` plus `W_m^O`.
pub fn init_self_attention(
    store: &mut ParamStore,
    modality: Modality,
    cfg: &AttentionConfig,
) -> Result<()> {
    let p = modality.self_prefix();
    init_qkv(store, p, cfg)?;
    init_output(store, &format!("{p}.out"), cfg)
}

/// Co-attention projections for both modalities plus `W_TV^O` and `W_VT^O`.
pub fn init_co_attention(store: &mut ParamStore, cfg: &AttentionConfig) -> Result<()> {
    init_qkv(store, "co.t", cfg)?;
    init_qkv(store, "co.v", cfg)?;
    init_output(store, "co.tv.out", cfg)?;
    init_output(store, "co.vt.out", cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    fn self_prefix(self) -> &'static str {
        match self {
            Modality::Text => "sa.t",
            Modality::Visual => "sa.v",
        }
    }
}

/// `[B × d] -> [B·L × ⌈d/L⌉]`, zero-padding the tail of every row.
pub fn lift(tape: &Tape, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    let shape = tape.shape(x);
    let (b, d) = match shape.as_slice() {
        [b, d] if *d == cfg.d => (*b, *d),
        _ => {
            return Err(Error::Shape {
                op: "lift",
                left: shape,
                right: vec![cfg.d],
            })
        }
    };
    let padded = cfg.lift_tokens * cfg.token_dim();
    let x = if padded > d {
        let zeros = tape.constant(Tensor::zeros(&[b, padded - d]));
        tape.concat_cols(&[x, zeros])?
    } else {
        x
    };
    tape.reshape(x, &[b * cfg.lift_tokens, cfg.token_dim()])
}

fn linear(tape: &Tape, x: Var, params: &Bound, name: &str) -> Result<Var> {
    let y = tape.matmul(x, params.get(&format!("{name}.w"))?)?;
    tape.add_row(y, params.get(&format!("{name}.b"))?)
}

/// Queries come from `query_src` through `{q_prefix}.q`. Keys and values
/// come from `kv_src` through `{kv_prefix}.k` / `{kv_prefix}.v`, and `out`
/// names the output projection.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    tape: &Tape,
    query_src: Var,
    kv_src: Var,
    q_prefix: &str,
    kv_prefix: &str,
    out: &str,
    params: &Bound,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let qt = lift(tape, query_src, cfg)?;
    let kvt = if kv_src == query_src {
        qt
    } else {
        lift(tape, kv_src, cfg)?
    };
    let q = linear(tape, qt, params, &format!("{q_prefix}.q"))?;
    let k = tape.matmul(kvt, params.get(&format!("{kv_prefix}.k.w"))?)?;
    let v = linear(tape, kvt, params, &format!("{kv_prefix}.v"))?;
    let att = tape.block_attention(q, k, v, cfg.heads, cfg.lift_tokens, cfg.lift_tokens)?;
    let o = linear(tape, att, params, out)?;
    tape.group_mean_rows(o, cfg.lift_tokens)
}

/// `Z_m` from `R_m`.
pub fn self_attention(
    tape: &Tape,
    r: Var,
    modality: Modality,
    params: &Bound,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let p = modality.self_prefix();
    attend(tape, r, r, p, p, &format!("{p}.out"), params, cfg)
}

/// `(Z_TV, Z_VT)`: text queries over visual keys/values and the reverse.
pub fn co_attention(
    tape: &Tape,
    z_t: Var,
    z_v: Var,
    params: &Bound,
    cfg: &AttentionConfig,
) -> Result<(Var, Var)> {
    let z_tv = attend(tape, z_t, z_v, "co.t", "co.v", "co.tv.out", params, cfg)?;
    let z_vt = attend(tape, z_v, z_t, "co.v", "co.t", "co.vt.out", params, cfg)?;
    Ok((z_tv, z_vt))
}

/// `Z = (Z_TV + Z_VT) / 2`.
pub fn intrinsic_rep(tape: &Tape, z_tv: Var, z_vt: Var) -> Result<Var> {
    let s = tape.add(z_tv, z_vt)?;
    Ok(tape.scale(s, 0.5))
}
