//! Scalar-loop reference implementations shared by the integration tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` rows and nested loops so it
//! shares no code with the tape kernels it is compared against.

#![allow(dead_code, clippy::needless_range_loop)]

use ismaf::autodiff::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-12;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Rows {
    (0..m)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn rows_of(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn param_rows(store: &ParamStore, name: &str) -> Rows {
    rows_of(store.get(name).unwrap())
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add_bias(x: &Rows, b: &[f64]) -> Rows {
    x.iter()
        .map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect())
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + EPS)
}

/// Supervised contrastive loss by explicit double loop.
pub fn scl_oracle(feats: &Rows, labels: &[u8], tau: f64) -> f64 {
    let n = feats.len();
    let x: Rows = feats
        .iter()
        .map(|r| r.iter().map(|v| v / (norm(r) + EPS)).collect())
        .collect();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (dot(&x[i], &x[a]) / tau).exp();
            }
        }
        let mut s = 0.0;
        for &p in &pos {
            s -= ((dot(&x[i], &x[p]) / tau).exp() / denom).ln();
        }
        total += s / pos.len() as f64;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Cross-modal alignment loss by explicit double loop over both directions.
pub fn cmca_oracle(z: &Rows, r: &Rows, tau: f64) -> f64 {
    let n = z.len();
    let direction = |a: &Rows, b: &Rows| {
        let mut s = 0.0;
        for i in 0..n {
            let num = (cosine(&a[i], &b[i]) / tau).exp();
            let mut den = 0.0;
            for k in 0..n {
                if k != i {
                    den += (cosine(&a[i], &a[k]) / tau).exp();
                }
                den += (cosine(&a[i], &b[k]) / tau).exp();
            }
            s -= (num / den).ln();
        }
        s
    };
    (direction(z, r) + direction(r, z)) / (2.0 * n as f64)
}

pub fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let (a, b) = (p[i].clamp(EPS, 1.0), q[i].clamp(EPS, 1.0));
        s += a * (a / b).ln();
    }
    s
}

/// Token-lifted multi-head attention, one post at a time, every score and
/// weighted sum written out.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    query_src: &Rows,
    kv_src: &Rows,
    store: &ParamStore,
    q_prefix: &str,
    kv_prefix: &str,
    out: &str,
    heads: usize,
    tokens: usize,
) -> Rows {
    let wq = param_rows(store, &format!("{q_prefix}.q.w"));
    let bq = param_rows(store, &format!("{q_prefix}.q.b"))[0].clone();
    let wk = param_rows(store, &format!("{kv_prefix}.k.w"));
    let wv = param_rows(store, &format!("{kv_prefix}.v.w"));
    let bv = param_rows(store, &format!("{kv_prefix}.v.b"))[0].clone();
    let wo = param_rows(store, &format!("{out}.w"));
    let bo = param_rows(store, &format!("{out}.b"))[0].clone();
    let token_dim = wq.len();
    let inner = wq[0].len();
    let dh = inner / heads;
    let d = wo[0].len();

    let split = |row: &[f64]| -> Rows {
        (0..tokens)
            .map(|t| {
                (0..token_dim)
                    .map(|c| row.get(t * token_dim + c).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect()
    };
    let proj = |toks: &Rows, w: &Rows, b: Option<&[f64]>| -> Rows {
        toks.iter()
            .map(|tok| {
                (0..inner)
                    .map(|c| {
                        let mut s = b.map_or(0.0, |b| b[c]);
                        for k in 0..token_dim {
                            s += tok[k] * w[k][c];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    };

    let mut result = Vec::new();
    for (qrow, kvrow) in query_src.iter().zip(kv_src) {
        let (qt, kt) = (split(qrow), split(kvrow));
        let q = proj(&qt, &wq, Some(&bq));
        let k = proj(&kt, &wk, None);
        let v = proj(&kt, &wv, Some(&bv));
        let mut pooled = vec![0.0; d];
        for i in 0..tokens {
            let mut att = vec![0.0; inner];
            for h in 0..heads {
                let mut scores = vec![0.0; tokens];
                for j in 0..tokens {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += q[i][c] * k[j][c];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let p = softmax(&scores);
                for j in 0..tokens {
                    for c in h * dh..(h + 1) * dh {
                        att[c] += p[j] * v[j][c];
                    }
                }
            }
            for c in 0..d {
                let mut s = bo[c];
                for k in 0..inner {
                    s += att[k] * wo[k][c];
                }
                pooled[c] += s / tokens as f64;
            }
        }
        result.push(pooled);
    }
    result
}

/// One signed GAT layer by per-node enumeration over an explicit
/// neighbour list (self-loops included by the caller).
pub fn gat_oracle(
    h: &Rows,
    nbrs: &[Vec<usize>],
    store: &ParamStore,
    layer: usize,
    heads: usize,
    slope: f64,
) -> Rows {
    let w = param_rows(store, &format!("gat.{layer}.w"));
    let a_self = param_rows(store, &format!("gat.{layer}.a_self"));
    let a_nbr = param_rows(store, &format!("gat.{layer}.a_nbr"));
    let pw = param_rows(store, &format!("gat.{layer}.proj.w"));
    let pb = param_rows(store, &format!("gat.{layer}.proj.b"))[0].clone();
    let wh = matmul(h, &w);
    let width = w[0].len();
    let dh = width / heads;
    let mut agg = vec![vec![0.0; width]; h.len()];
    for i in 0..h.len() {
        for hd in 0..heads {
            let e: Vec<f64> = nbrs[i]
                .iter()
                .map(|&j| {
                    let mut p = 0.0;
                    for c in 0..dh {
                        p += a_self[hd][c] * wh[i][hd * dh + c] + a_nbr[hd][c] * wh[j][hd * dh + c];
                    }
                    if p > 0.0 {
                        p
                    } else {
                        slope * p
                    }
                })
                .collect();
            let mags = softmax(&e.iter().map(|x| x.abs()).collect::<Vec<_>>());
            for (n, &j) in nbrs[i].iter().enumerate() {
                let alpha = if e[n] < 0.0 { -mags[n] } else { mags[n] };
                for c in 0..dh {
                    agg[i][hd * dh + c] += alpha * wh[j][hd * dh + c];
                }
            }
        }
    }
    let act: Rows = agg
        .iter()
        .map(|r| r.iter().map(|v| v.tanh()).collect())
        .collect();
    add_bias(&matmul(&act, &pw), &pb)
}

/// Text CNN by direct sliding windows: for each kernel, each start position
/// up to the last real token, dot the window with every filter.
pub fn text_oracle(
    tokens: &[usize],
    table: &Rows,
    store: &ParamStore,
    kernels: &[usize],
) -> Vec<f64> {
    let d = table[0].len();
    let len = tokens.iter().rposition(|&t| t != 0).map_or(0, |p| p + 1);
    let mut out = Vec::new();
    for &k in kernels {
        let w = param_rows(store, &format!("text.conv{k}.w"));
        let b = param_rows(store, &format!("text.conv{k}.b"))[0].clone();
        for f in 0..b.len() {
            let mut best = f64::NEG_INFINITY;
            for start in 0..len {
                let mut s = b[f];
                for off in 0..k {
                    let tok = tokens.get(start + off).copied().unwrap_or(0);
                    for c in 0..d {
                        s += table[tok][c] * w[off * d + c][f];
                    }
                }
                best = best.max(s.max(0.0));
            }
            out.push(best);
        }
    }
    out
}
