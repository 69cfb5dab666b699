//! Text CNN: parallel 1-D convolutions over word vectors, relu, global max-pool.
//!
//! Windows start at every real token position; positions past the end of
//! the sequence read as zero vectors. The output therefore depends only on
//! the tokens up to the last non-padding one, however much padding follows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::records::{real_length, PAD_TOKEN};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub kernel_sizes: Vec<usize>,
    pub filters_per_kernel: Vec<usize>,
}

impl TextEncoderConfig {
    /// Splits `embed_dim` output channels across `kernel_sizes`, earlier
    /// kernels taking the remainder, so the pooled maps concatenate to
    /// exactly `embed_dim`.
    pub fn new(
        vocab_size: usize,
        embed_dim: usize,
        seq_len: usize,
        kernel_sizes: &[usize],
    ) -> Result<Self> {
        if kernel_sizes.is_empty() || kernel_sizes.contains(&0) {
            return Err(Error::Config(
                "kernel sizes must be non-empty and positive".into(),
            ));
        }
        if embed_dim < kernel_sizes.len() {
            return Err(Error::Config(format!(
                "embedding dim {embed_dim} too small for {} kernels",
                kernel_sizes.len()
            )));
        }
        if seq_len == 0 || vocab_size < 2 {
            return Err(Error::Config(
                "seq_len must be positive and vocab must exceed the padding token".into(),
            ));
        }
        let n = kernel_sizes.len();
        let filters = (0..n)
            .map(|i| embed_dim / n + usize::from(i < embed_dim % n))
            .collect();
        Ok(Self {
            vocab_size,
            embed_dim,
            seq_len,
            kernel_sizes: kernel_sizes.to_vec(),
            filters_per_kernel: filters,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.filters_per_kernel.iter().sum()
    }

    pub fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.seq_len {
            return Err(Error::invalid(format!(
                "token sequence of length {} exceeds seq_len {}",
                tokens.len(),
                self.seq_len
            )));
        }
        if real_length(tokens) == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "unknown token id {bad} (vocab size {})",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Frozen word-vector table; row [`PAD_TOKEN`] is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    table: Tensor,
}

impl WordVectors {
    pub fn new(table: Tensor) -> Result<Self> {
        let (v, _) = table.dims2("word vectors")?;
        if v == 0 {
            return Err(Error::invalid("empty word-vector table"));
        }
        if table.row_slice(PAD_TOKEN).iter().any(|&x| x != 0.0) {
            return Err(Error::invalid(
                "padding row of the word-vector table must be zero",
            ));
        }
        Ok(Self { table })
    }

    /// Seeded Gaussian vectors with variance `1/dim`, standing in for
    /// pretrained embeddings.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut table = Tensor::zeros(&[vocab_size, dim]);
        for t in 1..vocab_size {
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                table.set(t, j, z * scale);
            }
        }
        Self { table }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vector(&self, token: usize) -> &[f64] {
        self.table.row_slice(token)
    }

    /// Mean word vector over the real tokens; zero for an empty sequence.
    pub fn mean_embedding(&self, tokens: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        let real: Vec<usize> = tokens.iter().copied().filter(|&t| t != PAD_TOKEN).collect();
        if real.is_empty() {
            return acc;
        }
        for &t in &real {
            for (a, v) in acc.iter_mut().zip(self.vector(t)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= real.len() as f64);
        acc
    }
}

pub fn init_text_params(store: &mut ParamStore, cfg: &TextEncoderConfig) -> Result<()> {
    for (&k, &f) in cfg.kernel_sizes.iter().zip(&cfg.filters_per_kernel) {
        store.init_uniform(&format!("text.conv{k}.w"), k * cfg.embed_dim, f)?;
        store.init_zeros(&format!("text.conv{k}.b"), &[1, f])?;
    }
    Ok(())
}

/// Unfolded windows for kernel width `k`: one row per (post, start position)
/// holding `k` concatenated word vectors, plus per-post row offsets.
pub fn unfold_windows(
    batch: &[&[usize]],
    words: &WordVectors,
    k: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let d = words.dim();
    let mut data = Vec::new();
    let mut offsets = vec![0];
    for tokens in batch {
        let len = real_length(tokens);
        for start in 0..len {
            for pos in start..start + k {
                let tok = tokens.get(pos).copied().unwrap_or(PAD_TOKEN);
                data.extend_from_slice(words.vector(tok));
            }
        }
        offsets.push(offsets.last().unwrap() + len);
    }
    let rows = *offsets.last().unwrap();
    Ok((Tensor::new(vec![rows, k * d], data)?, offsets))
}

/// Batched text encoder: `[B × d]` with one row per token sequence.
pub fn encode_text_batch(
    tape: &Tape,
    cfg: &TextEncoderConfig,
    words: &WordVectors,
    batch: &[&[usize]],
    params: &Bound,
) -> Result<Var> {
    if words.dim() != cfg.embed_dim || words.vocab_size() != cfg.vocab_size {
        return Err(Error::Shape {
            op: "encode_text",
            left: words.table().shape().to_vec(),
            right: vec![cfg.vocab_size, cfg.embed_dim],
        });
    }
    for tokens in batch {
        cfg.validate_tokens(tokens)?;
    }
    let mut pooled = Vec::with_capacity(cfg.kernel_sizes.len());
    for &k in &cfg.kernel_sizes {
        let (windows, offsets) = unfold_windows(batch, words, k)?;
        let x = tape.constant(windows);
        let conv = tape.matmul(x, params.get(&format!("text.conv{k}.w"))?)?;
        let conv = tape.add_row(conv, params.get(&format!("text.conv{k}.b"))?)?;
        let act = tape.relu(conv);
        pooled.push(tape.group_max_rows(act, &offsets)?);
    }
    tape.concat_cols(&pooled)
}

/// Single-sequence text representation `R_T`, shape `[1, d]`.
pub fn encode_text(
    tokens: &[usize],
    cfg: &TextEncoderConfig,
    words: &WordVectors,
    params: &ParamStore,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = encode_text_batch(&tape, cfg, words, &[tokens], &bound)?;
    Ok(tape.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(
        vocab: usize,
        d: usize,
        kernels: &[usize],
        seed: u64,
    ) -> (TextEncoderConfig, WordVectors, ParamStore) {
        let cfg = TextEncoderConfig::new(vocab, d, 10, kernels).unwrap();
        let words = WordVectors::random(vocab, d, seed);
        let mut store = ParamStore::new(seed);
        init_text_params(&mut store, &cfg).unwrap();
        for (name, _) in store.clone().iter() {
            if name.ends_with(".b") {
                let shape = store.get(name).unwrap().shape().to_vec();
                let n: usize = shape.iter().product();
                store
                    .set(
                        name,
                        Tensor::new(shape, (0..n).map(|i| 0.05 * i as f64 - 0.1).collect())
                            .unwrap(),
                    )
                    .unwrap();
            }
        }
        (cfg, words, store)
    }

    #[test]
    fn filters_sum_to_dim() {
        let cfg = TextEncoderConfig::new(10, 32, 8, &[3, 4, 5]).unwrap();
        assert_eq!(cfg.filters_per_kernel, vec![11, 11, 10]);
        assert_eq!(cfg.output_dim(), 32);
        let cfg = TextEncoderConfig::new(10, 300, 8, &[3, 4, 5]).unwrap();
        assert_eq!(cfg.filters_per_kernel, vec![100, 100, 100]);
    }

    #[test]
    fn zero_embeddings_zero_bias_give_zero() {
        let cfg = TextEncoderConfig::new(6, 6, 10, &[3, 4, 5]).unwrap();
        let words = WordVectors::new(Tensor::zeros(&[6, 6])).unwrap();
        let mut store = ParamStore::new(1);
        init_text_params(&mut store, &cfg).unwrap();
        let out = encode_text(&[1, 2, 3, 4, 0, 0], &cfg, &words, &store).unwrap();
        assert_eq!(out, Tensor::zeros(&[1, 6]));
    }

    #[test]
    fn unit_kernel_identity_filters_is_max_over_positions() {
        let d = 4;
        let cfg = TextEncoderConfig::new(5, d, 6, &[1]).unwrap();
        let words = WordVectors::random(5, d, 3);
        let mut store = ParamStore::new(0);
        store.insert("text.conv1.w", Tensor::eye(d)).unwrap();
        store.init_zeros("text.conv1.b", &[1, d]).unwrap();
        let tokens = [2, 4, 1, 3, 0, 0];
        let out = encode_text(&tokens, &cfg, &words, &store).unwrap();
        for j in 0..d {
            let expect = tokens[..4]
                .iter()
                .map(|&t| words.vector(t)[j])
                .fold(0.0f64, f64::max);
            assert_eq!(out.get(0, j), expect);
        }
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let (cfg, words, store) = setup(12, 6, &[2, 3], 11);
        let tokens = [5, 1, 11, 7, 7, 2, 9, 0, 0, 0];
        let out = encode_text(&tokens, &cfg, &words, &store).unwrap();
        let len = 7;
        let mut col = 0;
        for (&k, &f) in cfg.kernel_sizes.iter().zip(&cfg.filters_per_kernel) {
            let w = store.get(&format!("text.conv{k}.w")).unwrap();
            let b = store.get(&format!("text.conv{k}.b")).unwrap();
            for filt in 0..f {
                let mut best = f64::NEG_INFINITY;
                for start in 0..len {
                    let mut s = b.data()[filt];
                    for off in 0..k {
                        let tok = if start + off < tokens.len() {
                            tokens[start + off]
                        } else {
                            0
                        };
                        for c in 0..cfg.embed_dim {
                            s += words.vector(tok)[c] * w.get(off * cfg.embed_dim + c, filt);
                        }
                    }
                    best = best.max(s.max(0.0));
                }
                assert!((out.get(0, col) - best).abs() < 1e-10);
                col += 1;
            }
        }
    }

    #[test]
    fn trailing_padding_does_not_matter() {
        let (_, words, store) = setup(12, 6, &[3, 4, 5], 5);
        let cfg = TextEncoderConfig::new(12, 6, 20, &[3, 4, 5]).unwrap();
        let short = encode_text(&[3, 8, 1, 0], &cfg, &words, &store).unwrap();
        let long =
            encode_text(&[3, 8, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0], &cfg, &words, &store).unwrap();
        assert_eq!(short, long);
    }

    #[test]
    fn errors() {
        let (cfg, words, store) = setup(12, 6, &[3], 5);
        assert!(encode_text(&[], &cfg, &words, &store).is_err());
        assert!(encode_text(&[0, 0, 0], &cfg, &words, &store).is_err());
        assert!(encode_text(&[1, 12], &cfg, &words, &store).is_err());
    }
}
