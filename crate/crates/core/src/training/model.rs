//! The full network: parameter layout and one batched forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::bridging::{
    cmca_loss, co_attention, init_co_attention, init_mutual_params, init_self_attention,
    intrinsic_rep, label_distributions, mutual_learning_loss, project_common, scl_loss,
    self_attention, AttentionConfig, Modality,
};
use crate::encoders::{
    build_social_graph, encode_text_batch, init_gat_params, init_text_params, init_visual_params,
    project_visual_batch, social_batch, PostRecord, SocialGraph, TextEncoderConfig, WordVectors,
};
use crate::error::{Error, Result};
use crate::fusion::{
    adaptive_fuse, ce_loss, classify, fuse_alternate, init_fusion_params, overall_loss, FusionKind,
    LossTerms,
};

use super::config::TrainConfig;
use super::data::DatasetBundle;

/// Offset mixed into the run seed for the word-vector table, so the table
/// and the trainable parameters come from different streams.
const WORD_SEED_OFFSET: u64 = 0x5_eed0_fa11;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub words: WordVectors,
    pub params: ParamStore,
    pub visual_dim: usize,
}

/// Switches for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Apply dropout before the classifier.
    pub dropout: bool,
    /// Record the loss terms (needs labels).
    pub losses: bool,
    /// Replace `R_G` by zeros.
    pub zero_social: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            dropout: true,
            losses: true,
            zero_social: false,
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOutput {
    /// `[B × 2]` class probabilities.
    pub probs: Var,
    pub terms: Option<LossTerms>,
    pub loss: Option<Var>,
    /// True when no anchor in the batch had a same-label partner.
    pub scl_skipped: bool,
}

impl Model {
    /// Fresh parameters for a corpus with `vocab_size` tokens and
    /// `visual_dim` backbone features.
    pub fn init(config: TrainConfig, vocab_size: usize, visual_dim: usize) -> Result<Self> {
        config.validate()?;
        if visual_dim == 0 {
            return Err(Error::Config(
                "visual feature dimension must be positive".into(),
            ));
        }
        let d = config.d;
        let words = WordVectors::random(vocab_size, d, config.seed.wrapping_add(WORD_SEED_OFFSET));
        let att = config.attention()?;
        let mut params = ParamStore::new(config.seed);
        init_text_params(&mut params, &config.text(vocab_size)?)?;
        init_visual_params(&mut params, visual_dim, d)?;
        init_gat_params(&mut params, &config.gat(), d)?;
        init_self_attention(&mut params, Modality::Text, &att)?;
        init_self_attention(&mut params, Modality::Visual, &att)?;
        init_co_attention(&mut params, &att)?;
        init_mutual_params(&mut params, d)?;
        init_fusion_params(&mut params, &att)?;
        Ok(Self {
            config,
            words,
            params,
            visual_dim,
        })
    }

    /// Sized for `data`.
    pub fn for_data(config: TrainConfig, data: &DatasetBundle) -> Result<Self> {
        Self::init(config, data.vocab_size(), data.visual_dim()?)
    }

    pub fn text_config(&self) -> Result<TextEncoderConfig> {
        self.config.text(self.words.vocab_size())
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        self.config.attention()
    }

    pub fn build_graph(&self, data: &DatasetBundle) -> Result<SocialGraph> {
        build_social_graph(
            &data.posts,
            &data.comments,
            &data.users,
            &self.words,
            &self.config.graph(),
        )
    }

    /// Runs the network on `posts`, recording everything on `tape`.
    pub fn forward<R: Rng>(
        &self,
        tape: &Tape,
        params: &Bound,
        graph: &SocialGraph,
        posts: &[&PostRecord],
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<BatchOutput> {
        let cfg = &self.config;
        let b = posts.len();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let att = self.attention()?;
        let text_cfg = self.text_config()?;

        let tokens: Vec<&[usize]> = posts.iter().map(|p| p.tokens.as_slice()).collect();
        let r_t = encode_text_batch(tape, &text_cfg, &self.words, &tokens, params)?;

        let mut feats = Vec::with_capacity(b * self.visual_dim);
        for p in posts {
            if p.visual_feat.len() != self.visual_dim {
                return Err(Error::invalid(format!(
                    "post `{}` has {} visual features, model expects {}",
                    p.id,
                    p.visual_feat.len(),
                    self.visual_dim
                )));
            }
            feats.extend_from_slice(&p.visual_feat);
        }
        let r_v =
            project_visual_batch(tape, Tensor::new(vec![b, self.visual_dim], feats)?, params)?;

        let r_g = if opts.zero_social {
            tape.constant(Tensor::zeros(&[b, cfg.d]))
        } else {
            let ids: Vec<&str> = posts.iter().map(|p| p.id.as_str()).collect();
            social_batch(tape, graph, &ids, params, &cfg.gat())?
        };

        let labels: Vec<u8> = posts.iter().map(|p| p.label).collect();
        let mut scl = None;
        let mut scl_skipped = false;
        if opts.losses && cfg.mre {
            let r = tape.concat_cols(&[r_t, r_v, r_g])?;
            let out = scl_loss(tape, r, &labels, cfg.tau_scl)?;
            scl_skipped = out.all_anchors_skipped;
            scl = Some(out.loss);
        }

        let z_t = self_attention(tape, r_t, Modality::Text, params, &att)?;
        let z_v = self_attention(tape, r_v, Modality::Visual, params, &att)?;
        let (z_tv, z_vt) = co_attention(tape, z_t, z_v, params, &att)?;
        let z = intrinsic_rep(tape, z_tv, z_vt)?;

        let cmca = if opts.losses && cfg.cmca {
            Some(cmca_loss(tape, z, r_g, cfg.tau_cmca)?)
        } else {
            None
        };

        let ml = if opts.losses && cfg.ml {
            let (e_z, e_g) = project_common(tape, z, r_g, params)?;
            let (p_z, p_g) = label_distributions(tape, e_z, e_g, params)?;
            Some(mutual_learning_loss(tape, p_z, p_g)?)
        } else {
            None
        };

        let (x_fuse, af) = match cfg.effective_fusion() {
            FusionKind::Adaptive => {
                let fused = adaptive_fuse(tape, z_tv, z_vt, r_g, params)?;
                (fused.fused, opts.losses.then_some(fused.loss))
            }
            kind => (fuse_alternate(tape, kind, z, r_g, params, &att)?, None),
        };
        let x_fuse = tape.dropout(x_fuse, cfg.dropout, opts.dropout, rng)?;
        let probs = classify(tape, x_fuse, params)?;

        if !opts.losses {
            return Ok(BatchOutput {
                probs,
                terms: None,
                loss: None,
                scl_skipped,
            });
        }
        let terms = LossTerms {
            ce: ce_loss(tape, probs, &labels)?,
            scl,
            cmca,
            ml,
            af,
        };
        let loss = overall_loss(tape, &terms, cfg.lambda)?;
        Ok(BatchOutput {
            probs,
            terms: Some(terms),
            loss: Some(loss),
            scl_skipped,
        })
    }

    /// Class probabilities `[N × 2]` for `indices`, evaluated in chunks
    /// with dropout off.
    pub fn predict_proba(
        &self,
        graph: &SocialGraph,
        data: &DatasetBundle,
        indices: &[usize],
        zero_social: bool,
    ) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(indices.len() * 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = ForwardOptions {
            zero_social,
            ..ForwardOptions::eval()
        };
        for chunk in indices.chunks(self.config.batch_size.max(1)) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let posts: Vec<&PostRecord> = chunk.iter().map(|&i| &data.posts[i]).collect();
            let out = self.forward(&tape, &bound, graph, &posts, opts, &mut rng)?;
            rows.extend_from_slice(tape.value(out.probs).data());
        }
        Tensor::new(vec![indices.len(), 2], rows)
    }
}
