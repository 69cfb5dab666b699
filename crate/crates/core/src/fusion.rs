//! Adaptive encoder–decoder fusion and the classifier head.
//!
//! The weighted overall objective lives here too, next to the two
//! alternative fusion operators used for ablation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var, EPS};
use crate::bridging::{attend, init_output, init_qkv, AttentionConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    /// Encoder–decoder over `Z_TV ⊕ Z_VT ⊕ R_G`.
    #[default]
    Adaptive,
    /// `Z ⊕ R_G` followed by a linear map to `d`.
    IsConcat,
    /// Cross-attention of `Z` over `R_G`.
    IsAtt,
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "af" | "adaptive" => Ok(Self::Adaptive),
            "is-concat" | "is_concat" => Ok(Self::IsConcat),
            "is-att" | "is_att" => Ok(Self::IsAtt),
            other => Err(Error::Config(format!(
                "unknown fusion kind `{other}` (expected af, is-concat or is-att)"
            ))),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adaptive => "af",
            Self::IsConcat => "is-concat",
            Self::IsAtt => "is-att",
        })
    }
}

/// Encoder `3d → d`, decoder `d → 3d`, classifier `d → 2`, and the
/// weights of both alternates.
pub fn init_fusion_params(store: &mut ParamStore, att: &AttentionConfig) -> Result<()> {
    let d = att.d;
    store.init_uniform("af.enc.w", 3 * d, d)?;
    store.init_zeros("af.enc.b", &[1, d])?;
    store.init_uniform("af.dec.w", d, 3 * d)?;
    store.init_zeros("af.dec.b", &[1, 3 * d])?;
    store.init_uniform("cls.w", d, 2)?;
    store.init_zeros("cls.b", &[1, 2])?;
    store.init_uniform("isconcat.w", 2 * d, d)?;
    store.init_zeros("isconcat.b", &[1, d])?;
    init_qkv(store, "isatt", att)?;
    init_output(store, "isatt.out", att)
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptiveFusion {
    /// `X = Z_TV ⊕ Z_VT ⊕ R_G`.
    pub input: Var,
    /// `X_fuse = tanh(X W_e + b_e)`.
    pub fused: Var,
    /// `X̂ = X_fuse W_d + b_d`.
    pub reconstruction: Var,
    /// Batch mean of `‖X̂ − X‖²`.
    pub loss: Var,
}

fn dense(tape: &Tape, x: Var, params: &Bound, name: &str) -> Result<Var> {
    let y = tape.matmul(x, params.get(&format!("{name}.w"))?)?;
    tape.add_row(y, params.get(&format!("{name}.b"))?)
}

pub fn adaptive_fuse(
    tape: &Tape,
    z_tv: Var,
    z_vt: Var,
    rg: Var,
    params: &Bound,
) -> Result<AdaptiveFusion> {
    let (a, b, c) = (tape.shape(z_tv), tape.shape(z_vt), tape.shape(rg));
    if a != b || a != c {
        return Err(Error::Shape {
            op: "adaptive_fuse",
            left: a,
            right: c,
        });
    }
    let input = tape.concat_cols(&[z_tv, z_vt, rg])?;
    let fused = tape.tanh(dense(tape, input, params, "af.enc")?);
    let reconstruction = dense(tape, fused, params, "af.dec")?;
    let loss = reconstruction_loss(tape, reconstruction, input)?;
    Ok(AdaptiveFusion {
        input,
        fused,
        reconstruction,
        loss,
    })
}

/// Squared Euclidean distance per row, averaged over rows.
pub fn reconstruction_loss(tape: &Tape, x_hat: Var, x: Var) -> Result<Var> {
    let diff = tape.sub(x_hat, x)?;
    let rows = tape.shape(diff)[0] as f64;
    Ok(tape.scale(tape.sum(tape.mul(diff, diff)?), 1.0 / rows))
}

/// Alternate fusion of `Z` and `R_G` into a `d`-vector per row.
pub fn fuse_alternate(
    tape: &Tape,
    kind: FusionKind,
    z: Var,
    rg: Var,
    params: &Bound,
    att: &AttentionConfig,
) -> Result<Var> {
    match kind {
        FusionKind::IsConcat => {
            let x = tape.concat_cols(&[z, rg])?;
            dense(tape, x, params, "isconcat")
        }
        FusionKind::IsAtt => attend(tape, z, rg, "isatt", "isatt", "isatt.out", params, att),
        FusionKind::Adaptive => Err(Error::invalid(
            "adaptive fusion is not an alternate; use adaptive_fuse",
        )),
    }
}

/// Two-class probabilities `[B × 2]`; column 1 is the rumor probability.
pub fn classify(tape: &Tape, x_fuse: Var, params: &Bound) -> Result<Var> {
    tape.softmax_rows(dense(tape, x_fuse, params, "cls")?)
}

/// Argmax class per row, ties to class 0.
pub fn predictions(probs: &Tensor) -> Vec<u8> {
    (0..probs.rows())
        .map(|i| u8::from(probs.get(i, 1) > probs.get(i, 0)))
        .collect()
}

/// Mean binary cross-entropy on the rumor probability clamped to `[EPS, 1−EPS]`.
pub fn ce_loss(tape: &Tape, probs: Var, labels: &[u8]) -> Result<Var> {
    let n = labels.len();
    if tape.shape(probs) != [n, 2] {
        return Err(Error::Shape {
            op: "ce_loss",
            left: tape.shape(probs),
            right: vec![n, 2],
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::invalid(format!("label {bad} outside {{0, 1}}")));
    }
    let y_hat = tape.clamp(tape.slice_cols(probs, 1, 1)?, EPS, 1.0 - EPS);
    let log_pos = tape.log(y_hat);
    let log_neg = tape.log(tape.affine(y_hat, -1.0, 1.0));
    let pos_w = Tensor::new(vec![n, 1], labels.iter().map(|&y| f64::from(y)).collect())?;
    let neg_w = pos_w.map(|y| 1.0 - y);
    let ll = tape.add(
        tape.mul_const(log_pos, pos_w)?,
        tape.mul_const(log_neg, neg_w)?,
    )?;
    Ok(tape.scale(tape.sum(ll), -1.0 / n as f64))
}

/// `λ = (λ1, λ2, λ3, λ4)` weighting scl, cmca, ml and af.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; 4]);

impl Default for LossWeights {
    fn default() -> Self {
        Self([0.3, 0.7, 0.4, 0.4])
    }
}

impl LossWeights {
    pub fn new(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {weights:?}"
            )));
        }
        Ok(Self(weights))
    }
}

/// Component values of one evaluation of the overall objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub scl: f64,
    pub cmca: f64,
    pub ml: f64,
    pub af: f64,
    pub total: f64,
    pub lambda: [f64; 4],
}

impl LossBreakdown {
    pub fn new(ce: f64, scl: f64, cmca: f64, ml: f64, af: f64, lambda: LossWeights) -> Self {
        let [l1, l2, l3, l4] = lambda.0;
        let total = ce + l1 * scl + l2 * cmca + l3 * ml + l4 * af;
        Self {
            ce,
            scl,
            cmca,
            ml,
            af,
            total,
            lambda: lambda.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.scl, self.cmca, self.ml, self.af, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Elementwise mean of several breakdowns (λ taken from the first).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown {
            lambda: items.first().map_or([0.0; 4], |b| b.lambda),
            ..Default::default()
        };
        for b in items {
            out.ce += b.ce / n;
            out.scl += b.scl / n;
            out.cmca += b.cmca / n;
            out.ml += b.ml / n;
            out.af += b.af / n;
            out.total += b.total / n;
        }
        out
    }
}

/// Loss terms recorded on a tape; `None` marks a disabled component.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub scl: Option<Var>,
    pub cmca: Option<Var>,
    pub ml: Option<Var>,
    pub af: Option<Var>,
}

/// `L_ce + λ1 L_scl + λ2 L_cmca + λ3 L_ml + λ4 L_af`, skipping disabled terms.
pub fn overall_loss(tape: &Tape, terms: &LossTerms, lambda: LossWeights) -> Result<Var> {
    let mut total = terms.ce;
    for (term, w) in [terms.scl, terms.cmca, terms.ml, terms.af]
        .into_iter()
        .zip(lambda.0)
    {
        if let Some(t) = term {
            total = tape.add(total, tape.scale(t, w))?;
        }
    }
    Ok(total)
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape, lambda: LossWeights) -> LossBreakdown {
        let v = |t: Option<Var>| t.map_or(0.0, |t| tape.scalar(t));
        LossBreakdown::new(
            tape.scalar(self.ce),
            v(self.scl),
            v(self.cmca),
            v(self.ml),
            v(self.af),
            lambda,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bound_cls(w: Tensor, b: Tensor) -> (Tape, Bound) {
        let mut s = ParamStore::new(0);
        s.insert("cls.w", w).unwrap();
        s.insert("cls.b", b).unwrap();
        let tape = Tape::new();
        let bound = s.bind(&tape);
        (tape, bound)
    }

    #[test]
    fn classify_closed_forms() {
        let (tape, p) = bound_cls(Tensor::zeros(&[2, 2]), Tensor::row(&[0.0, 0.0]));
        let x = tape.constant(Tensor::row(&[0.4, -1.0]));
        let probs = tape.value(classify(&tape, x, &p).unwrap());
        assert_eq!(probs.get(0, 1), 0.5);
        assert_eq!(predictions(&probs), vec![0]);

        let (tape, p) = bound_cls(Tensor::zeros(&[2, 2]), Tensor::row(&[0.0, 9f64.ln()]));
        let x = tape.constant(Tensor::row(&[0.4, -1.0]));
        let probs = tape.value(classify(&tape, x, &p).unwrap());
        assert!((probs.get(0, 1) - 0.9).abs() < 1e-15);
        assert_eq!(predictions(&probs), vec![1]);
    }

    #[test]
    fn ce_closed_forms() {
        let tape = Tape::new();
        let sure = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        assert!(tape.scalar(ce_loss(&tape, sure, &[1]).unwrap()) < 1e-11);
        let half = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap());
        assert!((tape.scalar(ce_loss(&tape, half, &[0, 1]).unwrap()) - 2f64.ln()).abs() < 1e-15);
        assert!(ce_loss(&tape, half, &[0, 2]).is_err());
    }

    #[test]
    fn overall_examples() {
        let tape = Tape::new();
        let one = |t: &Tape| t.constant(Tensor::scalar(1.0));
        let terms = LossTerms {
            ce: one(&tape),
            scl: Some(one(&tape)),
            cmca: Some(one(&tape)),
            ml: Some(one(&tape)),
            af: Some(one(&tape)),
        };
        let total = overall_loss(
            &tape,
            &terms,
            LossWeights::new([0.3, 0.7, 0.4, 0.4]).unwrap(),
        )
        .unwrap();
        assert!((tape.scalar(total) - 2.8).abs() < 1e-12);
        let ce = tape.constant(Tensor::scalar(0.731));
        let terms = LossTerms { ce, ..terms };
        let total = overall_loss(&tape, &terms, LossWeights::new([0.0; 4]).unwrap()).unwrap();
        assert_eq!(tape.scalar(total), 0.731);
        assert!(LossWeights::new([0.1, -0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn fusion_kind_parsing() {
        assert_eq!(
            "is-concat".parse::<FusionKind>().unwrap(),
            FusionKind::IsConcat
        );
        assert_eq!("AF".parse::<FusionKind>().unwrap(), FusionKind::Adaptive);
        assert!("is-co".parse::<FusionKind>().is_err());
        assert_eq!(FusionKind::IsAtt.to_string(), "is-att");
    }
}
