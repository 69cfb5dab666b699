//! Batch contrastive objectives: supervised contrastive loss over the
//! concatenated unimodal features, and cross-modal consistency alignment
//! between intrinsic and social representations.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau_scl: f64,
    pub tau_cmca: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau_scl: 0.5,
            tau_cmca: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_scl > 0.0 && self.tau_cmca > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SclLoss {
    pub loss: Var,
    /// No anchor had a same-label partner; `loss` is the constant 0.
    pub all_anchors_skipped: bool,
}

/// Row-normalised similarity `x̂ ŷᵀ / τ`.
fn scaled_similarity(tape: &Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let bt = tape.transpose(b)?;
    Ok(tape.scale(tape.matmul(a, bt)?, 1.0 / tau))
}

/// Supervised contrastive loss over `features: [N × 3d]` (`R_T ⊕ R_V ⊕ R_G`).
///
/// Per anchor `i`: `logsumexp_{a≠i}(s_ia) − mean_{p∈P(i)} s_ip` with
/// `s = x̂_i·x̂_j / τ`; anchors without positives are skipped and the rest averaged.
pub fn scl_loss(tape: &Tape, features: Var, labels: &[u8], tau: f64) -> Result<SclLoss> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "supervised contrastive loss needs N >= 2, got {n}"
        )));
    }
    if tape.shape(features).first() != Some(&n) {
        return Err(Error::Shape {
            op: "scl_loss",
            left: tape.shape(features),
            right: vec![n],
        });
    }
    let mut pos_weight = Tensor::zeros(&[n, n]);
    let mut anchor_weight = Tensor::zeros(&[n, 1]);
    let mut valid = 0usize;
    for i in 0..n {
        let positives = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        valid += 1;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                pos_weight.set(i, j, 1.0 / positives as f64);
            }
        }
        anchor_weight.set(i, 0, 1.0);
    }
    if valid == 0 {
        return Ok(SclLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            all_anchors_skipped: true,
        });
    }
    anchor_weight
        .data_mut()
        .iter_mut()
        .for_each(|w| *w /= valid as f64);

    let x = tape.row_l2_normalize(features)?;
    let s = scaled_similarity(tape, x, x, tau)?;
    let others: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let lse = tape.logsumexp_masked(s, others)?;
    let pos = tape.sum_rows(tape.mul_const(s, pos_weight)?)?;
    let per_anchor = tape.sub(lse, pos)?;
    let loss = tape.sum(tape.mul_const(per_anchor, anchor_weight)?);
    Ok(SclLoss {
        loss,
        all_anchors_skipped: false,
    })
}

/// One direction of the alignment loss, per anchor `[N × 1]`.
///
/// `l_i = −log( exp(s(a_i,b_i)) / (Σ_{k≠i} exp(s(a_i,a_k)) + Σ_k exp(s(a_i,b_k))) )`
/// with cosine similarities over `τ`.
fn alignment_direction(tape: &Tape, a_hat: Var, b_hat: Var, n: usize, tau: f64) -> Result<Var> {
    let s_aa = scaled_similarity(tape, a_hat, a_hat, tau)?;
    let s_ab = scaled_similarity(tape, a_hat, b_hat, tau)?;
    let joint = tape.concat_cols(&[s_aa, s_ab])?;
    let mask: Vec<bool> = (0..n)
        .flat_map(|i| (0..2 * n).map(move |j| j >= n || j != i))
        .collect();
    let lse = tape.logsumexp_masked(joint, mask)?;
    let pos = tape.sum_rows(tape.mul_const(s_ab, Tensor::eye(n))?)?;
    tape.sub(lse, pos)
}

/// Cross-modal consistency alignment between `Z` and `R_G` (both `[N × d]`,
/// row `i` of each belonging to the same post), symmetrised over both
/// directions and averaged by `2N`.
pub fn cmca_loss(tape: &Tape, z: Var, rg: Var, tau: f64) -> Result<Var> {
    let zs = tape.shape(z);
    if zs != tape.shape(rg) || zs.len() != 2 {
        return Err(Error::Shape {
            op: "cmca_loss",
            left: zs,
            right: tape.shape(rg),
        });
    }
    let n = zs[0];
    if n == 0 {
        return Err(Error::invalid("cross-modal alignment loss needs N >= 1"));
    }
    let z_hat = tape.row_l2_normalize(z)?;
    let r_hat = tape.row_l2_normalize(rg)?;
    let l_zr = alignment_direction(tape, z_hat, r_hat, n, tau)?;
    let l_rz = alignment_direction(tape, r_hat, z_hat, n, tau)?;
    let total = tape.add(tape.sum(l_zr), tape.sum(l_rz))?;
    Ok(tape.scale(total, 1.0 / (2.0 * n as f64)))
}
