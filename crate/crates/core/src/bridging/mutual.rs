//! Mutual learning between the intrinsic and social classifiers.

use crate::autodiff::{Bound, ParamStore, Tape, Var, EPS};
use crate::error::{Error, Result};

pub fn init_mutual_params(store: &mut ParamStore, d: usize) -> Result<()> {
    for branch in ["z", "g"] {
        store.init_uniform(&format!("ml.{branch}.w"), d, d)?;
        store.init_zeros(&format!("ml.{branch}.b"), &[1, d])?;
        store.init_uniform(&format!("ml.{branch}.fc.w"), d, 2)?;
        store.init_zeros(&format!("ml.{branch}.fc.b"), &[1, 2])?;
    }
    Ok(())
}

fn dense(tape: &Tape, x: Var, params: &Bound, name: &str) -> Result<Var> {
    let y = tape.matmul(x, params.get(&format!("{name}.w"))?)?;
    tape.add_row(y, params.get(&format!("{name}.b"))?)
}

/// `E_Z = relu(Z W_Z + b_Z)`, `E_RG = relu(R_G W_RG + b_RG)`.
pub fn project_common(tape: &Tape, z: Var, rg: Var, params: &Bound) -> Result<(Var, Var)> {
    let e_z = tape.relu(dense(tape, z, params, "ml.z")?);
    let e_g = tape.relu(dense(tape, rg, params, "ml.g")?);
    Ok((e_z, e_g))
}

/// Two-class label distributions of each branch.
pub fn label_distributions(tape: &Tape, e_z: Var, e_rg: Var, params: &Bound) -> Result<(Var, Var)> {
    let p_z = tape.softmax_rows(dense(tape, e_z, params, "ml.z.fc")?)?;
    let p_g = tape.softmax_rows(dense(tape, e_rg, params, "ml.g.fc")?)?;
    Ok((p_z, p_g))
}

/// Row-wise `KL(P‖Q)`, `[B × 1]`, with both clamped to `[EPS, 1]`.
pub fn kl_divergence(tape: &Tape, p: Var, q: Var) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) {
        return Err(Error::Shape {
            op: "kl_divergence",
            left: tape.shape(p),
            right: tape.shape(q),
        });
    }
    let pc = tape.clamp(p, EPS, 1.0);
    let qc = tape.clamp(q, EPS, 1.0);
    let log_ratio = tape.sub(tape.log(pc), tape.log(qc))?;
    tape.sum_rows(tape.mul(pc, log_ratio)?)
}

/// `KL(P‖Q)` over plain slices.
pub fn kl_divergence_values(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.clamp(EPS, 1.0), b.clamp(EPS, 1.0));
            a * (a.ln() - b.ln())
        })
        .sum())
}

/// Batch mean of `(KL(P_Z‖P_RG) + KL(P_RG‖P_Z)) / 2`.
pub fn mutual_learning_loss(tape: &Tape, p_z: Var, p_rg: Var) -> Result<Var> {
    let fwd = kl_divergence(tape, p_z, p_rg)?;
    let bwd = kl_divergence(tape, p_rg, p_z)?;
    let both = tape.add(fwd, bwd)?;
    let rows = tape.shape(both)[0] as f64;
    Ok(tape.scale(tape.sum(both), 0.5 / rows))
}
