use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub fn init_visual_params(store: &mut ParamStore, visual_dim: usize, d: usize) -> Result<()> {
    store.init_uniform("visual.w", visual_dim, d)?;
    store.init_zeros("visual.b", &[1, d])
}

/// `R_V = relu(V_r · W + b)` for a `[B × d_v]` batch of backbone features.
pub fn project_visual_batch(tape: &Tape, feats: Tensor, params: &Bound) -> Result<Var> {
    let w = params.get("visual.w")?;
    let expect = tape.shape(w)[0];
    let (_, dv) = feats.dims2("project_visual")?;
    if dv != expect {
        return Err(Error::Shape {
            op: "project_visual",
            left: feats.shape().to_vec(),
            right: tape.shape(w),
        });
    }
    let x = tape.constant(feats);
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, params.get("visual.b")?)?;
    Ok(tape.relu(z))
}

pub fn project_visual(visual_feat: &[f64], params: &ParamStore) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = project_visual_batch(&tape, Tensor::row(visual_feat), &bound)?;
    Ok(tape.value(out))
}
