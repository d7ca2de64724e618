use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::vit::{ModelVars, SubnetMode, VisionTransformer};

static WARNED_VANILLA: AtomicBool = AtomicBool::new(false);

/// Symmetric temperature-softened KL between the shared and personalized
/// subnets: `KL(s_g || s_p) + KL(s_p || s_g)` with `s = softmax(logits / T)`.
/// No `T^2` factor. Zero (a constant) when no head is personalized.
pub fn consistency_loss<S: Real>(
    model: &VisionTransformer,
    tape: &mut Tape<S>,
    vars: &ModelVars,
    images: &Tensor<S>,
    temperature: S,
) -> Result<Var> {
    if model.partition().is_vanilla() {
        if !WARNED_VANILLA.swap(true, Ordering::Relaxed) {
            log::warn!("no personalized heads: consistency loss is identically 0");
        }
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    let g = model.forward(tape, vars, images, SubnetMode::SharedOnly)?;
    let p = model.forward(tape, vars, images, SubnetMode::PersonalizedOnly)?;
    symmetric_kl(tape, g, p, temperature)
}

/// `KL(softmax(a/T) || softmax(b/T)) + KL(softmax(b/T) || softmax(a/T))`.
pub fn symmetric_kl<S: Real>(tape: &mut Tape<S>, a: Var, b: Var, temperature: S) -> Result<Var> {
    let sa = tape.softmax(a, temperature)?;
    let sb = tape.softmax(b, temperature)?;
    let ab = tape.kl_div(sa, sb)?;
    let ba = tape.kl_div(sb, sa)?;
    Ok(tape.add(ab, ba)?)
}

/// The three scalars of one local step. `total` is what gets differentiated.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub ce: Var,
    pub con: Var,
}

/// `L = L_ce(Full logits) + lambda * L_con`. The consistency term is always
/// recorded (for reporting); with `lambda == 0` it is left out of `total`.
pub fn local_objective<S: Real>(
    model: &VisionTransformer,
    tape: &mut Tape<S>,
    vars: &ModelVars,
    images: &Tensor<S>,
    labels: &[usize],
    lambda: S,
    temperature: S,
) -> Result<Objective> {
    let logits = model.forward(tape, vars, images, SubnetMode::Full)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let con = consistency_loss(model, tape, vars, images, temperature)?;
    let total = if lambda == S::zero() {
        ce
    } else {
        let weighted = tape.scale(con, lambda);
        tape.add(ce, weighted)?
    };
    Ok(Objective { total, ce, con })
}
