//! Pixel–point feature fusion.
//!
//! A small strided-convolution encoder produces image features at each
//! pyramid resolution; per cell, a sigmoid gate mixes projected image
//! features into the point branch. Since each image pixel corresponds
//! to a point and vice versa the alignment is positional, so the
//! attention mechanism reduces to channel gating.

use std::rc::Rc;

use crate::params::{mlp_forward, ConvVars, MlpVars, LEAKY_SLOPE};
use crate::tape::{Tape, Var};

/// Stack of stride-2 convolutions with a rectifier; returns one
/// flattened (n_l × C_l) feature map per pyramid level.
pub fn encode_image(tape: &mut Tape, rgb: Var, convs: &[ConvVars]) -> Vec<Var> {
    let mut levels = Vec::with_capacity(convs.len());
    let mut x = rgb;
    for cv in convs {
        let y = tape.conv2d(x, cv.w, cv.b, cv.stride);
        x = tape.leaky_relu(y, LEAKY_SLOPE);
        let s = tape.value(x).shape().to_vec();
        let flat = tape.reshape(x, &[s[0] * s[1], s[2]]);
        levels.push(flat);
    }
    levels
}

/// Attentive fusion: g = sigmoid(MLP_gate(img ⊕ pt)),
/// fused = MLP_out(pt ⊕ (g ⊙ MLP_proj(img))). Invalid cells output
/// zeros with zero gradient to both branches.
pub fn fuse(
    tape: &mut Tape,
    img_f: Var,
    pt_f: Var,
    w_gate: &MlpVars,
    w_proj: &MlpVars,
    w_out: &MlpVars,
    valid: Rc<Vec<bool>>,
) -> Var {
    let cat = tape.concat_last(&[img_f, pt_f]);
    let logits = mlp_forward(tape, w_gate, cat);
    let gate = tape.sigmoid(logits);
    let proj = mlp_forward(tape, w_proj, img_f);
    let gated = tape.mul(gate, proj);
    let mixed = tape.concat_last(&[pt_f, gated]);
    let out = mlp_forward(tape, w_out, mixed);
    tape.mask_rows(out, valid)
}

/// Non-attentive ablation arm: fused = MLP_out(pt ⊕ img).
pub fn fuse_concat(
    tape: &mut Tape,
    img_f: Var,
    pt_f: Var,
    w_out: &MlpVars,
    valid: Rc<Vec<bool>>,
) -> Var {
    let cat = tape.concat_last(&[pt_f, img_f]);
    let out = mlp_forward(tape, w_out, cat);
    tape.mask_rows(out, valid)
}
