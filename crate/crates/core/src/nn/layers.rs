//! Graph building blocks. Inputs are row-sample matrices `x[B×k]`; weights
//! are stored `d×k` (out × in) and biases `1×d`.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;

/// `x·Wᵀ + b`.
pub fn linear_forward(tape: &mut Tape, weight: NodeId, bias: Option<NodeId>, x: NodeId) -> Result<NodeId> {
    let y = tape.matmul_nt(x, weight)?;
    match bias {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// `x·W₀ᵀ + scale·(x·Aᵀ)·Bᵀ`, never materialising `W₀ + BA`.
pub fn lora_forward(
    tape: &mut Tape,
    base: NodeId,
    a: NodeId,
    b: NodeId,
    scale: f64,
    x: NodeId,
) -> Result<NodeId> {
    let y0 = tape.matmul_nt(x, base)?;
    let down = tape.matmul_nt(x, a)?;
    let mut up = tape.matmul_nt(down, b)?;
    if scale != 1.0 {
        up = tape.scale(up, scale);
    }
    tape.add(y0, up)
}

/// Single-head scaled dot-product attention for one sequence: `softmax(QKᵀ/√k)·V`.
pub fn scaled_dot_attention(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let width = tape.value(q).cols();
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (width as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}
