use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};

/// LSTM weights already bound into a graph. Gate order along the `4H` axis is
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `4H x I`
    pub w_ih: Var,
    /// `4H x H`
    pub w_hh: Var,
    /// `4H`
    pub bias: Var,
}

/// One LSTM step on a batch: `x: B x I`, `h, c: B x H`. Returns `(h', c')`.
///
/// ```text
/// i = σ(W_i x + U_i h + b_i)   f = σ(W_f x + U_f h + b_f)
/// g = tanh(W_g x + U_g h + b_g) o = σ(W_o x + U_o h + b_o)
/// c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
/// ```
pub fn lstm_step(g: &mut Graph, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let hs = g.shape(w.w_hh).to_vec();
    if hs.len() != 2 || hs[0] != 4 * hs[1] {
        return Err(TensorError::ShapeMismatch(format!(
            "w_hh must be 4H x H, got {hs:?}"
        )));
    }
    let hidden = hs[1];
    if g.shape(h) != g.shape(c) || g.shape(h).get(1) != Some(&hidden) {
        return Err(TensorError::ShapeMismatch(format!(
            "h {:?} and c {:?} must be B x {hidden}",
            g.shape(h),
            g.shape(c)
        )));
    }
    let from_x = g.linear(x, w.w_ih, Some(w.bias))?;
    let from_h = g.linear(h, w.w_hh, None)?;
    let gates = g.add(from_x, from_h)?;
    let pre_i = g.narrow(gates, 0, hidden)?;
    let pre_f = g.narrow(gates, hidden, hidden)?;
    let pre_g = g.narrow(gates, 2 * hidden, hidden)?;
    let pre_o = g.narrow(gates, 3 * hidden, hidden)?;
    let i = g.sigmoid(pre_i);
    let f = g.sigmoid(pre_f);
    let cand = g.tanh(pre_g);
    let o = g.sigmoid(pre_o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
