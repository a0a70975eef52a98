//! Word embeddings followed by a single-layer bidirectional LSTM.
//!
//! Gates follow the standard cell (`i, f, g, o` stacked in that order in the
//! weight rows); both directions start from zero state. Position `t` of the
//! output is the forward state at `t` concatenated with the backward state
//! at `t`.

use crate::autodiff::{Graph, ParamId, Var};

use super::{ModelError, ParamIds};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmParams {
    /// `[4h, d]`
    pub w_ih: ParamId,
    /// `[4h, h]`
    pub w_hh: ParamId,
    /// `[4h]`
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct QuestionEncoding {
    /// `[len, 2h]` hidden states.
    pub hidden: Var,
    /// Mean of the rows of `hidden`.
    pub mean: Var,
    pub len: usize,
}

pub fn encode_question(g: &mut Graph, ids: &ParamIds, tokens: &[usize]) -> Result<QuestionEncoding, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyQuestion);
    }
    let x = g.gather(ids.word_emb, tokens)?;
    let fwd = run_lstm(g, &ids.forward, x, tokens.len(), false)?;
    let bwd = run_lstm(g, &ids.backward, x, tokens.len(), true)?;
    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>, _>>()?;
    let hidden = g.stack_rows(&rows)?;
    let mean = g.mean_axis(hidden, 0)?;
    Ok(QuestionEncoding {
        hidden,
        mean,
        len: tokens.len(),
    })
}

/// Hidden states in position order, whichever way the cell ran.
fn run_lstm(g: &mut Graph, p: &LstmParams, x: Var, len: usize, reverse: bool) -> Result<Vec<Var>, ModelError> {
    let w_ih = g.param(p.w_ih);
    let w_hh = g.param(p.w_hh);
    let bias = g.param(p.bias);
    let h = g.params().get(p.w_hh).shape[1];
    let xw = g.matmul_nt(x, w_ih)?;
    let xw = g.add_row_bias(xw, bias)?;

    let mut states = vec![None; len];
    let mut prev: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for t in order {
        let mut pre = g.row(xw, t)?;
        if let Some((h_prev, _)) = prev {
            let rec = g.matmul(w_hh, h_prev)?;
            pre = g.add(pre, rec)?;
        }
        let i = g.slice(pre, 0, h)?;
        let i = g.sigmoid(i);
        let f = g.slice(pre, h, h)?;
        let f = g.sigmoid(f);
        let c_hat = g.slice(pre, 2 * h, h)?;
        let c_hat = g.tanh(c_hat);
        let o = g.slice(pre, 3 * h, h)?;
        let o = g.sigmoid(o);
        let mut c = g.mul(i, c_hat)?;
        if let Some((_, c_prev)) = prev {
            let keep = g.mul(f, c_prev)?;
            c = g.add(keep, c)?;
        }
        let tc = g.tanh(c);
        let h_t = g.mul(o, tc)?;
        states[t] = Some(h_t);
        prev = Some((h_t, c));
    }
    Ok(states.into_iter().map(|s| s.expect("every position visited")).collect())
}
