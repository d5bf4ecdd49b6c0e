//! History encoding: a node LSTM over each agent's own motion and an
//! edge LSTM over its aggregated neighbor states, both started from
//! zero states and read out at the final step.

use crate::autodiff::cells::{lstm_step, LstmVars};
use crate::autodiff::tape::{GradError, Tape, Var};

/// Run an LSTM over `steps` (each a constant `n x input` matrix) and
/// return the final hidden state, `n x hidden`.
pub fn run_lstm(
    tape: &mut Tape,
    params: &LstmVars,
    steps: &[Vec<f32>],
    n: usize,
    input: usize,
    hidden: usize,
) -> Result<Var, GradError> {
    let mut h = tape.zeros(n, hidden)?;
    let mut c = tape.zeros(n, hidden)?;
    for step in steps {
        let x = tape.constant_from_f32(step, n, input)?;
        let (h2, c2) = lstm_step(tape, params, x, h, c)?;
        h = h2;
        c = c2;
    }
    Ok(h)
}

/// Encode one agent's own past features, `H x 4 -> 1 x hidden`.
pub fn encode_node_history(
    tape: &mut Tape,
    params: &LstmVars,
    feats: &[[f32; 4]],
    hidden: usize,
    expected_h: usize,
) -> Result<Var, GradError> {
    if feats.len() != expected_h {
        return Err(GradError::BadShape {
            op: "encode_node_history",
            detail: format!("{} steps, expected {expected_h}", feats.len()),
        });
    }
    let steps: Vec<Vec<f32>> = feats.iter().map(|f| f.to_vec()).collect();
    run_lstm(tape, params, &steps, 1, 4, hidden)
}

/// Encode one agent's aggregated neighbor states, `H x 4 -> 1 x hidden`.
/// Steps with no neighbors carry a zero vector.
pub fn encode_edge_history(
    tape: &mut Tape,
    params: &LstmVars,
    aggregated: &[[f32; 4]],
    hidden: usize,
) -> Result<Var, GradError> {
    let steps: Vec<Vec<f32>> = aggregated.iter().map(|f| f.to_vec()).collect();
    run_lstm(tape, params, &steps, 1, 4, hidden)
}
