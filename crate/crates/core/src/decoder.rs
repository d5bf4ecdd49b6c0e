//! Residual-action GRU rollout and the Huber reconstruction loss.
//!
//! Each step the cell consumes the context, the destination, and the
//! current predicted position; a linear layer emits a residual
//! displacement which is integrated additively.

use crate::autodiff::cells::{gru_step, GruVars};
use crate::autodiff::tape::{GradError, Tape, Var};

pub struct RolloutVars {
    /// Predicted positions per step, F entries of `N x 2`.
    pub positions: Vec<Var>,
    /// Residual displacements per step, F entries of `N x 2`.
    pub residuals: Vec<Var>,
}

/// Roll the decoder forward `f` steps from the per-agent origin.
/// `init` is the optional context-to-hidden affine map; without it the
/// hidden state starts at zero.
pub fn rollout(
    tape: &mut Tape,
    gru: &GruVars,
    init: Option<(Var, Var)>,
    residual_head: (Var, Var),
    e: Var,
    dest: Var,
    f: usize,
) -> Result<RolloutVars, GradError> {
    if f == 0 {
        return Err(GradError::BadShape {
            op: "rollout",
            detail: "horizon must be positive".into(),
        });
    }
    let n = e.rows;
    let hidden = gru.w_hz.rows;
    let mut h = match init {
        Some((w, b)) => {
            let x = tape.matmul(e, w)?;
            tape.add(x, b)?
        }
        None => tape.zeros(n, hidden)?,
    };
    let mut pos = tape.zeros(n, 2)?;
    let mut positions = Vec::with_capacity(f);
    let mut residuals = Vec::with_capacity(f);
    for _ in 0..f {
        let x = tape.concat_cols(&[e, dest, pos])?;
        h = gru_step(tape, gru, x, h)?;
        let (rw, rb) = residual_head;
        let pre = tape.matmul(h, rw)?;
        let delta = tape.add(pre, rb)?;
        pos = tape.add(pos, delta)?;
        residuals.push(delta);
        positions.push(pos);
    }
    Ok(RolloutVars {
        positions,
        residuals,
    })
}

/// Huber reconstruction error, averaged over agents and steps; the two
/// coordinates of each step are summed.
pub fn huber_reconstruction_loss(
    tape: &mut Tape,
    rollout: &RolloutVars,
    targets: &[Vec<f32>],
    n: usize,
    delta: f64,
) -> Result<Var, GradError> {
    if rollout.positions.len() != targets.len() {
        return Err(GradError::BadShape {
            op: "huber_reconstruction_loss",
            detail: format!(
                "{} predicted steps vs {} target steps",
                rollout.positions.len(),
                targets.len()
            ),
        });
    }
    let f = targets.len();
    let mut total = tape.scalar(0.0)?;
    for (pos, target) in rollout.positions.iter().zip(targets) {
        let truth = tape.constant_from_f32(target, n, 2)?;
        let err = tape.sub(*pos, truth)?;
        let hub = tape.huber(err, delta)?;
        let s = tape.sum(hub)?;
        total = tape.add(total, s)?;
    }
    tape.affine(total, 1.0 / (n * f) as f64, 0.0)
}
