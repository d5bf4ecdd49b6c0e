//! LSTM and GRU cell steps recorded on the tape.
//!
//! Both cells operate on batches: `x` is `N x in`, hidden states are
//! `N x hidden`, weights are `in x hidden` / `hidden x hidden`, biases
//! are broadcast rows.

use super::tape::{GradError, Tape, Var};

/// Gate parameters for one LSTM cell, bound onto a tape.
#[derive(Clone, Copy)]
pub struct LstmVars {
    pub w_xi: Var,
    pub w_hi: Var,
    pub b_i: Var,
    pub w_xf: Var,
    pub w_hf: Var,
    pub b_f: Var,
    pub w_xg: Var,
    pub w_hg: Var,
    pub b_g: Var,
    pub w_xo: Var,
    pub w_ho: Var,
    pub b_o: Var,
}

/// Gate parameters for one GRU cell, bound onto a tape.
#[derive(Clone, Copy)]
pub struct GruVars {
    pub w_xz: Var,
    pub w_hz: Var,
    pub b_z: Var,
    pub w_xr: Var,
    pub w_hr: Var,
    pub b_r: Var,
    pub w_xn: Var,
    pub w_hn: Var,
    pub b_n: Var,
}

fn gate(t: &mut Tape, x: Var, wx: Var, h: Var, wh: Var, b: Var) -> Result<Var, GradError> {
    let xs = t.matmul(x, wx)?;
    let hs = t.matmul(h, wh)?;
    let pre = t.add(xs, hs)?;
    t.add(pre, b)
}

/// One LSTM step:
///   i = sigmoid(x Wxi + h Whi + bi)
///   f = sigmoid(x Wxf + h Whf + bf)
///   g = tanh   (x Wxg + h Whg + bg)
///   o = sigmoid(x Wxo + h Who + bo)
///   c' = f * c + i * g
///   h' = o * tanh(c')
pub fn lstm_step(
    t: &mut Tape,
    p: &LstmVars,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var), GradError> {
    let i_pre = gate(t, x, p.w_xi, h, p.w_hi, p.b_i)?;
    let i = t.sigmoid(i_pre)?;
    let f_pre = gate(t, x, p.w_xf, h, p.w_hf, p.b_f)?;
    let f = t.sigmoid(f_pre)?;
    let g_pre = gate(t, x, p.w_xg, h, p.w_hg, p.b_g)?;
    let g = t.tanh(g_pre)?;
    let o_pre = gate(t, x, p.w_xo, h, p.w_ho, p.b_o)?;
    let o = t.sigmoid(o_pre)?;
    let fc = t.mul(f, c)?;
    let ig = t.mul(i, g)?;
    let c_next = t.add(fc, ig)?;
    let ct = t.tanh(c_next)?;
    let h_next = t.mul(o, ct)?;
    Ok((h_next, c_next))
}

/// One GRU step:
///   z = sigmoid(x Wxz + h Whz + bz)
///   r = sigmoid(x Wxr + h Whr + br)
///   n = tanh   (x Wxn + (r * h) Whn + bn)
///   h' = z * h + (1 - z) * n
pub fn gru_step(t: &mut Tape, p: &GruVars, x: Var, h: Var) -> Result<Var, GradError> {
    let z_pre = gate(t, x, p.w_xz, h, p.w_hz, p.b_z)?;
    let z = t.sigmoid(z_pre)?;
    let r_pre = gate(t, x, p.w_xr, h, p.w_hr, p.b_r)?;
    let r = t.sigmoid(r_pre)?;
    let rh = t.mul(r, h)?;
    let n_pre = gate(t, x, p.w_xn, rh, p.w_hn, p.b_n)?;
    let n = t.tanh(n_pre)?;
    let zh = t.mul(z, h)?;
    let one_minus_z = t.affine(z, -1.0, 1.0)?;
    let zn = t.mul(one_minus_z, n)?;
    t.add(zh, zn)
}
