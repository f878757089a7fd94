//! Single-step recurrent units: LSTM, binary Tree-LSTM, and the two SNELSD
//! units (boundary detection and chunk description).
//!
//! Every step function works on either single vectors (`[d]`) or batches
//! (`[B × d]`); per-row scalars such as boundary indicators then have shape
//! `[]` or `[B]` respectively.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_matrix, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

fn matrix(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
    store.add(name, init_matrix(rows, cols, rng))
}

fn zeros(store: &mut ParamStore, name: String, n: usize) -> ParamId {
    store.add(name, Tensor::zeros(&[n]))
}

/// `W·x + U·h + b`
fn gate_pre(g: &Graph, x: Var, w: ParamId, h: Var, u: ParamId, b: ParamId) -> Result<Var> {
    let wx = g.linear(x, g.param(w), Some(g.param(b)))?;
    let uh = g.linear(h, g.param(u), None)?;
    g.add(wx, uh)
}

fn check_unit_interval(g: &Graph, r: Var, what: &str) -> Result<()> {
    let v = g.value(r);
    if let Some(bad) = v.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Contract(format!("{what} = {bad} is outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_i: ParamId,
    pub w_f: ParamId,
    pub w_o: ParamId,
    pub w_c: ParamId,
    pub u_i: ParamId,
    pub u_f: ParamId,
    pub u_o: ParamId,
    pub u_c: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_o: ParamId,
    pub b_c: ParamId,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let w = |s: &mut ParamStore, n: &str, rng: &mut _| matrix(s, format!("{prefix}.W_{n}"), d_h, d_in, rng);
        let (w_i, w_f, w_o, w_c) = (w(store, "i", rng), w(store, "f", rng), w(store, "o", rng), w(store, "c", rng));
        let u = |s: &mut ParamStore, n: &str, rng: &mut _| matrix(s, format!("{prefix}.U_{n}"), d_h, d_h, rng);
        let (u_i, u_f, u_o, u_c) = (u(store, "i", rng), u(store, "f", rng), u(store, "o", rng), u(store, "c", rng));
        let b = |s: &mut ParamStore, n: &str| zeros(s, format!("{prefix}.b_{n}"), d_h);
        LstmParams {
            d_in,
            d_h,
            w_i,
            w_f,
            w_o,
            w_c,
            u_i,
            u_f,
            u_o,
            u_c,
            b_i: b(store, "i"),
            b_f: b(store, "f"),
            b_o: b(store, "o"),
            b_c: b(store, "c"),
        }
    }
}

/// One LSTM step: gates `i, f, o`, cell `c = f⊙c₋ + i⊙tanh(·)`, `h = o⊙tanh(c)`.
pub fn lstm_step(g: &Graph, x: Var, h_prev: Var, c_prev: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let i = g.sigmoid(gate_pre(g, x, p.w_i, h_prev, p.u_i, p.b_i)?);
    let f = g.sigmoid(gate_pre(g, x, p.w_f, h_prev, p.u_f, p.b_f)?);
    let o = g.sigmoid(gate_pre(g, x, p.w_o, h_prev, p.u_o, p.b_o)?);
    let cand = g.tanh(gate_pre(g, x, p.w_c, h_prev, p.u_c, p.b_c)?);
    let keep = g.hadamard(f, c_prev)?;
    let write = g.hadamard(i, cand)?;
    let c = g.add(keep, write)?;
    let h = g.hadamard(o, g.tanh(c))?;
    Ok((h, c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeLstmParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_i: ParamId,
    pub w_f: ParamId,
    pub w_o: ParamId,
    pub w_c: ParamId,
    pub u_i_l: ParamId,
    pub u_i_r: ParamId,
    pub u_o_l: ParamId,
    pub u_o_r: ParamId,
    pub u_c_l: ParamId,
    pub u_c_r: ParamId,
    pub u_f_ll: ParamId,
    pub u_f_lr: ParamId,
    pub u_f_rl: ParamId,
    pub u_f_rr: ParamId,
    pub b_i: ParamId,
    pub b_f_l: ParamId,
    pub b_f_r: ParamId,
    pub b_o: ParamId,
    pub b_u: ParamId,
}

impl TreeLstmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let mut w = |n: &str, s: &mut ParamStore| matrix(s, format!("{prefix}.W_{n}"), d_h, d_in, rng);
        let (w_i, w_f, w_o, w_c) = (w("i", store), w("f", store), w("o", store), w("c", store));
        let mut u = |n: &str, s: &mut ParamStore| matrix(s, format!("{prefix}.U_{n}"), d_h, d_h, rng);
        let (u_i_l, u_i_r) = (u("i^L", store), u("i^R", store));
        let (u_o_l, u_o_r) = (u("o^L", store), u("o^R", store));
        let (u_c_l, u_c_r) = (u("c^L", store), u("c^R", store));
        let (u_f_ll, u_f_lr) = (u("f^LL", store), u("f^LR", store));
        let (u_f_rl, u_f_rr) = (u("f^RL", store), u("f^RR", store));
        let b = |n: &str, s: &mut ParamStore| zeros(s, format!("{prefix}.b_{n}"), d_h);
        TreeLstmParams {
            d_in,
            d_h,
            w_i,
            w_f,
            w_o,
            w_c,
            u_i_l,
            u_i_r,
            u_o_l,
            u_o_r,
            u_c_l,
            u_c_r,
            u_f_ll,
            u_f_lr,
            u_f_rl,
            u_f_rr,
            b_i: b("i", store),
            b_f_l: b("f^L", store),
            b_f_r: b("f^R", store),
            b_o: b("o", store),
            b_u: b("u", store),
        }
    }
}

/// `W·x + U_l·h_l + U_r·h_r + b`
#[allow(clippy::too_many_arguments)]
fn tree_gate_pre(g: &Graph, x: Var, w: ParamId, hl: Var, ul: ParamId, hr: Var, ur: ParamId, b: ParamId) -> Result<Var> {
    let wx = g.linear(x, g.param(w), Some(g.param(b)))?;
    let l = g.linear(hl, g.param(ul), None)?;
    let r = g.linear(hr, g.param(ur), None)?;
    g.add(g.add(wx, l)?, r)
}

/// One binary Tree-LSTM node. `x` is the word vector at a leaf and the zero
/// vector at internal nodes; leaf children are zero states. Each child has
/// its own forget gate, coupled to both children's hidden states.
pub fn treelstm_node(g: &Graph, x: Var, left: (Var, Var), right: (Var, Var), p: &TreeLstmParams) -> Result<(Var, Var)> {
    let ((hl, cl), (hr, cr)) = (left, right);
    let i = g.sigmoid(tree_gate_pre(g, x, p.w_i, hl, p.u_i_l, hr, p.u_i_r, p.b_i)?);
    let fl = g.sigmoid(tree_gate_pre(g, x, p.w_f, hl, p.u_f_ll, hr, p.u_f_lr, p.b_f_l)?);
    let fr = g.sigmoid(tree_gate_pre(g, x, p.w_f, hl, p.u_f_rl, hr, p.u_f_rr, p.b_f_r)?);
    let o = g.sigmoid(tree_gate_pre(g, x, p.w_o, hl, p.u_o_l, hr, p.u_o_r, p.b_o)?);
    let u = g.tanh(tree_gate_pre(g, x, p.w_c, hl, p.u_c_l, hr, p.u_c_r, p.b_u)?);
    let c = g.add(g.add(g.hadamard(fl, cl)?, g.hadamard(fr, cr)?)?, g.hadamard(i, u)?)?;
    let h = g.hadamard(o, g.tanh(c))?;
    Ok((h, c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectParams {
    pub d_in: usize,
    pub d_p: usize,
    pub w_i0: ParamId,
    pub w_f0: ParamId,
    pub w_p0: ParamId,
    pub u_i0: ParamId,
    pub u_f0: ParamId,
    pub u_p0: ParamId,
    pub b_i0: ParamId,
    pub b_f0: ParamId,
    pub b_p0: ParamId,
    pub w_p1: ParamId,
    pub b_p1: ParamId,
    /// Scores `[p_t; x_{t+1}]`; length `d_p + d_in`.
    pub u_r: ParamId,
}

impl DetectParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_p: usize, rng: &mut impl Rng) -> Self {
        let w_i0 = matrix(store, format!("{prefix}.W_i0"), d_p, d_in, rng);
        let w_f0 = matrix(store, format!("{prefix}.W_f0"), d_p, d_in, rng);
        let w_p0 = matrix(store, format!("{prefix}.W_p0"), d_p, d_in, rng);
        let u_i0 = matrix(store, format!("{prefix}.U_i0"), d_p, d_p, rng);
        let u_f0 = matrix(store, format!("{prefix}.U_f0"), d_p, d_p, rng);
        let u_p0 = matrix(store, format!("{prefix}.U_p0"), d_p, d_p, rng);
        let b_i0 = zeros(store, format!("{prefix}.b_i0"), d_p);
        let b_f0 = zeros(store, format!("{prefix}.b_f0"), d_p);
        let b_p0 = zeros(store, format!("{prefix}.b_p0"), d_p);
        let w_p1 = matrix(store, format!("{prefix}.W_p1"), d_p, d_in, rng);
        let b_p1 = zeros(store, format!("{prefix}.b_p1"), d_p);
        // scored as a 1 × (d_p + d_in) projection
        let u_r = store.add(
            format!("{prefix}.u_r"),
            crate::params::scaled_uniform(&[d_p + d_in], d_p + d_in, 1, rng),
        );
        DetectParams {
            d_in,
            d_p,
            w_i0,
            w_f0,
            w_p0,
            u_i0,
            u_f0,
            u_p0,
            b_i0,
            b_f0,
            b_p0,
            w_p1,
            b_p1,
            u_r,
        }
    }
}

/// `tanh(W_p1·x + b_p1)`: the chunk vector of a word that opens a new chunk.
pub fn chunk_start(g: &Graph, x: Var, p: &DetectParams) -> Result<Var> {
    Ok(g.tanh(g.linear(x, g.param(p.w_p1), Some(g.param(p.b_p1)))?))
}

/// One detection step. Returns the chunk vector `p_t` and the boundary
/// indicator `r_t = σ([p_t; x_next]·u_r)`; pass a zero `x_next` after the
/// last word.
pub fn detect_step(g: &Graph, x: Var, x_next: Var, r_prev: Var, p_prev: Var, p: &DetectParams) -> Result<(Var, Var)> {
    check_unit_interval(g, r_prev, "r_prev")?;
    let i0 = g.sigmoid(gate_pre(g, x, p.w_i0, p_prev, p.u_i0, p.b_i0)?);
    let f0 = g.sigmoid(gate_pre(g, x, p.w_f0, p_prev, p.u_f0, p.b_f0)?);
    let cand = g.tanh(gate_pre(g, x, p.w_p0, p_prev, p.u_p0, p.b_p0)?);
    let cont = g.add(g.hadamard(f0, p_prev)?, g.hadamard(i0, cand)?)?;
    let fresh = chunk_start(g, x, p)?;
    let p_t = g.add(
        g.scale_rows(cont, g.one_minus(r_prev))?,
        g.scale_rows(fresh, r_prev)?,
    )?;
    let score = g.dot_last(g.concat(&[p_t, x_next])?, g.param(p.u_r))?;
    Ok((p_t, g.sigmoid(score)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescribeParams {
    pub lstm: LstmParams,
    pub p_star: ParamId,
}

impl DescribeParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_p: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let lstm = LstmParams::new(store, prefix, d_p, d_h, rng);
        let p_star = zeros(store, format!("{prefix}.p_star"), d_p);
        DescribeParams { lstm, p_star }
    }
}

/// The blended description input `m = (1 − r)·p* + r·p`.
pub fn blend_input(g: &Graph, p_t: Var, r_t: Var, p: &DescribeParams) -> Result<Var> {
    // (1 − r) ⊗ p* as a rank-one linear map, so batched r broadcasts
    let rest = g.shape(r_t);
    let mut col = rest.clone();
    col.push(1);
    let weight = g.reshape(g.one_minus(r_t), &col)?;
    let d_p = p.lstm.d_in;
    let star = g.reshape(g.param(p.p_star), &[d_p, 1])?;
    let constant = g.linear(weight, star, None)?;
    g.add(constant, g.scale_rows(p_t, r_t)?)
}

/// One description step: an LSTM step on the blended input.
pub fn describe_step(g: &Graph, p_t: Var, r_t: Var, h_prev: Var, c_prev: Var, p: &DescribeParams) -> Result<(Var, Var)> {
    check_unit_interval(g, r_t, "r_t")?;
    let m = blend_input(g, p_t, r_t, p)?;
    lstm_step(g, m, h_prev, c_prev, &p.lstm)
}
