//! Unvectorized reference implementations used as oracles by the
//! integration and acceptance tests. Nothing here touches the tape: every
//! value is computed with plain loops over `f64`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snelsd::cells::{DescribeParams, DetectParams, LstmParams, TreeLstmParams};
use snelsd::data::ParseTree;
use snelsd::encoders::{ChainParams, SnelsdParams};
use snelsd::heads::{Mlp, NliHeadParams, SaHeadParams};
use snelsd::{ParamId, ParamStore, Tensor};

pub type V = Vec<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> V {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::new(shape.to_vec(), uniform(rng, shape.iter().product(), scale)).unwrap()
}

/// Replaces every parameter (biases and `p*` included) with uniform noise
/// so zero initial values do not hide terms.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mv(s: &ParamStore, w: ParamId, x: &[f64]) -> V {
    let t = s.get(w);
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|i| (0..cols).map(|j| t.data()[i * cols + j] * x[j]).sum())
        .collect()
}

fn vecp(s: &ParamStore, id: ParamId) -> V {
    s.get(id).data().to_vec()
}

fn add3(a: &[f64], b: &[f64], c: &[f64]) -> V {
    (0..a.len()).map(|k| a[k] + b[k] + c[k]).collect()
}

fn gate(s: &ParamStore, w: ParamId, x: &[f64], u: ParamId, h: &[f64], b: ParamId) -> V {
    add3(&mv(s, w, x), &mv(s, u, h), &vecp(s, b))
}

pub fn lstm_ref(s: &ParamStore, p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (V, V) {
    let i: V = gate(s, p.w_i, x, p.u_i, h, p.b_i).into_iter().map(sig).collect();
    let f: V = gate(s, p.w_f, x, p.u_f, h, p.b_f).into_iter().map(sig).collect();
    let o: V = gate(s, p.w_o, x, p.u_o, h, p.b_o).into_iter().map(sig).collect();
    let u: V = gate(s, p.w_c, x, p.u_c, h, p.b_c).into_iter().map(f64::tanh).collect();
    let c_new: V = (0..p.d_h).map(|k| f[k] * c[k] + i[k] * u[k]).collect();
    let h_new = (0..p.d_h).map(|k| o[k] * c_new[k].tanh()).collect();
    (h_new, c_new)
}

#[allow(clippy::too_many_arguments)]
fn tgate(s: &ParamStore, w: ParamId, x: &[f64], ul: ParamId, hl: &[f64], ur: ParamId, hr: &[f64], b: ParamId) -> V {
    let (a, l, r, bb) = (mv(s, w, x), mv(s, ul, hl), mv(s, ur, hr), vecp(s, b));
    (0..a.len()).map(|k| a[k] + l[k] + r[k] + bb[k]).collect()
}

pub fn tree_node_ref(s: &ParamStore, p: &TreeLstmParams, x: &[f64], left: (&[f64], &[f64]), right: (&[f64], &[f64])) -> (V, V) {
    let ((hl, cl), (hr, cr)) = (left, right);
    let i: V = tgate(s, p.w_i, x, p.u_i_l, hl, p.u_i_r, hr, p.b_i).into_iter().map(sig).collect();
    let fl: V = tgate(s, p.w_f, x, p.u_f_ll, hl, p.u_f_lr, hr, p.b_f_l).into_iter().map(sig).collect();
    let fr: V = tgate(s, p.w_f, x, p.u_f_rl, hl, p.u_f_rr, hr, p.b_f_r).into_iter().map(sig).collect();
    let o: V = tgate(s, p.w_o, x, p.u_o_l, hl, p.u_o_r, hr, p.b_o).into_iter().map(sig).collect();
    let u: V = tgate(s, p.w_c, x, p.u_c_l, hl, p.u_c_r, hr, p.b_u).into_iter().map(f64::tanh).collect();
    let c: V = (0..p.d_h).map(|k| fl[k] * cl[k] + fr[k] * cr[k] + i[k] * u[k]).collect();
    let h = (0..p.d_h).map(|k| o[k] * c[k].tanh()).collect();
    (h, c)
}

pub fn detect_ref(s: &ParamStore, p: &DetectParams, x: &[f64], x_next: &[f64], r_prev: f64, p_prev: &[f64]) -> (V, f64) {
    let i0: V = gate(s, p.w_i0, x, p.u_i0, p_prev, p.b_i0).into_iter().map(sig).collect();
    let f0: V = gate(s, p.w_f0, x, p.u_f0, p_prev, p.b_f0).into_iter().map(sig).collect();
    let cand: V = gate(s, p.w_p0, x, p.u_p0, p_prev, p.b_p0).into_iter().map(f64::tanh).collect();
    let fresh = mv(s, p.w_p1, x);
    let b1 = vecp(s, p.b_p1);
    let p_t: V = (0..p.d_p)
        .map(|k| {
            let cont = f0[k] * p_prev[k] + i0[k] * cand[k];
            (1.0 - r_prev) * cont + r_prev * (fresh[k] + b1[k]).tanh()
        })
        .collect();
    let u = vecp(s, p.u_r);
    let score: f64 = p_t.iter().chain(x_next).zip(&u).map(|(a, b)| a * b).sum();
    (p_t, sig(score))
}

pub fn describe_ref(s: &ParamStore, p: &DescribeParams, p_t: &[f64], r: f64, h: &[f64], c: &[f64]) -> (V, V) {
    let star = vecp(s, p.p_star);
    let m: V = (0..p_t.len()).map(|k| (1.0 - r) * star[k] + r * p_t[k]).collect();
    lstm_ref(s, &p.lstm, &m, h, c)
}

/// States of one sentence (rows of `x`) and the raw boundary indicators.
pub fn snelsd_ref(s: &ParamStore, p: &SnelsdParams, x: &[V], r_override: Option<f64>) -> (Vec<V>, V) {
    let d_in = p.detect.d_in;
    let mut r = r_override.unwrap_or(1.0);
    let mut pc = vec![0.0; p.detect.d_p];
    let (mut h, mut c) = (vec![0.0; p.out_dim()], vec![0.0; p.out_dim()]);
    let (mut out, mut trace) = (Vec::new(), Vec::new());
    let zero = vec![0.0; d_in];
    for t in 0..x.len() {
        let next = x.get(t + 1).unwrap_or(&zero);
        let (p_t, r_raw) = detect_ref(s, &p.detect, &x[t], next, r, &pc);
        trace.push(r_raw);
        let r_t = r_override.unwrap_or(r_raw);
        (h, c) = describe_ref(s, &p.describe, &p_t, r_t, &h, &c);
        out.push(h.clone());
        pc = p_t;
        r = r_t;
    }
    (out, trace)
}

pub fn lstm_seq_ref(s: &ParamStore, p: &LstmParams, x: &[V], reverse: bool) -> Vec<V> {
    let n = x.len();
    let mut out = vec![Vec::new(); n];
    let (mut h, mut c) = (vec![0.0; p.d_h], vec![0.0; p.d_h]);
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        (h, c) = lstm_ref(s, p, &x[t], &h, &c);
        out[t] = h.clone();
    }
    out
}

pub fn chain_ref(s: &ParamStore, p: &ChainParams, x: &[V]) -> Vec<V> {
    let mut cur = x.to_vec();
    for layer in &p.layers {
        let fwd = lstm_seq_ref(s, &layer.forward, &cur, false);
        cur = match &layer.backward {
            Some(bp) => {
                let bwd = lstm_seq_ref(s, bp, &cur, true);
                fwd.into_iter().zip(bwd).map(|(a, b)| [a, b].concat()).collect()
            }
            None => fwd,
        };
    }
    cur
}

/// Hidden states of every internal node in post-order, then the root.
pub fn tree_ref(s: &ParamStore, p: &TreeLstmParams, leaves: &[V], tree: &ParseTree) -> (Vec<V>, V) {
    fn rec(s: &ParamStore, p: &TreeLstmParams, leaves: &[V], t: &ParseTree, next: &mut usize, internal: &mut Vec<V>) -> (V, V) {
        let z = vec![0.0; p.d_h];
        match t {
            ParseTree::Leaf { .. } => {
                let x = &leaves[*next];
                *next += 1;
                tree_node_ref(s, p, x, (&z, &z), (&z, &z))
            }
            ParseTree::Node { left, right, .. } => {
                let l = rec(s, p, leaves, left, next, internal);
                let r = rec(s, p, leaves, right, next, internal);
                let out = tree_node_ref(s, p, &vec![0.0; p.d_in], (&l.0, &l.1), (&r.0, &r.1));
                internal.push(out.0.clone());
                out
            }
        }
    }
    let mut internal = Vec::new();
    let root = rec(s, p, leaves, tree, &mut 0, &mut internal).0;
    (internal, root)
}

fn softmax(v: &[f64]) -> V {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: V = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Aligned summaries `(ã, b̃)` of one sentence pair.
pub fn soft_align_ref(a: &[V], b: &[V]) -> (Vec<V>, Vec<V>) {
    let d = a[0].len();
    let wsum = |w: &[f64], rows: &[V]| -> V { (0..d).map(|k| rows.iter().zip(w).map(|(r, w)| w * r[k]).sum()).collect() };
    let a_t = a.iter().map(|ai| wsum(&softmax(&b.iter().map(|bj| dot(ai, bj)).collect::<V>()), b)).collect();
    let b_t = b.iter().map(|bj| wsum(&softmax(&a.iter().map(|ai| dot(ai, bj)).collect::<V>()), a)).collect();
    (a_t, b_t)
}

pub fn mean_max(rows: &[V]) -> (V, V) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let max = (0..d).map(|k| rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
    (mean, max)
}

pub fn mlp_ref(s: &ParamStore, m: &Mlp, v: &[f64]) -> V {
    let bh = vecp(s, m.b_hidden);
    let hidden: V = mv(s, m.w_hidden, v).iter().zip(&bh).map(|(a, b)| (a + b).tanh()).collect();
    let bo = vecp(s, m.b_out);
    softmax(&mv(s, m.w_out, &hidden).iter().zip(&bo).map(|(a, b)| a + b).collect::<V>())
}

pub fn sa_head_ref(s: &ParamStore, p: &SaHeadParams, states: &[V]) -> V {
    let (mean, max) = mean_max(states);
    mlp_ref(s, &p.mlp, &[mean, max].concat())
}

/// Class probabilities for one pair; `late` holds per-position auxiliary
/// states of premise and hypothesis.
pub fn nli_head_ref(s: &ParamStore, p: &NliHeadParams, a: &[V], b: &[V], late: Option<(&[V], &[V])>) -> V {
    let (a_t, b_t) = soft_align_ref(a, b);
    let side = |bar: &[V], tilde: &[V], aux: Option<&[V]>| -> Vec<V> {
        let m: Vec<V> = bar
            .iter()
            .zip(tilde)
            .enumerate()
            .map(|(t, (x, y))| {
                let diff: V = x.iter().zip(y).map(|(u, v)| u - v).collect();
                let prod: V = x.iter().zip(y).map(|(u, v)| u * v).collect();
                let mut v = [x.clone(), y.clone(), diff, prod].concat();
                if let Some((w, bias)) = p.reduce {
                    let bv = vecp(s, bias);
                    v = mv(s, w, &v).iter().zip(&bv).map(|(a, b)| (a + b).max(0.0)).collect();
                }
                if let Some(aux) = aux {
                    v.extend_from_slice(&aux[t]);
                }
                v
            })
            .collect();
        chain_ref(s, &p.compose, &m)
    };
    let va = side(a, &a_t, late.map(|l| l.0));
    let vb = side(b, &b_t, late.map(|l| l.1));
    let (mean_a, max_a) = mean_max(&va);
    let (mean_b, max_b) = mean_max(&vb);
    mlp_ref(s, &p.mlp, &[mean_a, mean_b, max_a, max_b].concat())
}

/// Rows of a `[B × L × d]` tensor for batch entry `b`, first `n` positions.
pub fn rows(t: &Tensor, b: usize, n: usize) -> Vec<V> {
    let (l, d) = (t.shape()[1], t.shape()[2]);
    (0..n).map(|i| t.data()[(b * l + i) * d..(b * l + i + 1) * d].to_vec()).collect()
}

/// Pads variable-length sentences (lists of `[d]` rows) into `[B × L × d]`.
pub fn pad(sentences: &[Vec<V>]) -> (Tensor, Vec<usize>) {
    let l = sentences.iter().map(Vec::len).max().unwrap();
    let d = sentences[0][0].len();
    let mut data = vec![0.0; sentences.len() * l * d];
    for (b, s) in sentences.iter().enumerate() {
        for (i, r) in s.iter().enumerate() {
            data[(b * l + i) * d..(b * l + i + 1) * d].copy_from_slice(r);
        }
    }
    (Tensor::new(vec![sentences.len(), l, d], data).unwrap(), sentences.iter().map(Vec::len).collect())
}

pub fn random_sentence(rng: &mut impl Rng, len: usize, d: usize) -> Vec<V> {
    (0..len).map(|_| uniform(rng, d, 1.0)).collect()
}

/// A random binary bracketing over `n` unlabeled leaves.
pub fn random_tree(rng: &mut impl Rng, n: usize) -> ParseTree {
    fn go(rng: &mut impl Rng, lo: usize, hi: usize) -> ParseTree {
        if hi - lo == 1 {
            return ParseTree::leaf(&format!("t{lo}"), None);
        }
        let k = rng.random_range(lo + 1..hi);
        ParseTree::node(None, go(rng, lo, k), go(rng, k, hi))
    }
    go(rng, 0, n)
}

/// Adam over plain vectors.
pub struct AdamRef {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub t: i32,
    pub m: V,
    pub v: V,
}

impl AdamRef {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        AdamRef { lr, b1, b2, eps, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        for k in 0..theta.len() {
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g[k];
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g[k] * g[k];
            let mh = self.m[k] / (1.0 - self.b1.powi(self.t));
            let vh = self.v[k] / (1.0 - self.b2.powi(self.t));
            theta[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Adadelta over plain vectors.
pub struct AdadeltaRef {
    pub rho: f64,
    pub eps: f64,
    pub eg: V,
    pub ex: V,
}

impl AdadeltaRef {
    pub fn new(n: usize, rho: f64, eps: f64) -> Self {
        AdadeltaRef { rho, eps, eg: vec![0.0; n], ex: vec![0.0; n] }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        for k in 0..theta.len() {
            self.eg[k] = self.rho * self.eg[k] + (1.0 - self.rho) * g[k] * g[k];
            let dx = -((self.ex[k] + self.eps).sqrt() / (self.eg[k] + self.eps).sqrt()) * g[k];
            self.ex[k] = self.rho * self.ex[k] + (1.0 - self.rho) * dx * dx;
            theta[k] += dx;
        }
    }
}
pub mod criteria;
