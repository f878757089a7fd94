//! Whole-sentence encoders: stacked LSTM/BLSTM chains, Tree-LSTM over a
//! binary parse, and the chunk-detecting encoder in stand-alone or joint
//! mode.
//!
//! Sequential encoders take an input `[B × L × d_in]` plus per-sentence
//! lengths and return states `[B × L × d_out]` whose padded rows are zero.
//! Recurrent state is carried unchanged past a sentence's end, so valid
//! positions never see padding.

use rand::Rng;

use crate::cells::{
    describe_step, detect_step, lstm_step, treelstm_node, DescribeParams, DetectParams, LstmParams, TreeLstmParams,
};
use crate::data::ParseTree;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B × L × d]`, zero at padded positions.
    pub states: Var,
    /// Row-major `[B × L]` validity mask.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    /// Boundary indicators at valid positions, one list per sentence; set
    /// only when the encoder contains a detection layer.
    pub chunk_trace: Option<Vec<Vec<f64>>>,
}

impl EncoderOutput {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.mask.len() / self.lengths.len()
    }
}

pub fn mask_from_lengths(lengths: &[usize], max_len: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&n| (0..max_len).map(move |t| t < n))
        .collect()
}

fn check_layout(g: &Graph, x: Var, lengths: &[usize]) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != lengths.len() {
        return Err(Error::dim("encoder input", &s, &[lengths.len()]));
    }
    if s[0] == 0 {
        return Err(Error::EmptySequence("batch has no sentences".into()));
    }
    if let Some(b) = lengths.iter().position(|&n| n == 0) {
        return Err(Error::EmptySequence(format!("sentence {b} of the batch is empty")));
    }
    if let Some(&n) = lengths.iter().find(|&&n| n > s[1]) {
        return Err(Error::Contract(format!("length {n} exceeds padded length {}", s[1])));
    }
    Ok((s[0], s[1], s[2]))
}

/// Replaces rows of `x: [B × L × d]` at padded positions with zeros.
pub fn zero_padding(g: &Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let s = g.shape(x);
    let rows: usize = s[..s.len() - 1].iter().product();
    let d = s[s.len() - 1];
    let flat = g.reshape(x, &[rows, d])?;
    let zeros = g.constant(Tensor::zeros(&[rows, d]));
    let kept = g.select_rows(mask, flat, zeros)?;
    g.reshape(kept, &s)
}

/// Runs one LSTM over every sentence of the batch. In reverse mode each
/// sentence is read from its last valid token back to the first, and the
/// outputs are realigned to the original positions.
pub fn run_lstm(g: &Graph, x: Var, lengths: &[usize], p: &LstmParams, reverse: bool) -> Result<Var> {
    let (bsz, l, _) = check_layout(g, x, lengths)?;
    let zeros = g.constant(Tensor::zeros(&[bsz, p.d_h]));
    let (mut h, mut c) = (zeros, zeros);
    let mut outs = Vec::with_capacity(l);
    for s in 0..l {
        let valid: Vec<bool> = lengths.iter().map(|&n| s < n).collect();
        let pos: Vec<Option<usize>> = lengths
            .iter()
            .map(|&n| (s < n).then(|| if reverse { n - 1 - s } else { s }))
            .collect();
        let x_t = g.gather_time(x, &pos)?;
        let (h_new, c_new) = lstm_step(g, x_t, h, c, p)?;
        h = g.select_rows(&valid, h_new, h)?;
        c = g.select_rows(&valid, c_new, c)?;
        outs.push(g.select_rows(&valid, h_new, zeros)?);
    }
    let stacked = g.stack_time(&outs)?;
    if !reverse {
        return Ok(stacked);
    }
    let realigned = (0..l)
        .map(|t| {
            let pos: Vec<Option<usize>> = lengths.iter().map(|&n| (t < n).then(|| n - 1 - t)).collect();
            g.gather_time(stacked, &pos)
        })
        .collect::<Result<Vec<_>>>()?;
    g.stack_time(&realigned)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainLayer {
    pub forward: LstmParams,
    pub backward: Option<LstmParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainParams {
    pub layers: Vec<ChainLayer>,
}

impl ChainParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        layers: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(1..=2).contains(&layers) {
            return Err(Error::Config(format!("chain encoders have 1 or 2 layers, not {layers}")));
        }
        let mut out = Vec::with_capacity(layers);
        let mut width = d_in;
        for k in 0..layers {
            let forward = LstmParams::new(store, &format!("{prefix}.l{k}.fwd"), width, d_h, rng);
            let backward = bidirectional.then(|| LstmParams::new(store, &format!("{prefix}.l{k}.bwd"), width, d_h, rng));
            width = if bidirectional { 2 * d_h } else { d_h };
            out.push(ChainLayer { forward, backward });
        }
        Ok(ChainParams { layers: out })
    }

    pub fn out_dim(&self) -> usize {
        let last = self.layers.last().expect("at least one layer");
        last.forward.d_h * if last.backward.is_some() { 2 } else { 1 }
    }
}

/// Stacked (bi)directional LSTM. Each bidirectional layer concatenates
/// forward and backward states per position; layer 2 reads layer 1.
pub fn encode_chain(g: &Graph, x: Var, lengths: &[usize], p: &ChainParams) -> Result<EncoderOutput> {
    let (_, l, _) = check_layout(g, x, lengths)?;
    let mut h = x;
    for layer in &p.layers {
        let fwd = run_lstm(g, h, lengths, &layer.forward, false)?;
        h = match &layer.backward {
            Some(bp) => {
                let bwd = run_lstm(g, h, lengths, bp, true)?;
                g.concat(&[fwd, bwd])?
            }
            None => fwd,
        };
    }
    Ok(EncoderOutput {
        states: h,
        mask: mask_from_lengths(lengths, l),
        lengths: lengths.to_vec(),
        chunk_trace: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnelsdParams {
    pub detect: DetectParams,
    pub describe: DescribeParams,
}

impl SnelsdParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_p: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        SnelsdParams {
            detect: DetectParams::new(store, &format!("{prefix}.detect"), d_in, d_p, rng),
            describe: DescribeParams::new(store, &format!("{prefix}.describe"), d_p, d_h, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.describe.lstm.d_h
    }
}

/// Detection then description, left to right, starting from `r_0 = 1` and
/// `p_0 = 0`; the look-ahead input after the last word is zero.
///
/// `boundary_override` replaces every indicator with a fixed value before
/// it is used anywhere; with `Some(1.0)` the encoder reduces to a tanh
/// projection of each word followed by an LSTM.
pub fn encode_snelsd(
    g: &Graph,
    x: Var,
    lengths: &[usize],
    p: &SnelsdParams,
    boundary_override: Option<f64>,
) -> Result<EncoderOutput> {
    let (bsz, l, _) = check_layout(g, x, lengths)?;
    let d_p = p.detect.d_p;
    let d_h = p.describe.lstm.d_h;
    let start_r = boundary_override.unwrap_or(1.0);
    let mut r = g.constant(Tensor::filled(&[bsz], start_r));
    let mut pc = g.constant(Tensor::zeros(&[bsz, d_p]));
    let zeros_h = g.constant(Tensor::zeros(&[bsz, d_h]));
    let (mut h, mut c) = (zeros_h, zeros_h);
    let mut outs = Vec::with_capacity(l);
    let mut trace = vec![Vec::new(); bsz];
    for t in 0..l {
        let valid: Vec<bool> = lengths.iter().map(|&n| t < n).collect();
        let here: Vec<Option<usize>> = valid.iter().map(|&v| v.then_some(t)).collect();
        let next: Vec<Option<usize>> = lengths.iter().map(|&n| (t + 1 < n).then_some(t + 1)).collect();
        let x_t = g.gather_time(x, &here)?;
        let x_next = g.gather_time(x, &next)?;
        let (p_new, r_raw) = detect_step(g, x_t, x_next, r, pc, &p.detect)?;
        let r_new = match boundary_override {
            Some(v) => g.constant(Tensor::filled(&[bsz], v)),
            None => r_raw,
        };
        let (h_new, c_new) = describe_step(g, p_new, r_new, h, c, &p.describe)?;
        let rv = g.value(r_raw);
        for (b, &v) in valid.iter().enumerate() {
            if v {
                trace[b].push(rv.data()[b]);
            }
        }
        pc = g.select_rows(&valid, p_new, pc)?;
        let r_col = g.reshape(r_new, &[bsz, 1])?;
        let r_old = g.reshape(r, &[bsz, 1])?;
        r = g.reshape(g.select_rows(&valid, r_col, r_old)?, &[bsz])?;
        h = g.select_rows(&valid, h_new, h)?;
        c = g.select_rows(&valid, c_new, c)?;
        outs.push(g.select_rows(&valid, h_new, zeros_h)?);
    }
    Ok(EncoderOutput {
        states: g.stack_time(&outs)?,
        mask: mask_from_lengths(lengths, l),
        lengths: lengths.to_vec(),
        chunk_trace: Some(trace),
    })
}

/// Which Tree-LSTM states form the sentence representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeReadout {
    /// Every internal node, in post-order.
    Internal,
    /// The root alone.
    Root,
}

/// Evaluates a tree bottom-up. `leaves` holds one `[d_in]` input per leaf,
/// left to right; internal nodes receive a zero input.
pub fn encode_tree(
    g: &Graph,
    leaves: &[Var],
    tree: &ParseTree,
    p: &TreeLstmParams,
    readout: TreeReadout,
) -> Result<Vec<Var>> {
    if leaves.len() != tree.num_leaves() {
        return Err(Error::dim("encode_tree", &[leaves.len()], &[tree.num_leaves()]));
    }
    if readout == TreeReadout::Internal && tree.is_leaf() {
        return Err(Error::MalformedTree("a single-leaf tree has no internal nodes".into()));
    }
    let zero_h = g.constant(Tensor::zeros(&[p.d_h]));
    let zero_x = g.constant(Tensor::zeros(&[p.d_in]));
    let mut internal = Vec::new();
    let mut next_leaf = 0;
    let root = tree_rec(g, leaves, tree, p, zero_h, zero_x, &mut next_leaf, &mut internal)?;
    Ok(match readout {
        TreeReadout::Internal => internal,
        TreeReadout::Root => vec![root.0],
    })
}

#[allow(clippy::too_many_arguments)]
fn tree_rec(
    g: &Graph,
    leaves: &[Var],
    tree: &ParseTree,
    p: &TreeLstmParams,
    zero_h: Var,
    zero_x: Var,
    next_leaf: &mut usize,
    internal: &mut Vec<Var>,
) -> Result<(Var, Var)> {
    match tree {
        ParseTree::Leaf { .. } => {
            let x = leaves[*next_leaf];
            *next_leaf += 1;
            treelstm_node(g, x, (zero_h, zero_h), (zero_h, zero_h), p)
        }
        ParseTree::Node { left, right, .. } => {
            let l = tree_rec(g, leaves, left, p, zero_h, zero_x, next_leaf, internal)?;
            let r = tree_rec(g, leaves, right, p, zero_h, zero_x, next_leaf, internal)?;
            let (h, c) = treelstm_node(g, zero_x, l, r, p)?;
            internal.push(h);
            Ok((h, c))
        }
    }
}

/// Packs per-sentence state lists (each `[d]`) into a zero-padded batch.
pub fn pack_states(g: &Graph, per_sentence: &[Vec<Var>]) -> Result<EncoderOutput> {
    if per_sentence.is_empty() {
        return Err(Error::EmptySequence("batch has no sentences".into()));
    }
    let lengths: Vec<usize> = per_sentence.iter().map(Vec::len).collect();
    if let Some(b) = lengths.iter().position(|&n| n == 0) {
        return Err(Error::EmptySequence(format!("sentence {b} has no states")));
    }
    let l = *lengths.iter().max().unwrap();
    let d = g.shape(per_sentence[0][0])[0];
    let zero = g.constant(Tensor::zeros(&[d]));
    let rows = per_sentence
        .iter()
        .map(|s| {
            let mut padded = s.clone();
            padded.resize(l, zero);
            g.stack(&padded)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderOutput {
        states: g.stack(&rows)?,
        mask: mask_from_lengths(&lengths, l),
        lengths,
        chunk_trace: None,
    })
}

/// Per-position concatenation of a primary encoding with auxiliary states
/// covering the same positions (word vectors or another encoder's output).
pub fn encode_joint(g: &Graph, primary: &EncoderOutput, aux: Var) -> Result<EncoderOutput> {
    let ps = g.shape(primary.states);
    let a = g.shape(aux);
    if a.len() != 3 || ps[..2] != a[..2] {
        return Err(Error::dim("encode_joint", &ps, &a));
    }
    let aux = zero_padding(g, aux, &primary.mask)?;
    Ok(EncoderOutput {
        states: g.concat(&[primary.states, aux])?,
        mask: primary.mask.clone(),
        lengths: primary.lengths.clone(),
        chunk_trace: primary.chunk_trace.clone(),
    })
}
