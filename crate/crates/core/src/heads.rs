//! Task heads on top of sentence encodings.
//!
//! The inference head soft-aligns premise and hypothesis states, collects
//! `[ā; ã; ā−ã; ā⊙ã]`, composes with a BLSTM, pools by mean and max over
//! valid positions and classifies with a tanh MLP. The sentiment head pools
//! one encoding and classifies.

use rand::Rng;

use crate::data::{NUM_NLI_CLASSES, NUM_SENTIMENT_CLASSES};
use crate::encoders::{encode_chain, zero_padding, ChainParams, EncoderOutput};
use crate::error::{Error, Result};
use crate::optim::Dropout;
use crate::params::{init_matrix, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Row `i` of `weights_a` holds the attention of premise position `i` over
/// the hypothesis; `weights_b` is the converse.
#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub a_tilde: Var,
    pub b_tilde: Var,
    pub weights_a: Var,
    pub weights_b: Var,
}

/// `e_ij = āᵢ·b̄ⱼ`; `ãᵢ = Σⱼ softmaxⱼ(eᵢ·) b̄ⱼ` and symmetrically for `b̃`,
/// normalizing over valid positions only. Inputs are `[B × N × d]` with
/// row-major `[B × N]` masks; aligned rows at padded positions are zero.
pub fn soft_align(g: &Graph, a_bar: Var, b_bar: Var, mask_a: &[bool], mask_b: &[bool]) -> Result<Alignment> {
    let (sa, sb) = (g.shape(a_bar), g.shape(b_bar));
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(Error::dim("soft_align", &sa, &sb));
    }
    if mask_a.len() != sa[0] * sa[1] || mask_b.len() != sb[0] * sb[1] {
        return Err(Error::dim("soft_align mask", &[mask_a.len(), mask_b.len()], &[sa[0] * sa[1], sb[0] * sb[1]]));
    }
    let e = g.bmm_nt(a_bar, b_bar)?;
    let weights_a = g.softmax_masked(e, Some(mask_b))?;
    let weights_b = g.softmax_masked(g.transpose(e)?, Some(mask_a))?;
    let a_tilde = zero_padding(g, g.bmm(weights_a, b_bar)?, mask_a)?;
    let b_tilde = zero_padding(g, g.bmm(weights_b, a_bar)?, mask_b)?;
    Ok(Alignment {
        a_tilde,
        b_tilde,
        weights_a,
        weights_b,
    })
}

/// Per-row `[bar; tilde; bar − tilde; bar ⊙ tilde]`.
pub fn inference_collect(g: &Graph, bar: Var, tilde: Var) -> Result<Var> {
    let (sb, st) = (g.shape(bar), g.shape(tilde));
    if sb != st {
        return Err(Error::dim("inference_collect", &sb, &st));
    }
    g.concat(&[bar, tilde, g.sub(bar, tilde)?, g.hadamard(bar, tilde)?])
}

/// `[mean; max]` over valid positions of `[B × L × d]`, giving `[B × 2d]`.
pub fn pool(g: &Graph, states: Var, mask: &[bool]) -> Result<Var> {
    g.concat(&[g.masked_mean(states, mask)?, g.masked_max(states, mask)?])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub d_in: usize,
    pub d_hidden: usize,
    pub classes: usize,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            w_hidden: store.add(format!("{prefix}.W_hidden"), init_matrix(d_hidden, d_in, rng)),
            b_hidden: store.add(format!("{prefix}.b_hidden"), Tensor::zeros(&[d_hidden])),
            w_out: store.add(format!("{prefix}.W_out"), init_matrix(classes, d_hidden, rng)),
            b_out: store.add(format!("{prefix}.b_out"), Tensor::zeros(&[classes])),
            d_in,
            d_hidden,
            classes,
        }
    }

    /// Dropout on the input, tanh hidden layer, softmax output.
    pub fn forward(&self, g: &Graph, v: Var, drop: &mut Dropout) -> Result<Var> {
        let v = drop.apply(g, v)?;
        let hidden = g.tanh(g.linear(v, g.param(self.w_hidden), Some(g.param(self.b_hidden)))?);
        g.softmax(g.linear(hidden, g.param(self.w_out), Some(g.param(self.b_out)))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliHeadConfig {
    /// Width of the sentence encodings fed to alignment.
    pub d_enc: usize,
    /// Per-direction width of the composition BLSTM.
    pub d_compose: usize,
    /// MLP hidden width; `None` uses the composition input width.
    pub d_hidden: Option<usize>,
    /// Rectified-linear reduction of the collected vectors to this width
    /// before composition.
    pub reduce: Option<usize>,
    /// Width of auxiliary states appended after collection (and reduction).
    pub late_aux: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliHeadParams {
    pub reduce: Option<(ParamId, ParamId)>,
    pub compose: ChainParams,
    pub mlp: Mlp,
    pub late_aux: usize,
}

impl NliHeadParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &NliHeadConfig, rng: &mut impl Rng) -> Result<Self> {
        let collected = 4 * cfg.d_enc;
        let reduce = cfg.reduce.map(|w| {
            (
                store.add(format!("{prefix}.reduce.W"), init_matrix(w, collected, rng)),
                store.add(format!("{prefix}.reduce.b"), Tensor::zeros(&[w])),
            )
        });
        let compose_in = cfg.reduce.unwrap_or(collected) + cfg.late_aux;
        let compose = ChainParams::new(store, &format!("{prefix}.compose"), compose_in, cfg.d_compose, 1, true, rng)?;
        let pooled = 4 * compose.out_dim();
        let mlp = Mlp::new(
            store,
            &format!("{prefix}.mlp"),
            pooled,
            cfg.d_hidden.unwrap_or(compose_in),
            NUM_NLI_CLASSES,
            rng,
        );
        Ok(NliHeadParams {
            reduce,
            compose,
            mlp,
            late_aux: cfg.late_aux,
        })
    }
}

fn compose_side(
    g: &Graph,
    bar: Var,
    tilde: Var,
    mask: &[bool],
    lengths: &[usize],
    late: Option<Var>,
    p: &NliHeadParams,
) -> Result<Var> {
    let mut m = inference_collect(g, bar, tilde)?;
    if let Some((w, b)) = p.reduce {
        m = g.relu(g.linear(m, g.param(w), Some(g.param(b)))?);
    }
    if let Some(aux) = late {
        m = g.concat(&[m, aux])?;
    }
    let m = zero_padding(g, m, mask)?;
    let composed = encode_chain(g, m, lengths, &p.compose)?;
    Ok(composed.states)
}

/// Class probabilities `[B × 3]` for a batch of premise/hypothesis
/// encodings. `late` supplies auxiliary per-position states appended after
/// collection when the head was built with `late_aux > 0`.
pub fn nli_forward(
    g: &Graph,
    premise: &EncoderOutput,
    hypothesis: &EncoderOutput,
    late: Option<(Var, Var)>,
    p: &NliHeadParams,
    drop: &mut Dropout,
) -> Result<Var> {
    if late.is_some() != (p.late_aux > 0) {
        return Err(Error::Contract("late auxiliary states do not match the head".into()));
    }
    let al = soft_align(g, premise.states, hypothesis.states, &premise.mask, &hypothesis.mask)?;
    let va = compose_side(g, premise.states, al.a_tilde, &premise.mask, &premise.lengths, late.map(|l| l.0), p)?;
    let vb = compose_side(g, hypothesis.states, al.b_tilde, &hypothesis.mask, &hypothesis.lengths, late.map(|l| l.1), p)?;
    let v = g.concat(&[
        g.masked_mean(va, &premise.mask)?,
        g.masked_mean(vb, &hypothesis.mask)?,
        g.masked_max(va, &premise.mask)?,
        g.masked_max(vb, &hypothesis.mask)?,
    ])?;
    p.mlp.forward(g, v, drop)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaHeadParams {
    pub mlp: Mlp,
}

impl SaHeadParams {
    /// `d_hidden = None` uses the encoder width.
    pub fn new(store: &mut ParamStore, prefix: &str, d_enc: usize, d_hidden: Option<usize>, rng: &mut impl Rng) -> Self {
        SaHeadParams {
            mlp: Mlp::new(
                store,
                &format!("{prefix}.mlp"),
                2 * d_enc,
                d_hidden.unwrap_or(d_enc),
                NUM_SENTIMENT_CLASSES,
                rng,
            ),
        }
    }
}

/// Class probabilities `[B × 5]` from `[mean; max]` pooled states.
pub fn sa_forward(g: &Graph, sentence: &EncoderOutput, p: &SaHeadParams, drop: &mut Dropout) -> Result<Var> {
    let v = pool(g, sentence.states, &sentence.mask)?;
    p.mlp.forward(g, v, drop)
}
