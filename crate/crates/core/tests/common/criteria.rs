//! One function per acceptance criterion. Each returns a short detail
//! string on success and a diagnostic on failure.

use std::ops::ControlFlow;
use std::path::Path;

use rand::Rng;
use snelsd::cells::{
    describe_step, detect_step, lstm_step, treelstm_node, DescribeParams, DetectParams, LstmParams, TreeLstmParams,
};
use snelsd::checkpoint::Checkpoint;
use snelsd::config::{EncoderKind, RunConfig, Task};
use snelsd::data::{parse_snli, parse_sst, random_table, NliLabel};
use snelsd::encoders::{
    encode_chain, encode_joint, encode_snelsd, encode_tree, mask_from_lengths, run_lstm, zero_padding, ChainParams,
    EncoderOutput, SnelsdParams, TreeReadout,
};
use snelsd::gradcheck::{check_param_gradients, GradCheck, GradReport, REL_TOL};
use snelsd::heads::{nli_forward, sa_forward, NliHeadConfig, NliHeadParams, SaHeadParams};
use snelsd::model::{Example, Model};
use snelsd::optim::{cross_entropy, AdadeltaConfig, AdamConfig, Dropout, Optimizer, OptimizerConfig};
use snelsd::run::{self, HeatmapFormat};
use snelsd::synthetic;
use snelsd::train::{build_vocab, evaluate, to_examples, train, Corpus};
use snelsd::viz::BOUNDARY_MARK;
use snelsd::{Graph, ParamGrads, ParamId, ParamStore, Result, Tensor, Var};

use super::*;

pub type Outcome = std::result::Result<String, String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

const GD: usize = 4;

/// Inputs live in the store next to the weights so one check covers both.
fn input(store: &mut ParamStore, rng: &mut impl Rng, name: &str, shape: &[usize]) -> ParamId {
    store.add(name, tensor(rng, shape, 1.0))
}

/// Fixed random weighting so the loss is not symmetric in its outputs.
fn weigh(g: &Graph, v: Var, rng_seed: u64) -> Result<Var> {
    let shape = g.shape(v);
    let w = g.constant(tensor(&mut rng(rng_seed), &shape, 1.0));
    Ok(g.sum(g.hadamard(v, w)?))
}

fn bounded(store: &mut ParamStore, rng: &mut impl Rng, name: &str, shape: &[usize]) -> ParamId {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
    store.add(name, Tensor::new(shape.to_vec(), data).unwrap())
}

fn run_check(name: &str, store: &ParamStore, f: impl Fn(&Graph) -> Result<Var>, log: &mut Vec<String>) -> Result<GradReport> {
    let r = check_param_gradients(store, None, f, GradCheck::default())?;
    log.push(format!("{name}: {} entries, max rel {:.2e}", r.checked, r.max_rel_err));
    Ok(r)
}

fn gradient_cases(seed: u64) -> Result<(GradReport, Vec<String>)> {
    let mut total = GradReport::default();
    let mut log = Vec::new();
    let mut r = rng(seed);
    for batch in [None, Some(2usize)] {
        let sh = |d: usize| -> Vec<usize> { batch.map_or(vec![d], |b| vec![b, d]) };
        let row: Vec<usize> = batch.map_or(vec![], |b| vec![b]);
        let tag = if batch.is_some() { "batched" } else { "single" };

        let mut s = ParamStore::new();
        let p = LstmParams::new(&mut s, "lstm", GD, GD, &mut r);
        randomize(&mut s, &mut r, 0.5);
        let (x, h, c) = (input(&mut s, &mut r, "x", &sh(GD)), input(&mut s, &mut r, "h", &sh(GD)), input(&mut s, &mut r, "c", &sh(GD)));
        total.merge(&run_check(&format!("lstm_step ({tag})"), &s, |g| {
            let (h2, c2) = lstm_step(g, g.param(x), g.param(h), g.param(c), &p)?;
            g.add(weigh(g, h2, 1)?, weigh(g, c2, 2)?)
        }, &mut log)?);

        let mut s = ParamStore::new();
        let p = TreeLstmParams::new(&mut s, "tree", GD, GD, &mut r);
        randomize(&mut s, &mut r, 0.5);
        let ids: Vec<ParamId> = ["x", "hl", "cl", "hr", "cr"].iter().map(|n| input(&mut s, &mut r, n, &sh(GD))).collect();
        total.merge(&run_check(&format!("treelstm_node ({tag})"), &s, |g| {
            let v: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
            let (h2, c2) = treelstm_node(g, v[0], (v[1], v[2]), (v[3], v[4]), &p)?;
            g.add(weigh(g, h2, 3)?, weigh(g, c2, 4)?)
        }, &mut log)?);

        let mut s = ParamStore::new();
        let p = DetectParams::new(&mut s, "detect", GD, GD, &mut r);
        randomize(&mut s, &mut r, 0.5);
        let (x, xn, pp) = (input(&mut s, &mut r, "x", &sh(GD)), input(&mut s, &mut r, "x_next", &sh(GD)), input(&mut s, &mut r, "p_prev", &sh(GD)));
        let rp = bounded(&mut s, &mut r, "r_prev", &row);
        total.merge(&run_check(&format!("detect_step ({tag})"), &s, |g| {
            let (pt, rt) = detect_step(g, g.param(x), g.param(xn), g.param(rp), g.param(pp), &p)?;
            g.add(weigh(g, pt, 5)?, weigh(g, rt, 6)?)
        }, &mut log)?);

        let mut s = ParamStore::new();
        let p = DescribeParams::new(&mut s, "describe", GD, GD, &mut r);
        randomize(&mut s, &mut r, 0.5);
        let (pt, h, c) = (input(&mut s, &mut r, "p_t", &sh(GD)), input(&mut s, &mut r, "h", &sh(GD)), input(&mut s, &mut r, "c", &sh(GD)));
        let rt = bounded(&mut s, &mut r, "r_t", &row);
        total.merge(&run_check(&format!("describe_step ({tag})"), &s, |g| {
            let (h2, c2) = describe_step(g, g.param(pt), g.param(rt), g.param(h), g.param(c), &p)?;
            g.add(weigh(g, h2, 7)?, weigh(g, c2, 8)?)
        }, &mut log)?);
    }

    // Whole recurrences over length-5 sentences, padded batch.
    let lengths = [5usize, 3];
    let mut s = ParamStore::new();
    let sp = SnelsdParams::new(&mut s, "snelsd", GD, GD, GD, &mut r);
    let cp = ChainParams::new(&mut s, "chain", GD, GD, 2, true, &mut r)?;
    randomize(&mut s, &mut r, 0.5);
    let x = input(&mut s, &mut r, "x", &[2, 5, GD]);
    total.merge(&run_check("encode_snelsd + encode_chain (len 5)", &s, |g| {
        let xv = zero_padding(g, g.param(x), &mask_from_lengths(&lengths, 5))?;
        let a = encode_snelsd(g, xv, &lengths, &sp, None)?;
        let b = encode_chain(g, xv, &lengths, &cp)?;
        g.add(weigh(g, a.states, 9)?, weigh(g, b.states, 10)?)
    }, &mut log)?);

    let mut s = ParamStore::new();
    let tp = TreeLstmParams::new(&mut s, "tree", GD, GD, &mut r);
    randomize(&mut s, &mut r, 0.5);
    let leaves: Vec<ParamId> = (0..5).map(|i| input(&mut s, &mut r, &format!("leaf{i}"), &[GD])).collect();
    let tree = random_tree(&mut r, 5);
    total.merge(&run_check("encode_tree (5 leaves)", &s, |g| {
        let lv: Vec<Var> = leaves.iter().map(|&i| g.param(i)).collect();
        let states = encode_tree(g, &lv, &tree, &tp, TreeReadout::Internal)?;
        weigh(g, g.stack(&states)?, 11)
    }, &mut log)?);

    // Heads on random encodings, cross-entropy loss.
    let (la, lb) = ([5usize, 3], [4usize, 2]);
    for (reduce, late) in [(None, 0usize), (Some(3), 2)] {
        let mut s = ParamStore::new();
        let cfg = NliHeadConfig { d_enc: GD, d_compose: GD, d_hidden: None, reduce, late_aux: late };
        let hp = NliHeadParams::new(&mut s, "nli", &cfg, &mut r)?;
        randomize(&mut s, &mut r, 0.5);
        let a = input(&mut s, &mut r, "premise", &[2, 5, GD]);
        let b = input(&mut s, &mut r, "hypothesis", &[2, 4, GD]);
        let aux = (late > 0).then(|| (input(&mut s, &mut r, "aux_a", &[2, 5, late]), input(&mut s, &mut r, "aux_b", &[2, 4, late])));
        let name = format!("nli head (reduce {reduce:?}, late aux {late})");
        total.merge(&run_check(&name, &s, |g| {
            let enc = |v: ParamId, l: &[usize], n: usize| -> Result<EncoderOutput> {
                let mask = mask_from_lengths(l, n);
                Ok(EncoderOutput { states: zero_padding(g, g.param(v), &mask)?, mask, lengths: l.to_vec(), chunk_trace: None })
            };
            let late = aux.map(|(x, y)| (g.param(x), g.param(y)));
            let probs = nli_forward(g, &enc(a, &la, 5)?, &enc(b, &lb, 4)?, late, &hp, &mut Dropout::off())?;
            cross_entropy(g, probs, &[0, 2])
        }, &mut log)?);
    }
    let mut s = ParamStore::new();
    let hp = SaHeadParams::new(&mut s, "sa", GD, None, &mut r);
    randomize(&mut s, &mut r, 0.5);
    let a = input(&mut s, &mut r, "sentence", &[2, 5, GD]);
    total.merge(&run_check("sa head", &s, |g| {
        let mask = mask_from_lengths(&la, 5);
        let out = EncoderOutput { states: zero_padding(g, g.param(a), &mask)?, mask, lengths: la.to_vec(), chunk_trace: None };
        cross_entropy(g, sa_forward(g, &out, &hp, &mut Dropout::off())?, &[4, 1])
    }, &mut log)?);
    Ok((total, log))
}

/// Analytic versus central-difference gradients for every cell, every
/// recurrence and both heads.
pub fn gradient_oracle(verbose: bool) -> Outcome {
    let (report, log) = gradient_cases(7).map_err(fail)?;
    if verbose {
        for l in &log {
            println!("    {l}");
        }
    }
    let detail = format!("{} entries, max rel err {:.3e} (< {REL_TOL:e})", report.checked, report.max_rel_err);
    if report.max_rel_err < REL_TOL {
        Ok(detail)
    } else {
        Err(format!("{detail}; worst {:?}", report.worst))
    }
}

// ---------------------------------------------------------------- degeneracy

pub fn degeneracy(sentences: usize) -> Outcome {
    const D: usize = 8;
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let p = SnelsdParams::new(&mut store, "snelsd", D, D, D, &mut r);
    randomize(&mut store, &mut r, 0.5);
    let mut worst = 0.0f64;
    let mut worst_ref = 0.0f64;
    for _ in 0..sentences / 10 {
        let batch: Vec<Vec<V>> = (0..10).map(|_| {
            let n = r.random_range(1..=12);
            random_sentence(&mut r, n, D)
        }).collect();
        let (x, lengths) = pad(&batch);
        let g = Graph::with_params(&store, false);
        let xv = g.constant(x);
        let enc = encode_snelsd(&g, xv, &lengths, &p, Some(1.0)).map_err(fail)?;
        let proj = g.tanh(g.linear(xv, g.param(p.detect.w_p1), Some(g.param(p.detect.b_p1))).map_err(fail)?);
        let proj = zero_padding(&g, proj, &mask_from_lengths(&lengths, g.shape(xv)[1])).map_err(fail)?;
        let chain = run_lstm(&g, proj, &lengths, &p.describe.lstm, false).map_err(fail)?;
        let (ev, cv) = (g.value(enc.states), g.value(chain));
        worst = worst.max(max_abs_diff(ev.data(), cv.data()));
        for (b, sent) in batch.iter().enumerate() {
            let projected: Vec<V> = sent.iter().map(|w| {
                let t = store.get(p.detect.w_p1);
                let bias = store.get(p.detect.b_p1).data();
                (0..D).map(|i| ((0..D).map(|j| t.data()[i * D + j] * w[j]).sum::<f64>() + bias[i]).tanh()).collect()
            }).collect();
            let expect = lstm_seq_ref(&store, &p.describe.lstm, &projected, false);
            worst_ref = worst_ref.max(max_abs_diff(&rows(&ev, b, sent.len()).concat(), &expect.concat()));
        }
    }
    let detail = format!("{sentences} sentences, max |Δ| {worst:.2e} vs tape chain, {worst_ref:.2e} vs scalar chain");
    if worst < 1e-10 && worst_ref < 1e-10 { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- scalar loops

pub fn scalar_loops(cases: usize) -> Outcome {
    const TOL: f64 = 1e-12;
    let mut r = rng(23);
    let mut worst = [0.0f64; 4];
    for _ in 0..cases {
        let (din, dh) = (r.random_range(1..=6), r.random_range(1..=6));
        let bsz = r.random_range(1..=4);
        let mut s = ParamStore::new();
        let lp = LstmParams::new(&mut s, "l", din, dh, &mut r);
        let tp = TreeLstmParams::new(&mut s, "t", din, dh, &mut r);
        let dp = DetectParams::new(&mut s, "d", din, dh, &mut r);
        let sp = DescribeParams::new(&mut s, "s", dh, dh, &mut r);
        randomize(&mut s, &mut r, 1.0);
        let g = Graph::with_params(&s, false);
        let mk = |r: &mut ChaCha8Rng, d: usize| tensor(r, &[bsz, d], 1.5);
        let (x, xn) = (mk(&mut r, din), mk(&mut r, din));
        let (h, c, h2, c2, pp) = (mk(&mut r, dh), mk(&mut r, dh), mk(&mut r, dh), mk(&mut r, dh), mk(&mut r, dh));
        let rv = Tensor::new(vec![bsz], (0..bsz).map(|_| r.random_range(0.0..=1.0)).collect()).unwrap();
        let v = |t: &Tensor| g.constant(t.clone());
        let row = |t: &Tensor, b: usize| t.row(b).to_vec();

        let (oh, oc) = lstm_step(&g, v(&x), v(&h), v(&c), &lp).map_err(fail)?;
        let (th, tc) = treelstm_node(&g, v(&x), (v(&h), v(&c)), (v(&h2), v(&c2)), &tp).map_err(fail)?;
        let (dpv, drv) = detect_step(&g, v(&x), v(&xn), v(&rv), v(&pp), &dp).map_err(fail)?;
        let (sh, sc) = describe_step(&g, v(&pp), v(&rv), v(&h), v(&c), &sp).map_err(fail)?;
        let val = |x: Var| g.value(x);
        for b in 0..bsz {
            let (eh, ec) = lstm_ref(&s, &lp, &row(&x, b), &row(&h, b), &row(&c, b));
            worst[0] = worst[0].max(max_abs_diff(val(oh).row(b), &eh)).max(max_abs_diff(val(oc).row(b), &ec));
            let (eh, ec) = tree_node_ref(&s, &tp, &row(&x, b), (&row(&h, b), &row(&c, b)), (&row(&h2, b), &row(&c2, b)));
            worst[1] = worst[1].max(max_abs_diff(val(th).row(b), &eh)).max(max_abs_diff(val(tc).row(b), &ec));
            let (ep, er) = detect_ref(&s, &dp, &row(&x, b), &row(&xn, b), rv.data()[b], &row(&pp, b));
            worst[2] = worst[2].max(max_abs_diff(val(dpv).row(b), &ep)).max((val(drv).data()[b] - er).abs());
            let (eh, ec) = describe_ref(&s, &sp, &row(&pp, b), rv.data()[b], &row(&h, b), &row(&c, b));
            worst[3] = worst[3].max(max_abs_diff(val(sh).row(b), &eh)).max(max_abs_diff(val(sc).row(b), &ec));
        }
    }
    let detail = format!(
        "{cases} cases each; max |Δ| lstm {:.1e}, tree {:.1e}, detect {:.1e}, describe {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    if worst.iter().all(|&w| w <= TOL) { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- masking

type EncodeFn<'p> = dyn Fn(&Graph, Var, &[usize]) -> Result<EncoderOutput> + 'p;

fn encode_one(g: &Graph, x: Tensor, lengths: &[usize], f: &EncodeFn) -> Result<Tensor> {
    let xv = g.constant(x);
    Ok(g.value(f(g, xv, lengths)?.states))
}

/// Padded batches versus sentence-by-sentence runs, at valid positions.
pub fn masking(batches: usize) -> Outcome {
    const TOL: f64 = 1e-12;
    const D: usize = 5;
    let mut r = rng(31);
    let mut s = ParamStore::new();
    let chains: Vec<(String, ChainParams)> = [(1, false), (1, true), (2, false), (2, true)]
        .iter()
        .map(|&(l, bi)| {
            let name = format!("{}lstm{l}", if bi { "b" } else { "" });
            let p = ChainParams::new(&mut s, &name, D, 4, l, bi, &mut r).unwrap();
            (name, p)
        })
        .collect();
    let sp = SnelsdParams::new(&mut s, "snelsd", D, 4, 4, &mut r);
    let aux = ChainParams::new(&mut s, "aux", D, 3, 1, true, &mut r).unwrap();
    let nli = NliHeadParams::new(&mut s, "nli", &NliHeadConfig { d_enc: D, d_compose: 3, d_hidden: None, reduce: Some(4), late_aux: 0 }, &mut r).map_err(fail)?;
    let sa = SaHeadParams::new(&mut s, "sa", D, None, &mut r);
    randomize(&mut s, &mut r, 0.6);

    type Enc<'p> = Box<EncodeFn<'p>>;
    let mut encoders: Vec<(String, Enc)> = chains
        .iter()
        .map(|(n, p)| (n.clone(), Box::new(move |g: &Graph, x: Var, l: &[usize]| encode_chain(g, x, l, p)) as Enc))
        .collect();
    encoders.push(("snelsd".into(), Box::new(|g: &Graph, x: Var, l: &[usize]| encode_snelsd(g, x, l, &sp, None))));
    encoders.push((
        "snelsd+blstm1".into(),
        Box::new(|g: &Graph, x: Var, l: &[usize]| {
            let primary = encode_snelsd(g, x, l, &sp, None)?;
            let a = encode_chain(g, x, l, &aux)?;
            encode_joint(g, &primary, a.states)
        }),
    ));
    encoders.push((
        "snelsd+word".into(),
        Box::new(|g: &Graph, x: Var, l: &[usize]| {
            let primary = encode_snelsd(g, x, l, &sp, None)?;
            encode_joint(g, &primary, x)
        }),
    ));

    let mut worst: Vec<(String, f64)> = encoders.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
    let (mut worst_nli, mut worst_sa) = (0.0f64, 0.0f64);
    let g = Graph::with_params(&s, false);
    for _ in 0..batches {
        let bsz = r.random_range(2..=4);
        let sents: Vec<Vec<V>> = (0..bsz).map(|_| {
            let n = r.random_range(1..=7);
            random_sentence(&mut r, n, D)
        }).collect();
        let hyps: Vec<Vec<V>> = (0..bsz).map(|_| {
            let n = r.random_range(1..=7);
            random_sentence(&mut r, n, D)
        }).collect();
        let (x, lengths) = pad(&sents);
        for (k, (_, f)) in encoders.iter().enumerate() {
            let batched = encode_one(&g, x.clone(), &lengths, f.as_ref()).map_err(fail)?;
            for (b, sent) in sents.iter().enumerate() {
                let (x1, l1) = pad(std::slice::from_ref(sent));
                let single = encode_one(&g, x1, &l1, f.as_ref()).map_err(fail)?;
                let d = max_abs_diff(&rows(&batched, b, sent.len()).concat(), &rows(&single, 0, sent.len()).concat());
                worst[k].1 = worst[k].1.max(d);
            }
        }
        let wrap = |t: Tensor, l: &[usize]| {
            let n = t.shape()[1];
            EncoderOutput { states: g.constant(t), mask: mask_from_lengths(l, n), lengths: l.to_vec(), chunk_trace: None }
        };
        let (y, ylen) = pad(&hyps);
        let probs = g.value(nli_forward(&g, &wrap(x.clone(), &lengths), &wrap(y, &ylen), None, &nli, &mut Dropout::off()).map_err(fail)?);
        let sprobs = g.value(sa_forward(&g, &wrap(x.clone(), &lengths), &sa, &mut Dropout::off()).map_err(fail)?);
        for b in 0..bsz {
            let (a1, al) = pad(std::slice::from_ref(&sents[b]));
            let (b1, bl) = pad(std::slice::from_ref(&hyps[b]));
            let p1 = g.value(nli_forward(&g, &wrap(a1.clone(), &al), &wrap(b1, &bl), None, &nli, &mut Dropout::off()).map_err(fail)?);
            worst_nli = worst_nli.max(max_abs_diff(probs.row(b), p1.row(0)));
            let s1 = g.value(sa_forward(&g, &wrap(a1, &al), &sa, &mut Dropout::off()).map_err(fail)?);
            worst_sa = worst_sa.max(max_abs_diff(sprobs.row(b), s1.row(0)));
        }
    }
    worst.push(("nli head".into(), worst_nli));
    worst.push(("sa head".into(), worst_sa));
    let detail = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    if worst.iter().all(|(_, w)| *w <= TOL) { Ok(format!("{batches} batches; {detail}")) } else { Err(detail) }
}

// ---------------------------------------------------------------- optimizers

pub fn optimizers() -> Outcome {
    let mut r = rng(41);
    let mut store = ParamStore::new();
    store.add("a", tensor(&mut r, &[3, 2], 1.0));
    store.add("b", tensor(&mut r, &[4], 1.0));
    let n = store.num_scalars();
    let flat = |s: &ParamStore| s.iter().flat_map(|(_, t)| t.data().to_vec()).collect::<V>();
    let grads: Vec<V> = (0..5).map(|_| uniform(&mut r, n, 2.0)).collect();
    let split = |g: &V| ParamGrads::from_vec(vec![Some(g[..6].to_vec()), Some(g[6..].to_vec())]);

    let adam = AdamConfig::default();
    let delta = AdadeltaConfig::default();
    let mut worst_traj = 0.0f64;
    let mut worst_closed = 0.0f64;
    for cfg in [OptimizerConfig::Adam(adam), OptimizerConfig::Adadelta(delta)] {
        let mut s = store.clone();
        let mut opt = Optimizer::new(&s, cfg);
        let mut theta = flat(&store);
        type Step = Box<dyn FnMut(&mut [f64], &[f64])>;
        let mut reference: Step = match cfg {
            OptimizerConfig::Adam(c) => {
                let mut a = AdamRef::new(n, c.lr, c.beta1, c.beta2, c.eps);
                Box::new(move |t, g| a.step(t, g))
            }
            OptimizerConfig::Adadelta(c) => {
                let mut a = AdadeltaRef::new(n, c.rho, c.eps);
                Box::new(move |t, g| a.step(t, g))
            }
        };
        for (k, gr) in grads.iter().enumerate() {
            let before = flat(&s);
            opt.step(&mut s, &split(gr)).map_err(fail)?;
            reference(&mut theta, gr);
            worst_traj = worst_traj.max(max_abs_diff(&flat(&s), &theta));
            if k == 0 {
                let closed: V = before
                    .iter()
                    .zip(gr)
                    .map(|(&t, &g)| match cfg {
                        OptimizerConfig::Adam(c) => t - c.lr * g / (g.abs() + c.eps),
                        OptimizerConfig::Adadelta(c) => t - c.eps.sqrt() / ((1.0 - c.rho) * g * g + c.eps).sqrt() * g,
                    })
                    .collect();
                worst_closed = worst_closed.max(max_abs_diff(&flat(&s), &closed));
            }
        }
    }
    let detail = format!("5-step trajectories max |Δ| {worst_traj:.1e}; first-step closed forms max |Δ| {worst_closed:.1e}");
    if worst_traj <= 1e-12 && worst_closed <= 1e-9 { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- data

pub const SNLI_COUNTS: [usize; 3] = [549_367, 9_842, 9_824];
pub const SST_COUNTS: [usize; 3] = [8_544, 1_101, 2_210];
pub const DATA_ROOT_VAR: &str = "SNELSD_DATA_ROOT";

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Fixture checks always; official split counts when the data root holds
/// `snli_1.0/snli_1.0_{train,dev,test}.jsonl` and `trees/{train,dev,test}.txt`.
pub fn data_fixtures() -> Outcome {
    let snli = parse_snli(&fixture("snli_fixture.jsonl"), false).map_err(fail)?;
    let lines = fixture("snli_fixture.jsonl").lines().count();
    let labels: Vec<NliLabel> = snli.iter().map(|e| e.label).collect();
    if snli.len() != 3 || lines != 5 || labels != [NliLabel::Entailment, NliLabel::Contradiction, NliLabel::Neutral] {
        return Err(format!("snli fixture: {lines} lines gave {} examples {labels:?}", snli.len()));
    }
    let sst_text = fixture("sst_fixture.txt");
    let trees = parse_sst(&sst_text, true).map_err(fail)?;
    let rendered: String = trees.iter().map(|t| t.render() + "\n").collect();
    if rendered != sst_text {
        return Err("sst fixture does not round-trip byte-exactly".into());
    }
    let mut detail = format!("snli fixture {lines} lines -> 3 labeled; sst fixture {} trees round-trip", trees.len());
    match std::env::var_os(DATA_ROOT_VAR).map(std::path::PathBuf::from) {
        Some(root) if root.join("snli_1.0").is_dir() || root.join("trees").is_dir() => {
            if root.join("snli_1.0").is_dir() {
                let got: Vec<usize> = ["train", "dev", "test"]
                    .iter()
                    .map(|s| snelsd::data::load_snli(root.join(format!("snli_1.0/snli_1.0_{s}.jsonl")), false).map(|v| v.len()))
                    .collect::<Result<_>>()
                    .map_err(fail)?;
                if got != SNLI_COUNTS {
                    return Err(format!("snli split counts {got:?}, expected {SNLI_COUNTS:?}"));
                }
                detail.push_str(&format!("; snli splits {got:?}"));
            }
            if root.join("trees").is_dir() {
                let got: Vec<usize> = ["train", "dev", "test"]
                    .iter()
                    .map(|s| snelsd::data::load_sst(root.join(format!("trees/{s}.txt")), true).map(|v| v.len()))
                    .collect::<Result<_>>()
                    .map_err(fail)?;
                if got != SST_COUNTS {
                    return Err(format!("sst split counts {got:?}, expected {SST_COUNTS:?}"));
                }
                detail.push_str(&format!("; sst splits {got:?}"));
            }
        }
        _ => detail.push_str(&format!("; official corpora not found under ${DATA_ROOT_VAR}, split counts not checked")),
    }
    Ok(detail)
}

// ---------------------------------------------------------------- training

pub struct Trained {
    pub model: Model,
    pub vocab: snelsd::data::Vocab,
    pub examples: Vec<Example>,
    pub corpus: Corpus,
    pub epochs: usize,
    pub reached: bool,
}

/// Trains until evaluation-mode accuracy on the training set is 100% or
/// `max_epochs` pass.
pub fn overfit(cfg: &RunConfig, corpus: Corpus, max_epochs: usize) -> Result<Trained> {
    let mut cfg = cfg.clone();
    cfg.epochs = max_epochs;
    let vocab = build_vocab(&cfg, &corpus)?;
    let examples = to_examples(&cfg, &corpus, &vocab)?;
    let mut model = Model::new(&cfg, random_table(vocab.len(), cfg.d_emb, cfg.seed))?;
    let mut opt = Optimizer::new(&model.store, cfg.optimizer);
    let mut reached = false;
    let history = train(&mut model, &mut opt, &examples, None, 0, |_, m, _| {
        reached = evaluate(m, &examples, 64)?.accuracy() == 1.0;
        Ok(if reached { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
    })?;
    Ok(Trained { model, vocab, examples, corpus, epochs: history.len(), reached })
}

pub fn nli_overfit_config() -> RunConfig {
    let mut c = RunConfig::for_task(Task::Nli);
    c.encoder = EncoderKind::Snelsd;
    (c.d_emb, c.d_hidden, c.d_compose) = (16, 16, 16);
    c.batch_size = 8;
    c.dropout = 0.5;
    c.optimizer = OptimizerConfig::Adam(AdamConfig { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    c
}

pub fn sa_overfit_config() -> RunConfig {
    let mut c = RunConfig::for_task(Task::Sa);
    c.encoder = EncoderKind::Snelsd;
    (c.d_emb, c.d_hidden) = (16, 16);
    c.optimizer = OptimizerConfig::Adadelta(AdadeltaConfig { rho: 0.95, eps: 1e-6 });
    c
}

pub fn overfit_outcome(t: &Trained, max_epochs: usize) -> Outcome {
    let acc = evaluate(&t.model, &t.examples, 64).map_err(fail)?.accuracy();
    let detail = format!(
        "{} examples, vocab {}, train acc {:.1}% after {} epochs (limit {max_epochs})",
        t.examples.len(),
        t.vocab.len(),
        100.0 * acc,
        t.epochs
    );
    if t.reached && acc == 1.0 { Ok(detail) } else { Err(detail) }
}

/// Within-sentence variance of the boundary indicators over every training
/// sentence (premises and hypotheses).
pub fn chunk_variance(t: &Trained) -> Outcome {
    let Corpus::Nli(pairs) = &t.corpus else { return Err("needs the inference corpus".into()) };
    let sentences: Vec<Vec<String>> = pairs.iter().flat_map(|e| [e.premise.clone(), e.hypothesis.clone()]).collect();
    let ckpt = Checkpoint::from_model(&t.model, &t.vocab, None, t.epochs, &[]);
    let traces = run::chunk_traces(&ckpt, &sentences).map_err(fail)?;
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let varied = traces.iter().filter(|tr| var(tr) > 1e-4).count();
    let frac = varied as f64 / traces.len() as f64;
    let detail = format!("{varied}/{} sentences with var(r) > 1e-4 ({:.1}%, need >= 80%)", traces.len(), 100.0 * frac);
    if frac >= 0.8 { Ok(detail) } else { Err(detail) }
}

/// Token-level boundary marks in an ANSI heatmap, one list per line.
pub fn ansi_marks(text: &str) -> Vec<Vec<bool>> {
    text.lines()
        .map(|line| {
            line.split("\x1b[0m")
                .filter(|cell| cell.contains(')'))
                .map(|cell| cell.trim_end().ends_with(BOUNDARY_MARK))
                .collect()
        })
        .collect()
}

/// Save, reload and re-evaluate; then render heatmaps twice and compare
/// the marks with the indicator values.
pub fn checkpoint_and_inspect(t: &Trained, dev: &Corpus, dir: &Path) -> Outcome {
    let cfg = &t.model.config;
    let dev_set = to_examples(cfg, dev, &t.vocab).map_err(fail)?;
    let before = evaluate(&t.model, &dev_set, cfg.batch_size).map_err(fail)?;
    let path = dir.join("model.ckpt");
    Checkpoint::from_model(&t.model, &t.vocab, None, t.epochs, &[]).save(&path).map_err(fail)?;
    let loaded = Checkpoint::load(&path).map_err(fail)?;
    let after = evaluate(&loaded.model().map_err(fail)?, &dev_set, cfg.batch_size).map_err(fail)?;
    if before.accuracy().to_bits() != after.accuracy().to_bits() || before != after {
        return Err(format!("dev accuracy {} before save, {} after load", before.accuracy(), after.accuracy()));
    }
    let Corpus::Nli(pairs) = dev else { return Err("needs the inference corpus".into()) };
    let sentences: Vec<Vec<String>> = pairs.iter().map(|e| e.premise.clone()).collect();
    let text: String = sentences.iter().map(|s| s.join(" ") + "\n").collect();
    let trained = inspect_marks(&path, &loaded, &sentences, &text)?;
    // A sharper boundary scorer spreads r toward 0 and 1 so both marked and
    // unmarked tokens occur.
    let mut sharp = t.model.clone();
    let u_r = sharp.store.find("encoder.detect.u_r").ok_or("no boundary scorer in the model")?;
    sharp.store.get_mut(u_r).data_mut().iter_mut().for_each(|v| *v *= 25.0);
    let sharp_path = dir.join("sharp.ckpt");
    let sharp_ckpt = Checkpoint::from_model(&sharp, &t.vocab, None, t.epochs, &[]);
    sharp_ckpt.save(&sharp_path).map_err(fail)?;
    let (marked, total) = inspect_marks(&sharp_path, &sharp_ckpt, &sentences, &text)?;
    if marked == 0 || marked == total {
        return Err(format!("sharpened scorer marked {marked}/{total} tokens; cannot tell marks apart"));
    }
    Ok(format!(
        "dev acc {:.4} identical after reload; heatmaps identical across runs; marks match r > 0.9 ({}/{} trained, {marked}/{total} sharpened)",
        after.accuracy(),
        trained.0,
        trained.1
    ))
}

/// Renders twice in both formats and checks determinism and that exactly
/// the tokens with r > 0.9 carry a mark. Returns (marked, total) tokens.
fn inspect_marks(path: &Path, ckpt: &Checkpoint, sentences: &[Vec<String>], text: &str) -> std::result::Result<(usize, usize), String> {
    let a = run::run_inspect(path, text, HeatmapFormat::Ansi).map_err(fail)?;
    let b = run::run_inspect(path, text, HeatmapFormat::Ansi).map_err(fail)?;
    let h1 = run::run_inspect(path, text, HeatmapFormat::Html).map_err(fail)?;
    let h2 = run::run_inspect(path, text, HeatmapFormat::Html).map_err(fail)?;
    if a != b || h1 != h2 {
        return Err("inspect output differs between runs".into());
    }
    let traces = run::chunk_traces(ckpt, sentences).map_err(fail)?;
    let expected: Vec<Vec<bool>> = traces.iter().map(|tr| tr.iter().map(|&r| r > 0.9).collect()).collect();
    let marks = ansi_marks(&a);
    if marks != expected {
        return Err("boundary marks do not match r > 0.9".into());
    }
    let html_marks = h1.matches(BOUNDARY_MARK).count();
    let n_marked: usize = expected.iter().flatten().filter(|&&m| m).count();
    let n_tokens: usize = expected.iter().map(Vec::len).sum();
    if html_marks != n_marked {
        return Err(format!("html has {html_marks} marks, expected {n_marked}"));
    }
    Ok((n_marked, n_tokens))
}

pub fn synthetic_nli() -> Corpus {
    Corpus::Nli(synthetic::nli_pairs(0))
}

pub fn synthetic_sa() -> Corpus {
    Corpus::Sa(synthetic::sentiment_trees(0))
}
