//! Assembles embedding table, sentence encoder and task head into one
//! trainable model, and defines the batch format it consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::TreeLstmParams;
use crate::config::{EncoderKind, Joint, RunConfig, Task};
use crate::data::{ParseTree, SequenceBatch};
use crate::encoders::{
    encode_chain, encode_joint, encode_snelsd, encode_tree, pack_states, zero_padding, ChainParams, EncoderOutput,
    SnelsdParams, TreeReadout,
};
use crate::error::{Error, Result};
use crate::heads::{nli_forward, sa_forward, NliHeadConfig, NliHeadParams, SaHeadParams};
use crate::optim::Dropout;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// One sentence of an example: token ids and, for tree encoders, its parse
/// (whose leaves are the tokens).
#[derive(Clone, Debug, PartialEq)]
pub struct Side {
    pub ids: Vec<usize>,
    pub tree: Option<ParseTree>,
}

/// A labeled example: two sides for inference, one for sentiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sides: Vec<Side>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct SideBatch {
    pub seq: SequenceBatch,
    pub trees: Option<Vec<ParseTree>>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub sides: Vec<SideBatch>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[Example], indices: &[usize]) -> Result<Batch> {
        let n_sides = examples[indices[0]].sides.len();
        let sides = (0..n_sides)
            .map(|s| {
                let seqs: Vec<&[usize]> = indices.iter().map(|&i| examples[i].sides[s].ids.as_slice()).collect();
                let trees: Option<Vec<ParseTree>> =
                    indices.iter().map(|&i| examples[i].sides[s].tree.clone()).collect();
                Ok(SideBatch {
                    seq: SequenceBatch::from_sequences(&seqs)?,
                    trees,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Batch {
            indices: indices.to_vec(),
            sides,
            labels: indices.iter().map(|&i| examples[i].label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderParams {
    Chain(ChainParams),
    Tree(TreeLstmParams),
    Snelsd(SnelsdParams),
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Nli(NliHeadParams),
    Sa(SaHeadParams),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub encoder: EncoderParams,
    pub aux: Option<ChainParams>,
    pub head: HeadParams,
}

impl Model {
    /// Builds a model with the given embedding table `[|V| × d_emb]`. Other
    /// parameters are drawn from a stream seeded by `config.seed`.
    pub fn new(config: &RunConfig, embeddings: Tensor) -> Result<Model> {
        config.validate()?;
        if embeddings.shape().len() != 2 || embeddings.shape()[1] != config.d_emb {
            return Err(Error::dim("embedding table", embeddings.shape(), &[0, config.d_emb]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", embeddings);
        let (d_in, d_h) = (config.d_emb, config.d_hidden);
        let encoder = match config.encoder {
            EncoderKind::Lstm1 => EncoderParams::Chain(ChainParams::new(&mut store, "encoder", d_in, d_h, 1, false, &mut rng)?),
            EncoderKind::Blstm1 => EncoderParams::Chain(ChainParams::new(&mut store, "encoder", d_in, d_h, 1, true, &mut rng)?),
            EncoderKind::Lstm2 => EncoderParams::Chain(ChainParams::new(&mut store, "encoder", d_in, d_h, 2, false, &mut rng)?),
            EncoderKind::Blstm2 => EncoderParams::Chain(ChainParams::new(&mut store, "encoder", d_in, d_h, 2, true, &mut rng)?),
            EncoderKind::Tree => EncoderParams::Tree(TreeLstmParams::new(&mut store, "encoder", d_in, d_h, &mut rng)),
            EncoderKind::Snelsd => EncoderParams::Snelsd(SnelsdParams::new(&mut store, "encoder", d_in, d_h, d_h, &mut rng)),
        };
        let primary_width = match &encoder {
            EncoderParams::Chain(c) => c.out_dim(),
            EncoderParams::Tree(t) => t.d_h,
            EncoderParams::Snelsd(s) => s.out_dim(),
        };
        let aux = (config.joint_with == Joint::Blstm1)
            .then(|| ChainParams::new(&mut store, "aux", d_in, d_h, 1, true, &mut rng))
            .transpose()?;
        let aux_width = match config.joint_with {
            Joint::None => 0,
            Joint::WordEmbedding => d_in,
            Joint::Blstm1 => 2 * d_h,
        };
        let (d_enc, late_aux) = if config.late_fusion {
            (primary_width, aux_width)
        } else {
            (primary_width + aux_width, 0)
        };
        let head = match config.task {
            Task::Nli => HeadParams::Nli(NliHeadParams::new(
                &mut store,
                "head",
                &NliHeadConfig {
                    d_enc,
                    d_compose: config.d_compose,
                    d_hidden: config.mlp_hidden,
                    reduce: config.reduce,
                    late_aux,
                },
                &mut rng,
            )?),
            Task::Sa => HeadParams::Sa(SaHeadParams::new(&mut store, "head", d_enc, config.mlp_hidden, &mut rng)),
        };
        Ok(Model {
            config: config.clone(),
            store,
            embedding,
            encoder,
            aux,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        match self.head {
            HeadParams::Nli(_) => crate::data::NUM_NLI_CLASSES,
            HeadParams::Sa(_) => crate::data::NUM_SENTIMENT_CLASSES,
        }
    }

    fn embed(&self, g: &Graph, seq: &SequenceBatch, drop: &mut Dropout) -> Result<Var> {
        let flat = g.embed(g.param(self.embedding), &seq.ids)?;
        let x = g.reshape(flat, &[seq.batch_size(), seq.max_len, self.config.d_emb])?;
        let x = drop.apply(g, x)?;
        zero_padding(g, x, &seq.mask)
    }

    /// Encodes one side. Returns the sentence encoding and, in late-fusion
    /// mode, the auxiliary states kept aside for the head.
    pub fn encode(&self, g: &Graph, side: &SideBatch, drop: &mut Dropout) -> Result<(EncoderOutput, Option<Var>)> {
        let seq = &side.seq;
        let x = self.embed(g, seq, drop)?;
        let primary = match &self.encoder {
            EncoderParams::Chain(c) => encode_chain(g, x, &seq.lengths, c)?,
            EncoderParams::Snelsd(s) => encode_snelsd(g, x, &seq.lengths, s, None)?,
            EncoderParams::Tree(t) => {
                let trees = side
                    .trees
                    .as_ref()
                    .ok_or_else(|| Error::Config("the tree encoder needs parse trees".into()))?;
                let readout = match self.config.task {
                    Task::Nli => TreeReadout::Internal,
                    Task::Sa => TreeReadout::Root,
                };
                let (bsz, l, d) = (seq.batch_size(), seq.max_len, self.config.d_emb);
                let cells = g.reshape(x, &[1, bsz * l, d])?;
                let per_sentence = trees
                    .iter()
                    .enumerate()
                    .map(|(b, tree)| {
                        let leaves = (0..seq.lengths[b])
                            .map(|i| g.reshape(g.gather_time(cells, &[Some(b * l + i)])?, &[d]))
                            .collect::<Result<Vec<_>>>()?;
                        encode_tree(g, &leaves, tree, t, readout)
                    })
                    .collect::<Result<Vec<_>>>()?;
                pack_states(g, &per_sentence)?
            }
        };
        let aux_states = match self.config.joint_with {
            Joint::None => None,
            Joint::WordEmbedding => Some(x),
            Joint::Blstm1 => {
                let p = self.aux.as_ref().expect("aux encoder present");
                Some(encode_chain(g, x, &seq.lengths, p)?.states)
            }
        };
        match aux_states {
            None => Ok((primary, None)),
            Some(a) if self.config.late_fusion => Ok((primary, Some(a))),
            Some(a) => Ok((encode_joint(g, &primary, a)?, None)),
        }
    }

    /// Class probabilities `[B × k]`.
    pub fn forward(&self, g: &Graph, batch: &Batch, drop: &mut Dropout) -> Result<Var> {
        match &self.head {
            HeadParams::Nli(h) => {
                if batch.sides.len() != 2 {
                    return Err(Error::Config("inference batches need two sentences per example".into()));
                }
                let (a, la) = self.encode(g, &batch.sides[0], drop)?;
                let (b, lb) = self.encode(g, &batch.sides[1], drop)?;
                let late = la.zip(lb);
                nli_forward(g, &a, &b, late, h, drop)
            }
            HeadParams::Sa(h) => {
                if batch.sides.len() != 1 {
                    return Err(Error::Config("sentiment batches need one sentence per example".into()));
                }
                let (s, _) = self.encode(g, &batch.sides[0], drop)?;
                sa_forward(g, &s, h, drop)
            }
        }
    }

    /// Boundary indicators for each sentence of a side batch, in evaluation
    /// mode.
    pub fn chunk_traces(&self, side: &SideBatch) -> Result<Vec<Vec<f64>>> {
        if !matches!(self.encoder, EncoderParams::Snelsd(_)) {
            return Err(Error::Capability(format!(
                "encoder {} has no chunk detection layer",
                self.config.encoder
            )));
        }
        let g = Graph::with_params(&self.store, false);
        let (out, _) = self.encode(&g, side, &mut Dropout::off())?;
        Ok(out.chunk_trace.expect("detection layer emits a trace"))
    }
}
