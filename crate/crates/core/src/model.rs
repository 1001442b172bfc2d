//! Model assembly: question encoder, knowledge encoder, knowledge retriever
//! and response-prediction head.
//!
//! ```text
//! x_t  = Rasch question embedding          y_t  = Rasch question-response embedding
//! x^_t = QuestionEncoder(x_1..x_t)         y^_t = KnowledgeEncoder(y_1..y_t)
//! h_t  = Retriever(queries/keys x^_1..x^_t, values y^_1..y^_{t-1})
//! r^_t = sigmoid(W_o . relu(W_h [h_t; x_t] + b_h) + b_o)
//! ```
//!
//! Every attention layer is masked by causality AND the relevance matrix.
//! Blocks are pre-normalised with residual connections and a position-wise
//! feed-forward of width `ffn_mult * dim`.

use crate::attention::{multi_head_route_attention, AttentionMask, AttentionParams, Causality, HeadProbe};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDiagnostics, Var};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::rasch::RaschParams;
use crate::relevance::RelevanceMatrix;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_questions: usize,
    pub num_concepts: usize,
    pub dim: usize,
    pub heads: usize,
    /// Blocks in each of the three attention stacks.
    pub blocks: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

impl ModelConfig {
    pub fn new(num_questions: usize, num_concepts: usize, dim: usize, heads: usize, blocks: usize) -> Self {
        ModelConfig {
            num_questions,
            num_concepts,
            dim,
            heads,
            blocks,
            ffn_mult: default_ffn_mult(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_questions", self.num_questions),
            ("num_concepts", self.num_concepts),
            ("dim", self.dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Validation(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim;
        let f = self.ffn_mult * d;
        let rasch = 2 * self.num_concepts * d + self.num_questions + 2 * d + 2 * self.num_concepts * d;
        let attn = 4 * d * d + self.heads;
        let ffn = d * f + f + f * d + d;
        let self_block = 2 * d + attn + 2 * d + ffn;
        let cross_block = self_block + 2 * d;
        let head = 2 * d * d + d + d + 1;
        rasch + self.blocks * (2 * self_block + cross_block) + head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stack {
    QuestionEncoder,
    KnowledgeEncoder,
    Retriever,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], bound, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Pre-norm transformer block around one route-masked attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm_query: LayerNormParams,
    /// Separate normalisation of the value stream in cross-attention blocks.
    pub norm_values: Option<LayerNormParams>,
    pub attention: AttentionParams,
    pub norm_ffn: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl BlockParams {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, cross: bool, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        Ok(BlockParams {
            norm_query: LayerNormParams::init(store, &format!("{name}.norm_query"), d),
            norm_values: cross.then(|| LayerNormParams::init(store, &format!("{name}.norm_values"), d)),
            attention: AttentionParams::init(store, &format!("{name}.attn"), d, cfg.heads, rng)?,
            norm_ffn: LayerNormParams::init(store, &format!("{name}.norm_ffn"), d),
            ffn_in: Linear::init(store, &format!("{name}.ffn_in"), d, cfg.ffn_mult * d, rng),
            ffn_out: Linear::init(store, &format!("{name}.ffn_out"), cfg.ffn_mult * d, d, rng),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stream: Var,
        values: Option<Var>,
        mask: &AttentionMask,
        probes: Option<&mut Vec<HeadProbe>>,
    ) -> Result<Var> {
        let q = self.norm_query.apply(g, store, stream)?;
        let v = match (values, &self.norm_values) {
            (Some(src), Some(norm)) => norm.apply(g, store, src)?,
            (None, None) => q,
            _ => return Err(Error::Contract("block called with the wrong attention kind".into())),
        };
        let att = multi_head_route_attention(g, store, &self.attention, q, v, mask, probes)?;
        let stream = g.add(stream, att)?;
        let n = self.norm_ffn.apply(g, store, stream)?;
        let hidden = self.ffn_in.apply(g, store, n)?;
        let hidden = g.relu(hidden);
        let out = self.ffn_out.apply(g, store, hidden)?;
        g.add(stream, out)
    }
}

/// Every trainable tensor of the model plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub rasch: RaschParams,
    pub question_encoder: Vec<BlockParams>,
    pub knowledge_encoder: Vec<BlockParams>,
    pub retriever: Vec<BlockParams>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl ModelParams {
    /// Deterministic initialisation from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rasch = RaschParams::init(
            &mut store,
            config.num_questions,
            config.num_concepts,
            config.dim,
            &mut rng,
        );
        let mut stack = |name: &str, cross: bool, store: &mut ParamStore| -> Result<Vec<BlockParams>> {
            (0..config.blocks)
                .map(|b| BlockParams::init(store, &format!("{name}.{b}"), config, cross, &mut rng))
                .collect()
        };
        let question_encoder = stack("question_encoder", false, &mut store)?;
        let knowledge_encoder = stack("knowledge_encoder", false, &mut store)?;
        let retriever = stack("retriever", true, &mut store)?;
        let head_hidden = Linear::init(&mut store, "head.hidden", 2 * config.dim, config.dim, &mut rng);
        let head_out = Linear::init(&mut store, "head.out", config.dim, 1, &mut rng);
        Ok(ModelParams {
            config: config.clone(),
            store,
            rasch,
            question_encoder,
            knowledge_encoder,
            retriever,
            head_hidden,
            head_out,
        })
    }

    /// Rebuilds the layout for `config` and adopts `tensors`, which must
    /// match the layout's names and shapes in order.
    pub fn from_tensors(config: &ModelConfig, names: &[String], tensors: Vec<Tensor>) -> Result<Self> {
        let mut params = ModelParams::init(config, 0)?;
        if names.len() != params.store.len() || tensors.len() != names.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, found {}",
                params.store.len(),
                tensors.len()
            )));
        }
        for ((id, name, t), (n2, t2)) in params.store.iter().zip(names.iter().zip(&tensors)) {
            if name != n2 || t.shape() != t2.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {} is {name} {:?}, checkpoint has {n2} {:?}",
                    id.index(),
                    t.shape(),
                    t2.shape()
                )));
            }
        }
        let names = names.to_vec();
        params.store = ParamStore::from_parts(names, tensors);
        Ok(params)
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn stack(&self, stack: Stack) -> &[BlockParams] {
        match stack {
            Stack::QuestionEncoder => &self.question_encoder,
            Stack::KnowledgeEncoder => &self.knowledge_encoder,
            Stack::Retriever => &self.retriever,
        }
    }
}

/// The valid (unpadded) part of one student sequence, as embedding indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceInput {
    pub questions: Vec<usize>,
    pub concepts: Vec<usize>,
    pub responses: Vec<u8>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.concepts.len() != self.len() || self.responses.len() != self.len() {
            return Err(Error::Contract(format!(
                "sequence arrays disagree: {} questions, {} concepts, {} responses",
                self.len(),
                self.concepts.len(),
                self.responses.len()
            )));
        }
        Ok(())
    }
}

/// Attention probe tagged with where it came from.
#[derive(Clone, Debug)]
pub struct StackProbe {
    pub stack: Stack,
    pub block: usize,
    pub probe: HeadProbe,
}

/// A recorded forward pass, kept alive for backward or inspection.
pub struct ForwardGraph {
    pub graph: Graph,
    /// `t x 1` predicted probabilities.
    pub probabilities: Var,
    /// `t x dim` retrieved knowledge states.
    pub knowledge: Var,
    pub probes: Vec<StackProbe>,
}

/// Records the forward pass of one sequence. Returns `None` for an empty
/// sequence. `relevance` of `None` disables relevance masking.
pub fn build_forward(
    params: &ModelParams,
    input: &SequenceInput,
    relevance: Option<&RelevanceMatrix>,
    record_probes: bool,
) -> Result<Option<ForwardGraph>> {
    input.validate()?;
    let n = input.len();
    if let Some(f) = relevance {
        if f.len() != n {
            return Err(Error::Contract(format!(
                "relevance matrix covers {} positions, sequence has {n}",
                f.len()
            )));
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let store = &params.store;
    let mut g = Graph::new();
    let x = params
        .rasch
        .question_embeddings(&mut g, store, &input.questions, &input.concepts)?;
    let y = params.rasch.pair_embeddings(
        &mut g,
        store,
        &input.questions,
        &input.concepts,
        &input.responses,
    )?;
    let inclusive = AttentionMask::new(n, Causality::Inclusive, relevance)?;
    let strict = AttentionMask::new(n, Causality::Strict, relevance)?;

    let mut probes = Vec::new();
    let mut run_stack = |g: &mut Graph,
                         stack: Stack,
                         mut stream: Var,
                         values: Option<Var>,
                         mask: &AttentionMask|
     -> Result<Var> {
        for (b, block) in params.stack(stack).iter().enumerate() {
            let mut local = Vec::new();
            stream = block.apply(g, store, stream, values, mask, record_probes.then_some(&mut local))?;
            probes.extend(local.into_iter().map(|probe| StackProbe { stack, block: b, probe }));
        }
        Ok(stream)
    };
    let x_hat = run_stack(&mut g, Stack::QuestionEncoder, x, None, &inclusive)?;
    let y_hat = run_stack(&mut g, Stack::KnowledgeEncoder, y, None, &inclusive)?;
    let h = run_stack(&mut g, Stack::Retriever, x_hat, Some(y_hat), &strict)?;

    let features = g.concat(&[h, x])?;
    let hidden = params.head_hidden.apply(&mut g, store, features)?;
    let hidden = g.relu(hidden);
    let logits = params.head_out.apply(&mut g, store, hidden)?;
    let probabilities = g.sigmoid(logits);
    Ok(Some(ForwardGraph {
        graph: g,
        probabilities,
        knowledge: h,
        probes,
    }))
}

/// Per-position predictions and diagnostics of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub probabilities: Vec<f64>,
    /// `t x dim`, row-major.
    pub knowledge_states: Vec<f64>,
    pub diagnostics: GraphDiagnostics,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

pub fn forward(
    params: &ModelParams,
    input: &SequenceInput,
    relevance: Option<&RelevanceMatrix>,
) -> Result<ForwardTrace> {
    Ok(match build_forward(params, input, relevance, false)? {
        None => ForwardTrace {
            probabilities: Vec::new(),
            knowledge_states: Vec::new(),
            diagnostics: GraphDiagnostics::default(),
        },
        Some(fg) => ForwardTrace {
            probabilities: fg.graph.value(fg.probabilities).to_vec(),
            knowledge_states: fg.graph.value(fg.knowledge).to_vec(),
            diagnostics: fg.graph.diagnostics(),
        },
    })
}

/// Mean binary cross-entropy of recorded probabilities, differentiable.
pub fn bce_on_graph(g: &mut Graph, probabilities: Var, responses: &[u8], valid: &[bool]) -> Result<Var> {
    let targets: Vec<f64> = responses.iter().map(|&r| f64::from(r)).collect();
    g.bce(probabilities, &targets, valid)
}

/// Mean binary cross-entropy over valid positions, with predictions clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probabilities: &[f64], responses: &[u8], valid: &[bool]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::Contract("cross-entropy of an empty trace".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(&Tensor::vector(probabilities.to_vec())?);
    let loss = bce_on_graph(&mut g, p, responses, valid)?;
    Ok(g.value(loss)[0])
}

/// Loss of one sequence and the gradient of `weight * loss` added into `grads`.
pub struct SequenceLoss {
    pub loss: f64,
    pub predictions: usize,
    pub diagnostics: GraphDiagnostics,
}

pub fn accumulate_sequence_grads(
    params: &ModelParams,
    input: &SequenceInput,
    relevance: Option<&RelevanceMatrix>,
    weight: f64,
    grads: &mut ParamGrads,
) -> Result<SequenceLoss> {
    let Some(fg) = build_forward(params, input, relevance, false)? else {
        return Ok(SequenceLoss {
            loss: 0.0,
            predictions: 0,
            diagnostics: GraphDiagnostics::default(),
        });
    };
    let mut g = fg.graph;
    let valid = vec![true; input.len()];
    let loss = bce_on_graph(&mut g, fg.probabilities, &input.responses, &valid)?;
    let back = g.backward_seeded(loss, weight)?;
    g.collect_param_grads(&back, grads);
    Ok(SequenceLoss {
        loss: g.value(loss)[0],
        predictions: input.len(),
        diagnostics: g.diagnostics(),
    })
}
