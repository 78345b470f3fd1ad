//! The learner: visual encoder, shared interpreter/speaker recurrent
//! decoder, two-modality external memory, content extraction, controller
//! and value head.
//!
//! All computation is recorded on a [`Graph`]; one graph covers a whole
//! session so that memory writes stay differentiable across turns.

mod layers;
mod memory;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{argmax, AutodiffError, Graph, NodeId, ParamId, ParamStore, Shape, Tensor};
use crate::env::Image;
use crate::grammar::{TokenId, EOS_ID};

pub use layers::{Activation, Gru, Linear, Mlp};
pub use memory::{least_used, Memory, MemoryRead};

type Result<T> = core::result::Result<T, AgentError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("image is {found}×{found}, encoder expects {expected}×{expected}")]
    ImageSize { expected: usize, found: usize },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("token {0} outside the vocabulary")]
    Token(TokenId),
}

/// Network dimensions and memory settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Word embedding width `d`.
    pub embed_dim: usize,
    /// Recurrent state width.
    pub state_dim: usize,
    /// Visual key width.
    pub key_dim: usize,
    pub image_size: usize,
    /// Filters per 3×3 conv layer; each conv is followed by a 3-wide,
    /// stride-2 max-pool.
    pub conv_filters: Vec<usize>,
    pub encoder_hidden: usize,
    /// Hidden width of the word-prediction MLP applied to the state.
    pub word_hidden: usize,
    pub gate_hidden: Vec<usize>,
    pub controller_hidden: Vec<usize>,
    /// State width of the bidirectional extraction cell.
    pub extract_state: usize,
    /// Output width of the two extraction MLPs.
    pub extract_dim: usize,
    pub importance_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub memory_slots: usize,
    /// Sharpening applied to key cosines before the read softmax.
    pub read_temperature: f64,
    /// Sharpening applied to word-attention cosines before the softmax.
    pub attention_temperature: f64,
    pub usage_decay: f64,
    /// Maximum number of tokens per learner utterance, end token included.
    pub max_len: usize,
    /// Standard deviation of the frozen embedding entries.
    pub embedding_std: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AgentConfig {
    /// Small dimensions for single-core runs.
    pub fn desk() -> Self {
        AgentConfig {
            embed_dim: 32,
            state_dim: 64,
            key_dim: 64,
            image_size: 16,
            conv_filters: vec![8, 16],
            encoder_hidden: 64,
            word_hidden: 64,
            gate_hidden: vec![50, 10],
            controller_hidden: vec![64, 64],
            extract_state: 32,
            extract_dim: 32,
            importance_hidden: vec![50, 30, 20],
            value_hidden: vec![64, 32],
            memory_slots: 10,
            read_temperature: 10.0,
            attention_temperature: 10.0,
            usage_decay: 0.99,
            max_len: 6,
            embedding_std: 1.0,
        }
    }

    /// Full-size dimensions.
    pub fn paper() -> Self {
        AgentConfig {
            embed_dim: 1024,
            state_dim: 1024,
            key_dim: 1024,
            image_size: 32,
            conv_filters: vec![32, 64, 128, 256],
            encoder_hidden: 512,
            word_hidden: 1024,
            gate_hidden: vec![50, 10],
            controller_hidden: vec![1024, 1024],
            extract_state: 1024,
            extract_dim: 1024,
            importance_hidden: vec![50, 30, 20],
            value_hidden: vec![512, 204],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("key_dim", self.key_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("word_hidden", self.word_hidden),
            ("extract_state", self.extract_state),
            ("extract_dim", self.extract_dim),
            ("memory_slots", self.memory_slots),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(AgentError::Config(format!("{name} must be positive")));
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(AgentError::Config(String::from("conv_filters must be non-empty and positive")));
        }
        if self.image_size < 2 {
            return Err(AgentError::Config(String::from("image_size must be at least 2")));
        }
        if !(self.usage_decay > 0.0 && self.usage_decay <= 1.0) {
            return Err(AgentError::Config(String::from("usage_decay must lie in (0, 1]")));
        }
        if !(self.read_temperature.is_finite() && self.attention_temperature.is_finite() && self.embedding_std > 0.0) {
            return Err(AgentError::Config(String::from("temperatures and embedding_std must be finite and positive")));
        }
        Ok(())
    }

    /// Side length after the conv/pool stack.
    pub fn encoder_grid(&self) -> usize {
        self.conv_filters.iter().fold(self.image_size, |n, _| n.div_ceil(2))
    }
}

/// How the speaker picks words.
#[derive(Clone, Copy, Debug)]
pub enum Decode<'a> {
    Sample,
    Argmax,
    /// Replays a recorded utterance (end token included when it was emitted).
    Forced(&'a [TokenId]),
}

/// Word distribution and its parts at one decoding position.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub p: NodeId,
    pub gate: NodeId,
    pub p_h: NodeId,
    pub p_r: NodeId,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub content: NodeId,
    pub attention: NodeId,
    pub importance: NodeId,
}

/// Result of reading one teacher sentence.
#[derive(Clone, Debug)]
pub struct Interpretation {
    pub h_i: NodeId,
    pub key: NodeId,
    /// Read-out after this turn's write, used by the speaker.
    pub r: NodeId,
    pub confidence: NodeId,
    /// Sum of per-token negative log-likelihoods, when requested.
    pub nll: Option<NodeId>,
    /// Teacher tokens scored (end token included).
    pub words: usize,
    /// Fusion gate per scored token.
    pub gates: Vec<f64>,
    pub extraction: Option<Extraction>,
}

#[derive(Clone, Debug)]
pub struct Utterance {
    /// Emitted tokens; ends with [`EOS_ID`] unless the length cap was hit.
    pub tokens: Vec<TokenId>,
    pub word_log_probs: Vec<NodeId>,
    /// Sum of `word_log_probs`.
    pub log_prob: NodeId,
    pub gates: Vec<f64>,
    pub h_last: NodeId,
}

impl Utterance {
    /// Tokens without the trailing end token.
    pub fn words(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS_ID, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Per-session learner state living on one graph.
#[derive(Clone, Debug)]
pub struct AgentSession {
    pub memory: Memory,
    pub h_last: NodeId,
    images: Vec<(Arc<Image>, NodeId)>,
    inputs: Vec<Option<NodeId>>,
}

/// Parameter handles for the whole network.
#[derive(Clone, Debug)]
pub struct Agent {
    config: AgentConfig,
    vocab_size: usize,
    pub embedding: ParamId,
    pub conv: Vec<(ParamId, ParamId)>,
    pub encoder_fc: Linear,
    pub encoder_key: Linear,
    pub projection: Mlp,
    pub cell: Gru,
    pub word_mlp: Mlp,
    pub gate: Mlp,
    pub controller: Mlp,
    pub extract_fwd: Gru,
    pub extract_bwd: Gru,
    pub extract_summary: Mlp,
    pub extract_context: Mlp,
    pub importance: Mlp,
    pub value: Mlp,
    pub value_target: Mlp,
}

struct Dims {
    proj: Vec<usize>,
    word: Vec<usize>,
    gate: Vec<usize>,
    controller: Vec<usize>,
    summary: Vec<usize>,
    context: Vec<usize>,
    importance: Vec<usize>,
    value: Vec<usize>,
    flat: usize,
}

const PROJ_ACTS: [Activation; 3] = [Activation::Relu, Activation::Relu, Activation::Identity];
const WORD_ACTS: [Activation; 2] = [Activation::Relu, Activation::Identity];
const EXTRACT_ACTS: [Activation; 2] = [Activation::Identity, Activation::Tanh];

fn hidden_acts(n_hidden: usize, last: Activation) -> Vec<Activation> {
    let mut v = vec![Activation::Relu; n_hidden];
    v.push(last);
    v
}

fn chain(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

impl Agent {
    fn dims(config: &AgentConfig) -> Dims {
        let (d, s) = (config.embed_dim, config.state_dim);
        let grid = config.encoder_grid();
        Dims {
            proj: vec![d, s, s, s],
            word: vec![s, config.word_hidden, d],
            gate: chain(s + 1, &config.gate_hidden, 1),
            controller: chain(s + 1, &config.controller_hidden, s),
            summary: vec![2 * config.extract_state, config.extract_dim, config.extract_dim],
            context: vec![d + 2 * config.extract_state, config.extract_dim, config.extract_dim],
            importance: chain(2 * config.extract_state, &config.importance_hidden, 1),
            value: chain(s + 1, &config.value_hidden, 1),
            flat: config.conv_filters.last().copied().unwrap_or(0) * grid * grid,
        }
    }

    /// Adds freshly initialised parameters to `store`. The embedding table
    /// and the value target copy are frozen; the controller's last layer
    /// starts at zero so the initial control vector equals `h_I`.
    pub fn init<R: Rng + ?Sized>(
        config: AgentConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let dm = Self::dims(&config);
        let d = config.embed_dim;
        let table: Vec<f64> = (0..vocab_size * d)
            .map(|_| config.embedding_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let embedding = store.add("embedding", Tensor::matrix(vocab_size, d, table), false);
        let mut conv = Vec::new();
        let mut channels = 3;
        for (i, &f) in config.conv_filters.iter().enumerate() {
            let fan_in = channels * 9;
            let a = libm::sqrt(6.0 / fan_in as f64);
            let w: Vec<f64> = (0..f * fan_in).map(|_| rng.gen_range(-a..a)).collect();
            let w = store.add(format!("encoder.conv{i}.w"), Tensor::new(Shape::new(&[f, channels, 3, 3]), w), true);
            let b = store.add(format!("encoder.conv{i}.b"), Tensor::zeros(Shape::vector(f)), true);
            conv.push((w, b));
            channels = f;
        }
        let encoder_fc = Linear::init(store, "encoder.fc", dm.flat, config.encoder_hidden, false, rng);
        let encoder_key = Linear::init(store, "encoder.key", config.encoder_hidden, config.key_dim, false, rng);
        let projection = Mlp::init(store, "projection", &dm.proj, &PROJ_ACTS, false, rng);
        let cell = Gru::init(store, "cell", config.state_dim, config.state_dim, rng);
        let word_mlp = Mlp::init(store, "word", &dm.word, &WORD_ACTS, false, rng);
        let gate_acts = hidden_acts(config.gate_hidden.len(), Activation::Sigmoid);
        let gate = Mlp::init(store, "gate", &dm.gate, &gate_acts, false, rng);
        let ctl_acts = hidden_acts(config.controller_hidden.len(), Activation::Identity);
        let controller = Mlp::init(store, "controller", &dm.controller, &ctl_acts, true, rng);
        let extract_fwd = Gru::init(store, "extract.fwd", d, config.extract_state, rng);
        let extract_bwd = Gru::init(store, "extract.bwd", d, config.extract_state, rng);
        let extract_summary = Mlp::init(store, "extract.summary", &dm.summary, &EXTRACT_ACTS, false, rng);
        let extract_context = Mlp::init(store, "extract.context", &dm.context, &EXTRACT_ACTS, false, rng);
        let imp_acts = hidden_acts(config.importance_hidden.len(), Activation::Sigmoid);
        let importance = Mlp::init(store, "importance", &dm.importance, &imp_acts, false, rng);
        let val_acts = hidden_acts(config.value_hidden.len(), Activation::Identity);
        let value = Mlp::init(store, "value", &dm.value, &val_acts, false, rng);
        let value_target = Mlp::init(store, "value_target", &dm.value, &val_acts, false, rng);
        for id in value_target.params() {
            store.set_trainable(id, false);
        }
        let agent = Agent {
            config,
            vocab_size,
            embedding,
            conv,
            encoder_fc,
            encoder_key,
            projection,
            cell,
            word_mlp,
            gate,
            controller,
            extract_fwd,
            extract_bwd,
            extract_summary,
            extract_context,
            importance,
            value,
            value_target,
        };
        agent.sync_target(store);
        Ok(agent)
    }

    /// Binds to parameters already in `store` (e.g. loaded from a
    /// checkpoint), checking every name and shape.
    pub fn bind(config: AgentConfig, vocab_size: usize, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let dm = Self::dims(&config);
        let d = config.embed_dim;
        let embedding = layers::lookup(store, "embedding", Shape::matrix(vocab_size, d))?;
        let mut conv = Vec::new();
        let mut channels = 3;
        for (i, &f) in config.conv_filters.iter().enumerate() {
            let w = layers::lookup(store, &format!("encoder.conv{i}.w"), Shape::new(&[f, channels, 3, 3]))?;
            let b = layers::lookup(store, &format!("encoder.conv{i}.b"), Shape::vector(f))?;
            conv.push((w, b));
            channels = f;
        }
        Ok(Agent {
            encoder_fc: Linear::bind(store, "encoder.fc", dm.flat, config.encoder_hidden)?,
            encoder_key: Linear::bind(store, "encoder.key", config.encoder_hidden, config.key_dim)?,
            projection: Mlp::bind(store, "projection", &dm.proj, &PROJ_ACTS)?,
            cell: Gru::bind(store, "cell", config.state_dim, config.state_dim)?,
            word_mlp: Mlp::bind(store, "word", &dm.word, &WORD_ACTS)?,
            gate: Mlp::bind(store, "gate", &dm.gate, &hidden_acts(config.gate_hidden.len(), Activation::Sigmoid))?,
            controller: Mlp::bind(
                store,
                "controller",
                &dm.controller,
                &hidden_acts(config.controller_hidden.len(), Activation::Identity),
            )?,
            extract_fwd: Gru::bind(store, "extract.fwd", d, config.extract_state)?,
            extract_bwd: Gru::bind(store, "extract.bwd", d, config.extract_state)?,
            extract_summary: Mlp::bind(store, "extract.summary", &dm.summary, &EXTRACT_ACTS)?,
            extract_context: Mlp::bind(store, "extract.context", &dm.context, &EXTRACT_ACTS)?,
            importance: Mlp::bind(
                store,
                "importance",
                &dm.importance,
                &hidden_acts(config.importance_hidden.len(), Activation::Sigmoid),
            )?,
            value: Mlp::bind(store, "value", &dm.value, &hidden_acts(config.value_hidden.len(), Activation::Identity))?,
            value_target: Mlp::bind(
                store,
                "value_target",
                &dm.value,
                &hidden_acts(config.value_hidden.len(), Activation::Identity),
            )?,
            config,
            vocab_size,
            embedding,
            conv,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Copies the value head into its frozen target copy.
    pub fn sync_target(&self, store: &mut ParamStore) {
        for (src, dst) in self.value.params().into_iter().zip(self.value_target.params()) {
            let t = store.get(src).clone();
            store.set(dst, t).expect("value and target share shapes");
        }
    }

    /// Shifts the key-layer bias so the mean key over `images` is zero.
    /// Raw conv features are all positive and start out nearly parallel;
    /// centring them makes keys of different classes far apart in cosine
    /// from the first update on.
    pub fn center_keys<'a>(
        &self,
        store: &mut ParamStore,
        images: impl IntoIterator<Item = &'a Image>,
    ) -> Result<()> {
        let mut mean = vec![0.0; self.config.key_dim];
        let mut n = 0usize;
        {
            let mut g = Graph::new(store);
            for image in images {
                let k = self.encode_image(&mut g, image)?;
                for (m, v) in mean.iter_mut().zip(g.value(k)) {
                    *m += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Ok(());
        }
        let bias = store.get_mut(self.encoder_key.b).data_mut();
        for (b, m) in bias.iter_mut().zip(&mean) {
            *b -= m / n as f64;
        }
        Ok(())
    }

    /// Fresh session: empty memory and a zero recurrent state.
    pub fn begin_session(&self, g: &mut Graph<'_>) -> AgentSession {
        AgentSession {
            memory: Memory::new(g, self.config.key_dim, self.config.embed_dim, self.config.memory_slots),
            h_last: g.constant(Tensor::zeros(Shape::vector(self.config.state_dim))),
            images: Vec::new(),
            inputs: vec![None; self.vocab_size],
        }
    }

    // ── encoder ───────────────────────────────────────────────────────

    /// Visual key of `image`.
    pub fn encode_image(&self, g: &mut Graph<'_>, image: &Image) -> Result<NodeId> {
        let n = self.config.image_size;
        if image.size() != n {
            return Err(AgentError::ImageSize {
                expected: n,
                found: image.size(),
            });
        }
        let mut x = g.constant(Tensor::new(Shape::volume(3, n, n), image.to_chw()));
        for &(w, b) in &self.conv {
            let (w, b) = (g.param(w), g.param(b));
            let y = g.conv2d(x, w, b)?;
            let y = g.relu(y);
            x = g.max_pool2d(y, 3, 2, 1)?;
        }
        let numel = g.shape(x).numel();
        let flat = g.reshape(x, Shape::vector(numel))?;
        let h = self.encoder_fc.forward(g, flat)?;
        let h = g.relu(h);
        Ok(self.encoder_key.forward(g, h)?)
    }

    fn session_key(&self, g: &mut Graph<'_>, session: &mut AgentSession, image: &Arc<Image>) -> Result<NodeId> {
        if let Some((_, k)) = session.images.iter().find(|(im, _)| Arc::ptr_eq(im, image) || **im == **image) {
            return Ok(*k);
        }
        let k = self.encode_image(g, image)?;
        session.images.push((image.clone(), k));
        Ok(k)
    }

    // ── memory ────────────────────────────────────────────────────────

    /// `α = softmax(τ · cos(k, M_v columns))`, `r = M_s α`.
    pub fn memory_read(&self, g: &mut Graph<'_>, memory: &mut Memory, key: NodeId) -> Result<MemoryRead> {
        Ok(memory.read(g, key, self.config.read_temperature)?)
    }

    /// Erase-then-add write of `(key, content)` scaled by `importance` into
    /// the least-used slot.
    pub fn memory_write(
        &self,
        g: &mut Graph<'_>,
        memory: &mut Memory,
        key: NodeId,
        content: NodeId,
        importance: NodeId,
    ) -> Result<usize> {
        Ok(memory.write(g, key, content, importance, self.config.usage_decay)?)
    }

    // ── word distribution ─────────────────────────────────────────────

    fn embedding_node(&self, g: &mut Graph<'_>) -> NodeId {
        g.param(self.embedding)
    }

    /// `c = max(Eᵀ r)`.
    pub fn confidence(&self, g: &mut Graph<'_>, r: NodeId) -> Result<NodeId> {
        let e = self.embedding_node(g);
        let scores = g.matmul(e, r)?;
        Ok(g.max_reduce(scores))
    }

    /// `p_r = softmax(Eᵀ r)`.
    pub fn memory_distribution(&self, g: &mut Graph<'_>, r: NodeId) -> Result<NodeId> {
        let e = self.embedding_node(g);
        let logits = g.matmul(e, r)?;
        Ok(g.softmax(logits)?)
    }

    /// `p_h = softmax(Eᵀ f_MLP(h))`.
    pub fn state_distribution(&self, g: &mut Graph<'_>, h: NodeId) -> Result<NodeId> {
        let f = self.word_mlp.forward(g, h)?;
        let e = self.embedding_node(g);
        let logits = g.matmul(e, f)?;
        Ok(g.softmax(logits)?)
    }

    /// Fusion gate `g = σ(MLP(h, c))`.
    pub fn fusion_gate(&self, g: &mut Graph<'_>, h: NodeId, c: NodeId) -> Result<NodeId> {
        let x = g.concat(&[h, c])?;
        Ok(self.gate.forward(g, x)?)
    }

    /// `(1 − gate) · p_h + gate · p_r`.
    pub fn mix(g: &mut Graph<'_>, p_h: NodeId, p_r: NodeId, gate: NodeId) -> Result<NodeId> {
        let one = g.constant(Tensor::scalar(1.0));
        let keep = g.sub(one, gate)?;
        let a = g.mul_scalar(p_h, keep)?;
        let b = g.mul_scalar(p_r, gate)?;
        Ok(g.add(a, b)?)
    }

    /// Fused word distribution at state `h`, given the memory distribution
    /// `p_r` and confidence `c` of the current turn.
    pub fn fused_word_distribution(&self, g: &mut Graph<'_>, h: NodeId, p_r: NodeId, c: NodeId) -> Result<Fused> {
        let p_h = self.state_distribution(g, h)?;
        let gate = self.fusion_gate(g, h, c)?;
        let p = Self::mix(g, p_h, p_r, gate)?;
        Ok(Fused { p, gate, p_h, p_r })
    }

    // ── recurrent cell ────────────────────────────────────────────────

    fn input(&self, g: &mut Graph<'_>, session: &mut AgentSession, token: TokenId) -> Result<NodeId> {
        if token >= self.vocab_size {
            return Err(AgentError::Token(token));
        }
        if let Some(x) = session.inputs[token] {
            return Ok(x);
        }
        let e = self.embedding_node(g);
        let emb = g.embedding_lookup(e, &[token])?;
        let x = self.projection.forward(g, emb)?;
        session.inputs[token] = Some(x);
        Ok(x)
    }

    /// One step of the shared cell on `token`.
    pub fn feed(&self, g: &mut Graph<'_>, session: &mut AgentSession, h: NodeId, token: TokenId) -> Result<NodeId> {
        let x = self.input(g, session, token)?;
        Ok(self.cell.step(g, x, h)?)
    }

    // ── extraction ────────────────────────────────────────────────────

    /// Attention-weighted sentence content, word attention and importance
    /// gate. `None` for an empty sentence (nothing is written).
    pub fn extract_content(&self, g: &mut Graph<'_>, tokens: &[TokenId]) -> Result<Option<Extraction>> {
        if tokens.is_empty() {
            return Ok(None);
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(AgentError::Token(t));
        }
        let e = self.embedding_node(g);
        let embs: Vec<NodeId> = tokens
            .iter()
            .map(|&t| g.embedding_lookup(e, &[t]))
            .collect::<core::result::Result<_, _>>()?;
        let zero = g.constant(Tensor::zeros(Shape::vector(self.config.extract_state)));
        let mut fwd = Vec::with_capacity(tokens.len());
        let mut h = zero;
        for &x in &embs {
            h = self.extract_fwd.step(g, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; tokens.len()];
        let mut h = zero;
        for (i, &x) in embs.iter().enumerate().rev() {
            h = self.extract_bwd.step(g, x, h)?;
            bwd[i] = h;
        }
        let summary = g.concat(&[fwd[tokens.len() - 1], bwd[0]])?;
        let query = self.extract_summary.forward(g, summary)?;
        let mut scores = Vec::with_capacity(tokens.len());
        for i in 0..tokens.len() {
            let ctx = g.concat(&[embs[i], fwd[i], bwd[i]])?;
            let v = self.extract_context.forward(g, ctx)?;
            scores.push(g.cosine_similarity(query, v)?);
        }
        let scores = g.concat(&scores)?;
        let scores = g.scale(scores, self.config.attention_temperature);
        let attention = g.softmax(scores)?;
        let rows = g.embedding_lookup(e, tokens)?;
        // A single id looks up a plain vector rather than a 1-row matrix.
        let content = if tokens.len() == 1 {
            g.mul_scalar(rows, attention)?
        } else {
            g.matmul(attention, rows)?
        };
        let importance = self.importance.forward(g, summary)?;
        Ok(Some(Extraction {
            content,
            attention,
            importance,
        }))
    }

    // ── turns ─────────────────────────────────────────────────────────

    /// Reads the teacher sentence (followed by an end token) from the
    /// previous `h_last`, scoring each token when `imitation` is set, then
    /// writes the extracted content and re-reads memory for the speaker.
    pub fn interpret_turn(
        &self,
        g: &mut Graph<'_>,
        session: &mut AgentSession,
        sentence: &[TokenId],
        image: &Arc<Image>,
        imitation: bool,
    ) -> Result<Interpretation> {
        let key = self.session_key(g, session, image)?;
        let before = self.memory_read(g, &mut session.memory, key)?;
        let mut h = session.h_last;
        let mut nll_terms = Vec::new();
        let mut gates = Vec::new();
        let (p_r, c_i) = if imitation {
            (Some(self.memory_distribution(g, before.r)?), Some(self.confidence(g, before.r)?))
        } else {
            (None, None)
        };
        for &w in sentence.iter().chain(core::iter::once(&EOS_ID)) {
            if let (Some(p_r), Some(c_i)) = (p_r, c_i) {
                let fused = self.fused_word_distribution(g, h, p_r, c_i)?;
                gates.push(g.scalar(fused.gate));
                nll_terms.push(g.cross_entropy(fused.p, w, false)?);
            }
            h = self.feed(g, session, h, w)?;
        }
        let extraction = self.extract_content(g, sentence)?;
        if let Some(ex) = &extraction {
            self.memory_write(g, &mut session.memory, key, ex.content, ex.importance)?;
        }
        let after = self.memory_read(g, &mut session.memory, key)?;
        let confidence = self.confidence(g, after.r)?;
        let nll = g.add_all(&nll_terms)?;
        Ok(Interpretation {
            h_i: h,
            key,
            r: after.r,
            confidence,
            nll,
            words: nll_terms.len(),
            gates,
            extraction,
        })
    }

    /// Control vector `c^t = h_I + f(h_I, c)`.
    pub fn control(&self, g: &mut Graph<'_>, h_i: NodeId, c: NodeId) -> Result<NodeId> {
        let x = g.concat(&[h_i, c])?;
        let f = self.controller.forward(g, x)?;
        Ok(g.add(h_i, f)?)
    }

    /// Generates an utterance from the control vector `control`. The end
    /// token is fed back through the cell to give `h_last`, where the next
    /// teacher sentence picks up; gradients flow through it across turns.
    #[allow(clippy::too_many_arguments)]
    pub fn speak_from(
        &self,
        g: &mut Graph<'_>,
        session: &mut AgentSession,
        control: NodeId,
        r: NodeId,
        c: NodeId,
        decode: Decode<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<Utterance> {
        let p_r = self.memory_distribution(g, r)?;
        let mut h = control;
        let mut tokens = Vec::new();
        let mut word_log_probs = Vec::new();
        let mut gates = Vec::new();
        let limit = match decode {
            Decode::Forced(t) => t.len().min(self.config.max_len),
            _ => self.config.max_len,
        };
        for i in 0..limit {
            let fused = self.fused_word_distribution(g, h, p_r, c)?;
            gates.push(g.scalar(fused.gate));
            let w = match decode {
                Decode::Argmax => argmax(g.value(fused.p)),
                Decode::Sample => {
                    let dist = WeightedIndex::new(g.value(fused.p)).map_err(|_| {
                        AutodiffError::NonFiniteGradient(String::from("word distribution"))
                    })?;
                    dist.sample(rng)
                }
                Decode::Forced(t) => t[i],
            };
            if w >= self.vocab_size {
                return Err(AgentError::Token(w));
            }
            let nll = g.cross_entropy(fused.p, w, false)?;
            word_log_probs.push(g.scale(nll, -1.0));
            tokens.push(w);
            if w == EOS_ID {
                break;
            }
            h = self.feed(g, session, h, w)?;
        }
        let h_last = self.feed(g, session, h, EOS_ID)?;
        session.h_last = h_last;
        let log_prob = match g.add_all(&word_log_probs)? {
            Some(lp) => lp,
            None => g.constant(Tensor::scalar(0.0)),
        };
        Ok(Utterance {
            tokens,
            word_log_probs,
            log_prob,
            gates,
            h_last,
        })
    }

    /// Controller followed by [`Agent::speak_from`].
    pub fn speak_turn(
        &self,
        g: &mut Graph<'_>,
        session: &mut AgentSession,
        interp: &Interpretation,
        decode: Decode<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<(NodeId, Utterance)> {
        let control = self.control(g, interp.h_i, interp.confidence)?;
        let u = self.speak_from(g, session, control, interp.r, interp.confidence, decode, rng)?;
        Ok((control, u))
    }

    /// `V(h_I, c)` on gradient-stopped inputs; `target` selects the frozen copy.
    pub fn value_estimate(&self, g: &mut Graph<'_>, h_i: NodeId, c: NodeId, target: bool) -> Result<NodeId> {
        let h = g.detach(h_i);
        let c = g.detach(c);
        let x = g.concat(&[h, c])?;
        let net = if target { &self.value_target } else { &self.value };
        Ok(net.forward(g, x)?)
    }

    /// Every parameter the speaker and interpreter share.
    pub fn shared_cell_params(&self) -> [ParamId; 4] {
        self.cell.params()
    }
}
