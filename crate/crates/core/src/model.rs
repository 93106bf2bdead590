//! Seeded decoder-only transformer with a stable registry of named linear
//! layers, pretraining, generation, and a bit-exact checkpoint format.
//!
//! Layer ids follow the scheme `block{l}.attn.{q|k|v|o}` and
//! `block{l}.ffn.{up|down}`. The registry covers exactly those projections;
//! the embedding tables and the untied output head are excluded (the head can
//! still be captured explicitly under the id `head`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWParams, Schedule};
use crate::rng::Rng;
use crate::tensor::{Array, NodeId, Precision, Tape};

/// Weight initialization scale for all projection and embedding matrices.
pub const INIT_STD: f64 = 0.02;

/// Capture id for the output head (not part of the linear-layer registry).
pub const HEAD_LAYER_ID: &str = "head";

const CHECKPOINT_MAGIC: &[u8; 4] = b"NTCK";
const CHECKPOINT_VERSION: u32 = 1;

// ── Config ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 4,
            context_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("context_len", self.context_len),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

// ── Linear-layer registry ────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerEntry {
    pub id: String,
    pub d_out: usize,
    pub d_in: usize,
}

impl LayerEntry {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.id)
    }
}

/// Ordered, id-unique list of the attention and feed-forward projections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearLayerRegistry {
    entries: Vec<LayerEntry>,
}

impl LinearLayerRegistry {
    fn build(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut entries = Vec::with_capacity(cfg.n_layers * 6);
        for l in 0..cfg.n_layers {
            for proj in ["q", "k", "v", "o"] {
                entries.push(LayerEntry {
                    id: format!("block{l}.attn.{proj}"),
                    d_out: d,
                    d_in: d,
                });
            }
            entries.push(LayerEntry {
                id: format!("block{l}.ffn.up"),
                d_out: cfg.d_ff,
                d_in: d,
            });
            entries.push(LayerEntry {
                id: format!("block{l}.ffn.down"),
                d_out: d,
                d_in: cfg.d_ff,
            });
        }
        LinearLayerRegistry { entries }
    }

    pub fn entries(&self) -> &[LayerEntry] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&LayerEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ── Model ────────────────────────────────────────────────────────────

/// Node handles for one forward pass's parameters. Tied fine-tuning swaps
/// individual weight entries for effective (base + delta) nodes.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn insert(&mut self, name: String, node: NodeId) {
        self.map.insert(name, node);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

pub struct Model {
    cfg: ModelConfig,
    params: BTreeMap<String, Array>,
    registry: LinearLayerRegistry,
}

#[derive(Clone, Copy, Debug)]
pub enum DecodeMode {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub accumulation_steps: usize,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            lr: 3e-3,
            accumulation_steps: 4,
            weight_decay: 0.0,
            warmup_ratio: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct LossTrace {
    /// Mean next-token cross-entropy per epoch, in epoch order.
    pub epoch_mean: Vec<f64>,
    pub optimizer_steps: usize,
}

impl Model {
    /// Fresh model with seeded N(0, INIT_STD^2) projection weights, zero
    /// biases, and identity normalization parameters.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let registry = LinearLayerRegistry::build(&cfg);
        let mut rng = Rng::derive(cfg.seed, "model-init");
        let mut params = BTreeMap::new();
        let d = cfg.d_model;

        let mut normal = |shape: &[usize]| -> Array {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.normal() * INIT_STD).collect();
            Array::from_vec(shape.to_vec(), data).unwrap()
        };

        // Insertion order fixes the RNG consumption order; the map itself is
        // sorted by name.
        let mut ordered: Vec<(String, Array)> = Vec::new();
        ordered.push(("tok_emb".into(), normal(&[cfg.vocab_size, d])));
        ordered.push(("pos_emb".into(), normal(&[cfg.context_len, d])));
        for l in 0..cfg.n_layers {
            ordered.push((format!("block{l}.ln1.gamma"), Array::full(&[d], 1.0)));
            ordered.push((format!("block{l}.ln1.beta"), Array::zeros(&[d])));
            for proj in ["q", "k", "v", "o"] {
                ordered.push((format!("block{l}.attn.{proj}.weight"), normal(&[d, d])));
                ordered.push((format!("block{l}.attn.{proj}.bias"), Array::zeros(&[d])));
            }
            ordered.push((format!("block{l}.ln2.gamma"), Array::full(&[d], 1.0)));
            ordered.push((format!("block{l}.ln2.beta"), Array::zeros(&[d])));
            ordered.push((format!("block{l}.ffn.up.weight"), normal(&[cfg.d_ff, d])));
            ordered.push((format!("block{l}.ffn.up.bias"), Array::zeros(&[cfg.d_ff])));
            ordered.push((format!("block{l}.ffn.down.weight"), normal(&[d, cfg.d_ff])));
            ordered.push((format!("block{l}.ffn.down.bias"), Array::zeros(&[d])));
        }
        ordered.push(("ln_f.gamma".into(), Array::full(&[d], 1.0)));
        ordered.push(("ln_f.beta".into(), Array::zeros(&[d])));
        ordered.push(("head.weight".into(), normal(&[cfg.vocab_size, d])));
        ordered.push(("head.bias".into(), Array::zeros(&[cfg.vocab_size])));
        for (name, array) in ordered {
            params.insert(name, array);
        }

        Ok(Model {
            cfg,
            params,
            registry,
        })
    }

    pub fn from_parts(cfg: ModelConfig, params: BTreeMap<String, Array>) -> Result<Self> {
        cfg.validate()?;
        let registry = LinearLayerRegistry::build(&cfg);
        Ok(Model {
            cfg,
            params,
            registry,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &LinearLayerRegistry {
        &self.registry
    }

    pub fn params(&self) -> &BTreeMap<String, Array> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Array> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Array {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Total dense parameter count (embeddings, blocks, norms, head).
    pub fn total_param_count(&self) -> usize {
        self.params.values().map(Array::numel).sum()
    }

    /// Output dimensions (d_out, d_in) of a capturable layer.
    pub fn layer_dims(&self, layer_id: &str) -> Option<(usize, usize)> {
        if layer_id == HEAD_LAYER_ID {
            return Some((self.cfg.vocab_size, self.cfg.d_model));
        }
        self.registry.get(layer_id).map(|e| (e.d_out, e.d_in))
    }

    /// Enable output-gradient capture for a registry layer (or the head).
    pub fn register_capture(&self, tape: &mut Tape, layer_id: &str) -> Result<()> {
        if self.layer_dims(layer_id).is_none() {
            return Err(Error::UnknownLayer(layer_id.to_string()));
        }
        tape.enable_capture(layer_id);
        Ok(())
    }

    /// Leaf every parameter onto the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        let mut nodes = ParamNodes::default();
        for (name, array) in &self.params {
            nodes.insert(name.clone(), tape.leaf(array.clone(), trainable));
        }
        nodes
    }

    // ── forward ──────────────────────────────────────────────────────

    /// Causal forward pass producing logits of shape (B, T, vocab).
    ///
    /// `probe` adds a caller-supplied array (shape (B*T, d_out)) to the named
    /// layer's output, which gives finite-difference access to layer-output
    /// sensitivities without touching the backward path.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        tokens: &[Vec<u32>],
        probe: Option<(&str, NodeId)>,
    ) -> Result<NodeId> {
        let bsz = tokens.len();
        if bsz == 0 {
            return Ok(tape.constant(Array::zeros(&[0, 0, self.cfg.vocab_size])));
        }
        let t_len = tokens[0].len();
        for seq in tokens {
            if seq.len() != t_len {
                return Err(Error::Shape(
                    "forward batch requires equal-length sequences".into(),
                ));
            }
            for &tok in seq {
                if tok as usize >= self.cfg.vocab_size {
                    return Err(Error::Index(format!(
                        "token {tok} >= vocab_size {}",
                        self.cfg.vocab_size
                    )));
                }
            }
        }
        if t_len > self.cfg.context_len {
            return Err(Error::Index(format!(
                "sequence length {t_len} exceeds context_len {}",
                self.cfg.context_len
            )));
        }

        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let hd = d / heads;
        let flat_ids: Vec<usize> = tokens
            .iter()
            .flat_map(|seq| seq.iter().map(|&t| t as usize))
            .collect();
        let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..t_len).collect();

        let tok_table = nodes.get("tok_emb");
        let pos_table = nodes.get("pos_emb");
        let te = tape.embed(tok_table, &flat_ids, vec![bsz, t_len])?;
        let pe = tape.embed(pos_table, &pos_ids, vec![bsz, t_len])?;
        let mut x = tape.add(te, pe)?;

        let linear = |tape: &mut Tape,
                          input2d: NodeId,
                          layer_id: &str,
                          d_out: usize|
         -> Result<NodeId> {
            let w = nodes.get(&format!("{layer_id}.weight"));
            let b = nodes.get(&format!("{layer_id}.bias"));
            let mm = tape.matmul_nt(input2d, w)?;
            let mut out = tape.add_bias(mm, b)?;
            if let Some((probe_id, probe_node)) = probe {
                if probe_id == layer_id {
                    out = tape.add(out, probe_node)?;
                }
            }
            tape.mark_capture(layer_id, out, vec![bsz, t_len, d_out]);
            Ok(out)
        };

        for l in 0..self.cfg.n_layers {
            let g1 = nodes.get(&format!("block{l}.ln1.gamma"));
            let b1 = nodes.get(&format!("block{l}.ln1.beta"));
            let ln1 = tape.layer_norm(x, g1, b1)?;
            let h2 = tape.reshape(ln1, vec![bsz * t_len, d])?;

            let q = linear(tape, h2, &format!("block{l}.attn.q"), d)?;
            let k = linear(tape, h2, &format!("block{l}.attn.k"), d)?;
            let v = linear(tape, h2, &format!("block{l}.attn.v"), d)?;

            let split = |tape: &mut Tape, n: NodeId| -> Result<NodeId> {
                let r = tape.reshape(n, vec![bsz, t_len, heads, hd])?;
                tape.permute(r, &[0, 2, 1, 3])
            };
            let qh = split(tape, q)?;
            let kh = split(tape, k)?;
            let vh = split(tape, v)?;

            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
            let masked = tape.causal_mask(scaled)?;
            let probs = tape.softmax(masked)?;
            let ctx = tape.matmul(probs, vh)?;
            let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx2 = tape.reshape(merged, vec![bsz * t_len, d])?;

            let o = linear(tape, ctx2, &format!("block{l}.attn.o"), d)?;
            let o3 = tape.reshape(o, vec![bsz, t_len, d])?;
            x = tape.add(x, o3)?;

            let g2 = nodes.get(&format!("block{l}.ln2.gamma"));
            let b2 = nodes.get(&format!("block{l}.ln2.beta"));
            let ln2 = tape.layer_norm(x, g2, b2)?;
            let f2 = tape.reshape(ln2, vec![bsz * t_len, d])?;
            let up = linear(tape, f2, &format!("block{l}.ffn.up"), self.cfg.d_ff)?;
            let act = tape.relu(up);
            let down = linear(tape, act, &format!("block{l}.ffn.down"), d)?;
            let d3 = tape.reshape(down, vec![bsz, t_len, d])?;
            x = tape.add(x, d3)?;
        }

        let gf = nodes.get("ln_f.gamma");
        let bf = nodes.get("ln_f.beta");
        let xf = tape.layer_norm(x, gf, bf)?;
        let h2 = tape.reshape(xf, vec![bsz * t_len, d])?;
        let logits2 = linear(tape, h2, HEAD_LAYER_ID, self.cfg.vocab_size)?;
        tape.reshape(logits2, vec![bsz, t_len, self.cfg.vocab_size])
    }

    /// Forward pass on a fresh frozen tape, returning the logits values.
    pub fn forward_logits(&self, tokens: &[Vec<u32>]) -> Result<Array> {
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false);
        let logits = self.forward_on(&mut tape, &nodes, tokens, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Next-token cross-entropy for one sequence (B = 1). Positions whose
    /// target index is below `completion_start` are masked out of the mean,
    /// so `completion_start = 1` supervises the full sequence.
    pub fn lm_loss(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        tokens: &[u32],
        completion_start: usize,
    ) -> Result<NodeId> {
        if tokens.len() < 2 {
            return Err(Error::Contract("lm_loss needs at least two tokens".into()));
        }
        let t_len = tokens.len();
        let logits = self.forward_on(tape, nodes, &[tokens.to_vec()], None)?;
        let flat = tape.reshape(logits, vec![t_len, self.cfg.vocab_size])?;
        let targets: Vec<i64> = (0..t_len)
            .map(|t| {
                if t + 1 < t_len && t + 1 >= completion_start.max(1) {
                    i64::from(tokens[t + 1])
                } else {
                    -1
                }
            })
            .collect();
        tape.cross_entropy(flat, &targets)
    }

    // ── generation ───────────────────────────────────────────────────

    /// Autoregressive decoding. Greedy mode is deterministic; temperature
    /// mode draws from softmax(logits / tau) with a seeded stream. Decoding
    /// stops after `max_new` tokens, at `stop_token`, or when the context
    /// window fills, whichever comes first.
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new: usize,
        mode: DecodeMode,
        stop_token: Option<u32>,
    ) -> Result<Vec<u32>> {
        if prompt.len() > self.cfg.context_len {
            return Err(Error::Index(format!(
                "prompt length {} exceeds context_len {}",
                prompt.len(),
                self.cfg.context_len
            )));
        }
        let mut seq = prompt.to_vec();
        let mut rng = match mode {
            DecodeMode::Greedy => None,
            DecodeMode::Temperature { seed, .. } => Some(Rng::derive(seed, "generate")),
        };
        for _ in 0..max_new {
            if seq.len() >= self.cfg.context_len || seq.is_empty() {
                break;
            }
            let logits = self.forward_logits(&[seq.clone()])?;
            let vocab = self.cfg.vocab_size;
            let last = &logits.data()[(seq.len() - 1) * vocab..seq.len() * vocab];
            let next = match mode {
                DecodeMode::Greedy => {
                    let mut best = 0usize;
                    for (i, &v) in last.iter().enumerate() {
                        if v > last[best] {
                            best = i;
                        }
                    }
                    best as u32
                }
                DecodeMode::Temperature { tau, .. } => {
                    let tau = if tau <= 0.0 { 1.0 } else { tau };
                    let m = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<f64> =
                        last.iter().map(|v| ((v - m) / tau).exp()).collect();
                    let total: f64 = weights.iter().sum();
                    let r = rng.as_mut().unwrap().next_f64() * total;
                    let mut acc = 0.0;
                    let mut pick = vocab - 1;
                    for (i, w) in weights.iter().enumerate() {
                        acc += w;
                        if r < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick as u32
                }
            };
            seq.push(next);
            if Some(next) == stop_token {
                break;
            }
        }
        Ok(seq)
    }

    // ── pretraining ──────────────────────────────────────────────────

    /// Next-token training over the corpus. Returns the per-epoch loss trace.
    pub fn pretrain(&mut self, corpus: &[Vec<u32>], cfg: &PretrainConfig) -> Result<LossTrace> {
        if corpus.is_empty() {
            return Err(Error::Contract("pretrain corpus is empty".into()));
        }
        for seq in corpus {
            if seq.len() > self.cfg.context_len {
                return Err(Error::Config(format!(
                    "corpus sequence of length {} exceeds context_len {}",
                    seq.len(),
                    self.cfg.context_len
                )));
            }
        }
        let mut trace = LossTrace::default();
        if cfg.epochs == 0 {
            return Ok(trace);
        }
        let accum = cfg.accumulation_steps.max(1);
        let groups_per_epoch = corpus.len().div_ceil(accum);
        let total_steps = cfg.epochs * groups_per_epoch;
        let mut opt = AdamW::new(
            AdamWParams::with_lr(cfg.lr, cfg.weight_decay),
            Schedule::warmup_cosine(total_steps, cfg.warmup_ratio),
        );
        let mut rng = Rng::derive(cfg.seed, "pretrain-order");
        let mut micro_step = 0usize;
        for _epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            let mut pending: BTreeMap<String, Array> = BTreeMap::new();
            let mut group_size = 0usize;
            for (i, &si) in order.iter().enumerate() {
                let mut tape = Tape::new();
                let nodes = self.bind(&mut tape, true);
                let loss = self.lm_loss(&mut tape, &nodes, &corpus[si], 1)?;
                let loss_value = tape.value(loss).scalar();
                if !loss_value.is_finite() {
                    return Err(Error::Training {
                        step: micro_step,
                        what: format!("loss is {loss_value}"),
                    });
                }
                epoch_loss += loss_value;
                tape.backward(loss)?;
                for (name, node) in nodes.iter() {
                    if let Some(g) = tape.grad(*node) {
                        match pending.get_mut(name) {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += b;
                                }
                            }
                            None => {
                                pending.insert(name.clone(), g.clone());
                            }
                        }
                    }
                }
                group_size += 1;
                micro_step += 1;
                if group_size == accum || i + 1 == order.len() {
                    let inv = 1.0 / group_size as f64;
                    for g in pending.values_mut() {
                        for v in g.data_mut() {
                            *v *= inv;
                        }
                    }
                    opt.step(&mut self.params, &pending);
                    pending.clear();
                    group_size = 0;
                }
            }
            trace.epoch_mean.push(epoch_loss / corpus.len() as f64);
        }
        trace.optimizer_steps = opt.steps_taken();
        Ok(trace)
    }

    // ── checkpoints ──────────────────────────────────────────────────

    /// Versioned binary checkpoint; round-trips bit-exactly.
    pub fn save_checkpoint<W: Write>(&self, w: &mut W, config_digest: u64) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&config_digest.to_le_bytes())?;
        let cfg_json = serde_json::to_vec(&self.cfg)?;
        w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
        w.write_all(&cfg_json)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, array) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let prec: u8 = match array.precision() {
                Precision::Single => 0,
                Precision::Double => 1,
            };
            w.write_all(&[prec])?;
            w.write_all(&(array.shape().len() as u32).to_le_bytes())?;
            for &dim in array.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for v in array.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint_file(&self, path: &Path, config_digest: u64) -> Result<()> {
        let mut buf = Vec::new();
        self.save_checkpoint(&mut buf, config_digest)?;
        crate::artifacts::write_atomic(path, &buf)
    }

    pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<(Model, u64)> {
        let bad = |what: &str| Error::Format {
            path: "<checkpoint>".into(),
            what: what.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let digest = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u32buf)?;
        let cfg_len = u32::from_le_bytes(u32buf) as usize;
        let mut cfg_json = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_json)?;
        let cfg: ModelConfig = serde_json::from_slice(&cfg_json)?;
        r.read_exact(&mut u32buf)?;
        let n_arrays = u32::from_le_bytes(u32buf) as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_arrays {
            r.read_exact(&mut u32buf)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name"))?;
            let mut prec = [0u8; 1];
            r.read_exact(&mut prec)?;
            let precision = match prec[0] {
                0 => Precision::Single,
                1 => Precision::Double,
                _ => return Err(bad("bad precision tag")),
            };
            r.read_exact(&mut u32buf)?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut u64buf)?;
                shape.push(u64::from_le_bytes(u64buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut u64buf)?;
                data.push(f64::from_le_bytes(u64buf));
            }
            params.insert(name, Array::new(shape, data, precision)?);
        }
        Ok((Model::from_parts(cfg, params)?, digest))
    }

    pub fn load_checkpoint_file(path: &Path) -> Result<(Model, u64)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        Model::load_checkpoint(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            n_layers: 2,
            context_len: 16,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = Model::init(tiny_cfg()).unwrap();
        let b = Model::init(tiny_cfg()).unwrap();
        for (name, arr) in a.params() {
            assert_eq!(arr, &b.params()[name], "param {name} differs");
        }
    }

    #[test]
    fn default_registry_has_24_layers() {
        let m = Model::init(ModelConfig::default()).unwrap();
        assert_eq!(m.registry().len(), 24);
        let ids = m.registry().ids();
        assert_eq!(ids[0], "block0.attn.q");
        assert_eq!(ids[5], "block0.ffn.down");
        // order stable and unique
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::init(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn causality_bit_exact() {
        let m = Model::init(tiny_cfg()).unwrap();
        let a = vec![1u32, 2, 3, 4, 5];
        let mut b = a.clone();
        b[4] = 9; // perturb the last token
        let la = m.forward_logits(&[a]).unwrap();
        let lb = m.forward_logits(&[b]).unwrap();
        let vocab = m.config().vocab_size;
        // positions 0..=3 unchanged bit-exactly
        assert_eq!(la.data()[..4 * vocab], lb.data()[..4 * vocab]);
        // position 4 must differ somewhere
        assert_ne!(la.data()[4 * vocab..], lb.data()[4 * vocab..]);
    }

    #[test]
    fn identical_sequences_identical_rows() {
        let m = Model::init(tiny_cfg()).unwrap();
        let seq = vec![3u32, 1, 4, 1, 5];
        let l = m.forward_logits(&[seq.clone(), seq.clone()]).unwrap();
        let half = l.numel() / 2;
        assert_eq!(l.data()[..half], l.data()[half..]);
    }

    #[test]
    fn empty_batch_empty_output() {
        let m = Model::init(tiny_cfg()).unwrap();
        let l = m.forward_logits(&[]).unwrap();
        assert_eq!(l.shape(), &[0, 0, 12]);
        assert_eq!(l.numel(), 0);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let m = Model::init(tiny_cfg()).unwrap();
        assert!(matches!(
            m.forward_logits(&[vec![99u32]]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn greedy_generation_deterministic() {
        let m = Model::init(tiny_cfg()).unwrap();
        let a = m.generate(&[1, 2, 3], 6, DecodeMode::Greedy, None).unwrap();
        let b = m.generate(&[1, 2, 3], 6, DecodeMode::Greedy, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9);
    }

    #[test]
    fn max_new_zero_returns_prompt() {
        let m = Model::init(tiny_cfg()).unwrap();
        let out = m.generate(&[1, 2, 3], 0, DecodeMode::Greedy, None).unwrap();
        assert_eq!(out, vec![1, 2, 3]);
    }

    #[test]
    fn temperature_generation_reproducible() {
        let m = Model::init(tiny_cfg()).unwrap();
        let mode = DecodeMode::Temperature { tau: 0.8, seed: 11 };
        let a = m.generate(&[1, 2], 8, mode, None).unwrap();
        let b = m.generate(&[1, 2], 8, mode, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretrain_zero_epochs_is_identity() {
        let mut m = Model::init(tiny_cfg()).unwrap();
        let before: Vec<(String, Array)> =
            m.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let trace = m.pretrain(&[vec![1, 2, 3]], &cfg).unwrap();
        assert!(trace.epoch_mean.is_empty());
        for (name, arr) in before {
            assert_eq!(&arr, &m.params()[&name], "{name} changed");
        }
    }

    #[test]
    fn pretrain_memorizes_single_sequence() {
        let mut m = Model::init(tiny_cfg()).unwrap();
        let seq = vec![1u32, 5, 2, 7, 3, 6];
        let cfg = PretrainConfig {
            epochs: 400,
            lr: 1e-2,
            accumulation_steps: 1,
            weight_decay: 0.0,
            warmup_ratio: 0.1,
            seed: 1,
        };
        let trace = m.pretrain(std::slice::from_ref(&seq), &cfg).unwrap();
        let last = *trace.epoch_mean.last().unwrap();
        assert!(last < 0.05, "final loss {last}");
        assert!(trace.epoch_mean[0] > last);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let m = Model::init(tiny_cfg()).unwrap();
        let mut buf = Vec::new();
        m.save_checkpoint(&mut buf, 0xDEAD_BEEF).unwrap();
        let (loaded, digest) = Model::load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(digest, 0xDEAD_BEEF);
        assert_eq!(loaded.config(), m.config());
        for (name, arr) in m.params() {
            assert_eq!(arr, &loaded.params()[name]);
        }
        // save again: byte-identical container
        let mut buf2 = Vec::new();
        loaded.save_checkpoint(&mut buf2, 0xDEAD_BEEF).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn unknown_capture_layer_rejected() {
        let m = Model::init(tiny_cfg()).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            m.register_capture(&mut tape, "block9.attn.q"),
            Err(Error::UnknownLayer(_))
        ));
        m.register_capture(&mut tape, "block0.attn.q").unwrap();
        m.register_capture(&mut tape, HEAD_LAYER_ID).unwrap();
    }

    #[test]
    fn captures_cover_registered_ids_after_backward() {
        let m = Model::init(tiny_cfg()).unwrap();
        let mut tape = Tape::new();
        for id in m.registry().ids() {
            m.register_capture(&mut tape, &id).unwrap();
        }
        let nodes = m.bind(&mut tape, false);
        let loss = m.lm_loss(&mut tape, &nodes, &[1, 2, 3, 4], 1).unwrap();
        tape.backward(loss).unwrap();
        let keys: Vec<String> = tape.captures().keys().cloned().collect();
        let mut want = m.registry().ids();
        want.sort();
        assert_eq!(keys, want);
        let block = &tape.captures()["block0.ffn.up"];
        assert_eq!(block.grads.shape(), &[1, 4, 24]);
    }
}
