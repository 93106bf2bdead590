//! Cluster-tied, neuron-selective fine-tuning.
//!
//! Each selected layer carries a trainable matrix `U` with one row per
//! cluster; the effective weight is the frozen base plus `U[cluster(i)]`
//! scattered into the selected neuron rows (zero elsewhere). Only `U` and
//! its optimizer state ever change: base weights, biases, embeddings, and
//! norms stay bit-identical to the base checkpoint. Trained deltas fold back
//! into an ordinary dense checkpoint.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use crate::artifacts;
use crate::attribution::SecuritySubspace;
use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::model::{Model, ParamNodes};
use crate::optim::{AdamW, AdamWParams, Schedule};
use crate::rng::Rng;
use crate::tensor::{Array, NodeId, Tape};

pub const DELTA_FORMAT_VERSION: u32 = 1;
pub const FLOPS_MODEL_VERSION: &str = "flops-v1";
const DELTA_MAGIC: &[u8; 4] = b"NTTD";

// ── Types ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDelta {
    pub layer_id: String,
    pub d_out: usize,
    pub d_in: usize,
    /// (num_clusters x d_in); zero-initialized.
    pub u: Array,
    /// Selected neuron rows, ascending.
    pub selected: Vec<usize>,
    /// Cluster id per selected neuron, aligned with `selected`.
    pub clusters: Vec<usize>,
}

impl LayerDelta {
    pub fn num_clusters(&self) -> usize {
        self.u.shape()[0]
    }

    /// (row, cluster) pairs for the scatter op.
    pub fn scatter_rows(&self) -> Vec<(usize, usize)> {
        self.selected
            .iter()
            .copied()
            .zip(self.clusters.iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiedDelta {
    pub layers: BTreeMap<String, LayerDelta>,
}

impl TiedDelta {
    /// Sum over layers of num_clusters * d_in.
    pub fn trainable_params(&self) -> usize {
        self.layers.values().map(|l| l.u.numel()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .values()
            .all(|l| l.u.data().iter().all(|&v| v == 0.0))
    }
}

/// Fixed AdamW recipe for the selective fine-tune.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub accumulation_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            warmup_ratio: 0.1,
            epochs: 2,
            accumulation_steps: 8,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainStats {
    pub trainable_params: usize,
    pub clusters_per_layer: Vec<(String, usize)>,
    pub estimated_total_flops: u64,
    /// Wall-clock throughput of the run that produced these stats. Excluded
    /// from serialized artifacts so stage outputs stay byte-reproducible.
    #[serde(skip)]
    pub flops_per_second: f64,
    pub steps: usize,
    pub tokens_processed: u64,
    /// Scalar count of values the optimizer actually tracked moments for;
    /// must equal `trainable_params` after at least one step.
    pub optimizer_params: usize,
    /// Mean loss per optimizer step.
    pub loss_trace: Vec<f64>,
}

// ── Construction ─────────────────────────────────────────────────────

/// Zero-initialized tied delta over a clustered subspace. The clusters must
/// partition exactly the subspace's selected sets.
pub fn build_tied_delta(
    model: &Model,
    subspace: &SecuritySubspace,
    clusters: &ClusterAssignment,
) -> Result<TiedDelta> {
    clusters.validate()?;
    if clusters.layers.len() != subspace.layers.len() {
        return Err(Error::Contract(format!(
            "clusters cover {} layers, subspace has {}",
            clusters.layers.len(),
            subspace.layers.len()
        )));
    }
    let mut layers = BTreeMap::new();
    for (layer_id, picked) in &subspace.layers {
        let lc = clusters
            .layers
            .get(layer_id)
            .ok_or_else(|| Error::Contract(format!("clusters missing layer {layer_id}")))?;
        if lc.assignment.len() != picked.len() {
            return Err(Error::Contract(format!(
                "layer {layer_id}: {} cluster ids for {} selected neurons",
                lc.assignment.len(),
                picked.len()
            )));
        }
        let (d_out, d_in) = model
            .layer_dims(layer_id)
            .ok_or_else(|| Error::UnknownLayer(layer_id.clone()))?;
        let selected: Vec<usize> = picked.iter().map(|n| n.index).collect();
        if selected.iter().any(|&i| i >= d_out) {
            return Err(Error::Contract(format!(
                "layer {layer_id}: selected neuron out of range"
            )));
        }
        layers.insert(
            layer_id.clone(),
            LayerDelta {
                layer_id: layer_id.clone(),
                d_out,
                d_in,
                u: Array::zeros(&[lc.num_clusters, d_in]),
                selected,
                clusters: lc.assignment.clone(),
            },
        );
    }
    Ok(TiedDelta { layers })
}

/// Dense weight with the delta applied: selected rows get `U[cluster(i)]`
/// added, all other rows are bit-exact copies of the base.
pub fn effective_weights(base: &Array, layer: &LayerDelta) -> Result<Array> {
    if base.shape() != [layer.d_out, layer.d_in] {
        return Err(Error::Shape(format!(
            "base weight {:?} vs layer dims ({}, {})",
            base.shape(),
            layer.d_out,
            layer.d_in
        )));
    }
    let mut out = base.clone();
    let d_in = layer.d_in;
    for (&row, &cluster) in layer.selected.iter().zip(&layer.clusters) {
        let urow = &layer.u.data()[cluster * d_in..(cluster + 1) * d_in];
        let dst = &mut out.data_mut()[row * d_in..(row + 1) * d_in];
        for j in 0..d_in {
            dst[j] += urow[j];
        }
    }
    Ok(out)
}

/// Leaf the base model frozen and swap each delta layer's weight for the
/// on-tape base-plus-scatter node. Returns the parameter map plus the U
/// leaf per layer.
pub fn bind_effective(
    model: &Model,
    delta: &TiedDelta,
    tape: &mut Tape,
) -> Result<(ParamNodes, BTreeMap<String, NodeId>)> {
    let mut nodes = model.bind(tape, false);
    let mut u_nodes = BTreeMap::new();
    for (layer_id, layer) in &delta.layers {
        let weight_name = format!("{layer_id}.weight");
        let base_node = nodes.get(&weight_name);
        let u_node = tape.leaf(layer.u.clone(), true);
        let eff = tape.scatter_rows_add(base_node, u_node, &layer.scatter_rows())?;
        nodes.insert(weight_name, eff);
        u_nodes.insert(layer_id.clone(), u_node);
    }
    Ok((nodes, u_nodes))
}

/// Logits of base-plus-delta on a token batch.
pub fn forward_effective(model: &Model, delta: &TiedDelta, tokens: &[Vec<u32>]) -> Result<Array> {
    let mut tape = Tape::new();
    let (nodes, _) = bind_effective(model, delta, &mut tape)?;
    let logits = model.forward_on(&mut tape, &nodes, tokens, None)?;
    Ok(tape.value(logits).clone())
}

// ── Training ─────────────────────────────────────────────────────────

/// Supervised fine-tuning of the tied delta on (prompt, completion) pairs.
/// Loss is next-token cross-entropy on completion tokens only; only `U`
/// matrices and their optimizer state change.
pub fn finetune(
    model: &Model,
    delta: &mut TiedDelta,
    samples: &[(Vec<u32>, Vec<u32>)],
    opt: &OptimizerConfig,
) -> Result<TrainStats> {
    if samples.is_empty() {
        return Err(Error::Contract("finetune set is empty".into()));
    }
    let started = Instant::now();
    let mut stats = TrainStats {
        trainable_params: delta.trainable_params(),
        clusters_per_layer: delta
            .layers
            .iter()
            .map(|(id, l)| (id.clone(), l.num_clusters()))
            .collect(),
        ..TrainStats::default()
    };
    if opt.epochs == 0 {
        return Ok(stats);
    }
    let accum = opt.accumulation_steps.max(1);
    let groups_per_epoch = samples.len().div_ceil(accum);
    let total_steps = opt.epochs * groups_per_epoch;
    let mut optimizer = AdamW::new(
        AdamWParams::with_lr(opt.learning_rate, opt.weight_decay),
        Schedule::warmup_cosine(total_steps, opt.warmup_ratio),
    );
    let mut rng = Rng::derive(opt.seed, "finetune-order");
    let mut micro = 0usize;
    for _epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        let mut pending: BTreeMap<String, Array> = BTreeMap::new();
        let mut group_loss = 0.0;
        let mut group_size = 0usize;
        for (i, &si) in order.iter().enumerate() {
            let (prompt, completion) = &samples[si];
            let mut tokens = prompt.clone();
            tokens.extend_from_slice(completion);
            let mut tape = Tape::new();
            let (nodes, u_nodes) = bind_effective(model, delta, &mut tape)?;
            let loss = model.lm_loss(&mut tape, &nodes, &tokens, prompt.len())?;
            let loss_value = tape.value(loss).scalar();
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    step: micro,
                    what: format!("loss is {loss_value}"),
                });
            }
            tape.backward(loss)?;
            for (layer_id, u_node) in &u_nodes {
                if let Some(g) = tape.grad(*u_node) {
                    match pending.get_mut(layer_id) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            pending.insert(layer_id.clone(), g.clone());
                        }
                    }
                }
            }
            stats.tokens_processed += tokens.len() as u64;
            group_loss += loss_value;
            group_size += 1;
            micro += 1;
            if group_size == accum || i + 1 == order.len() {
                let inv = 1.0 / group_size as f64;
                for g in pending.values_mut() {
                    for v in g.data_mut() {
                        *v *= inv;
                    }
                }
                let mut u_values: BTreeMap<String, Array> = delta
                    .layers
                    .iter()
                    .map(|(id, l)| (id.clone(), l.u.clone()))
                    .collect();
                optimizer.step(&mut u_values, &pending);
                for (id, u) in u_values {
                    delta.layers.get_mut(&id).unwrap().u = u;
                }
                stats.loss_trace.push(group_loss / group_size as f64);
                pending.clear();
                group_loss = 0.0;
                group_size = 0;
            }
        }
    }
    stats.steps = optimizer.steps_taken();
    stats.optimizer_params = optimizer.visible_param_count();
    stats.estimated_total_flops = estimate_flops(
        model.total_param_count() as u64,
        &FlopsInputs {
            tokens: stats.tokens_processed,
            optimizer_steps: stats.steps as u64,
            trainable_params: stats.trainable_params as u64,
        },
        FlopsMode::Tied,
    );
    let elapsed = started.elapsed().as_secs_f64();
    stats.flops_per_second = if elapsed > 0.0 {
        stats.estimated_total_flops as f64 / elapsed
    } else {
        0.0
    };
    Ok(stats)
}

/// Materialize base-plus-delta into a standard dense model.
pub fn fold_back(model: &Model, delta: &TiedDelta) -> Result<Model> {
    let mut params = model.params().clone();
    for (layer_id, layer) in &delta.layers {
        let weight_name = format!("{layer_id}.weight");
        let base = params
            .get(&weight_name)
            .ok_or_else(|| Error::UnknownLayer(layer_id.clone()))?;
        let folded = effective_weights(base, layer)?;
        params.insert(weight_name, folded);
    }
    Model::from_parts(model.config().clone(), params)
}

// ── FLOPs cost model (flops-v1, normative) ───────────────────────────
//
// P = dense parameter count, T = tokens processed, R = trainable parameters,
// S = optimizer steps.
//   forward        = 2 * P * T
//   full fine-tune = 3 * forward                 = 6 * P * T
//   tied           = forward + backward-to-activations + update
//                  = 2*P*T + 2*P*T + 2*R*S       = 4*P*T + 2*R*S

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopsMode {
    Forward,
    FullFinetune,
    Tied,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FlopsInputs {
    pub tokens: u64,
    pub optimizer_steps: u64,
    pub trainable_params: u64,
}

pub fn estimate_flops(dense_params: u64, inputs: &FlopsInputs, mode: FlopsMode) -> u64 {
    let fwd = 2 * dense_params * inputs.tokens;
    match mode {
        FlopsMode::Forward => fwd,
        FlopsMode::FullFinetune => 3 * fwd,
        FlopsMode::Tied => 2 * fwd + 2 * inputs.trainable_params * inputs.optimizer_steps,
    }
}

// ── Serialization ────────────────────────────────────────────────────

pub fn write_delta(path: &Path, delta: &TiedDelta, config_digest: u64) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DELTA_MAGIC);
    out.extend_from_slice(&DELTA_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest.to_le_bytes());
    out.extend_from_slice(&(delta.layers.len() as u32).to_le_bytes());
    for (layer_id, layer) in &delta.layers {
        out.extend_from_slice(&(layer_id.len() as u32).to_le_bytes());
        out.extend_from_slice(layer_id.as_bytes());
        out.extend_from_slice(&(layer.d_out as u32).to_le_bytes());
        out.extend_from_slice(&(layer.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(layer.num_clusters() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.selected.len() as u32).to_le_bytes());
        for &s in &layer.selected {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for &c in &layer.clusters {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for v in layer.u.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    artifacts::write_atomic(path, &out)
}

pub fn read_delta(path: &Path) -> Result<TiedDelta> {
    let bytes = artifacts::read_required(path)?;
    let bad = |what: &str| Error::Format {
        path: path.to_path_buf(),
        what: what.to_string(),
    };
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DELTA_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != DELTA_FORMAT_VERSION {
        return Err(bad("unsupported version"));
    }
    r.read_exact(&mut u64buf)?; // config digest
    r.read_exact(&mut u32buf)?;
    let n_layers = u32::from_le_bytes(u32buf) as usize;
    let mut layers = BTreeMap::new();
    for _ in 0..n_layers {
        r.read_exact(&mut u32buf)?;
        let id_len = u32::from_le_bytes(u32buf) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let layer_id = String::from_utf8(id).map_err(|_| bad("non-utf8 layer id"))?;
        r.read_exact(&mut u32buf)?;
        let d_out = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let d_in = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let n_clusters = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let n_sel = u32::from_le_bytes(u32buf) as usize;
        let mut selected = Vec::with_capacity(n_sel);
        for _ in 0..n_sel {
            r.read_exact(&mut u32buf)?;
            selected.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut clusters = Vec::with_capacity(n_sel);
        for _ in 0..n_sel {
            r.read_exact(&mut u32buf)?;
            clusters.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut u = Vec::with_capacity(n_clusters * d_in);
        for _ in 0..n_clusters * d_in {
            r.read_exact(&mut u64buf)?;
            u.push(f64::from_le_bytes(u64buf));
        }
        layers.insert(
            layer_id.clone(),
            LayerDelta {
                layer_id,
                d_out,
                d_in,
                u: Array::from_vec(vec![n_clusters, d_in], u)?,
                selected,
                clusters,
            },
        );
    }
    Ok(TiedDelta { layers })
}

pub fn write_train_stats(path: &Path, stats: &TrainStats, config_digest: u64) -> Result<()> {
    #[derive(serde::Serialize)]
    struct StatsJson<'a> {
        format: &'static str,
        config_digest: String,
        flops_model: &'static str,
        #[serde(flatten)]
        stats: &'a TrainStats,
    }
    let json = StatsJson {
        format: "train-stats-v1",
        config_digest: format!("{config_digest:016x}"),
        flops_model: FLOPS_MODEL_VERSION,
        stats,
    };
    artifacts::write_atomic(path, serde_json::to_string_pretty(&json)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{SecuritySubspace, SelectedNeuron};
    use crate::clustering::{ClusterAssignment, LayerClusters};
    use crate::model::ModelConfig;

    fn tiny_model() -> Model {
        Model::init(ModelConfig {
            vocab_size: 34,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            n_layers: 2,
            context_len: 32,
            seed: 9,
        })
        .unwrap()
    }

    fn tiny_subspace(model: &Model, per_layer: usize) -> SecuritySubspace {
        let mut layers = BTreeMap::new();
        for entry in model.registry().entries() {
            let picked: Vec<SelectedNeuron> = (0..per_layer.min(entry.d_out))
                .map(|i| SelectedNeuron {
                    index: i * 2,
                    score: 1.0 / (i + 1) as f64,
                })
                .collect();
            layers.insert(entry.id.clone(), picked);
        }
        SecuritySubspace {
            k: per_layer,
            layers,
        }
    }

    fn paired_clusters(subspace: &SecuritySubspace, num: usize) -> ClusterAssignment {
        let layers = subspace
            .layers
            .iter()
            .map(|(id, picked)| {
                (
                    id.clone(),
                    LayerClusters {
                        assignment: (0..picked.len()).map(|i| i % num).collect(),
                        num_clusters: num.min(picked.len()),
                        silhouette: Some(0.5),
                        skipped: false,
                    },
                )
            })
            .collect();
        ClusterAssignment {
            tau: 0.05,
            k_max: 10,
            seed: 0,
            layers,
        }
    }

    fn ft_samples(n: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
        let pairs = crate::corpus::synth_pairs(11, n, &[0.4, 0.3, 0.3]).unwrap();
        pairs
            .into_iter()
            .map(|p| (p.prompt, p.secure))
            .collect()
    }

    #[test]
    fn zero_init_effective_logits_bit_equal_base() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 4);
        let clusters = paired_clusters(&subspace, 2);
        let delta = build_tied_delta(&model, &subspace, &clusters).unwrap();
        assert!(delta.is_zero());
        let tokens = vec![vec![1u32, 5, 2, 7, 3]];
        let base = model.forward_logits(&tokens).unwrap();
        let eff = forward_effective(&model, &delta, &tokens).unwrap();
        assert_eq!(base, eff);
    }

    #[test]
    fn trainable_param_arithmetic() {
        // 2 layers, C = [3, 4], d_in = 8 -> 56 trainable values
        let la = LayerDelta {
            layer_id: "a".into(),
            d_out: 10,
            d_in: 8,
            u: Array::zeros(&[3, 8]),
            selected: vec![0, 1, 2],
            clusters: vec![0, 1, 2],
        };
        let lb = LayerDelta {
            layer_id: "b".into(),
            d_out: 10,
            d_in: 8,
            u: Array::zeros(&[4, 8]),
            selected: vec![0, 1, 2, 3],
            clusters: vec![0, 1, 2, 3],
        };
        let mut layers = BTreeMap::new();
        layers.insert("a".to_string(), la);
        layers.insert("b".to_string(), lb);
        let delta = TiedDelta { layers };
        assert_eq!(delta.trainable_params(), 56);
    }

    #[test]
    fn cluster_subspace_mismatch_rejected() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 4);
        let mut clusters = paired_clusters(&subspace, 2);
        clusters
            .layers
            .get_mut("block0.attn.q")
            .unwrap()
            .assignment
            .pop();
        assert!(matches!(
            build_tied_delta(&model, &subspace, &clusters),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn effective_weights_tying_and_masking() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 3);
        let clusters = paired_clusters(&subspace, 1); // all share one cluster
        let mut delta = build_tied_delta(&model, &subspace, &clusters).unwrap();
        let layer = delta.layers.get_mut("block0.attn.q").unwrap();
        for (j, v) in layer.u.data_mut().iter_mut().enumerate() {
            *v = j as f64 + 1.0;
        }
        let base = model.param("block0.attn.q.weight");
        let eff = effective_weights(base, &delta.layers["block0.attn.q"]).unwrap();
        let d_in = 16;
        let layer = &delta.layers["block0.attn.q"];
        // every selected row shares the single cluster row
        for &row in &layer.selected {
            for j in 0..d_in {
                let want = base.data()[row * d_in + j] + (j as f64 + 1.0);
                assert_eq!(eff.data()[row * d_in + j], want);
            }
        }
        // unselected rows bit-equal base
        for row in 0..16 {
            if layer.selected.contains(&row) {
                continue;
            }
            assert_eq!(
                &eff.data()[row * d_in..(row + 1) * d_in],
                &base.data()[row * d_in..(row + 1) * d_in]
            );
        }
    }

    #[test]
    fn u_zero_gives_base_weights() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 3);
        let clusters = paired_clusters(&subspace, 2);
        let delta = build_tied_delta(&model, &subspace, &clusters).unwrap();
        let base = model.param("block1.ffn.up.weight");
        let eff = effective_weights(base, &delta.layers["block1.ffn.up"]).unwrap();
        assert_eq!(&eff, base);
    }

    #[test]
    fn finetune_zero_epochs_no_change() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 3);
        let clusters = paired_clusters(&subspace, 2);
        let mut delta = build_tied_delta(&model, &subspace, &clusters).unwrap();
        let opt = OptimizerConfig {
            epochs: 0,
            ..OptimizerConfig::default()
        };
        let stats = finetune(&model, &mut delta, &ft_samples(4), &opt).unwrap();
        assert_eq!(stats.steps, 0);
        assert!(delta.is_zero());
    }

    #[test]
    fn finetune_touches_only_u_and_ties_hold() {
        let model = tiny_model();
        let before: Vec<(String, Array)> = model
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let subspace = tiny_subspace(&model, 4);
        let clusters = paired_clusters(&subspace, 2);
        let mut delta = build_tied_delta(&model, &subspace, &clusters).unwrap();
        let opt = OptimizerConfig {
            epochs: 1,
            accumulation_steps: 2,
            seed: 3,
            ..OptimizerConfig::default()
        };
        let stats = finetune(&model, &mut delta, &ft_samples(6), &opt).unwrap();
        assert!(stats.steps > 0);
        assert!(!delta.is_zero());
        // base model untouched
        for (name, arr) in before {
            assert_eq!(&arr, &model.params()[&name], "{name} changed");
        }
        // tying: member rows of one cluster share the same delta row
        let folded = fold_back(&model, &delta).unwrap();
        for (layer_id, layer) in &delta.layers {
            let weight_name = format!("{layer_id}.weight");
            let base = model.param(&weight_name);
            let tuned = folded.param(&weight_name);
            let d_in = layer.d_in;
            for (&row, &cluster) in layer.selected.iter().zip(&layer.clusters) {
                let urow = &layer.u.data()[cluster * d_in..(cluster + 1) * d_in];
                for (j, uj) in urow.iter().enumerate() {
                    let diff = tuned.data()[row * d_in + j] - base.data()[row * d_in + j];
                    // member rows carry exactly U[cluster]; the subtraction
                    // reintroduces one rounding step per element
                    assert!((diff - uj).abs() <= 1e-12);
                }
            }
            // rows outside the selection bit-equal base
            for row in 0..layer.d_out {
                if layer.selected.contains(&row) {
                    continue;
                }
                assert_eq!(
                    &tuned.data()[row * d_in..(row + 1) * d_in],
                    &base.data()[row * d_in..(row + 1) * d_in]
                );
            }
        }
        // biases bit-equal
        for (name, arr) in model.params() {
            if name.ends_with(".bias") {
                assert_eq!(arr, &folded.params()[name]);
            }
        }
    }

    #[test]
    fn finetune_deterministic() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 3);
        let clusters = paired_clusters(&subspace, 2);
        let opt = OptimizerConfig {
            epochs: 1,
            accumulation_steps: 2,
            seed: 5,
            ..OptimizerConfig::default()
        };
        let samples = ft_samples(5);
        let mut d1 = build_tied_delta(&model, &subspace, &clusters).unwrap();
        let mut d2 = build_tied_delta(&model, &subspace, &clusters).unwrap();
        finetune(&model, &mut d1, &samples, &opt).unwrap();
        finetune(&model, &mut d2, &samples, &opt).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn fold_back_zero_delta_bit_equal_and_idempotent() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 3);
        let clusters = paired_clusters(&subspace, 2);
        let delta = build_tied_delta(&model, &subspace, &clusters).unwrap();
        let folded = fold_back(&model, &delta).unwrap();
        for (name, arr) in model.params() {
            assert_eq!(arr, &folded.params()[name]);
        }
        // fold, save, reload: stable
        let mut buf = Vec::new();
        folded.save_checkpoint(&mut buf, 1).unwrap();
        let (reloaded, _) = Model::load_checkpoint(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        reloaded.save_checkpoint(&mut buf2, 1).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn fold_back_random_delta_matches_effective_forward() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 4);
        let clusters = paired_clusters(&subspace, 2);
        let mut delta = build_tied_delta(&model, &subspace, &clusters).unwrap();
        let mut rng = Rng::new(21);
        for layer in delta.layers.values_mut() {
            for v in layer.u.data_mut() {
                *v = rng.normal() * 0.05;
            }
        }
        let folded = fold_back(&model, &delta).unwrap();
        for trial in 0..20 {
            let len = 3 + (trial % 5);
            let tokens: Vec<u32> = (0..len).map(|_| rng.below(34) as u32).collect();
            let eff = forward_effective(&model, &delta, std::slice::from_ref(&tokens)).unwrap();
            let dense = folded.forward_logits(&[tokens]).unwrap();
            for (a, b) in eff.data().iter().zip(dense.data()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn flops_model_shapes() {
        let p = 1000u64;
        let inputs = FlopsInputs {
            tokens: 500,
            optimizer_steps: 50,
            trainable_params: 40,
        };
        assert_eq!(estimate_flops(p, &inputs, FlopsMode::Forward), 2 * p * 500);
        assert_eq!(
            estimate_flops(p, &inputs, FlopsMode::FullFinetune),
            6 * p * 500
        );
        assert_eq!(
            estimate_flops(p, &inputs, FlopsMode::Tied),
            4 * p * 500 + 2 * 40 * 50
        );
        // tied < full whenever trainables < dense and steps <= tokens
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let p = 100 + rng.below(100_000) as u64;
            let tokens = 1 + rng.below(100_000) as u64;
            let steps = 1 + rng.below(tokens as usize) as u64;
            let r = rng.below(p as usize) as u64;
            let i = FlopsInputs {
                tokens,
                optimizer_steps: steps,
                trainable_params: r,
            };
            assert!(
                estimate_flops(p, &i, FlopsMode::Tied)
                    < estimate_flops(p, &i, FlopsMode::FullFinetune)
            );
        }
    }

    #[test]
    fn delta_file_roundtrip() {
        let model = tiny_model();
        let subspace = tiny_subspace(&model, 4);
        let clusters = paired_clusters(&subspace, 2);
        let mut delta = build_tied_delta(&model, &subspace, &clusters).unwrap();
        let mut rng = Rng::new(3);
        for layer in delta.layers.values_mut() {
            for v in layer.u.data_mut() {
                *v = rng.normal();
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("delta.bin");
        write_delta(&path, &delta, 123).unwrap();
        assert_eq!(read_delta(&path).unwrap(), delta);
    }
}
