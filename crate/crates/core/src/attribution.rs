//! Security-task framing and neuron importance.
//!
//! A program is wrapped in the fixed classification template
//! `JUDGE <program> VERDICT`; the loss is cross-entropy over the two logits
//! at the final position restricted to the answer tokens "0" and "1"
//! (order: ["0", "1"]). Gradient importance is the mean absolute gradient of
//! that loss at each registered layer output, per hidden dimension, averaged
//! over samples; the activation variant substitutes mean absolute forward
//! activations and exists as an ablation baseline.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::artifacts;
use crate::corpus::tok;
use crate::error::{Error, Result};
use crate::model::{Model, HEAD_LAYER_ID};
use crate::tensor::Tape;

pub const CLS_TEMPLATE_VERSION: &str = "cls-v1";
pub const IMPORTANCE_FORMAT: &str = "importance-v1";
pub const SUBSPACE_FORMAT: &str = "subspace-v1";

const IMPORTANCE_MAGIC: &[u8; 4] = b"NTIP";
const IMPORTANCE_BIN_VERSION: u32 = 1;

/// One labeled program for the classification task. `context` carries the
/// task prompt the program answers (may be empty); `label` is the judge
/// convention: 0 = safe, 1 = unsafe.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledProgram {
    pub id: u64,
    pub context: Vec<u32>,
    pub program: Vec<u32>,
    pub label: u8,
}

/// Which layer outputs to instrument.
#[derive(Clone, Debug)]
pub struct CaptureTargets {
    ids: Vec<String>,
}

impl CaptureTargets {
    /// Every registry layer; optionally also the output head.
    pub fn from_model(model: &Model, include_head: bool) -> Self {
        let mut ids = model.registry().ids();
        if include_head {
            ids.push(HEAD_LAYER_ID.to_string());
        }
        CaptureTargets { ids }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Wrap a program (with its task context) in the classification template:
/// `JUDGE <context> <program> VERDICT`.
pub fn classification_sequence(context: &[u32], program: &[u32]) -> Vec<u32> {
    let mut seq = Vec::with_capacity(context.len() + program.len() + 2);
    seq.push(tok::JUDGE);
    seq.extend_from_slice(context);
    seq.extend_from_slice(program);
    seq.push(tok::VERDICT);
    seq
}

/// Mean binary cross-entropy of the model's safe/unsafe judgment over a
/// batch of labeled programs.
pub fn security_loss(
    model: &Model,
    tape: &mut Tape,
    nodes: &crate::model::ParamNodes,
    batch: &[(Vec<u32>, Vec<u32>, u8)],
) -> Result<crate::tensor::NodeId> {
    if model.config().vocab_size <= tok::ANS1 as usize {
        return Err(Error::Config(format!(
            "vocab_size {} does not contain the answer tokens {} and {}",
            model.config().vocab_size,
            tok::ANS0,
            tok::ANS1
        )));
    }
    if batch.is_empty() {
        return Err(Error::Contract("security_loss on an empty batch".into()));
    }
    let mut total = None;
    for (context, program, label) in batch {
        let seq = classification_sequence(context, program);
        let t_len = seq.len();
        let logits = model.forward_on(tape, nodes, &[seq], None)?;
        let last = tape.select_pos(logits, t_len - 1)?;
        let restricted = tape.gather_cols(last, &[tok::ANS0 as usize, tok::ANS1 as usize])?;
        let loss = tape.cross_entropy(restricted, &[i64::from(*label)])?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

// ── Importance profiles ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceSource {
    Gradient,
    Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerImportance {
    /// Row s is sample s's importance over this layer's hidden dims,
    /// in ascending-sample-id order.
    pub per_sample: Vec<Vec<f64>>,
    /// Column-wise mean of `per_sample`.
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceProfile {
    pub source: ImportanceSource,
    /// Ascending; `per_sample` rows align with this order.
    pub sample_ids: Vec<u64>,
    pub layers: BTreeMap<String, LayerImportance>,
}

impl ImportanceProfile {
    pub fn sample_count(&self) -> usize {
        self.sample_ids.len()
    }

    /// The invariants every profile must satisfy: nonnegative entries and
    /// mean equal to the column average of the per-sample rows.
    pub fn validate(&self) -> Result<()> {
        for (layer, li) in &self.layers {
            if li.per_sample.len() != self.sample_ids.len() {
                return Err(Error::Contract(format!(
                    "layer {layer}: {} rows for {} samples",
                    li.per_sample.len(),
                    self.sample_ids.len()
                )));
            }
            let d = li.mean.len();
            for row in &li.per_sample {
                if row.len() != d {
                    return Err(Error::Contract(format!("layer {layer}: ragged rows")));
                }
                if row.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                    return Err(Error::Contract(format!("layer {layer}: negative entry")));
                }
            }
            for j in 0..d {
                let mut s = 0.0;
                for row in &li.per_sample {
                    s += row[j];
                }
                let want = s / li.per_sample.len() as f64;
                if (want - li.mean[j]).abs() > 1e-12 {
                    return Err(Error::Contract(format!(
                        "layer {layer}: mean[{j}] off by {}",
                        (want - li.mean[j]).abs()
                    )));
                }
            }
        }
        Ok(())
    }
}

type SampleRows = Vec<(u64, BTreeMap<String, Vec<f64>>)>;

fn finish_profile(source: ImportanceSource, mut rows: SampleRows) -> ImportanceProfile {
    // Canonical reduction order: ascending sample id, independent of the
    // order the dataset was presented or sharded in.
    rows.sort_by_key(|(id, _)| *id);
    let sample_ids: Vec<u64> = rows.iter().map(|(id, _)| *id).collect();
    let mut layers: BTreeMap<String, LayerImportance> = BTreeMap::new();
    if let Some((_, first)) = rows.first() {
        for (layer, row) in first {
            layers.insert(
                layer.clone(),
                LayerImportance {
                    per_sample: Vec::with_capacity(rows.len()),
                    mean: vec![0.0; row.len()],
                },
            );
        }
    }
    for (_, sample_layers) in rows {
        for (layer, row) in sample_layers {
            layers
                .get_mut(&layer)
                .expect("layer set differs between samples")
                .per_sample
                .push(row);
        }
    }
    let n = sample_ids.len() as f64;
    for li in layers.values_mut() {
        for j in 0..li.mean.len() {
            let mut s = 0.0;
            for row in &li.per_sample {
                s += row[j];
            }
            li.mean[j] = s / n;
        }
    }
    ImportanceProfile {
        source,
        sample_ids,
        layers,
    }
}

fn gradient_rows_for_sample(
    model: &Model,
    targets: &CaptureTargets,
    sample: &LabeledProgram,
    loss_scale: f64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut tape = Tape::new();
    for id in targets.ids() {
        model.register_capture(&mut tape, id)?;
    }
    let nodes = model.bind(&mut tape, false);
    let loss = security_loss(
        model,
        &mut tape,
        &nodes,
        &[(
            sample.context.clone(),
            sample.program.clone(),
            sample.label,
        )],
    )?;
    let loss = tape.scale(loss, loss_scale);
    tape.backward(loss)?;
    let mut rows = BTreeMap::new();
    for (layer_id, block) in tape.captures() {
        let shape = block.grads.shape();
        let (t_len, d) = (shape[0] * shape[1], shape[2]);
        let mut g = vec![0.0; d];
        for t in 0..t_len {
            let row = &block.grads.data()[t * d..(t + 1) * d];
            for (gj, rj) in g.iter_mut().zip(row) {
                *gj += rj.abs();
            }
        }
        for v in &mut g {
            *v /= t_len as f64;
        }
        rows.insert(layer_id.clone(), g);
    }
    Ok(rows)
}

fn activation_rows_for_sample(
    model: &Model,
    targets: &CaptureTargets,
    sample: &LabeledProgram,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut tape = Tape::new();
    for id in targets.ids() {
        model.register_capture(&mut tape, id)?;
    }
    let nodes = model.bind(&mut tape, false);
    let seq = classification_sequence(&sample.context, &sample.program);
    model.forward_on(&mut tape, &nodes, &[seq], None)?;
    let mut rows = BTreeMap::new();
    for (layer_id, value) in tape.capture_values() {
        let shape = value.shape();
        let (t_len, d) = (shape[0] * shape[1], shape[2]);
        let mut g = vec![0.0; d];
        for t in 0..t_len {
            let row = &value.data()[t * d..(t + 1) * d];
            for (gj, rj) in g.iter_mut().zip(row) {
                *gj += rj.abs();
            }
        }
        for v in &mut g {
            *v /= t_len as f64;
        }
        rows.insert(layer_id, g);
    }
    Ok(rows)
}

/// Gradient importance with a positive loss multiplier; the multiplier is a
/// measurement utility (scaling the loss scales every entry linearly and
/// must not change top-k selections).
pub fn accumulate_importance_scaled(
    model: &Model,
    targets: &CaptureTargets,
    samples: &[LabeledProgram],
    loss_scale: f64,
) -> Result<ImportanceProfile> {
    if samples.is_empty() {
        return Err(Error::Contract("importance over an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        rows.push((
            sample.id,
            gradient_rows_for_sample(model, targets, sample, loss_scale)?,
        ));
    }
    Ok(finish_profile(ImportanceSource::Gradient, rows))
}

/// Mean absolute layer-output gradient of the security loss, per hidden
/// dimension, averaged over samples in ascending-sample-id order.
pub fn accumulate_importance(
    model: &Model,
    targets: &CaptureTargets,
    samples: &[LabeledProgram],
) -> Result<ImportanceProfile> {
    accumulate_importance_scaled(model, targets, samples, 1.0)
}

/// Sharded accumulation; bit-identical to the single-threaded run because
/// per-sample rows are independent and the merge is keyed by sample id.
pub fn accumulate_importance_sharded(
    model: &Model,
    targets: &CaptureTargets,
    samples: &[LabeledProgram],
    workers: usize,
) -> Result<ImportanceProfile> {
    if samples.is_empty() {
        return Err(Error::Contract("importance over an empty dataset".into()));
    }
    let workers = workers.max(1).min(samples.len());
    if workers == 1 {
        return accumulate_importance(model, targets, samples);
    }
    let chunk = samples.len().div_ceil(workers);
    let results: Vec<Result<SampleRows>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|shard| {
                    scope.spawn(move || {
                        let mut rows = Vec::with_capacity(shard.len());
                        for sample in shard {
                            rows.push((
                                sample.id,
                                gradient_rows_for_sample(model, targets, sample, 1.0)?,
                            ));
                        }
                        Ok(rows)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
    let mut rows = Vec::with_capacity(samples.len());
    for shard in results {
        rows.extend(shard?);
    }
    Ok(finish_profile(ImportanceSource::Gradient, rows))
}

/// Ablation baseline: mean absolute forward activation instead of gradient.
pub fn activation_importance(
    model: &Model,
    targets: &CaptureTargets,
    samples: &[LabeledProgram],
) -> Result<ImportanceProfile> {
    if samples.is_empty() {
        return Err(Error::Contract("importance over an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        rows.push((sample.id, activation_rows_for_sample(model, targets, sample)?));
    }
    Ok(finish_profile(ImportanceSource::Activation, rows))
}

// ── Subspace selection ───────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelectedNeuron {
    pub index: usize,
    pub score: f64,
}

/// Per-layer top-k security neurons; the union over layers is the
/// security-critical subspace.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SecuritySubspace {
    pub k: usize,
    /// Per layer, ascending neuron indices with their mean-importance scores.
    pub layers: BTreeMap<String, Vec<SelectedNeuron>>,
}

impl SecuritySubspace {
    pub fn indices(&self, layer: &str) -> Vec<usize> {
        self.layers
            .get(layer)
            .map(|v| v.iter().map(|n| n.index).collect())
            .unwrap_or_default()
    }

    pub fn total_selected(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }
}

/// Top-k per layer by mean importance; ties broken toward the lower index;
/// k above the layer width clamps.
pub fn select_topk(profile: &ImportanceProfile, k: usize) -> Result<SecuritySubspace> {
    if k == 0 {
        return Err(Error::Contract("select_topk needs k >= 1".into()));
    }
    let mut layers = BTreeMap::new();
    for (layer_id, li) in &profile.layers {
        let d = li.mean.len();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| {
            li.mean[j]
                .total_cmp(&li.mean[i])
                .then_with(|| i.cmp(&j))
        });
        let take = k.min(d);
        let mut picked: Vec<SelectedNeuron> = order[..take]
            .iter()
            .map(|&i| SelectedNeuron {
                index: i,
                score: li.mean[i],
            })
            .collect();
        picked.sort_by_key(|n| n.index);
        layers.insert(layer_id.clone(), picked);
    }
    Ok(SecuritySubspace { k, layers })
}

/// Same-shaped subspace with uniformly drawn neuron indices; the random
/// baseline for the selection ablation. Scores carry the profile's mean
/// importance at the drawn indices.
pub fn random_subspace(
    profile: &ImportanceProfile,
    reference: &SecuritySubspace,
    seed: u64,
) -> SecuritySubspace {
    let mut rng = crate::rng::Rng::derive(seed, "random-subspace");
    let mut layers = BTreeMap::new();
    for (layer_id, picked) in &reference.layers {
        let li = &profile.layers[layer_id];
        let d = li.mean.len();
        let idx = rng.sample_indices(d, picked.len().min(d));
        layers.insert(
            layer_id.clone(),
            idx.into_iter()
                .map(|i| SelectedNeuron {
                    index: i,
                    score: li.mean[i],
                })
                .collect(),
        );
    }
    SecuritySubspace {
        k: reference.k,
        layers,
    }
}

// ── Serialization ────────────────────────────────────────────────────

#[derive(serde::Serialize, serde::Deserialize)]
struct LayerMeanJson {
    layer_id: String,
    d: usize,
    mean: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ImportanceJson {
    format: String,
    config_digest: String,
    source: ImportanceSource,
    template_version: String,
    sample_count: usize,
    sidecar: String,
    sidecar_digest: String,
    layers: Vec<LayerMeanJson>,
}

/// Writes the JSON summary plus the binary per-sample sidecar next to it.
pub fn write_importance(
    json_path: &Path,
    bin_path: &Path,
    profile: &ImportanceProfile,
    config_digest: u64,
) -> Result<()> {
    let mut bin = Vec::new();
    bin.extend_from_slice(IMPORTANCE_MAGIC);
    bin.extend_from_slice(&IMPORTANCE_BIN_VERSION.to_le_bytes());
    bin.extend_from_slice(&config_digest.to_le_bytes());
    bin.extend_from_slice(&(profile.sample_ids.len() as u32).to_le_bytes());
    for id in &profile.sample_ids {
        bin.extend_from_slice(&id.to_le_bytes());
    }
    bin.extend_from_slice(&(profile.layers.len() as u32).to_le_bytes());
    for (layer_id, li) in &profile.layers {
        bin.extend_from_slice(&(layer_id.len() as u32).to_le_bytes());
        bin.extend_from_slice(layer_id.as_bytes());
        bin.extend_from_slice(&(li.mean.len() as u32).to_le_bytes());
        for row in &li.per_sample {
            for v in row {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    artifacts::write_atomic(bin_path, &bin)?;

    let json = ImportanceJson {
        format: IMPORTANCE_FORMAT.to_string(),
        config_digest: format!("{config_digest:016x}"),
        source: profile.source,
        template_version: CLS_TEMPLATE_VERSION.to_string(),
        sample_count: profile.sample_count(),
        sidecar: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sidecar_digest: artifacts::digest_hex(&bin),
        layers: profile
            .layers
            .iter()
            .map(|(layer_id, li)| LayerMeanJson {
                layer_id: layer_id.clone(),
                d: li.mean.len(),
                mean: li.mean.clone(),
            })
            .collect(),
    };
    artifacts::write_atomic(json_path, serde_json::to_string_pretty(&json)?.as_bytes())
}

pub fn read_importance(json_path: &Path, bin_path: &Path) -> Result<ImportanceProfile> {
    let json_bytes = artifacts::read_required(json_path)?;
    let json: ImportanceJson = serde_json::from_slice(&json_bytes)?;
    if json.format != IMPORTANCE_FORMAT {
        return Err(Error::Format {
            path: json_path.to_path_buf(),
            what: format!("unsupported format {}", json.format),
        });
    }
    let bin = artifacts::read_required(bin_path)?;
    let bad = |what: &str| Error::Format {
        path: bin_path.to_path_buf(),
        what: what.to_string(),
    };
    let mut r = bin.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != IMPORTANCE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != IMPORTANCE_BIN_VERSION {
        return Err(bad("unsupported version"));
    }
    r.read_exact(&mut u64buf)?; // config digest, carried in the json too
    r.read_exact(&mut u32buf)?;
    let n_samples = u32::from_le_bytes(u32buf) as usize;
    let mut sample_ids = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        r.read_exact(&mut u64buf)?;
        sample_ids.push(u64::from_le_bytes(u64buf));
    }
    r.read_exact(&mut u32buf)?;
    let n_layers = u32::from_le_bytes(u32buf) as usize;
    let mut layers = BTreeMap::new();
    for _ in 0..n_layers {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 layer id"))?;
        r.read_exact(&mut u32buf)?;
        let d = u32::from_le_bytes(u32buf) as usize;
        let mut per_sample = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut row = Vec::with_capacity(d);
            for _ in 0..d {
                r.read_exact(&mut u64buf)?;
                row.push(f64::from_le_bytes(u64buf));
            }
            per_sample.push(row);
        }
        let mut mean = vec![0.0; d];
        for j in 0..d {
            let mut s = 0.0;
            for row in &per_sample {
                s += row[j];
            }
            mean[j] = s / n_samples as f64;
        }
        layers.insert(name, LayerImportance { per_sample, mean });
    }
    Ok(ImportanceProfile {
        source: json.source,
        sample_ids,
        layers,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SubspaceJson {
    format: String,
    config_digest: String,
    k: usize,
    layers: BTreeMap<String, Vec<SelectedNeuron>>,
}

pub fn write_subspace(path: &Path, subspace: &SecuritySubspace, config_digest: u64) -> Result<()> {
    let json = SubspaceJson {
        format: SUBSPACE_FORMAT.to_string(),
        config_digest: format!("{config_digest:016x}"),
        k: subspace.k,
        layers: subspace.layers.clone(),
    };
    artifacts::write_atomic(path, serde_json::to_string_pretty(&json)?.as_bytes())
}

pub fn read_subspace(path: &Path) -> Result<SecuritySubspace> {
    let bytes = artifacts::read_required(path)?;
    let json: SubspaceJson = serde_json::from_slice(&bytes)?;
    if json.format != SUBSPACE_FORMAT {
        return Err(Error::Format {
            path: path.to_path_buf(),
            what: format!("unsupported format {}", json.format),
        });
    }
    Ok(SecuritySubspace {
        k: json.k,
        layers: json.layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> Model {
        Model::init(ModelConfig {
            vocab_size: 34,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            n_layers: 2,
            context_len: 32,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_samples(n: usize) -> Vec<LabeledProgram> {
        let pairs = crate::corpus::synth_pairs(3, n.div_ceil(2), &[0.4, 0.3, 0.3]).unwrap();
        let mut out = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            out.push(LabeledProgram {
                id: (2 * i) as u64,
                context: p.prompt.clone(),
                program: p.secure.clone(),
                label: 0,
            });
            out.push(LabeledProgram {
                id: (2 * i + 1) as u64,
                context: p.prompt.clone(),
                program: p.insecure.clone(),
                label: 1,
            });
        }
        out.truncate(n);
        out
    }

    #[test]
    fn security_loss_saturated_and_uniform() {
        let model = tiny_model();
        // saturated: hand-build logits via a model is awkward, so check the
        // uniform case directly and the saturated case through the op level.
        let mut tape = Tape::new();
        let logits = tape.leaf(
            crate::tensor::Array::from_vec(vec![1, 2], vec![10.0, 0.0]).unwrap(),
            false,
        );
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).scalar() < 1e-4);

        // equal logits for "0" and "1" cost ln 2 per sample
        let mut tape = Tape::new();
        let logits = tape.leaf(
            crate::tensor::Array::from_vec(vec![1, 2], vec![1.5, 1.5]).unwrap(),
            false,
        );
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        assert!((tape.value(loss).scalar() - std::f64::consts::LN_2).abs() < 1e-12);

        // batch-mean through the model is finite and positive
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape, false);
        let samples = tiny_samples(4);
        let batch: Vec<(Vec<u32>, Vec<u32>, u8)> = samples
            .iter()
            .map(|s| (s.context.clone(), s.program.clone(), s.label))
            .collect();
        let loss = security_loss(&model, &mut tape, &nodes, &batch).unwrap();
        assert!(tape.value(loss).scalar() > 0.0);
    }

    #[test]
    fn label_swap_symmetric_batch_keeps_mean() {
        let model = tiny_model();
        let s = tiny_samples(2);
        // batch {(p, 0), (p, 1)} has the same mean loss as {(p, 1), (p, 0)}
        let batch_a = vec![
            (s[0].context.clone(), s[0].program.clone(), 0u8),
            (s[0].context.clone(), s[0].program.clone(), 1u8),
        ];
        let batch_b = vec![
            (s[0].context.clone(), s[0].program.clone(), 1u8),
            (s[0].context.clone(), s[0].program.clone(), 0u8),
        ];
        let eval = |batch: &[(Vec<u32>, Vec<u32>, u8)]| {
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape, false);
            let loss = security_loss(&model, &mut tape, &nodes, batch).unwrap();
            tape.value(loss).scalar()
        };
        assert!((eval(&batch_a) - eval(&batch_b)).abs() < 1e-12);
    }

    #[test]
    fn missing_answer_tokens_config_error() {
        let model = Model::init(ModelConfig {
            vocab_size: 8,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            n_layers: 1,
            context_len: 8,
            seed: 1,
        })
        .unwrap();
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape, false);
        let r = security_loss(&model, &mut tape, &nodes, &[(vec![], vec![0, 1], 0)]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn importance_profile_invariants_hold() {
        let model = tiny_model();
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(6);
        let profile = accumulate_importance(&model, &targets, &samples).unwrap();
        profile.validate().unwrap();
        assert_eq!(profile.sample_count(), 6);
        assert_eq!(profile.layers.len(), model.registry().len());
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = tiny_model();
        let targets = CaptureTargets::from_model(&model, false);
        assert!(matches!(
            accumulate_importance(&model, &targets, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn duplicated_samples_keep_mean() {
        let model = tiny_model();
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(4);
        let profile = accumulate_importance(&model, &targets, &samples).unwrap();
        let mut doubled = samples.clone();
        for (i, s) in samples.iter().enumerate() {
            let mut dup = s.clone();
            dup.id = 1000 + i as u64;
            doubled.push(dup);
        }
        let profile2 = accumulate_importance(&model, &targets, &doubled).unwrap();
        for (layer, li) in &profile.layers {
            let li2 = &profile2.layers[layer];
            for (a, b) in li.mean.iter().zip(&li2.mean) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn permuted_dataset_bit_identical_mean() {
        let model = tiny_model();
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(6);
        let mut reversed = samples.clone();
        reversed.reverse();
        let a = accumulate_importance(&model, &targets, &samples).unwrap();
        let b = accumulate_importance(&model, &targets, &reversed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sharded_equals_single_threaded() {
        let model = tiny_model();
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(7);
        let single = accumulate_importance(&model, &targets, &samples).unwrap();
        let sharded = accumulate_importance_sharded(&model, &targets, &samples, 3).unwrap();
        assert_eq!(single, sharded);
    }

    #[test]
    fn loss_scaling_scales_importance_linearly() {
        let model = tiny_model();
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(3);
        let base = accumulate_importance(&model, &targets, &samples).unwrap();
        for c in [0.5, 3.0] {
            let scaled = accumulate_importance_scaled(&model, &targets, &samples, c).unwrap();
            for (layer, li) in &base.layers {
                let ls = &scaled.layers[layer];
                for (a, b) in li.mean.iter().zip(&ls.mean) {
                    assert!((a * c - b).abs() <= 1e-12 * c.max(1.0));
                }
            }
            // argmax sets unchanged
            let sel_a = select_topk(&base, 5).unwrap();
            let sel_b = select_topk(&scaled, 5).unwrap();
            for (layer, picked) in &sel_a.layers {
                assert_eq!(
                    picked.iter().map(|n| n.index).collect::<Vec<_>>(),
                    sel_b.layers[layer]
                        .iter()
                        .map(|n| n.index)
                        .collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn select_topk_ordering_and_ties() {
        let mut layers = BTreeMap::new();
        layers.insert(
            "L".to_string(),
            LayerImportance {
                per_sample: vec![vec![0.3, 0.1, 0.5]],
                mean: vec![0.3, 0.1, 0.5],
            },
        );
        let profile = ImportanceProfile {
            source: ImportanceSource::Gradient,
            sample_ids: vec![0],
            layers,
        };
        let s = select_topk(&profile, 2).unwrap();
        assert_eq!(s.indices("L"), vec![0, 2]);

        let mut layers = BTreeMap::new();
        layers.insert(
            "L".to_string(),
            LayerImportance {
                per_sample: vec![vec![0.2; 4]],
                mean: vec![0.2; 4],
            },
        );
        let profile = ImportanceProfile {
            source: ImportanceSource::Gradient,
            sample_ids: vec![0],
            layers,
        };
        let s = select_topk(&profile, 2).unwrap();
        assert_eq!(s.indices("L"), vec![0, 1]);
        // k beyond width clamps
        let s = select_topk(&profile, 9).unwrap();
        assert_eq!(s.indices("L"), vec![0, 1, 2, 3]);
        // dominance: min selected >= max unselected
        let s2 = select_topk(&profile, 2).unwrap();
        let sel = &s2.layers["L"];
        let min_sel = sel.iter().map(|n| n.score).fold(f64::INFINITY, f64::min);
        assert!(min_sel >= 0.2 - 1e-15);
    }

    #[test]
    fn sum_of_layer_output_loss_gives_unit_importance() {
        // loss = sum of one layer's output => |dL/dout| = 1 everywhere, so
        // the per-sample importance row for that layer is all ones
        let model = tiny_model();
        let mut tape = Tape::new();
        model.register_capture(&mut tape, "block0.ffn.up").unwrap();
        let nodes = model.bind(&mut tape, false);
        model
            .forward_on(&mut tape, &nodes, &[vec![1, 2, 3, 4]], None)
            .unwrap();
        let capture_node = tape.capture_node_ids()["block0.ffn.up"];
        let loss = tape.sum_all(capture_node);
        tape.backward(loss).unwrap();
        let block = &tape.captures()["block0.ffn.up"];
        let shape = block.grads.shape().to_vec();
        let t_len = shape[0] * shape[1];
        let d = shape[2];
        let mut g = vec![0.0; d];
        for t in 0..t_len {
            for j in 0..d {
                g[j] += block.grads.data()[t * d + j].abs();
            }
        }
        for v in &mut g {
            *v /= t_len as f64;
        }
        for v in g {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_activations_give_abs_c_importance() {
        // zero embeddings and biases except the first projection's bias,
        // which is set to a constant c: its activation importance is |c|
        let mut model = tiny_model();
        let names: Vec<String> = model.params().keys().cloned().collect();
        for name in &names {
            if name.ends_with(".bias")
                || name.ends_with(".beta")
                || name == "tok_emb"
                || name == "pos_emb"
            {
                for v in model.params_mut().get_mut(name).unwrap().data_mut() {
                    *v = 0.0;
                }
            }
        }
        let c = -0.75;
        for v in model
            .params_mut()
            .get_mut("block0.attn.q.bias")
            .unwrap()
            .data_mut()
        {
            *v = c;
        }
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(2);
        let profile = activation_importance(&model, &targets, &samples).unwrap();
        for v in &profile.layers["block0.attn.q"].mean {
            assert!((v - c.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_importance_zero_for_zeroed_first_projection() {
        let mut model = tiny_model();
        // zero embeddings and every bias/shift; first projection sees ln(0)=0
        for name in ["tok_emb", "pos_emb", "block0.ln1.beta"] {
            let arr = model.params_mut().get_mut(name).unwrap();
            for v in arr.data_mut() {
                *v = 0.0;
            }
        }
        let bias_names: Vec<String> = model
            .params()
            .keys()
            .filter(|k| k.ends_with(".bias"))
            .cloned()
            .collect();
        for name in bias_names {
            let arr = model.params_mut().get_mut(&name).unwrap();
            for v in arr.data_mut() {
                *v = 0.0;
            }
        }
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(2);
        let profile = activation_importance(&model, &targets, &samples).unwrap();
        for v in &profile.layers["block0.attn.q"].mean {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn random_subspace_matches_sizes() {
        let model = tiny_model();
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(4);
        let profile = accumulate_importance(&model, &targets, &samples).unwrap();
        let grad = select_topk(&profile, 5).unwrap();
        let rand_a = random_subspace(&profile, &grad, 9);
        let rand_b = random_subspace(&profile, &grad, 9);
        assert_eq!(rand_a, rand_b);
        for (layer, picked) in &grad.layers {
            assert_eq!(picked.len(), rand_a.layers[layer].len());
        }
    }

    #[test]
    fn importance_files_roundtrip() {
        let model = tiny_model();
        let targets = CaptureTargets::from_model(&model, false);
        let samples = tiny_samples(4);
        let profile = accumulate_importance(&model, &targets, &samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("importance.json");
        let bin = dir.path().join("importance.bin");
        write_importance(&json, &bin, &profile, 77).unwrap();
        let loaded = read_importance(&json, &bin).unwrap();
        assert_eq!(profile, loaded);

        let subspace = select_topk(&profile, 6).unwrap();
        let spath = dir.path().join("subspace.json");
        write_subspace(&spath, &subspace, 77).unwrap();
        assert_eq!(read_subspace(&spath).unwrap(), subspace);
    }
}
