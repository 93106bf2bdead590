#![allow(dead_code)] // items are shared across test targets

//! Shared oracles for integration tests: finite differences against the
//! analytic backward pass, and a direct per-neuron-row fine-tune used as the
//! reference for the singleton-cluster equivalence check.

use std::collections::BTreeMap;

use neurotune::model::{Model, ModelConfig};
use neurotune::optim::{AdamW, AdamWParams, Schedule};
use neurotune::rng::Rng;
use neurotune::tensor::{Array, Tape};
use neurotune::tiedtune::{OptimizerConfig, TiedDelta};

pub const FD_STEP: f64 = 1e-6;

/// Relative error with a floored denominator. Central differences carry
/// roundoff noise of roughly |loss| * eps / step (~1e-9 here); the floor
/// sits three decades above that so the check measures gradient correctness
/// rather than oracle noise, while any real defect (wrong factor, wrong
/// sign, missing term) still shows up as an O(1) relative error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn loss_for(model: &Model, tokens: &[u32]) -> f64 {
    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape, false);
    let loss = model.lm_loss(&mut tape, &nodes, tokens, 1).unwrap();
    tape.value(loss).scalar()
}

/// Max relative error between analytic gradients and central finite
/// differences over `n_params` randomly sampled parameters of a seeded tiny
/// transformer.
pub fn transformer_fd_max_rel_err(cfg: ModelConfig, sample_seed: u64, n_params: usize) -> f64 {
    let mut model = Model::init(cfg.clone()).unwrap();
    let mut rng = Rng::derive(sample_seed, "fd-oracle");
    let t_len = 6 + rng.below(4);
    let tokens: Vec<u32> = (0..t_len)
        .map(|_| rng.below(cfg.vocab_size) as u32)
        .collect();

    // analytic gradients in one backward pass
    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape, true);
    let loss = model.lm_loss(&mut tape, &nodes, &tokens, 1).unwrap();
    tape.backward(loss).unwrap();
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, node) in nodes.iter() {
        let g = tape
            .grad(*node)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; model.param(name).numel()]);
        analytic.insert(name.clone(), g);
    }

    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut max_err: f64 = 0.0;
    for _ in 0..n_params {
        let name = &names[rng.below(names.len())];
        let idx = rng.below(model.param(name).numel());
        let original = model.param(name).data()[idx];
        model.params_mut().get_mut(name).unwrap().data_mut()[idx] = original + FD_STEP;
        let plus = loss_for(&model, &tokens);
        model.params_mut().get_mut(name).unwrap().data_mut()[idx] = original - FD_STEP;
        let minus = loss_for(&model, &tokens);
        model.params_mut().get_mut(name).unwrap().data_mut()[idx] = original;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let err = rel_err(analytic[name][idx], fd);
        if err > max_err {
            max_err = err;
            if err > 1e-5 {
                eprintln!(
                    "fd mismatch at {name}[{idx}]: analytic {} vs fd {} (err {err})",
                    analytic[name][idx], fd
                );
            }
        }
    }
    max_err
}

/// Reference implementation for the singleton-equivalence oracle: fine-tunes
/// one independent row per selected neuron (no tying machinery), mirroring
/// the training recipe exactly. Returns per-layer dense delta rows keyed by
/// (layer id, neuron row).
pub struct RowFinetuneOracle {
    pub rows: BTreeMap<(String, usize), Vec<f64>>,
}

pub fn row_finetune_reference(
    model: &Model,
    selected: &BTreeMap<String, Vec<usize>>,
    samples: &[(Vec<u32>, Vec<u32>)],
    opt: &OptimizerConfig,
) -> RowFinetuneOracle {
    // trainable values: one named row per (layer, neuron)
    let mut values: BTreeMap<String, Array> = BTreeMap::new();
    for (layer_id, rows) in selected {
        let (_, d_in) = model.layer_dims(layer_id).unwrap();
        for &row in rows {
            values.insert(
                format!("{layer_id}#{row}"),
                Array::zeros(&[1, d_in]),
            );
        }
    }
    let accum = opt.accumulation_steps.max(1);
    let total_steps = opt.epochs * samples.len().div_ceil(accum);
    let mut optimizer = AdamW::new(
        AdamWParams::with_lr(opt.learning_rate, opt.weight_decay),
        Schedule::warmup_cosine(total_steps, opt.warmup_ratio),
    );
    let mut rng = Rng::derive(opt.seed, "finetune-order");
    for _epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        let mut pending: BTreeMap<String, Array> = BTreeMap::new();
        let mut group_size = 0usize;
        for (i, &si) in order.iter().enumerate() {
            let (prompt, completion) = &samples[si];
            let mut tokens = prompt.clone();
            tokens.extend_from_slice(completion);
            // dense deltas from the independent rows, applied to the weights
            let mut tape = Tape::new();
            let mut nodes = model.bind(&mut tape, false);
            let mut row_nodes: BTreeMap<String, usize> = BTreeMap::new();
            for (layer_id, rows) in selected {
                let weight_name = format!("{layer_id}.weight");
                let mut weight_node = nodes.get(&weight_name);
                for &row in rows {
                    let key = format!("{layer_id}#{row}");
                    let leaf = tape.leaf(values[&key].clone(), true);
                    row_nodes.insert(key, leaf);
                    weight_node = tape
                        .scatter_rows_add(weight_node, leaf, &[(row, 0)])
                        .unwrap();
                }
                nodes.insert(weight_name, weight_node);
            }
            let loss = model.lm_loss(&mut tape, &nodes, &tokens, prompt.len()).unwrap();
            tape.backward(loss).unwrap();
            for (key, node) in &row_nodes {
                if let Some(g) = tape.grad(*node) {
                    match pending.get_mut(key) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            pending.insert(key.clone(), g.clone());
                        }
                    }
                }
            }
            group_size += 1;
            if group_size == accum || i + 1 == order.len() {
                let inv = 1.0 / group_size as f64;
                for g in pending.values_mut() {
                    for v in g.data_mut() {
                        *v *= inv;
                    }
                }
                optimizer.step(&mut values, &pending);
                pending.clear();
                group_size = 0;
            }
        }
    }
    let mut rows = BTreeMap::new();
    for (layer_id, sel) in selected {
        for &row in sel {
            let key = format!("{layer_id}#{row}");
            rows.insert((layer_id.clone(), row), values[&key].data().to_vec());
        }
    }
    RowFinetuneOracle { rows }
}

/// Expanded delta row for (layer, neuron) from a tied delta.
pub fn tied_delta_row(delta: &TiedDelta, layer_id: &str, row: usize) -> Vec<f64> {
    let layer = &delta.layers[layer_id];
    let pos = layer.selected.iter().position(|&r| r == row).unwrap();
    let cluster = layer.clusters[pos];
    layer.u.data()[cluster * layer.d_in..(cluster + 1) * layer.d_in].to_vec()
}
