//! Evaluation: safe response rate under greedy decoding, a held-out
//! perplexity utility proxy, and the treatment benchmark grid
//! (base / full fine-tune / tied / random-subspace / activation-subspace /
//! unclustered).

use std::collections::BTreeMap;
use std::path::Path;

use crate::artifacts;
use crate::attribution::{self, ImportanceProfile, SecuritySubspace};
use crate::clustering::{self, ClusterAssignment};
use crate::corpus::{self, tok, Verdict};
use crate::error::{Error, Result};
use crate::model::{DecodeMode, Model};
use crate::tensor::Tape;
use crate::pipeline::{self, PipelineConfig};
use crate::tiedtune::{self, estimate_flops, FlopsInputs, FlopsMode, OptimizerConfig, TrainStats};

pub const REPORTS_FORMAT: &str = "eval-reports-v1";

// ── Treatments ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    /// Pretrained model, no adaptation.
    Base,
    /// Every dense parameter trainable, same recipe.
    FullFinetune,
    /// Gradient-selected subspace with silhouette-gated clustering.
    Tied,
    /// Same subspace sizes, uniformly drawn neuron indices.
    RandomSubspace,
    /// Selection by mean absolute activation instead of gradient.
    ActivationSubspace,
    /// Gradient-selected subspace, one cluster per neuron.
    Unclustered,
}

impl Treatment {
    pub fn name(self) -> &'static str {
        match self {
            Treatment::Base => "base",
            Treatment::FullFinetune => "full_finetune",
            Treatment::Tied => "tied",
            Treatment::RandomSubspace => "random_subspace",
            Treatment::ActivationSubspace => "activation_subspace",
            Treatment::Unclustered => "unclustered",
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub treatment: Treatment,
    pub seed: u64,
    pub safe_rate: f64,
    pub n_prompts: usize,
    pub n_unparsable: usize,
    pub perplexity_general: f64,
    pub trainable_params: usize,
    pub estimated_flops: u64,
    pub config_digest: String,
}

// ── Metrics ──────────────────────────────────────────────────────────

/// Greedy-decode each prompt, judge the generated program, and return the
/// exact safe fraction plus the per-prompt verdicts in prompt order.
pub fn safe_response_rate<J>(
    model: &Model,
    prompts: &[Vec<u32>],
    max_new: usize,
    judge: J,
) -> Result<(f64, Vec<Verdict>)>
where
    J: Fn(&[u32]) -> Verdict,
{
    if prompts.is_empty() {
        return Err(Error::Contract("safe_response_rate over zero prompts".into()));
    }
    let mut verdicts = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let full = model.generate(prompt, max_new, DecodeMode::Greedy, Some(tok::EOP))?;
        let program = &full[prompt.len()..];
        verdicts.push(judge(program));
    }
    let safe = verdicts.iter().filter(|v| v.is_safe()).count();
    Ok((safe as f64 / prompts.len() as f64, verdicts))
}

/// exp(mean next-token cross-entropy) over a held-out corpus, pooled per
/// token prediction.
pub fn perplexity(model: &Model, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Contract("perplexity over an empty corpus".into()));
    }
    let mut total_nll = 0.0;
    let mut total_predictions = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            continue;
        }
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape, false);
        let loss = model.lm_loss(&mut tape, &nodes, seq, 1)?;
        let predictions = seq.len() - 1;
        total_nll += tape.value(loss).scalar() * predictions as f64;
        total_predictions += predictions;
    }
    if total_predictions == 0 {
        return Err(Error::Contract("perplexity corpus has no predictions".into()));
    }
    Ok((total_nll / total_predictions as f64).exp())
}

// ── Full fine-tune baseline ──────────────────────────────────────────

/// Supervised fine-tuning of every dense parameter with the same recipe
/// and completion-only loss as the tied path.
pub fn full_finetune(
    model: &Model,
    samples: &[(Vec<u32>, Vec<u32>)],
    opt: &OptimizerConfig,
) -> Result<(Model, TrainStats)> {
    if samples.is_empty() {
        return Err(Error::Contract("finetune set is empty".into()));
    }
    let mut tuned = Model::from_parts(model.config().clone(), model.params().clone())?;
    let mut stats = TrainStats {
        trainable_params: tuned.total_param_count(),
        ..TrainStats::default()
    };
    if opt.epochs == 0 {
        return Ok((tuned, stats));
    }
    let accum = opt.accumulation_steps.max(1);
    let groups_per_epoch = samples.len().div_ceil(accum);
    let total_steps = opt.epochs * groups_per_epoch;
    let mut optimizer = crate::optim::AdamW::new(
        crate::optim::AdamWParams::with_lr(opt.learning_rate, opt.weight_decay),
        crate::optim::Schedule::warmup_cosine(total_steps, opt.warmup_ratio),
    );
    let mut rng = crate::rng::Rng::derive(opt.seed, "finetune-order");
    let mut micro = 0usize;
    for _epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        let mut pending: BTreeMap<String, crate::tensor::Array> = BTreeMap::new();
        let mut group_loss = 0.0;
        let mut group_size = 0usize;
        for (i, &si) in order.iter().enumerate() {
            let (prompt, completion) = &samples[si];
            let mut tokens = prompt.clone();
            tokens.extend_from_slice(completion);
            let mut tape = Tape::new();
            let nodes = tuned.bind(&mut tape, true);
            let loss = tuned.lm_loss(&mut tape, &nodes, &tokens, prompt.len())?;
            let loss_value = tape.value(loss).scalar();
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    step: micro,
                    what: format!("loss is {loss_value}"),
                });
            }
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
                optimizer.step(tuned.params_mut(), &pending);
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
        FlopsMode::FullFinetune,
    );
    Ok((tuned, stats))
}

// ── Benchmark grid ───────────────────────────────────────────────────

/// Everything a treatment run needs, loaded once from the artifact store.
struct BenchmarkInputs {
    base: Model,
    profile: ImportanceProfile,
    subspace: SecuritySubspace,
    clusters: ClusterAssignment,
    ft_samples: Vec<(Vec<u32>, Vec<u32>)>,
    eval_prompts: Vec<Vec<u32>>,
    benign_eval: Vec<Vec<u32>>,
    ident_samples: Vec<attribution::LabeledProgram>,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<BenchmarkInputs> {
    let paths = cfg.paths();
    let pairs = corpus::read_pairs(&paths.pairs())?;
    let benign = corpus::read_benign(&paths.benign())?;
    let split = corpus::read_split(&paths.split())?;
    let (base, _) = Model::load_checkpoint_file(&paths.base_checkpoint())?;
    let profile = attribution::read_importance(&paths.importance_json(), &paths.importance_bin())?;
    let subspace = attribution::read_subspace(&paths.subspace())?;
    let clusters = clustering::read_clusters(&paths.clusters())?;
    let (_, benign_eval) = pipeline::benign_split(&benign);
    Ok(BenchmarkInputs {
        ident_samples: pipeline::identification_samples(&pairs, &split),
        ft_samples: pipeline::finetune_samples(&pairs, &split),
        eval_prompts: pipeline::evaluation_prompts(&pairs, &split),
        benign_eval,
        base,
        profile,
        subspace,
        clusters,
    })
}

fn evaluate_model(
    cfg: &PipelineConfig,
    inputs: &BenchmarkInputs,
    model: &Model,
    treatment: Treatment,
    seed: u64,
    trainable_params: usize,
    estimated_flops: u64,
) -> Result<EvalReport> {
    let (safe_rate, verdicts) =
        safe_response_rate(model, &inputs.eval_prompts, cfg.eval.max_new, corpus::judge)?;
    let ppl = perplexity(model, &inputs.benign_eval)?;
    Ok(EvalReport {
        treatment,
        seed,
        safe_rate,
        n_prompts: inputs.eval_prompts.len(),
        n_unparsable: verdicts
            .iter()
            .filter(|v| **v == Verdict::Unparsable)
            .count(),
        perplexity_general: ppl,
        trainable_params,
        estimated_flops,
        config_digest: format!("{:016x}", cfg.digest()),
    })
}

fn tied_style_run(
    cfg: &PipelineConfig,
    inputs: &BenchmarkInputs,
    treatment: Treatment,
    subspace: &SecuritySubspace,
    clusters: &ClusterAssignment,
    seed: u64,
) -> Result<EvalReport> {
    let mut delta = tiedtune::build_tied_delta(&inputs.base, subspace, clusters)?;
    let opt = OptimizerConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let stats = tiedtune::finetune(&inputs.base, &mut delta, &inputs.ft_samples, &opt)?;
    let tuned = tiedtune::fold_back(&inputs.base, &delta)?;
    evaluate_model(
        cfg,
        inputs,
        &tuned,
        treatment,
        seed,
        stats.trainable_params,
        stats.estimated_total_flops,
    )
}

/// One report per (treatment, seed). Seeds vary the fine-tune data order
/// and the random-subspace draw; everything else is pinned by the config.
pub fn run_benchmark(cfg: &PipelineConfig) -> Result<Vec<EvalReport>> {
    let inputs = load_inputs(cfg)?;
    // activation profile is seed-independent; compute once if needed
    let mut activation: Option<(SecuritySubspace, ClusterAssignment)> = None;
    if cfg.eval.treatments.contains(&Treatment::ActivationSubspace) {
        let targets =
            attribution::CaptureTargets::from_model(&inputs.base, cfg.identify.include_head);
        let profile =
            attribution::activation_importance(&inputs.base, &targets, &inputs.ident_samples)?;
        let subspace = attribution::select_topk(&profile, cfg.identify.k)?;
        let clusters = clustering::cluster_subspace(
            &profile,
            &subspace,
            cfg.cluster.tau,
            cfg.cluster.k_max,
            cfg.cluster.seed,
        )?;
        activation = Some((subspace, clusters));
    }

    let mut reports = Vec::new();
    for &treatment in &cfg.eval.treatments {
        for &seed in &cfg.eval.seeds {
            let report = match treatment {
                Treatment::Base => {
                    evaluate_model(cfg, &inputs, &inputs.base, treatment, seed, 0, 0)?
                }
                Treatment::FullFinetune => {
                    let opt = OptimizerConfig {
                        seed,
                        ..cfg.finetune.clone()
                    };
                    let (tuned, stats) = full_finetune(&inputs.base, &inputs.ft_samples, &opt)?;
                    evaluate_model(
                        cfg,
                        &inputs,
                        &tuned,
                        treatment,
                        seed,
                        stats.trainable_params,
                        stats.estimated_total_flops,
                    )?
                }
                Treatment::Tied => tied_style_run(
                    cfg,
                    &inputs,
                    treatment,
                    &inputs.subspace,
                    &inputs.clusters,
                    seed,
                )?,
                Treatment::RandomSubspace => {
                    let subspace =
                        attribution::random_subspace(&inputs.profile, &inputs.subspace, seed);
                    let clusters = clustering::cluster_subspace(
                        &inputs.profile,
                        &subspace,
                        cfg.cluster.tau,
                        cfg.cluster.k_max,
                        cfg.cluster.seed,
                    )?;
                    tied_style_run(cfg, &inputs, treatment, &subspace, &clusters, seed)?
                }
                Treatment::ActivationSubspace => {
                    let (subspace, clusters) = activation.as_ref().unwrap();
                    tied_style_run(cfg, &inputs, treatment, subspace, clusters, seed)?
                }
                Treatment::Unclustered => {
                    let identity = ClusterAssignment::identity_for(&inputs.subspace);
                    tied_style_run(cfg, &inputs, treatment, &inputs.subspace, &identity, seed)?
                }
            };
            reports.push(report);
        }
    }
    Ok(reports)
}

// ── Aggregation & serialization ──────────────────────────────────────

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TreatmentSummary {
    pub treatment: Treatment,
    pub seeds: usize,
    pub mean_safe_rate: f64,
    pub mean_perplexity: f64,
    pub trainable_params: usize,
    pub estimated_flops: u64,
}

pub fn summarize(reports: &[EvalReport]) -> Vec<TreatmentSummary> {
    let mut grouped: BTreeMap<Treatment, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        grouped.entry(r.treatment).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(treatment, rs)| {
            let n = rs.len() as f64;
            TreatmentSummary {
                treatment,
                seeds: rs.len(),
                mean_safe_rate: rs.iter().map(|r| r.safe_rate).sum::<f64>() / n,
                mean_perplexity: rs.iter().map(|r| r.perplexity_general).sum::<f64>() / n,
                trainable_params: rs.iter().map(|r| r.trainable_params).max().unwrap_or(0),
                estimated_flops: rs.iter().map(|r| r.estimated_flops).max().unwrap_or(0),
            }
        })
        .collect()
}

/// Flat CSV: treatment, seed, safe_rate, perplexity, params, flops.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("treatment,seed,safe_rate,perplexity,params,flops\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.treatment.name(),
            r.seed,
            r.safe_rate,
            r.perplexity_general,
            r.trainable_params,
            r.estimated_flops
        ));
    }
    out
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ReportsJson {
    format: String,
    config_digest: String,
    reports: Vec<EvalReport>,
}

pub fn write_reports(path: &Path, reports: &[EvalReport], config_digest: u64) -> Result<()> {
    let json = ReportsJson {
        format: REPORTS_FORMAT.to_string(),
        config_digest: format!("{config_digest:016x}"),
        reports: reports.to_vec(),
    };
    artifacts::write_atomic(path, serde_json::to_string_pretty(&json)?.as_bytes())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let bytes = artifacts::read_required(path)?;
    let json: ReportsJson = serde_json::from_slice(&bytes)?;
    if json.format != REPORTS_FORMAT {
        return Err(Error::Format {
            path: path.to_path_buf(),
            what: format!("unsupported format {}", json.format),
        });
    }
    Ok(json.reports)
}
