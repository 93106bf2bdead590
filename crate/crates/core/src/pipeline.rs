//! Pipeline configuration and stage orchestration.
//!
//! One JSON configuration file (schema `config-v1`) drives every stage.
//! Each stage reads its inputs only from the artifact directory, writes its
//! outputs atomically, embeds the config digest for provenance, and is a
//! pure function of (config, upstream artifacts) so reruns are
//! byte-identical.

use std::path::{Path, PathBuf};

use crate::artifacts::{self, ArtifactPaths};
use crate::attribution::{self, LabeledProgram};
use crate::clustering;
use crate::corpus::{self, tok, BenignSample, CorpusSplit, PairedSample};
use crate::error::{Error, Result};
use crate::evalharness::{self, Treatment};
use crate::model::{Model, ModelConfig, PretrainConfig};
use crate::rng::Rng;
use crate::tiedtune::{self, OptimizerConfig};

pub const CONFIG_SCHEMA: &str = "config-v1";

/// Environment variable overriding `artifact_dir`.
pub const ARTIFACT_DIR_ENV: &str = "NEUROTUNE_ARTIFACT_DIR";

// ── Config ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub family_mix: [f64; 3],
    /// Probability that a pair contributes its insecure variant to the
    /// pretraining corpus.
    pub insecure_ratio: f64,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub benign_n: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IdentifyConfig {
    /// Security neurons per layer.
    pub k: usize,
    /// Also instrument the output head (off by default; the registry covers
    /// attention and feed-forward projections only).
    pub include_head: bool,
    /// Shards for importance accumulation; results are identical for any
    /// worker count.
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterConfig {
    /// Silhouette threshold below which a layer keeps identity clusters.
    pub tau: f64,
    pub k_max: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    pub treatments: Vec<Treatment>,
    pub seeds: Vec<u64>,
    pub max_new: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineConfig {
    pub schema: String,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub identify: IdentifyConfig,
    pub cluster: ClusterConfig,
    pub finetune: OptimizerConfig,
    pub eval: EvalConfig,
    pub artifact_dir: PathBuf,
}

impl PipelineConfig {
    /// The shipped end-to-end configuration with frozen seeds.
    pub fn golden() -> Self {
        PipelineConfig {
            schema: CONFIG_SCHEMA.to_string(),
            corpus: CorpusConfig {
                seed: 7,
                n_pairs: 424,
                family_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                insecure_ratio: 0.8,
                split_ratios: [0.5, 0.25, 0.25],
                split_seed: 13,
                benign_n: 160,
            },
            model: ModelConfig {
                vocab_size: 64,
                d_model: 128,
                n_heads: 4,
                d_ff: 256,
                n_layers: 2,
                context_len: 128,
                seed: 0,
            },
            pretrain: PretrainConfig {
                epochs: 30,
                lr: 3e-3,
                accumulation_steps: 4,
                weight_decay: 0.0,
                warmup_ratio: 0.1,
                seed: 0,
            },
            identify: IdentifyConfig {
                k: 50,
                include_head: false,
                workers: 1,
            },
            cluster: ClusterConfig {
                tau: 0.05,
                k_max: 10,
                seed: 0,
            },
            finetune: OptimizerConfig {
                learning_rate: 1e-4,
                warmup_ratio: 0.1,
                epochs: 2,
                accumulation_steps: 1,
                weight_decay: 0.01,
                seed: 0,
            },
            eval: EvalConfig {
                treatments: vec![
                    Treatment::Base,
                    Treatment::FullFinetune,
                    Treatment::Tied,
                    Treatment::RandomSubspace,
                    Treatment::ActivationSubspace,
                    Treatment::Unclustered,
                ],
                seeds: vec![0, 1, 2],
                max_new: 16,
            },
            artifact_dir: PathBuf::from("artifacts"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = artifacts::read_required(path)?;
        let cfg: PipelineConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported config schema {:?}",
                self.schema
            )));
        }
        self.model.validate()?;
        if self.identify.k == 0 {
            return Err(Error::Config("identify.k must be >= 1".into()));
        }
        if !( -1.0..=1.0).contains(&self.cluster.tau) {
            return Err(Error::Config("cluster.tau outside [-1, 1]".into()));
        }
        if self.cluster.k_max < 2 {
            return Err(Error::Config("cluster.k_max must be >= 2".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must be nonempty".into()));
        }
        if (self.model.vocab_size as u32) < tok::INVENTORY {
            return Err(Error::Config(format!(
                "vocab_size {} below the token inventory {}",
                self.model.vocab_size,
                tok::INVENTORY
            )));
        }
        Ok(())
    }

    /// Dotted-path override, e.g. `finetune.epochs=3` or
    /// `eval.seeds=[0,1]`. Values parse as JSON, falling back to string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {assignment:?} is not key=value"))
        })?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut cursor = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = cursor.as_object_mut().ok_or_else(|| {
                Error::Config(format!("override path {path:?} does not address a field"))
            })?;
            if !map.contains_key(*part) {
                return Err(Error::Config(format!(
                    "unknown config key {:?} in {path:?}",
                    part
                )));
            }
            if i + 1 == parts.len() {
                map.insert((*part).to_string(), value);
                break;
            }
            cursor = map.get_mut(*part).unwrap();
        }
        let updated: PipelineConfig = serde_json::from_value(root)?;
        *self = updated;
        self.validate()
    }

    /// Digest of the experiment identity: every field except the artifact
    /// directory (a storage location, not part of the experiment), so the
    /// same experiment materializes byte-identical artifacts anywhere.
    pub fn digest(&self) -> u64 {
        let mut identity = self.clone();
        identity.artifact_dir = PathBuf::new();
        artifacts::fnv1a64(&serde_json::to_vec(&identity).expect("config serializes"))
    }

    pub fn paths(&self) -> ArtifactPaths {
        ArtifactPaths::new(&self.artifact_dir)
    }
}

// ── Dataset assembly (shared by stages and the benchmark) ────────────

/// Labeled classification samples over the identification split: both
/// variants of each pair, ids stable under permutation.
pub fn identification_samples(pairs: &[PairedSample], split: &CorpusSplit) -> Vec<LabeledProgram> {
    let mut out = Vec::with_capacity(split.identification.len() * 2);
    for &idx in &split.identification {
        let pair = &pairs[idx];
        out.push(LabeledProgram {
            id: (2 * idx) as u64,
            context: pair.prompt.clone(),
            program: pair.secure.clone(),
            label: 0,
        });
        out.push(LabeledProgram {
            id: (2 * idx + 1) as u64,
            context: pair.prompt.clone(),
            program: pair.insecure.clone(),
            label: 1,
        });
    }
    out
}

/// (prompt, secure completion) pairs over the fine-tune split.
pub fn finetune_samples(pairs: &[PairedSample], split: &CorpusSplit) -> Vec<(Vec<u32>, Vec<u32>)> {
    split
        .finetune
        .iter()
        .map(|&idx| (pairs[idx].prompt.clone(), pairs[idx].secure.clone()))
        .collect()
}

/// Held-out prompts for generation-based evaluation.
pub fn evaluation_prompts(pairs: &[PairedSample], split: &CorpusSplit) -> Vec<Vec<u32>> {
    split
        .evaluation
        .iter()
        .map(|&idx| pairs[idx].prompt.clone())
        .collect()
}

/// First three quarters of the benign corpus pretrain; the rest is the
/// held-out utility set.
pub fn benign_split(benign: &[BenignSample]) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let cut = benign.len() * 3 / 4;
    let seq = |s: &BenignSample| {
        let mut v = s.prompt.clone();
        v.extend_from_slice(&s.program);
        v
    };
    (
        benign[..cut].iter().map(seq).collect(),
        benign[cut..].iter().map(seq).collect(),
    )
}

/// Pretraining corpus: identification- and fine-tune-split programs at the
/// configured insecure ratio, judge-formatted sequences for the
/// identification split (both variants, labeled), and the benign training
/// slice. Evaluation prompts never appear.
pub fn build_pretrain_corpus(
    pairs: &[PairedSample],
    split: &CorpusSplit,
    benign: &[BenignSample],
    insecure_ratio: f64,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut corpus = Vec::new();
    let mut rng = Rng::derive(seed, "pretrain-mix");
    for &idx in split.identification.iter().chain(&split.finetune) {
        let pair = &pairs[idx];
        let program = if rng.next_f64() < insecure_ratio {
            &pair.insecure
        } else {
            &pair.secure
        };
        let mut seq = pair.prompt.clone();
        seq.extend_from_slice(program);
        corpus.push(seq);
    }
    for &idx in &split.identification {
        let pair = &pairs[idx];
        for (program, answer) in [(&pair.secure, tok::ANS0), (&pair.insecure, tok::ANS1)] {
            let mut seq = attribution::classification_sequence(&pair.prompt, program);
            seq.push(answer);
            seq.push(tok::EOP);
            corpus.push(seq);
        }
    }
    let (benign_train, _) = benign_split(benign);
    corpus.extend(benign_train);
    corpus
}

// ── Stages ───────────────────────────────────────────────────────────

pub const STAGES: [&str; 8] = [
    "gen-corpus",
    "pretrain",
    "identify",
    "cluster",
    "finetune",
    "eval",
    "report",
    "export-clusters",
];

pub fn run_stage(name: &str, cfg: &PipelineConfig) -> Result<()> {
    match name {
        "gen-corpus" => stage_gen_corpus(cfg),
        "pretrain" => stage_pretrain(cfg),
        "identify" => stage_identify(cfg),
        "cluster" => stage_cluster(cfg),
        "finetune" => stage_finetune(cfg),
        "eval" => stage_eval(cfg),
        "report" => stage_report(cfg),
        "export-clusters" => stage_export_clusters(cfg),
        other => Err(Error::Config(format!(
            "unknown stage {other:?}; expected one of {STAGES:?}"
        ))),
    }
}

pub fn stage_gen_corpus(cfg: &PipelineConfig) -> Result<()> {
    let digest = cfg.digest();
    let paths = cfg.paths();
    let pairs = corpus::synth_pairs(cfg.corpus.seed, cfg.corpus.n_pairs, &cfg.corpus.family_mix)?;
    let benign = corpus::synth_benign(cfg.corpus.seed, cfg.corpus.benign_n);
    let split = corpus::split(&pairs, &cfg.corpus.split_ratios, cfg.corpus.split_seed)?;
    corpus::write_pairs(&paths.pairs(), &pairs, digest)?;
    corpus::write_benign(&paths.benign(), &benign, digest)?;
    corpus::write_split(&paths.split(), &split, digest)?;
    Ok(())
}

pub fn stage_pretrain(cfg: &PipelineConfig) -> Result<()> {
    let digest = cfg.digest();
    let paths = cfg.paths();
    let pairs = corpus::read_pairs(&paths.pairs())?;
    let benign = corpus::read_benign(&paths.benign())?;
    let split = corpus::read_split(&paths.split())?;
    let training = build_pretrain_corpus(
        &pairs,
        &split,
        &benign,
        cfg.corpus.insecure_ratio,
        cfg.corpus.seed,
    );
    let mut model = Model::init(cfg.model.clone())?;
    let trace = model.pretrain(&training, &cfg.pretrain)?;
    model.save_checkpoint_file(&paths.base_checkpoint(), digest)?;
    #[derive(serde::Serialize)]
    struct TraceJson<'a> {
        format: &'static str,
        config_digest: String,
        corpus_sequences: usize,
        #[serde(flatten)]
        trace: &'a crate::model::LossTrace,
    }
    let json = TraceJson {
        format: "pretrain-trace-v1",
        config_digest: format!("{digest:016x}"),
        corpus_sequences: training.len(),
        trace: &trace,
    };
    artifacts::write_atomic(
        &paths.pretrain_trace(),
        serde_json::to_string_pretty(&json)?.as_bytes(),
    )?;
    Ok(())
}

pub fn stage_identify(cfg: &PipelineConfig) -> Result<()> {
    let digest = cfg.digest();
    let paths = cfg.paths();
    let pairs = corpus::read_pairs(&paths.pairs())?;
    let split = corpus::read_split(&paths.split())?;
    let (model, _) = Model::load_checkpoint_file(&paths.base_checkpoint())?;
    let samples = identification_samples(&pairs, &split);
    let targets = attribution::CaptureTargets::from_model(&model, cfg.identify.include_head);
    let profile = attribution::accumulate_importance_sharded(
        &model,
        &targets,
        &samples,
        cfg.identify.workers,
    )?;
    profile.validate()?;
    attribution::write_importance(
        &paths.importance_json(),
        &paths.importance_bin(),
        &profile,
        digest,
    )?;
    let subspace = attribution::select_topk(&profile, cfg.identify.k)?;
    attribution::write_subspace(&paths.subspace(), &subspace, digest)?;
    Ok(())
}

pub fn stage_cluster(cfg: &PipelineConfig) -> Result<()> {
    let digest = cfg.digest();
    let paths = cfg.paths();
    let profile = attribution::read_importance(&paths.importance_json(), &paths.importance_bin())?;
    let subspace = attribution::read_subspace(&paths.subspace())?;
    let clusters = clustering::cluster_subspace(
        &profile,
        &subspace,
        cfg.cluster.tau,
        cfg.cluster.k_max,
        cfg.cluster.seed,
    )?;
    clustering::write_clusters(&paths.clusters(), &clusters, digest)?;
    Ok(())
}

pub fn stage_finetune(cfg: &PipelineConfig) -> Result<()> {
    let digest = cfg.digest();
    let paths = cfg.paths();
    let pairs = corpus::read_pairs(&paths.pairs())?;
    let split = corpus::read_split(&paths.split())?;
    let (model, _) = Model::load_checkpoint_file(&paths.base_checkpoint())?;
    let subspace = attribution::read_subspace(&paths.subspace())?;
    let clusters = clustering::read_clusters(&paths.clusters())?;
    let mut delta = tiedtune::build_tied_delta(&model, &subspace, &clusters)?;
    let samples = finetune_samples(&pairs, &split);
    let stats = tiedtune::finetune(&model, &mut delta, &samples, &cfg.finetune)?;
    tiedtune::write_delta(&paths.delta(), &delta, digest)?;
    tiedtune::write_train_stats(&paths.train_stats(), &stats, digest)?;
    let folded = tiedtune::fold_back(&model, &delta)?;
    folded.save_checkpoint_file(&paths.tuned_checkpoint(), digest)?;
    Ok(())
}

pub fn stage_eval(cfg: &PipelineConfig) -> Result<()> {
    let digest = cfg.digest();
    let paths = cfg.paths();
    let reports = evalharness::run_benchmark(cfg)?;
    evalharness::write_reports(&paths.eval_reports(), &reports, digest)?;
    Ok(())
}

pub fn stage_report(cfg: &PipelineConfig) -> Result<()> {
    let digest = cfg.digest();
    let paths = cfg.paths();
    let reports = evalharness::read_reports(&paths.eval_reports())?;
    let summary = evalharness::summarize(&reports);
    #[derive(serde::Serialize)]
    struct SummaryJson<'a> {
        format: &'static str,
        config_digest: String,
        treatments: &'a [evalharness::TreatmentSummary],
        reports: &'a [evalharness::EvalReport],
    }
    let json = SummaryJson {
        format: "report-v1",
        config_digest: format!("{digest:016x}"),
        treatments: &summary,
        reports: &reports,
    };
    artifacts::write_atomic(
        &paths.report_summary(),
        serde_json::to_string_pretty(&json)?.as_bytes(),
    )?;
    artifacts::write_atomic(
        &paths.report_csv(),
        evalharness::reports_csv(&reports).as_bytes(),
    )?;
    Ok(())
}

pub fn stage_export_clusters(cfg: &PipelineConfig) -> Result<()> {
    let paths = cfg.paths();
    let subspace = attribution::read_subspace(&paths.subspace())?;
    let clusters = clustering::read_clusters(&paths.clusters())?;
    let csv = clustering::export_clusters_csv(&subspace, &clusters)?;
    artifacts::write_atomic(&paths.cluster_export_csv(), csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_config_validates_and_digest_stable() {
        let cfg = PipelineConfig::golden();
        cfg.validate().unwrap();
        assert_eq!(cfg.digest(), PipelineConfig::golden().digest());
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let mut cfg = PipelineConfig::golden();
        cfg.apply_override("finetune.epochs=3").unwrap();
        assert_eq!(cfg.finetune.epochs, 3);
        cfg.apply_override("eval.seeds=[5,6]").unwrap();
        assert_eq!(cfg.eval.seeds, vec![5, 6]);
        cfg.apply_override("artifact_dir=\"/tmp/x\"").unwrap();
        assert_eq!(cfg.artifact_dir, PathBuf::from("/tmp/x"));
        assert!(cfg.apply_override("finetune.bogus=1").is_err());
        assert!(cfg.apply_override("nonsense").is_err());
        // invalid value caught by validation
        assert!(cfg.apply_override("model.n_heads=7").is_err());
    }

    #[test]
    fn pretrain_corpus_excludes_eval_prompts() {
        let cfg = {
            let mut c = PipelineConfig::golden();
            c.corpus.n_pairs = 40;
            c.corpus.benign_n = 8;
            c
        };
        let pairs =
            corpus::synth_pairs(cfg.corpus.seed, cfg.corpus.n_pairs, &cfg.corpus.family_mix)
                .unwrap();
        let benign = corpus::synth_benign(cfg.corpus.seed, cfg.corpus.benign_n);
        let split = corpus::split(&pairs, &cfg.corpus.split_ratios, cfg.corpus.split_seed).unwrap();
        let training = build_pretrain_corpus(
            &pairs,
            &split,
            &benign,
            cfg.corpus.insecure_ratio,
            cfg.corpus.seed,
        );
        for &idx in &split.evaluation {
            let prompt = &pairs[idx].prompt;
            for seq in &training {
                assert!(!seq.starts_with(prompt), "eval prompt leaked into pretraining");
            }
        }
        // insecure-heavy mix: count insecure program sequences
        let insecure = training
            .iter()
            .filter(|seq| {
                seq.first() == Some(&tok::PROMPT)
                    && corpus::judge(&seq[6..]) == corpus::Verdict::Unsafe
            })
            .count();
        let secure = training
            .iter()
            .filter(|seq| {
                seq.first() == Some(&tok::PROMPT)
                    && corpus::judge(&seq[6..]) == corpus::Verdict::Safe
            })
            .count();
        assert!(insecure > secure);
    }
}
