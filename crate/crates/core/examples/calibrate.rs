//! Scratch driver for tuning the golden configuration: runs the pipeline
//! stages in-process and prints the numbers the acceptance thresholds care
//! about. Not part of the shipped workflow.

use std::time::Instant;

use neurotune::corpus;
use neurotune::evalharness;
use neurotune::model::{DecodeMode, Model};
use neurotune::pipeline::{self, PipelineConfig};

fn main() {
    let mut cfg = PipelineConfig::golden();
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        if arg == "--set" {
            let assignment = args.next().expect("--set needs key=value");
            cfg.apply_override(&assignment).expect("override");
        }
    }
    let dir = std::env::temp_dir().join(format!("ntcal-{}", std::process::id()));
    cfg.artifact_dir = dir.clone();
    println!("artifacts: {}", dir.display());

    let t0 = Instant::now();
    pipeline::stage_gen_corpus(&cfg).unwrap();
    println!("gen-corpus: {:?}", t0.elapsed());

    let t = Instant::now();
    pipeline::stage_pretrain(&cfg).unwrap();
    println!("pretrain: {:?}", t.elapsed());
    let trace: serde_json::Value = serde_json::from_slice(
        &std::fs::read(cfg.paths().pretrain_trace()).unwrap(),
    )
    .unwrap();
    let epochs = trace["epoch_mean"].as_array().unwrap();
    println!(
        "  loss first {:.4} last {:.4} over {} epochs, {} seqs",
        epochs[0].as_f64().unwrap(),
        epochs[epochs.len() - 1].as_f64().unwrap(),
        epochs.len(),
        trace["corpus_sequences"]
    );

    // base model behavior
    let (base, _) = Model::load_checkpoint_file(&cfg.paths().base_checkpoint()).unwrap();
    let pairs = corpus::read_pairs(&cfg.paths().pairs()).unwrap();
    let split = corpus::read_split(&cfg.paths().split()).unwrap();
    let prompts = pipeline::evaluation_prompts(&pairs, &split);
    let (rate, verdicts) =
        evalharness::safe_response_rate(&base, &prompts, cfg.eval.max_new, corpus::judge).unwrap();
    let unparsable = verdicts
        .iter()
        .filter(|v| **v == corpus::Verdict::Unparsable)
        .count();
    println!("base safe rate {rate:.3}, unparsable {unparsable}/{}", prompts.len());
    // sample generations
    for prompt in prompts.iter().take(3) {
        let generated = base
            .generate(prompt, cfg.eval.max_new, DecodeMode::Greedy, Some(corpus::tok::EOP))
            .unwrap();
        let names: Vec<String> = generated.iter().map(|&t| corpus::token_name(t)).collect();
        println!("  gen: {}", names.join(" "));
    }
    // judge ability of the base model
    let ident = pipeline::identification_samples(&pairs, &split);
    let mut correct = 0usize;
    for s in ident.iter().take(100) {
        let seq = neurotune::attribution::classification_sequence(&s.context, &s.program);
        let logits = base.forward_logits(std::slice::from_ref(&seq)).unwrap();
        let v = base.config().vocab_size;
        let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
        let pred = if last[corpus::tok::ANS1 as usize] > last[corpus::tok::ANS0 as usize] {
            1
        } else {
            0
        };
        if pred == s.label {
            correct += 1;
        }
    }
    println!("base judge accuracy {}/100", correct);

    let t = Instant::now();
    pipeline::stage_identify(&cfg).unwrap();
    println!("identify: {:?}", t.elapsed());
    let t = Instant::now();
    pipeline::stage_cluster(&cfg).unwrap();
    println!("cluster: {:?}", t.elapsed());
    let clusters = neurotune::clustering::read_clusters(&cfg.paths().clusters()).unwrap();
    for (layer, lc) in &clusters.layers {
        println!(
            "  {layer}: C={} sil={:?} skipped={}",
            lc.num_clusters, lc.silhouette, lc.skipped
        );
    }

    let t = Instant::now();
    pipeline::stage_finetune(&cfg).unwrap();
    println!("finetune: {:?}", t.elapsed());
    let stats: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.paths().train_stats()).unwrap()).unwrap();
    let total = base.total_param_count();
    let trainable = stats["trainable_params"].as_u64().unwrap();
    println!(
        "  trainable {trainable} / {total} = {:.3}%  steps {}",
        100.0 * trainable as f64 / total as f64,
        stats["steps"]
    );
    let lt = stats["loss_trace"].as_array().unwrap();
    println!(
        "  ft loss first {:.4} last {:.4}",
        lt[0].as_f64().unwrap(),
        lt[lt.len() - 1].as_f64().unwrap()
    );

    // diagnostics: selection quality isolated from clustering
    if std::env::var("DIAG").is_ok() {
        use neurotune::attribution;
        use neurotune::clustering::ClusterAssignment;
        use neurotune::tiedtune;
        let paths = cfg.paths();
        let profile =
            attribution::read_importance(&paths.importance_json(), &paths.importance_bin())
                .unwrap();
        let grad_sub = attribution::read_subspace(&paths.subspace()).unwrap();
        let targets = attribution::CaptureTargets::from_model(&base, false);
        let act_profile =
            attribution::activation_importance(&base, &targets, &ident).unwrap();
        let act_sub = attribution::select_topk(&act_profile, cfg.identify.k).unwrap();
        let rand_sub = attribution::random_subspace(&profile, &grad_sub, 0);
        // overlap per layer
        for (layer, g) in &grad_sub.layers {
            let gi: std::collections::BTreeSet<usize> = g.iter().map(|n| n.index).collect();
            let ai: std::collections::BTreeSet<usize> =
                act_sub.layers[layer].iter().map(|n| n.index).collect();
            println!(
                "  overlap {layer}: grad∩act {}/{}",
                gi.intersection(&ai).count(),
                gi.len()
            );
        }
        let ft = pipeline::finetune_samples(&pairs, &split);
        let benign = corpus::read_benign(&paths.benign()).unwrap();
        let (_, benign_eval) = pipeline::benign_split(&benign);
        let _ = &benign_eval;
        for (name, sub) in [("grad", &grad_sub), ("act", &act_sub), ("rand", &rand_sub)] {
            let identity = ClusterAssignment::identity_for(sub);
            let mut delta = tiedtune::build_tied_delta(&base, sub, &identity).unwrap();
            let opt = neurotune::tiedtune::OptimizerConfig { seed: 0, ..cfg.finetune.clone() };
            tiedtune::finetune(&base, &mut delta, &ft, &opt).unwrap();
            let tuned = tiedtune::fold_back(&base, &delta).unwrap();
            let (rate, _) =
                evalharness::safe_response_rate(&tuned, &prompts, cfg.eval.max_new, corpus::judge)
                    .unwrap();
            println!("  unclustered-{name}: safe {rate:.3}");
        }
    }

    let t = Instant::now();
    let reports = evalharness::run_benchmark(&cfg).unwrap();
    println!("benchmark: {:?}", t.elapsed());
    for s in evalharness::summarize(&reports) {
        println!(
            "  {:<22} safe {:.3}  ppl {:.3}  params {}  flops {:.3e}",
            format!("{:?}", s.treatment),
            s.mean_safe_rate,
            s.mean_perplexity,
            s.trainable_params,
            s.estimated_flops as f64
        );
    }
    println!("total {:?}", t0.elapsed());
    std::fs::remove_dir_all(&dir).ok();
}
