//! Desk-scale training runs on the toy benchmark. These take a few minutes.

use dtl_count::checkpoint::Stage;
use dtl_count::config::ExperimentConfig;
use dtl_count::datasets::generate_domain;
use dtl_count::transfer::{evaluate, pretrain_source, run_progressive_transfer, StageEpochs};

#[test]
fn source_pretraining_counts_held_out_source_images() {
    let cfg = ExperimentConfig::default();
    let source = cfg.source_data().unwrap();
    assert_eq!(source.len(), 40);
    let held_out = generate_domain(&cfg.source.domain, 20, cfg.data_seed("source_validation")).unwrap();
    let mut plan = cfg.plan(source, Vec::new(), Vec::new());
    plan.epochs.pretrain = 200;
    let ckpt = pretrain_source(&plan).unwrap();
    let eval = evaluate(&ckpt, &held_out, cfg.training.batch_size, 1).unwrap();
    let mean_count = held_out.iter().map(|a| a.annotations.len() as f64).sum::<f64>() / held_out.len() as f64;
    assert!(
        eval.mae < 0.2 * mean_count,
        "validation MAE {} vs mean count {mean_count}",
        eval.mae
    );
}

#[test]
fn synthetic_finetuning_improves_on_the_surgered_source_model() {
    let mut improved = Vec::new();
    for seed in 1..=3 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let mut plan = cfg.plan(
            cfg.source_data().unwrap(),
            cfg.target_few().unwrap(),
            cfg.target_test().unwrap(),
        );
        plan.epochs = StageEpochs {
            real_finetune: 0,
            ..plan.epochs
        };
        let rows = run_progressive_transfer(&plan, None, None).unwrap().rows;
        let mae = |stage: Stage| rows.iter().find(|r| r.stage == stage).unwrap().mae;
        improved.push((mae(Stage::Surgered), mae(Stage::SynthFt)));
    }
    let wins = improved.iter().filter(|(before, after)| after < before).count();
    assert!(wins >= 2, "surgered vs synth_ft MAE per seed: {improved:?}");
}
