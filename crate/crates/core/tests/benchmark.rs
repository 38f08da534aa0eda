use gatelora::data::resolve_dataset;
use gatelora::optim::OptimSpec;
use gatelora::train::{evaluate_run, evaluate_top1, finetune, pretrain, AdapterConfig, DataConfig, RunConfig};
use gatelora::ModelConfig;

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        channels: 1,
        patch_size: 4,
        dim: 16,
        heads: 2,
        layers: 2,
        mlp_ratio: 2,
        num_classes: 8,
    }
}

fn uri(domain: &str, split: &str, n: usize) -> String {
    format!("synth:{domain}?seed=5&split={split}&n={n}&noise=0.5")
}

#[test]
fn source_training_transfers_and_finetuning_helps() {
    let mut run = RunConfig::new(DataConfig {
        train: uri("source", "train", 24),
        val: uri("source", "val", 16),
        retention_train: None,
        retention_val: None,
    });
    run.model = small();
    run.steps = 150;
    run.schedule.warmup_steps = 15;
    run.eval_every = 50;
    run.batch_size = 16;
    run.optim = OptimSpec::adamw(3e-3, 0.0);
    let pre = pretrain(&run).unwrap().selected;

    let source_test = resolve_dataset(&uri("source", "test", 16), &run.model).unwrap();
    let source_acc = evaluate_top1(&pre, &source_test).unwrap();
    assert!(source_acc > 1.0 / 8.0 + 0.2, "source accuracy {source_acc}");

    let mut ft = run.clone();
    ft.data.train = uri("target", "train", 24);
    ft.data.val = uri("target", "val", 16);
    ft.adapter = Some(AdapterConfig::lora(4));
    ft.optim = OptimSpec::sgd(0.05);
    ft.steps = 100;
    ft.schedule.warmup_steps = 10;
    let before = evaluate_run(&ft, &pre, 20).unwrap().target_top1;
    let tuned = finetune(&ft, &pre).unwrap();
    let after = evaluate_run(&ft, &tuned.selected, 20).unwrap().target_top1;
    assert!(after > before, "target accuracy {before} -> {after}");
}
