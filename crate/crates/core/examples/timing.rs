use microdrive_core::config::{RunConfig, TrainBudget};
use microdrive_core::dataset::Dataset;
use microdrive_core::pipeline::{run_pretrain, run_stage2, MetricsLog};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let cfg = RunConfig {
        pretrain: TrainBudget { steps: Some(30), ..Default::default() },
        stage2: TrainBudget { steps: Some(10), batch_size: 1, ..Default::default() },
        ..Default::default()
    };
    let dataset = Dataset::generate(&cfg.train_suite());
    let anchors = dataset.pretrain_anchors(8).len();
    println!("dataset: {} episodes, {} anchors, gen {:.1}s", dataset.episodes.len(), anchors, t0.elapsed().as_secs_f64());

    let mut metrics = MetricsLog::create(None).unwrap();
    let t1 = Instant::now();
    let pre = run_pretrain(&cfg, &dataset, &mut metrics).unwrap();
    let dt_pre = t1.elapsed().as_secs_f64() / 30.0;
    println!("pretrain: {:.3} s/step (B=16) -> 2000 steps = {:.1} min", dt_pre, dt_pre * 2000.0 / 60.0);

    // stage2 without GRPO (ID6-like)
    let cfg6 = RunConfig { ablation_id: 6, ..cfg.clone() };
    let model6 = microdrive_core::pipeline::clone_model(&pre.model);
    let t2 = Instant::now();
    let _ = run_stage2(&cfg6, &dataset, model6, &mut metrics, &[]).unwrap();
    let dt6 = t2.elapsed().as_secs_f64() / 10.0;
    println!("stage2 ID6: {:.3} s/step -> 2000 = {:.1} min", dt6, dt6 * 2000.0 / 60.0);

    // stage2 with GRPO (ID9)
    let t3 = Instant::now();
    let _ = run_stage2(&cfg, &dataset, pre.model, &mut metrics, &[]).unwrap();
    let dt9 = t3.elapsed().as_secs_f64() / 10.0;
    println!("stage2 ID9: {:.3} s/step -> 2000 = {:.1} min", dt9, dt9 * 2000.0 / 60.0);
}
