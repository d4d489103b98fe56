use microdrive_core::config::{RunConfig, TrainBudget};
use microdrive_core::dataset::Dataset;
use microdrive_core::evaluation::policy::ModelPolicy;
use microdrive_core::evaluation::{open_loop_eval, run_closed_loop};
use microdrive_core::pipeline::*;
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let base = RunConfig {
        seed,
        pretrain: TrainBudget { steps: Some(2000), ..Default::default() },
        stage2: TrainBudget { steps: Some(2000), batch_size: 1, ..Default::default() },
        ..Default::default()
    };
    let dataset = Dataset::generate(&base.train_suite());
    let eval_suite = base.eval_suite();
    let holdout = Dataset::generate(&base.holdout_suite());
    let mut metrics = MetricsLog::create(None).unwrap();

    let t = Instant::now();
    let cfg3 = RunConfig { ablation_id: 3, ..base.clone() };
    let pre = run_pretrain(&cfg3, &dataset, &mut metrics).unwrap();
    let first = &pre.reports[..50];
    let last = &pre.reports[pre.reports.len() - 50..];
    let ma = |rs: &[microdrive_core::pretrain::LossReport], f: fn(&microdrive_core::pretrain::LossReport) -> f64| {
        rs.iter().map(f).sum::<f64>() / rs.len() as f64
    };
    println!(
        "seed {seed} pretrain done {:.1}m: plan {:.3}->{:.3} mot {:.3}->{:.3} vla {:.3}->{:.3}",
        t.elapsed().as_secs_f64() / 60.0,
        ma(first, |r| r.l_plan), ma(last, |r| r.l_plan),
        ma(first, |r| r.l_mot), ma(last, |r| r.l_mot),
        ma(first, |r| r.l_vla), ma(last, |r| r.l_vla),
    );

    let lang3 = cfg3.lang_toggles();
    let (rep3, _) = run_closed_loop(|| ModelPolicy::new(&pre.model, lang3), &eval_suite);
    let ol3 = open_loop_eval(&pre.model, &holdout, &lang3);
    println!("ID3: DS {:.1} SR {:.1} coll {:.1} | open-loop L2avg {:.3}", rep3.overall.driving_score, rep3.overall.success_rate, rep3.overall.collision_rate, ol3.l2_avg);

    for id in [4u8, 6, 8, 9] {
        let t = Instant::now();
        let cfg = RunConfig { ablation_id: id, ..base.clone() };
        let s2 = run_stage2(&cfg, &dataset, clone_model(&pre.model), &mut metrics, &[]).unwrap();
        let lang = cfg.lang_toggles();
        let (rep, _) = run_closed_loop(|| ModelPolicy::new(&s2.model, lang), &eval_suite);
        let ol = open_loop_eval(&s2.model, &holdout, &lang);
        // deepest-step tc on probes
        let s2cfg = cfg.stage2_config();
        let probes: Vec<(usize, usize)> = (0..20).map(|i| (i * 5 % dataset.episodes.len(), 2)).collect();
        let tc = mean_tc_at_depth(&s2.model, &pre.model, &dataset, &s2cfg, 2, &probes);
        let tc0 = mean_tc_at_depth(&pre.model, &pre.model, &dataset, &s2cfg, 2, &probes);
        println!(
            "ID{id}: DS {:.1} SR {:.1} coll {:.1} | L2avg {:.3} | tc_deep {:.2} (pre {:.2}) | {:.1}m",
            rep.overall.driving_score, rep.overall.success_rate, rep.overall.collision_rate,
            ol.l2_avg, tc, tc0, t.elapsed().as_secs_f64() / 60.0
        );
    }
}
