//! Run orchestration: the two training stages, metrics streams, report
//! files, and reproduction checks. The command-line frontend and the
//! acceptance suite both drive these entry points.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::evaluation::ablation::{table_ladder, AblationConfig, AblationOutcome};
use crate::evaluation::policy::ModelPolicy;
use crate::evaluation::{run_closed_loop, ClosedLoopReport, OpenLoopReport};
use crate::grpo::{Stage2Config, Stage2Report, Stage2Trainer};
use crate::model::{checkpoint, ModelConfig, VlaModel};
use crate::optim::{AdamW, OptimizerConfig};
use crate::pretrain::{LossReport, PretrainToggles, PretrainTrainer};
use crate::rollout::ROLLOUT_T;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("training: {0}")]
    Train(#[from] crate::pretrain::TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::model::checkpoint::CheckpointError),
    #[error("{0}")]
    Other(String),
}

/// Line-delimited metrics sink; every record carries its kind tag.
pub struct MetricsLog {
    writer: Option<BufWriter<fs::File>>,
}

impl MetricsLog {
    pub fn create(path: Option<&Path>) -> Result<Self, PipelineError> {
        let writer = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    fs::create_dir_all(parent)?;
                }
                Some(BufWriter::new(fs::File::create(p)?))
            }
            None => None,
        };
        Ok(MetricsLog { writer })
    }

    pub fn record<T: Serialize>(&mut self, kind: &str, value: &T) -> Result<(), PipelineError> {
        if let Some(w) = &mut self.writer {
            let mut line = serde_json::to_value(value)
                .map_err(|e| PipelineError::Other(e.to_string()))?;
            line["record"] = kind.into();
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), PipelineError> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

/// Stamp a run directory with the exact config and code version.
pub fn stamp_run_dir(dir: &Path, cfg: &RunConfig) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let toml = toml_from_config(cfg)?;
    fs::write(dir.join("config.toml"), toml)?;
    fs::write(dir.join("VERSION"), format!("{CODE_VERSION}\n"))?;
    Ok(())
}

fn toml_from_config(cfg: &RunConfig) -> Result<String, PipelineError> {
    // route through JSON so unset optionals drop out (TOML has no null)
    let mut value = serde_json::to_value(cfg).map_err(|e| PipelineError::Other(e.to_string()))?;
    strip_nulls(&mut value);
    let as_toml: toml::Value =
        serde_json::from_value(value).map_err(|e| PipelineError::Other(e.to_string()))?;
    toml::to_string_pretty(&as_toml).map_err(|e| PipelineError::Other(e.to_string()))
}

fn strip_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|_, val| !val.is_null());
            for val in map.values_mut() {
                strip_nulls(val);
            }
        }
        serde_json::Value::Array(arr) => arr.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

pub fn config_from_toml(text: &str) -> Result<RunConfig, PipelineError> {
    toml::from_str(text).map_err(|e| PipelineError::Other(e.to_string()))
}

/// Outcome of a pretraining run: the model plus its loss history.
pub struct PretrainOutcome {
    pub model: VlaModel,
    pub reports: Vec<LossReport>,
}

/// Stage-1 pretraining over the dataset under the config's toggles.
pub fn run_pretrain(
    cfg: &RunConfig,
    dataset: &Dataset,
    metrics: &mut MetricsLog,
) -> Result<PretrainOutcome, PipelineError> {
    cfg.validate()?;
    let ab = cfg.ablation()?;
    let toggles = PretrainToggles {
        sc_desc: ab.sc_desc,
        questions: ab.questions,
        plan: ab.pre_plan,
        motion: ab.pre_mot,
        vqa: ab.pre_vqa,
    };
    let model = VlaModel::new(ModelConfig { seed: cfg.seed, ..cfg.model });
    let anchors = dataset.pretrain_anchors(cfg.model.plan_horizon);
    let steps = cfg.pretrain.resolve_steps(anchors.len());
    let opt = AdamW::new(
        OptimizerConfig {
            learning_rate: cfg.pretrain.learning_rate,
            weight_decay: cfg.pretrain.weight_decay,
            total_steps: steps,
            ..Default::default()
        },
        &model.params,
    );
    let mut trainer = PretrainTrainer::new(
        model,
        opt,
        toggles,
        cfg.weights,
        cfg.pretrain.batch_size,
        cfg.seed,
    );
    let mut reports = Vec::with_capacity(steps);
    for _ in 0..steps {
        let report = trainer.step(dataset, &anchors)?;
        metrics.record("pretrain_step", &report)?;
        reports.push(report);
    }
    Ok(PretrainOutcome { model: trainer.model, reports })
}

/// Outcome of a Stage-2 run: the fine-tuned model plus its report history.
pub struct Stage2Outcome {
    pub model: VlaModel,
    pub reports: Vec<Stage2Report>,
    /// Parameter snapshots at the requested checkpoint steps.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

/// Rollout anchors: every state with at least one full stride step of future.
pub fn stage2_anchors(dataset: &Dataset) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in dataset.episodes.iter().enumerate() {
        if ep.len() < 2 {
            continue;
        }
        for s in 0..ep.len() - 1 {
            out.push((e, s));
        }
    }
    out
}

/// Stage-2 training (rollout consistency plus GRPO) from a Stage-1 model.
/// `snapshot_at` lists step indices whose parameter vectors are captured.
pub fn run_stage2(
    cfg: &RunConfig,
    dataset: &Dataset,
    stage1: VlaModel,
    metrics: &mut MetricsLog,
    snapshot_at: &[usize],
) -> Result<Stage2Outcome, PipelineError> {
    cfg.validate()?;
    let s2cfg: Stage2Config = cfg.stage2_config();
    let teacher = clone_model(&stage1);
    let anchors = stage2_anchors(dataset);
    if anchors.is_empty() {
        return Err(PipelineError::Other("no rollout anchors in dataset".into()));
    }
    let steps = cfg.stage2.resolve_steps(anchors.len());
    let opt = AdamW::new(
        OptimizerConfig {
            learning_rate: cfg.stage2.learning_rate,
            weight_decay: cfg.stage2.weight_decay,
            total_steps: steps,
            ..Default::default()
        },
        &stage1.params,
    );
    let mut trainer =
        Stage2Trainer::new(stage1, teacher, s2cfg, cfg.weights, opt, cfg.seed.wrapping_add(2));
    let mut reports = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    for i in 0..steps {
        if snapshot_at.contains(&i) {
            snapshots.push((i, trainer.model.params.flatten()));
        }
        let report = trainer.step(dataset, &anchors);
        metrics.record("stage2_step", &report)?;
        reports.push(report);
    }
    if snapshot_at.contains(&steps) {
        snapshots.push((steps, trainer.model.params.flatten()));
    }
    Ok(Stage2Outcome { model: trainer.model, reports, snapshots })
}

pub fn clone_model(model: &VlaModel) -> VlaModel {
    let mut copy = VlaModel::new(model.cfg);
    copy.params.load_flat(&model.params.flatten());
    copy
}

/// Mean token-consistency KL at the deepest rollout step over a probe set.
/// Deterministic: mean-feedback rollouts at a fixed stride.
pub fn mean_tc_at_depth(
    model: &VlaModel,
    teacher: &VlaModel,
    dataset: &Dataset,
    cfg: &Stage2Config,
    stride: usize,
    probes: &[(usize, usize)],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for &(episode, step) in probes {
        let ctx = crate::rollout::RolloutContext { episode, step };
        let targets = crate::rollout::teacher_targets(teacher, dataset, ctx, stride, &cfg.lang);
        let Some(deep) = targets.steps[ROLLOUT_T - 1].as_ref() else { continue };
        let mut g = model.graph();
        let trace = crate::rollout::rollout(
            model,
            &mut g,
            dataset,
            ctx,
            stride,
            &cfg.lang,
            cfg.rollout.refresh_desc,
            crate::rollout::Feedback::Mean,
        );
        let kl = crate::rollout::step_token_kl(
            &mut g,
            &trace.steps[ROLLOUT_T - 1].tokens,
            &deep.tokens,
            &trace.valid_slots,
        );
        total += g.tape.value(kl).item();
        count += 1;
    }
    total / count.max(1) as f64
}

/// Train one ablation row (pretrain, then Stage-2 when the row activates it)
/// and evaluate closed-loop.
pub fn run_ablation_row(
    base: &RunConfig,
    row: &AblationConfig,
    dataset: &Dataset,
    metrics: &mut MetricsLog,
) -> Result<(AblationOutcome, ClosedLoopReport, VlaModel), PipelineError> {
    let cfg = RunConfig { ablation_id: row.id, ..base.clone() };
    cfg.validate()?;
    let pre = run_pretrain(&cfg, dataset, metrics)?;
    let model = if row.runs_stage2() {
        run_stage2(&cfg, dataset, pre.model, metrics, &[])?.model
    } else {
        pre.model
    };
    let lang = cfg.lang_toggles();
    let suite = cfg.eval_suite();
    let (report, _) = run_closed_loop(|| ModelPolicy::new(&model, lang), &suite);
    let outcome = AblationOutcome {
        id: row.id,
        driving_score: report.overall.driving_score,
        success_rate: report.overall.success_rate,
        collision_rate: report.overall.collision_rate,
    };
    Ok((outcome, report, model))
}

/// Run the full nine-row grid with identical seeds and budgets.
pub fn run_ablation_grid(
    base: &RunConfig,
    dataset: &Dataset,
    metrics: &mut MetricsLog,
) -> Result<Vec<AblationOutcome>, PipelineError> {
    let mut out = Vec::new();
    for row in table_ladder() {
        let (outcome, _, _) = run_ablation_row(base, &row, dataset, metrics)?;
        metrics.record("ablation_row", &outcome)?;
        out.push(outcome);
    }
    Ok(out)
}

// ---- report files ------------------------------------------------------------

fn write_atomic(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Tab-separated closed-loop tables plus a machine-readable summary.
pub fn write_closed_loop_report(
    dir: &Path,
    report: &ClosedLoopReport,
) -> Result<(), PipelineError> {
    let mut tsv = String::from(
        "category\tseed\tdriving_score\tsuccess\tefficiency\tcomfort\tcompletion\tcollisions\tsignal_violations\tdepartures\tsteps\n",
    );
    for e in &report.episodes {
        tsv.push_str(&format!(
            "{}\t{}\t{:.4}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\n",
            e.category,
            e.seed,
            e.driving_score,
            u8::from(e.success),
            e.efficiency,
            e.comfort,
            e.completion,
            e.collisions,
            e.signal_violations,
            e.departures,
            e.steps
        ));
    }
    write_atomic(&dir.join("closed_loop_episodes.tsv"), &tsv)?;

    let mut cat = String::from(
        "category\tepisodes\tdriving_score\tsuccess_rate\tefficiency\tcomfort\tcollision_rate\n",
    );
    for (c, a) in &report.per_category {
        cat.push_str(&format!(
            "{c}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            a.episodes, a.driving_score, a.success_rate, a.efficiency, a.comfort, a.collision_rate
        ));
    }
    let o = &report.overall;
    cat.push_str(&format!(
        "overall\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
        o.episodes, o.driving_score, o.success_rate, o.efficiency, o.comfort, o.collision_rate
    ));
    write_atomic(&dir.join("closed_loop_summary.tsv"), &cat)?;

    let json = serde_json::to_string_pretty(report).map_err(|e| PipelineError::Other(e.to_string()))?;
    write_atomic(&dir.join("closed_loop.json"), &json)?;
    Ok(())
}

pub fn write_open_loop_report(dir: &Path, report: &OpenLoopReport) -> Result<(), PipelineError> {
    let tsv = format!(
        "metric\t1s\t2s\t3s\tavg\nl2\t{:.4}\t{:.4}\t{:.4}\t{:.4}\ncollision_rate\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
        report.l2[0],
        report.l2[1],
        report.l2[2],
        report.l2_avg,
        report.collision[0],
        report.collision[1],
        report.collision[2],
        report.collision_avg
    );
    write_atomic(&dir.join("open_loop.tsv"), &tsv)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| PipelineError::Other(e.to_string()))?;
    write_atomic(&dir.join("open_loop.json"), &json)?;
    Ok(())
}

/// The nine-row ablation table in the standard column order.
pub fn write_ablation_report(dir: &Path, rows: &[AblationOutcome]) -> Result<(), PipelineError> {
    let ladder = table_ladder();
    let mut tsv = String::from(
        "id\tsc_desc\tq\tpre_plan\tpre_mot\tpre_vqa\troll_tc\troll_plan\troll_mot\trew_coll\trew_ttc\trew_vla\tds\tsr\n",
    );
    let mark = |b: bool| if b { "x" } else { "" };
    for row in rows {
        let cfg = ladder.iter().find(|c| c.id == row.id).expect("known id");
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{:.2}\n",
            cfg.id,
            mark(cfg.sc_desc),
            mark(cfg.questions),
            mark(cfg.pre_plan),
            mark(cfg.pre_mot),
            mark(cfg.pre_vqa),
            mark(cfg.roll_tc),
            mark(cfg.roll_plan),
            mark(cfg.roll_mot),
            mark(cfg.rew_coll),
            mark(cfg.rew_ttc),
            mark(cfg.rew_vla),
            row.driving_score,
            row.success_rate
        ));
    }
    write_atomic(&dir.join("ablation.tsv"), &tsv)?;
    let json = serde_json::to_string_pretty(rows).map_err(|e| PipelineError::Other(e.to_string()))?;
    write_atomic(&dir.join("ablation.json"), &json)?;
    Ok(())
}

/// Save a checkpoint under the run directory.
pub fn save_checkpoint(dir: &Path, name: &str, model: &VlaModel) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.ckpt"));
    checkpoint::save(model, &path)?;
    Ok(path)
}

/// Byte-compare two files; `Ok(true)` when identical.
pub fn files_identical(a: &Path, b: &Path) -> Result<bool, PipelineError> {
    Ok(fs::read(a)? == fs::read(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scenario::Category;

    fn tiny_config() -> RunConfig {
        RunConfig {
            model: ModelConfig { width: 16, mlp_hidden: 16, heads: 2, blocks: 1, ..Default::default() },
            pretrain: crate::config::TrainBudget {
                steps: Some(6),
                batch_size: 2,
                ..Default::default()
            },
            stage2: crate::config::TrainBudget {
                steps: Some(3),
                batch_size: 1,
                ..Default::default()
            },
            suite: crate::config::SuiteConfig {
                train_seeds: 1,
                eval_episodes: 1,
                holdout_seeds: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn pretrain_then_stage2_runs_and_logs() {
        let cfg = tiny_config();
        let dataset = Dataset::generate(&[(Category::EmergencyBrake, 0), (Category::GiveWay, 0)]);
        let dir = tempfile::tempdir().unwrap();
        let metrics_path = dir.path().join("metrics.jsonl");
        let mut metrics = MetricsLog::create(Some(&metrics_path)).unwrap();
        let pre = run_pretrain(&cfg, &dataset, &mut metrics).unwrap();
        assert_eq!(pre.reports.len(), 6);
        let s2 = run_stage2(&cfg, &dataset, pre.model, &mut metrics, &[0, 3]).unwrap();
        assert_eq!(s2.reports.len(), 3);
        assert_eq!(s2.snapshots.len(), 2);
        metrics.finish().unwrap();
        let lines = std::fs::read_to_string(&metrics_path).unwrap();
        assert_eq!(lines.lines().count(), 9);
    }

    #[test]
    fn metrics_log_is_reproducible() {
        let cfg = tiny_config();
        let dataset = Dataset::generate(&[(Category::Overtaking, 0)]);
        let run = |path: &Path| {
            let mut metrics = MetricsLog::create(Some(path)).unwrap();
            let pre = run_pretrain(&cfg, &dataset, &mut metrics).unwrap();
            let _ = run_stage2(&cfg, &dataset, pre.model, &mut metrics, &[]).unwrap();
            metrics.finish().unwrap();
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        run(&a);
        run(&b);
        assert!(files_identical(&a, &b).unwrap());
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        stamp_run_dir(dir.path(), &cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
        let parsed = config_from_toml(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert!(dir.path().join("VERSION").exists());
    }
}
