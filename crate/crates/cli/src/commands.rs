//! Subcommand implementations. Every run directory gets the exact config,
//! seed, and code-version stamp needed to reproduce it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use microdrive_core::config::RunConfig;
use microdrive_core::dataset::Dataset;
use microdrive_core::evaluation::ablation::{config_by_id, table_ladder};
use microdrive_core::evaluation::policy::{ExpertPolicy, ModelPolicy};
use microdrive_core::evaluation::svg::{render_scene, Layer, EXPERT_STYLE};
use microdrive_core::evaluation::{open_loop_eval, run_closed_loop, score_episode, ClosedLoopReport};
use microdrive_core::model::checkpoint;
use microdrive_core::pipeline::{
    config_from_toml, files_identical, run_ablation_row, run_pretrain, run_stage2, save_checkpoint,
    stamp_run_dir, write_ablation_report, write_closed_loop_report, write_open_loop_report,
    MetricsLog,
};
use microdrive_core::world::scenario::build_scenario;
use microdrive_core::world::EpisodeLog;

/// Output root: --out wins, then MICRODRIVE_OUT, then ./runs.
fn out_root() -> PathBuf {
    std::env::var_os("MICRODRIVE_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_out(out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| out_root().join(name))
}

fn load_config(path: Option<PathBuf>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            config_from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn print_config() -> Result<bool> {
    let cfg = RunConfig::default();
    let dir = tempfile_dir()?;
    stamp_run_dir(&dir, &cfg)?;
    print!("{}", fs::read_to_string(dir.join("config.toml"))?);
    fs::remove_dir_all(&dir).ok();
    Ok(true)
}

fn tempfile_dir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("microdrive-cfg-{}", std::process::id()));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn gen_data(config: Option<PathBuf>, out: Option<PathBuf>, force: bool) -> Result<bool> {
    let cfg = load_config(config)?;
    let dir = resolve_out(out, "dataset");
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) && !force {
        bail!("output directory {} is not empty (pass --force to overwrite)", dir.display());
    }
    if dir.exists() && force {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let suite = cfg.train_suite();
    let dataset = Dataset::generate(&suite);
    dataset.write_dir(&dir)?;
    stamp_run_dir(&dir, &cfg)?;

    // manifest: categories x seeds, vocabulary, question bank
    let manifest = serde_json::json!({
        "format": "microdrive.dataset",
        "version": microdrive_core::dataset::FORMAT_VERSION,
        "categories": microdrive_core::world::scenario::Category::ALL
            .iter().map(|c| c.to_string()).collect::<Vec<_>>(),
        "seeds_per_category": cfg.suite.train_seeds,
        "seed_base": cfg.suite.train_seed_base,
        "episodes": dataset.episodes.len(),
        "vocabulary": microdrive_core::lang::VOCAB.to_vec(),
        "question_bank": microdrive_core::lang::question_bank().to_vec(),
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("dataset: {} episodes under {}", dataset.episodes.len(), dir.display());
    Ok(true)
}

pub fn pretrain(config: Option<PathBuf>, data: PathBuf, out: Option<PathBuf>) -> Result<bool> {
    let cfg = load_config(config)?;
    let dir = resolve_out(out, "pretrain");
    stamp_run_dir(&dir, &cfg)?;
    let dataset = Dataset::read_dir(&data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    let mut metrics = MetricsLog::create(Some(&dir.join("metrics.jsonl")))?;
    let outcome = run_pretrain(&cfg, &dataset, &mut metrics)?;
    metrics.finish()?;
    let ckpt = save_checkpoint(&dir, "stage1", &outcome.model)?;
    let last = outcome.reports.last().expect("at least one step");
    log::info!(
        "pretrain done: {} steps, final L_pre {:.4} (plan {:.4} mot {:.4} vla {:.4}), checkpoint {}",
        outcome.reports.len(),
        last.l_pre,
        last.l_plan,
        last.l_mot,
        last.l_vla,
        ckpt.display()
    );
    Ok(true)
}

pub fn rollout_train(
    config: Option<PathBuf>,
    data: PathBuf,
    stage1: PathBuf,
    out: Option<PathBuf>,
) -> Result<bool> {
    let cfg = load_config(config)?;
    let ab = cfg.ablation()?;
    if !ab.runs_stage2() {
        bail!(
            "config ID{} activates no Stage-2 losses; rollout-train would be a no-op",
            ab.id
        );
    }
    let dir = resolve_out(out, "rollout-train");
    stamp_run_dir(&dir, &cfg)?;
    let dataset = Dataset::read_dir(&data)?;
    let model = checkpoint::load(&stage1)
        .with_context(|| format!("loading stage-1 checkpoint {}", stage1.display()))?;
    let mut metrics = MetricsLog::create(Some(&dir.join("metrics.jsonl")))?;
    let outcome = run_stage2(&cfg, &dataset, model, &mut metrics, &[])?;
    metrics.finish()?;
    let ckpt = save_checkpoint(&dir, "stage2", &outcome.model)?;
    let last = outcome.reports.last().expect("at least one step");
    log::info!(
        "rollout-train done: {} steps, final L_roll {:.4} L_GRPO {:.4}, checkpoint {}",
        outcome.reports.len(),
        last.l_roll,
        last.l_grpo,
        ckpt.display()
    );
    Ok(true)
}

fn write_episode_logs(dir: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let ep_dir = dir.join("episodes");
    fs::create_dir_all(&ep_dir)?;
    for log in logs {
        let path = ep_dir.join(format!("{}_{:04}.jsonl", log.category, log.seed));
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "record": "header",
            "format": "microdrive.episode_log",
            "version": microdrive_core::dataset::FORMAT_VERSION,
            "category": log.category,
            "seed": log.seed,
        }))?);
        out.push('\n');
        for step in &log.steps {
            let mut line = serde_json::to_value(step)?;
            line["record"] = "step".into();
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        let mut tail = serde_json::to_value(log)?;
        tail["record"] = "summary".into();
        tail.as_object_mut().unwrap().remove("steps");
        out.push_str(&serde_json::to_string(&tail)?);
        out.push('\n');
        fs::write(path, out)?;
    }
    Ok(())
}

pub fn eval_closed(
    config: Option<PathBuf>,
    checkpoint_path: Option<PathBuf>,
    expert: bool,
    out: Option<PathBuf>,
    svg: bool,
) -> Result<bool> {
    let cfg = load_config(config)?;
    let dir = resolve_out(out, if expert { "eval-closed-expert" } else { "eval-closed" });
    stamp_run_dir(&dir, &cfg)?;
    let suite = cfg.eval_suite();

    let (report, logs) = if expert {
        run_closed_loop(|| ExpertPolicy, &suite)
    } else {
        let path = checkpoint_path
            .ok_or_else(|| anyhow::anyhow!("--checkpoint required unless --expert is set"))?;
        let model = checkpoint::load(&path)?;
        let lang = cfg.lang_toggles();
        let (r, l) = run_closed_loop(|| ModelPolicy::new(&model, lang), &suite);
        (r, l)
    };

    write_closed_loop_report(&dir, &report)?;
    write_episode_logs(&dir, &logs)?;
    if svg {
        let svg_dir = dir.join("traces");
        fs::create_dir_all(&svg_dir)?;
        for log in &logs {
            let cat = microdrive_core::world::scenario::Category::parse(&log.category)
                .ok_or_else(|| anyhow::anyhow!("unknown category {}", log.category))?;
            let script = build_scenario(cat, log.seed);
            let expert_traj = microdrive_core::dataset::EpisodeData::generate(script.clone())
                .states
                .iter()
                .map(|s| (s.world.ego.x, s.world.ego.y))
                .collect::<Vec<_>>();
            let expert_traj = microdrive_core::world::Trajectory::new(expert_traj);
            let content = render_scene(
                &script,
                Some(log),
                &[Layer { label: "expert", trajectory: &expert_traj, style: EXPERT_STYLE }],
            );
            fs::write(svg_dir.join(format!("{}_{:04}.svg", log.category, log.seed)), content)?;
        }
    }

    let (abilities, mean) = report.multi_ability();
    for (cat, sr) in &abilities {
        log::info!("{cat}: SR {sr:.1}%");
    }
    log::info!(
        "overall: DS {:.2}, SR {:.1}%, ability mean {mean:.1}%",
        report.overall.driving_score,
        report.overall.success_rate
    );

    // acceptance-tagged check: the expert oracle must be perfect
    if expert {
        let ok = report.overall.success_rate == 100.0
            && report.per_category.iter().all(|(_, a)| a.driving_score == 100.0);
        if !ok {
            log::error!("expert oracle check failed: SR/DS below 100");
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn eval_open(config: Option<PathBuf>, checkpoint_path: PathBuf, out: Option<PathBuf>) -> Result<bool> {
    let cfg = load_config(config)?;
    let dir = resolve_out(out, "eval-open");
    stamp_run_dir(&dir, &cfg)?;
    let model = checkpoint::load(&checkpoint_path)?;
    let holdout = Dataset::generate(&cfg.holdout_suite());
    let report = open_loop_eval(&model, &holdout, &cfg.lang_toggles());
    write_open_loop_report(&dir, &report)?;
    log::info!(
        "open-loop: L2 {:.3}/{:.3}/{:.3} avg {:.3}, collision {:.4} avg over {} samples",
        report.l2[0],
        report.l2[1],
        report.l2[2],
        report.l2_avg,
        report.collision_avg,
        report.samples
    );
    Ok(true)
}

pub fn ablate(
    config: Option<PathBuf>,
    data: PathBuf,
    out: Option<PathBuf>,
    ids: Vec<u8>,
) -> Result<bool> {
    let cfg = load_config(config)?;
    let dir = resolve_out(out, "ablation");
    stamp_run_dir(&dir, &cfg)?;
    let dataset = Dataset::read_dir(&data)?;
    let rows: Vec<_> = if ids.is_empty() {
        table_ladder().to_vec()
    } else {
        ids.iter()
            .map(|&id| config_by_id(id).ok_or_else(|| anyhow::anyhow!("unknown ablation id {id}")))
            .collect::<Result<_>>()?
    };
    let mut metrics = MetricsLog::create(Some(&dir.join("metrics.jsonl")))?;
    let mut outcomes = Vec::new();
    for row in rows {
        row.validate().map_err(|e| anyhow::anyhow!(e))?;
        log::info!("ablation ID{}...", row.id);
        let (outcome, report, model) = run_ablation_row(&cfg, &row, &dataset, &mut metrics)?;
        write_closed_loop_report(&dir.join(format!("id{}", row.id)), &report)?;
        save_checkpoint(&dir.join(format!("id{}", row.id)), "model", &model)?;
        log::info!("ablation ID{}: DS {:.2} SR {:.1}%", row.id, outcome.driving_score, outcome.success_rate);
        outcomes.push(outcome);
    }
    metrics.finish()?;
    write_ablation_report(&dir, &outcomes)?;
    Ok(true)
}

/// Re-render reports from stored logs and verify the stored summaries match.
pub fn report(run: PathBuf) -> Result<bool> {
    let mut ok = true;

    let closed = run.join("closed_loop.json");
    if closed.exists() {
        let stored: ClosedLoopReport = serde_json::from_str(&fs::read_to_string(&closed)?)?;
        // recompute every episode score from its serialized log
        let ep_dir = run.join("episodes");
        if ep_dir.exists() {
            for episode in &stored.episodes {
                let path = ep_dir.join(format!("{}_{:04}.jsonl", episode.category, episode.seed));
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("missing episode log {}", path.display()))?;
                let summary_line = text.lines().last().context("empty episode log")?;
                let log: EpisodeLog = {
                    let mut v: serde_json::Value = serde_json::from_str(summary_line)?;
                    v.as_object_mut().unwrap().remove("record");
                    // steps live in the per-step records
                    let steps: Vec<microdrive_core::world::StepRecord> = text
                        .lines()
                        .skip(1)
                        .take_while(|l| l.contains("\"record\":\"step\""))
                        .map(|l| {
                            let mut sv: serde_json::Value = serde_json::from_str(l)?;
                            sv.as_object_mut().unwrap().remove("record");
                            Ok(serde_json::from_value(sv)?)
                        })
                        .collect::<Result<_>>()?;
                    v["steps"] = serde_json::to_value(&steps)?;
                    serde_json::from_value(v)?
                };
                let script = build_scenario(episode.category, episode.seed);
                let recomputed = score_episode(&script, &log, episode.flagged);
                if recomputed.driving_score.to_bits() != episode.driving_score.to_bits()
                    || recomputed.success != episode.success
                {
                    log::error!(
                        "{}/{}: stored DS {} != recomputed {}",
                        episode.category,
                        episode.seed,
                        episode.driving_score,
                        recomputed.driving_score
                    );
                    ok = false;
                }
            }
        }
        // re-render the tables; emission is a pure function of the report
        write_closed_loop_report(&run, &stored)?;
        log::info!("closed-loop tables re-rendered ({} episodes)", stored.episodes.len());
    }

    let ablation = run.join("ablation.json");
    if ablation.exists() {
        let rows: Vec<microdrive_core::evaluation::ablation::AblationOutcome> =
            serde_json::from_str(&fs::read_to_string(&ablation)?)?;
        write_ablation_report(&run, &rows)?;
        log::info!("ablation table re-rendered ({} rows)", rows.len());
    }

    if !closed.exists() && !ablation.exists() {
        bail!("no reports found under {}", run.display());
    }
    Ok(ok)
}

/// Re-run the stamped config into a scratch directory and byte-compare logs.
pub fn reproduce(run: PathBuf) -> Result<bool> {
    let text = fs::read_to_string(run.join("config.toml"))
        .with_context(|| format!("no config.toml under {}", run.display()))?;
    let cfg = config_from_toml(&text)?;
    cfg.validate()?;

    let scratch = run.join("reproduce-check");
    if scratch.exists() {
        fs::remove_dir_all(&scratch)?;
    }
    fs::create_dir_all(&scratch)?;

    // re-run whichever artifacts the directory holds
    let mut compared = 0;
    let mut ok = true;
    if run.join("scripts.jsonl").exists() {
        let dataset = Dataset::generate(&cfg.train_suite());
        dataset.write_dir(&scratch)?;
        for name in ["scripts.jsonl"] {
            compared += 1;
            if !files_identical(&run.join(name), &scratch.join(name))? {
                log::error!("{name} differs");
                ok = false;
            }
        }
    }
    if run.join("metrics.jsonl").exists() {
        // reproduce exactly the stages the original log recorded
        let original = fs::read_to_string(run.join("metrics.jsonl"))?;
        let had_pretrain = original.contains("\"record\":\"pretrain_step\"");
        let had_stage2 = original.contains("\"record\":\"stage2_step\"");
        let dataset = Dataset::generate(&cfg.train_suite());
        let mut metrics = MetricsLog::create(Some(&scratch.join("metrics.jsonl")))?;
        if had_pretrain {
            let pre = run_pretrain(&cfg, &dataset, &mut metrics)?;
            if had_stage2 {
                let _ = run_stage2(&cfg, &dataset, pre.model, &mut metrics, &[])?;
            }
        } else if had_stage2 {
            bail!("stage-2 metrics without a pretraining record cannot be reproduced standalone");
        }
        metrics.finish()?;
        compared += 1;
        if !files_identical(&run.join("metrics.jsonl"), &scratch.join("metrics.jsonl"))? {
            log::error!("metrics.jsonl differs");
            ok = false;
        }
    }
    if compared == 0 {
        bail!("nothing reproducible under {}", run.display());
    }
    if ok {
        log::info!("reproduction matched ({compared} artifacts)");
    }
    Ok(ok)
}
